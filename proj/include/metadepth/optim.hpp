#pragma once

// Named parameter collections plus the two update rules the training stack
// needs: a differentiable SGD step (inner loop) and in-place Adam (outer loop).

#include <cstdio>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "metadepth/ops.hpp"
#include "metadepth/random.hpp"

namespace metadepth {

class ParameterSet {
 public:
  void add(const std::string& name, Tensor t) {
    if (index_.count(name)) throw ConfigError("duplicate parameter '" + name + "'");
    if (!t.defined()) throw GraphError("undefined tensor for parameter '" + name + "'");
    index_[name] = items_.size();
    items_.emplace_back(name, std::move(t));
  }
  bool has(const std::string& name) const { return index_.count(name) > 0; }
  const Tensor& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw GraphError("unknown parameter '" + name + "'");
    return items_[it->second].second;
  }
  Tensor& get_mutable(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw GraphError("unknown parameter '" + name + "'");
    return items_[it->second].second;
  }
  size_t size() const { return items_.size(); }
  bool empty() const { return items_.empty(); }
  auto begin() const { return items_.begin(); }
  auto end() const { return items_.end(); }
  const std::pair<std::string, Tensor>& at(size_t i) const { return items_[i]; }
  Tensor& tensor_at(size_t i) { return items_[i].second; }

  std::vector<Tensor> tensors() const {
    std::vector<Tensor> out;
    out.reserve(items_.size());
    for (const auto& [n, t] : items_) out.push_back(t);
    return out;
  }
  std::vector<std::string> names() const {
    std::vector<std::string> out;
    out.reserve(items_.size());
    for (const auto& [n, t] : items_) out.push_back(n);
    return out;
  }

  // Copy with provenance: gradients through the clone flow back to the source.
  ParameterSet clone() const {
    ParameterSet out;
    for (const auto& [n, t] : items_) out.add(n, copy(t));
    return out;
  }
  // Fresh leaves carrying the same values; no graph link to the source.
  ParameterSet clone_detached(bool requires_grad = true) const {
    ParameterSet out;
    for (const auto& [n, t] : items_)
      out.add(n, Tensor::leaf(t.shape(), t.values(), requires_grad));
    return out;
  }

 private:
  std::vector<std::pair<std::string, Tensor>> items_;
  std::unordered_map<std::string, size_t> index_;
};

inline std::vector<Tensor> gradient(const Tensor& output, const ParameterSet& ps,
                                    const GradOptions& opt = {}) {
  return gradient(output, ps.tensors(), opt);
}

// One explicit gradient-descent step producing a new set; the originals are
// untouched and the update expression stays on the graph, so differentiating
// through the step works (the MAML inner loop relies on this).
inline ParameterSet sgd_step(const ParameterSet& ps, const std::vector<Tensor>& grads, double lr) {
  if (grads.size() != ps.size()) throw GraphError("sgd_step: grad count mismatch");
  ParameterSet out;
  for (size_t i = 0; i < ps.size(); ++i) {
    const auto& [name, p] = ps.at(i);
    if (!grads[i].defined()) throw GraphError("sgd_step: undefined gradient for '" + name + "'");
    if (grads[i].shape() != p.shape())
      throw ShapeError("sgd_step: gradient shape mismatch for '" + name + "'");
    out.add(name, sub(p, scale(grads[i], lr)));
  }
  return out;
}

// ----- Adam -----

struct AdamState {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int64_t step = 0;
  std::unordered_map<std::string, std::pair<std::vector<double>, std::vector<double>>> moments;
};

// In-place, intentionally outside the graph; parameters must be plain leaves.
inline void adam_apply(AdamState& st, ParameterSet& ps, const std::vector<Tensor>& grads) {
  if (grads.size() != ps.size()) throw GraphError("adam_apply: grad count mismatch");
  for (size_t i = 0; i < ps.size(); ++i) {
    if (!grads[i].defined()) throw GraphError("adam_apply: undefined gradient");
    for (double g : grads[i].values())
      if (!std::isfinite(g))
        throw NumericError("adam_apply: non-finite gradient for '" + ps.at(i).first +
                           "', step aborted");
  }
  ++st.step;
  double c1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
  double c2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
  for (size_t i = 0; i < ps.size(); ++i) {
    const std::string& name = ps.at(i).first;
    Tensor& p = ps.tensor_at(i);
    auto& [m, v] = st.moments[name];
    const auto& g = grads[i].values();
    if (m.empty()) {
      m.assign(g.size(), 0.0);
      v.assign(g.size(), 0.0);
    }
    if (m.size() != g.size()) throw ShapeError("adam_apply: moment size mismatch for '" + name + "'");
    auto& pv = p.mutable_values();
    for (size_t k = 0; k < g.size(); ++k) {
      m[k] = st.beta1 * m[k] + (1.0 - st.beta1) * g[k];
      v[k] = st.beta2 * v[k] + (1.0 - st.beta2) * g[k] * g[k];
      pv[k] -= st.lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + st.eps);
    }
  }
}

// ----- finite differences -----

struct FdOptions {
  double h = 1e-5;
  // 0 checks every coordinate; positive caps the per-tensor count with
  // deterministic random picks (needed to keep full-network checks fast)
  int max_coords_per_tensor = 0;
  uint64_t seed = 17;
  bool allow_unreached = false;
};

struct FdReport {
  double max_rel_error = 0.0;
  int64_t coords_checked = 0;
  std::string worst;  // "tensor#i[j]"
};

// f() must rebuild its value from the current leaf values on every call.
template <class F>
FdReport finite_difference_check(F&& f, const std::vector<Tensor>& params,
                                 const FdOptions& opt = {}) {
  for (const Tensor& p : params)
    if (!p.defined() || !p.is_leaf())
      throw GraphError("finite_difference_check: params must be leaf tensors");

  Tensor out1 = f();
  Tensor out2 = f();
  if (out1.numel() != 1) throw GraphError("finite_difference_check: f must be scalar");
  if (out1.item() != out2.item())
    throw GraphError("finite_difference_check: f is not deterministic under re-evaluation");

  GradOptions gopt;
  gopt.allow_unreached = opt.allow_unreached;
  std::vector<Tensor> grads = gradient(out1, params, gopt);

  FdReport rep;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    Tensor p = params[pi];
    int64_t n = p.numel();
    std::vector<int64_t> coords;
    if (opt.max_coords_per_tensor <= 0 || opt.max_coords_per_tensor >= n) {
      coords.resize(static_cast<size_t>(n));
      for (int64_t k = 0; k < n; ++k) coords[static_cast<size_t>(k)] = k;
    } else {
      Rng rng(hash_combine(opt.seed, pi));
      for (int k = 0; k < opt.max_coords_per_tensor; ++k) coords.push_back(rng.uniform_int(n));
    }
    auto& vals = p.mutable_values();
    const auto& gv = grads[pi].values();
    for (int64_t c : coords) {
      size_t u = static_cast<size_t>(c);
      double orig = vals[u];
      vals[u] = orig + opt.h;
      double fp = f().item();
      vals[u] = orig - opt.h;
      double fm = f().item();
      vals[u] = orig;
      double fd = (fp - fm) / (2.0 * opt.h);
      double ad = gv[u];
      double rel = std::fabs(fd - ad) / std::max({std::fabs(fd), std::fabs(ad), 1e-8});
      ++rep.coords_checked;
      if (rel > rep.max_rel_error) {
        rep.max_rel_error = rel;
        char buf[64];
        std::snprintf(buf, sizeof(buf), "tensor#%zu[%lld]", pi, static_cast<long long>(c));
        rep.worst = buf;
      }
    }
  }
  return rep;
}

template <class F>
FdReport finite_difference_check(F&& f, const ParameterSet& ps, const FdOptions& opt = {}) {
  return finite_difference_check(std::forward<F>(f), ps.tensors(), opt);
}

}  // namespace metadepth
