#pragma once

// Reverse-mode autodiff core: a Tensor is a handle to an eagerly evaluated
// graph node. Backward functions emit Tensor expressions built from the same
// op set, so gradients themselves can be differentiated (create_graph).

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

namespace metadepth {

class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};
class ShapeError : public Error { public: using Error::Error; };
class GraphError : public Error { public: using Error::Error; };
class NumericError : public Error { public: using Error::Error; };
class DataError : public Error { public: using Error::Error; };
class ConfigError : public Error { public: using Error::Error; };

// ----- Shape -----

class Shape {
 public:
  Shape() = default;
  Shape(std::initializer_list<int64_t> dims) {
    if (dims.size() > 4) throw ShapeError("rank > 4 unsupported");
    for (int64_t d : dims) {
      if (d <= 0) throw ShapeError("non-positive dimension in shape");
      d_[rank_++] = d;
    }
  }
  static Shape of(const std::vector<int64_t>& dims) {
    Shape s;
    if (dims.size() > 4) throw ShapeError("rank > 4 unsupported");
    for (int64_t d : dims) {
      if (d <= 0) throw ShapeError("non-positive dimension in shape");
      s.d_[s.rank_++] = d;
    }
    return s;
  }

  int rank() const { return rank_; }
  int64_t dim(int i) const {
    if (i < 0 || i >= rank_) throw ShapeError("shape axis out of range");
    return d_[static_cast<size_t>(i)];
  }
  int64_t operator[](int i) const { return dim(i); }
  int64_t numel() const {
    int64_t n = 1;
    for (int i = 0; i < rank_; ++i) n *= d_[static_cast<size_t>(i)];
    return n;
  }
  bool operator==(const Shape& o) const {
    if (rank_ != o.rank_) return false;
    for (int i = 0; i < rank_; ++i)
      if (d_[static_cast<size_t>(i)] != o.d_[static_cast<size_t>(i)]) return false;
    return true;
  }
  bool operator!=(const Shape& o) const { return !(*this == o); }

  std::string str() const {
    std::ostringstream os;
    os << '[';
    for (int i = 0; i < rank_; ++i) os << (i ? "," : "") << d_[static_cast<size_t>(i)];
    os << ']';
    return os.str();
  }

 private:
  std::array<int64_t, 4> d_{1, 1, 1, 1};
  int rank_ = 0;
};

// ----- grad mode / finite checks -----

namespace detail {
inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}
inline bool& finite_check_flag() {
  thread_local bool enabled = true;
  return enabled;
}
// running count of op executions, for tests and profiling
inline uint64_t& op_counter() {
  thread_local uint64_t n = 0;
  return n;
}

// Recycler for op output buffers. Freed node values return here and are
// handed back by size, skipping both the allocation and the zero fill of a
// fresh vector. Callers of take_buffer must overwrite every element; ops that
// accumulate into their output still construct zeroed vectors directly.
constexpr size_t kBufferPoolCap = 256u << 20;  // bytes
constexpr size_t kBufferPoolMinElems = 256;

inline std::unordered_map<size_t, std::vector<std::vector<double>>>& buffer_pool() {
  thread_local std::unordered_map<size_t, std::vector<std::vector<double>>> pool;
  return pool;
}
inline size_t& buffer_pool_bytes() {
  thread_local size_t bytes = 0;
  return bytes;
}
inline std::vector<double> take_buffer(size_t n) {
  if (n >= kBufferPoolMinElems) {
    auto& pool = buffer_pool();
    auto it = pool.find(n);
    if (it != pool.end() && !it->second.empty()) {
      std::vector<double> v = std::move(it->second.back());
      it->second.pop_back();
      buffer_pool_bytes() -= n * sizeof(double);
      return v;
    }
  }
  return std::vector<double>(n);
}
inline void recycle_buffer(std::vector<double>&& v) {
  size_t n = v.size();
  if (n < kBufferPoolMinElems) return;
  if (buffer_pool_bytes() + n * sizeof(double) > kBufferPoolCap) return;
  buffer_pool_bytes() += n * sizeof(double);
  buffer_pool()[n].push_back(std::move(v));
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

// Scoped "stop recording" region; gradient() with create_graph=false runs its
// whole backward sweep inside one of these.
struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = prev; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

struct FiniteCheckGuard {
  bool prev;
  explicit FiniteCheckGuard(bool on) : prev(detail::finite_check_flag()) {
    detail::finite_check_flag() = on;
  }
  ~FiniteCheckGuard() { detail::finite_check_flag() = prev; }
};

// ----- Node / Tensor -----

class Tensor;
// backward(grad_out, self, needs): return one gradient Tensor per parent;
// entries with needs[i]==false may be left default-constructed.
using BackwardFn = std::function<std::vector<Tensor>(
    const Tensor&, const Tensor&, const std::vector<char>&)>;

struct Node : std::enable_shared_from_this<Node> {
  Shape shape;
  std::vector<double> value;
  bool requires_grad = false;
  const char* op = nullptr;  // null for leaves and constants
  std::vector<Tensor> parents;
  BackwardFn backward;

  Node() = default;
  Node(const Node&) = delete;
  Node& operator=(const Node&) = delete;
  ~Node() { detail::recycle_buffer(std::move(value)); }
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> n) : n_(std::move(n)) {}

  static Tensor leaf(const Shape& shape, std::vector<double> v, bool requires_grad) {
    if (static_cast<int64_t>(v.size()) != shape.numel())
      throw ShapeError("leaf: value size " + std::to_string(v.size()) +
                       " does not match shape " + shape.str());
    auto n = std::make_shared<Node>();
    n->shape = shape;
    n->value = std::move(v);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }
  static Tensor constant(const Shape& shape, std::vector<double> v) {
    return leaf(shape, std::move(v), false);
  }
  static Tensor scalar(double v) { return constant(Shape{}, {v}); }
  static Tensor zeros(const Shape& shape) {
    return constant(shape, std::vector<double>(static_cast<size_t>(shape.numel()), 0.0));
  }
  static Tensor ones(const Shape& shape) {
    return constant(shape, std::vector<double>(static_cast<size_t>(shape.numel()), 1.0));
  }
  static Tensor full(const Shape& shape, double v) {
    return constant(shape, std::vector<double>(static_cast<size_t>(shape.numel()), v));
  }

  bool defined() const { return n_ != nullptr; }
  const Shape& shape() const { return node().shape; }
  int64_t numel() const { return node().shape.numel(); }
  const std::vector<double>& values() const { return node().value; }
  double item() const {
    if (numel() != 1) throw ShapeError("item() on tensor with numel " + std::to_string(numel()));
    return node().value[0];
  }
  bool requires_grad() const { return node().requires_grad; }
  bool is_leaf() const { return node().op == nullptr; }
  const char* op_name() const { return node().op ? node().op : "leaf"; }

  // Value copy with no provenance and no grad flag.
  Tensor detach() const { return constant(shape(), values()); }

  // Leaves only: optimizers and the finite-difference driver poke values
  // directly. Graph nodes are immutable once built.
  std::vector<double>& mutable_values() {
    if (node().op != nullptr) throw GraphError("mutable_values on non-leaf tensor");
    return node().value;
  }

  Node* raw() const { return n_.get(); }
  const std::shared_ptr<Node>& ptr() const { return n_; }

 private:
  Node& node() const {
    if (!n_) throw GraphError("use of undefined tensor");
    return *n_;
  }
  std::shared_ptr<Node> n_;
};

namespace detail {

inline void check_finite(const char* op, const std::vector<double>& v) {
  if (!finite_check_flag()) return;
  // x - x is 0 for finite values and NaN for NaN/Inf; four independent
  // accumulators so the scan vectorizes without illegal FP reassociation
  // (never valid under -ffast-math, which this project forbids)
  double a0 = 0.0, a1 = 0.0, a2 = 0.0, a3 = 0.0;
  size_t i = 0, n = v.size();
  const double* p = v.data();
  for (; i + 4 <= n; i += 4) {
    a0 += p[i] - p[i];
    a1 += p[i + 1] - p[i + 1];
    a2 += p[i + 2] - p[i + 2];
    a3 += p[i + 3] - p[i + 3];
  }
  for (; i < n; ++i) a0 += p[i] - p[i];
  if (!((a0 + a1) + (a2 + a3) == 0.0))
    throw NumericError(std::string("non-finite value produced by op '") + op + "'");
}

}  // namespace detail

// Every op funnels through here. Provenance is recorded only when grad mode is
// on and some parent needs it; otherwise the result is a plain constant and
// upstream temporaries can die immediately.
// `backward` is only materialized into a std::function when the node is
// tracked, so untracked execution (NoGradGuard, backward passes) skips the
// closure allocation entirely
template <class F>
inline Tensor make_op(const char* op, const Shape& shape, std::vector<double> value,
                      std::vector<Tensor> parents, F&& backward) {
  if (static_cast<int64_t>(value.size()) != shape.numel())
    throw ShapeError(std::string("op '") + op + "': value size mismatch for shape " + shape.str());
  ++detail::op_counter();
  detail::check_finite(op, value);
  auto n = std::make_shared<Node>();
  n->shape = shape;
  n->value = std::move(value);
  bool track = false;
  if (detail::grad_mode_flag()) {
    for (const Tensor& p : parents)
      if (p.defined() && p.requires_grad()) { track = true; break; }
  }
  if (track) {
    n->requires_grad = true;
    n->op = op;
    n->parents = std::move(parents);
    n->backward = std::forward<F>(backward);
  }
  return Tensor(std::move(n));
}

// ----- gradient -----

struct GradOptions {
  bool create_graph = false;
  // Losses over masked regions can legitimately miss some inputs; flipping
  // this substitutes zeros instead of raising GraphError.
  bool allow_unreached = false;
};

namespace detail {

inline std::vector<Node*> topo_order(Node* out) {
  // iterative post-order DFS; parents land before the nodes that use them
  std::vector<Node*> order;
  std::unordered_set<Node*> done;
  std::unordered_set<Node*> open;
  std::vector<std::pair<Node*, size_t>> stack;
  if (!out) return order;
  stack.emplace_back(out, 0);
  open.insert(out);
  while (!stack.empty()) {
    auto& top = stack.back();
    Node* n = top.first;
    if (top.second < n->parents.size()) {
      Node* parent = n->parents[top.second].raw();
      ++top.second;
      if (parent && !done.count(parent) && !open.count(parent)) {
        stack.emplace_back(parent, 0);
        open.insert(parent);
      }
    } else {
      done.insert(n);
      open.erase(n);
      order.push_back(n);
      stack.pop_back();
    }
  }
  return order;
}

}  // namespace detail

// Reverse-mode sweep from a scalar output to the requested inputs. Returned
// tensors align with `inputs`. With create_graph the sweep itself is recorded,
// so the results can be differentiated again.
inline std::vector<Tensor> gradient(const Tensor& output, const std::vector<Tensor>& inputs,
                                    const GradOptions& opt = {}) {
  if (!output.defined()) throw GraphError("gradient: undefined output");
  if (output.numel() != 1) throw GraphError("gradient: output must be scalar, got shape " + output.shape().str());
  for (const Tensor& t : inputs)
    if (!t.defined()) throw GraphError("gradient: undefined input tensor");

  std::vector<Node*> order = detail::topo_order(output.raw());

  std::unordered_set<Node*> wanted;
  for (const Tensor& t : inputs) wanted.insert(t.raw());

  // carries(x): x sits on a path from some requested input to the output
  std::unordered_set<Node*> carries;
  for (Node* n : order) {
    bool c = wanted.count(n) > 0;
    if (!c) {
      for (const Tensor& p : n->parents)
        if (p.defined() && carries.count(p.raw())) { c = true; break; }
    }
    if (c) carries.insert(n);
  }

  std::optional<NoGradGuard> quiet;
  if (!opt.create_graph) quiet.emplace();

  std::unordered_map<Node*, Tensor> grads;
  grads.emplace(output.raw(), Tensor::ones(output.shape()));
  // accumulators this sweep created itself; without create_graph these are
  // exclusively owned, so later contributions can be added in place instead
  // of copying the whole buffer again
  std::unordered_set<Node*> owned_accum;

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    auto git = grads.find(n);
    if (git == grads.end()) continue;
    if (!n->op || n->parents.empty()) continue;
    if (!carries.count(n)) continue;

    std::vector<char> needs(n->parents.size(), 0);
    bool any = false;
    for (size_t i = 0; i < n->parents.size(); ++i) {
      const Tensor& p = n->parents[i];
      if (p.defined() && p.requires_grad() && carries.count(p.raw())) {
        needs[i] = 1;
        any = true;
      }
    }
    if (!any) continue;

    Tensor self(n->shared_from_this());
    std::vector<Tensor> pg = n->backward(git->second, self, needs);
    if (pg.size() != n->parents.size())
      throw GraphError(std::string("op '") + n->op + "': backward returned wrong arity");
    for (size_t i = 0; i < pg.size(); ++i) {
      if (!needs[i]) continue;
      if (!pg[i].defined())
        throw GraphError(std::string("op '") + n->op + "': backward missing needed gradient");
      if (pg[i].shape() != n->parents[i].shape())
        throw GraphError(std::string("op '") + n->op + "': gradient shape " + pg[i].shape().str() +
                         " vs parent " + n->parents[i].shape().str());
      Node* target = n->parents[i].raw();
      auto slot = grads.find(target);
      if (slot == grads.end()) {
        grads.emplace(target, pg[i]);
      } else if (!opt.create_graph && owned_accum.count(target)) {
        std::vector<double>& sum = slot->second.raw()->value;
        const std::vector<double>& add = pg[i].values();
        for (size_t k = 0; k < sum.size(); ++k) sum[k] += add[k];
      } else {
        // accumulation is itself an op, so create_graph keeps second-order paths
        std::vector<double> sum = detail::take_buffer(slot->second.values().size());
        std::copy(slot->second.values().begin(), slot->second.values().end(), sum.begin());
        const std::vector<double>& add = pg[i].values();
        for (size_t k = 0; k < sum.size(); ++k) sum[k] += add[k];
        Tensor a = slot->second, b = pg[i];
        slot->second = make_op(
            "grad_accum", a.shape(), std::move(sum), {a, b},
            [](const Tensor& g, const Tensor&, const std::vector<char>&) {
              return std::vector<Tensor>{g, g};
            });
        if (!opt.create_graph) owned_accum.insert(target);
      }
    }
  }

  std::vector<Tensor> result;
  result.reserve(inputs.size());
  for (size_t i = 0; i < inputs.size(); ++i) {
    auto slot = grads.find(inputs[i].raw());
    if (slot != grads.end() && carries.count(inputs[i].raw())) {
      result.push_back(slot->second);
    } else if (opt.allow_unreached) {
      result.push_back(Tensor::zeros(inputs[i].shape()));
    } else {
      throw GraphError("gradient: input " + std::to_string(i) +
                       " is not part of the output's graph (pass allow_unreached for masked losses)");
    }
  }
  return result;
}

}  // namespace metadepth
