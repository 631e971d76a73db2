#pragma once

// Meta-learning machinery: dataset-pair tasks, episode sampling with a
// per-iteration shared query snippet per domain, differentiable inner SGD
// (alternating generator / discriminator), outer Adam meta-update, meta-test
// adaptation with the discriminator frozen, and the ablation driver.
//
// Convention throughout: the inner loop minimizes the support objective with
// plain SGD so the update stays differentiable; with second_order off the
// inner gradients are computed without graph and the adapted parameters link
// to base only through the identity term of theta' = theta - alpha * g.

#include <cstdio>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "metadepth/losses.hpp"
#include "metadepth/metrics.hpp"
#include "metadepth/networks.hpp"
#include "metadepth/optim.hpp"
#include "metadepth/syndata.hpp"

namespace metadepth {

// ----- configuration -----

struct MetaConfig {
  double alpha = 1e-4;        // inner lr
  double beta = 1e-4;         // outer lr
  int64_t k_support = 4;
  int64_t k_query = 4;
  int64_t inner_steps = 1;
  bool second_order = true;
  std::string mode = "maml_at_lc";  // basic | maml | maml_at | maml_at_lc
  double lambda_adv = 0.01;
  double lambda_c = 1.0;
  bool outer_supervised = false;    // labeled query snippets add L^s in the outer loss
  bool outer_adapted_disc = false;  // outer D loss through adapted instead of base D
  bool second_source = false;       // reserved: two-source per-pixel minimum
  uint64_t seed = 1;
  int64_t outer_iterations = 2000;
  int64_t adapt_steps = 200;
  int64_t log_interval = 50;
  int64_t eval_snippets = 8;
  UnsupCfg unsup;
  DepthNetConfig depth_net;
  PoseNetConfig pose_net;
  DiscriminatorConfig disc_net;

  bool is_meta() const { return mode != "basic"; }
  bool uses_adversarial() const { return mode == "maml_at" || mode == "maml_at_lc"; }
  bool uses_consistency() const { return mode == "maml_at_lc"; }

  void validate() const {
    if (mode != "basic" && mode != "maml" && mode != "maml_at" && mode != "maml_at_lc")
      throw ConfigError("unknown mode '" + mode + "'");
    if (alpha <= 0 || beta <= 0) throw ConfigError("learning rates must be positive");
    if (k_support < 1 || k_query < 1) throw ConfigError("K_s and K_q must be >= 1");
    if (inner_steps < 0) throw ConfigError("inner_steps must be >= 0");
    if (outer_iterations < 0 || adapt_steps < 0) throw ConfigError("negative iteration budget");
    if (log_interval < 1) throw ConfigError("log_interval must be >= 1");
    depth_net.validate();
  }
};

// ----- training data -----

struct DomainData {
  std::string id;
  bool labeled = false;
  std::vector<SnippetTensors> snippets;
};

// loads a generated dataset directory into cached loss-ready tensors
inline DomainData load_domain_data(const std::string& dir, const MetaConfig& cfg) {
  DomainDataset ds = read_manifest(dir);
  DomainData out;
  out.id = ds.domain_id;
  out.labeled = ds.labeled;
  out.snippets.reserve(ds.entries.size());
  for (const auto& e : ds.entries) {
    SceneSnippet sn = load_snippet_entry(ds, e);
    int64_t H = sn.K.height, W = sn.K.width;
    Tensor ft = Tensor::constant(Shape{3, H, W}, sn.frame_t);
    Tensor ft1 = Tensor::constant(Shape{3, H, W}, sn.frame_t1);
    Tensor gt;
    if (!sn.gt_depth.empty()) gt = Tensor::constant(Shape{H, W}, sn.gt_depth);
    out.snippets.push_back(prepare_snippet(ft, {ft1}, sn.K, static_cast<int>(cfg.depth_net.scales),
                                           gt, cfg.unsup.w_ssim));
  }
  return out;
}

// ----- tasks and episodes -----

struct Task {
  std::string domain_a, domain_b;
  size_t ia = 0, ib = 0;  // indices into the caller's domain vector
};

// all unordered pairs in canonical order (pairs of the sorted id list)
inline std::vector<Task> build_task_set(const std::vector<std::string>& ids) {
  if (ids.size() < 2) throw ConfigError("build_task_set: need at least 2 domains");
  std::vector<size_t> order(ids.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(),
            [&](size_t a, size_t b) { return ids[a] < ids[b]; });
  for (size_t i = 1; i < order.size(); ++i)
    if (ids[order[i - 1]] == ids[order[i]]) throw ConfigError("build_task_set: duplicate domain id");
  std::vector<Task> tasks;
  for (size_t i = 0; i < order.size(); ++i)
    for (size_t j = i + 1; j < order.size(); ++j)
      tasks.push_back(Task{ids[order[i]], ids[order[j]], order[i], order[j]});
  return tasks;
}

struct SideDraw {
  std::vector<size_t> support, query;  // query.front() is the iteration's shared snippet
};

struct TaskEpisode {
  SideDraw a, b;
};

struct IterationPlan {
  std::vector<size_t> shared;        // per domain index; only meaningful where used
  std::vector<TaskEpisode> tasks;    // aligned with the task set
};

namespace detail {
// k distinct draws from [0, n), avoiding `taken`; deterministic in rng order
inline std::vector<size_t> draw_distinct(size_t n, size_t k, std::set<size_t>& taken, Rng& rng) {
  if (taken.size() + k > n) throw DataError("episode sampling: dataset too small");
  std::vector<size_t> out;
  while (out.size() < k) {
    size_t c = static_cast<size_t>(rng.uniform_int(static_cast<int64_t>(n)));
    if (taken.insert(c).second) out.push_back(c);
  }
  return out;
}

inline SideDraw draw_side(const DomainData& dom, size_t shared, const MetaConfig& cfg, Rng& rng) {
  size_t n = dom.snippets.size();
  if (n < static_cast<size_t>(cfg.k_support + cfg.k_query))
    throw DataError("domain '" + dom.id + "' too small for K_s + K_q");
  std::set<size_t> taken{shared};
  SideDraw s;
  s.support = draw_distinct(n, static_cast<size_t>(cfg.k_support), taken, rng);
  s.query.push_back(shared);
  auto rest = draw_distinct(n, static_cast<size_t>(cfg.k_query) - 1, taken, rng);
  s.query.insert(s.query.end(), rest.begin(), rest.end());
  return s;
}
}  // namespace detail

// one task's episode given the iteration's shared snippet per domain
inline TaskEpisode sample_task_episode(const Task& t, const std::vector<DomainData>& domains,
                                       const std::vector<size_t>& shared, const MetaConfig& cfg,
                                       Rng& rng) {
  TaskEpisode ep;
  ep.a = detail::draw_side(domains[t.ia], shared[t.ia], cfg, rng);
  ep.b = detail::draw_side(domains[t.ib], shared[t.ib], cfg, rng);
  return ep;
}

// shared snippets first (ascending domain index), then per-task draws in
// canonical task order; one rng stream keeps the whole plan deterministic
inline IterationPlan sample_iteration(const std::vector<Task>& tasks,
                                      const std::vector<DomainData>& domains, const MetaConfig& cfg,
                                      Rng& rng) {
  std::vector<bool> used(domains.size(), false);
  for (const Task& t : tasks) used[t.ia] = used[t.ib] = true;
  IterationPlan plan;
  plan.shared.assign(domains.size(), 0);
  for (size_t d = 0; d < domains.size(); ++d) {
    if (!used[d]) continue;
    if (domains[d].snippets.empty()) throw DataError("domain '" + domains[d].id + "' is empty");
    plan.shared[d] = static_cast<size_t>(rng.uniform_int(static_cast<int64_t>(domains[d].snippets.size())));
  }
  for (const Task& t : tasks) plan.tasks.push_back(sample_task_episode(t, domains, plan.shared, cfg, rng));
  return plan;
}

// ----- forwards -----

struct SnippetForward {
  std::vector<Tensor> disps;
  Tensor pose;
  Tensor loss;  // generator objective for this snippet
  LossParts parts;
};

inline SnippetForward forward_snippet(const ParameterSet& gen, const SnippetTensors& snip,
                                      const MetaConfig& cfg, bool use_supervised) {
  SnippetForward f;
  f.disps = depth_forward(gen, snip.frame_t, cfg.depth_net);
  f.pose = pose_forward(gen, snip.frame_t, snip.sources[0], cfg.pose_net);
  f.loss = generator_loss(snip, f.disps, {f.pose}, cfg.unsup, use_supervised, &f.parts);
  return f;
}

// ----- inner loop -----

struct InnerResult {
  ParameterSet gen, disc;
  double loss_g = 0, loss_d = 0;  // last inner step's support losses
};

namespace detail {
struct SupportForwards {
  Tensor loss_mean;                  // mean generator objective over both sides
  std::vector<Tensor> disp0_a, disp0_b;  // scale-0 disparities per side
};

inline SupportForwards forward_support(const ParameterSet& gen, const std::vector<DomainData>& domains,
                                       const Task& task, const TaskEpisode& ep, const MetaConfig& cfg) {
  SupportForwards sf;
  Tensor total;
  int64_t count = 0;
  for (int side = 0; side < 2; ++side) {
    const DomainData& dom = domains[side == 0 ? task.ia : task.ib];
    const std::vector<size_t>& idx = side == 0 ? ep.a.support : ep.b.support;
    for (size_t i : idx) {
      SnippetForward f = forward_snippet(gen, dom.snippets[i], cfg, dom.labeled);
      (side == 0 ? sf.disp0_a : sf.disp0_b).push_back(f.disps[0]);
      total = total.defined() ? add(total, f.loss) : f.loss;
      ++count;
    }
  }
  sf.loss_mean = scale(total, 1.0 / static_cast<double>(count));
  return sf;
}

inline std::vector<Tensor> disc_logits(const ParameterSet& disc, const std::vector<Tensor>& disps,
                                       const MetaConfig& cfg) {
  std::vector<Tensor> out;
  out.reserve(disps.size());
  for (const Tensor& d : disps) out.push_back(disc_forward(disc, normalize_disp(d), cfg.disc_net));
  return out;
}
}  // namespace detail

// alternating inner updates: generator objective first, then the discriminator
// on depth maps from the already-updated generator; base parameter sets are
// never mutated, each step builds new ones through sgd_step
// adapt_disc_last=false skips the discriminator update on the final inner step;
// callers that never read the adapted discriminator (outer_step with the base-
// discriminator objective) use it to drop provably dead work
inline InnerResult inner_adapt(const ParameterSet& gen0, const ParameterSet& disc0,
                               const std::vector<DomainData>& domains, const Task& task,
                               const TaskEpisode& ep, const MetaConfig& cfg,
                               bool adapt_disc_last = true) {
  if (!cfg.is_meta()) throw ConfigError("inner_adapt: not a meta mode");
  GradOptions gopt;
  gopt.create_graph = cfg.second_order;
  InnerResult r;
  r.gen = gen0;
  r.disc = disc0;
  for (int64_t step = 0; step < cfg.inner_steps; ++step) {
    detail::SupportForwards sf = detail::forward_support(r.gen, domains, task, ep, cfg);
    Tensor l_g = sf.loss_mean;
    if (cfg.uses_adversarial()) {
      std::vector<Tensor> all = detail::disc_logits(r.disc, sf.disp0_a, cfg);
      std::vector<Tensor> lb = detail::disc_logits(r.disc, sf.disp0_b, cfg);
      all.insert(all.end(), lb.begin(), lb.end());
      l_g = add(l_g, scale(adversarial_generator_loss(all), cfg.lambda_adv));
    }
    r.loss_g = l_g.item();
    r.gen = sgd_step(r.gen, gradient(l_g, r.gen, gopt), cfg.alpha);

    if (cfg.uses_adversarial() && (adapt_disc_last || step + 1 < cfg.inner_steps)) {
      // recompute depth only (the D objective needs no pose or warp) through
      // the updated generator
      std::vector<Tensor> da, db;
      for (int side = 0; side < 2; ++side) {
        const DomainData& dom = domains[side == 0 ? task.ia : task.ib];
        for (size_t i : (side == 0 ? ep.a.support : ep.b.support))
          (side == 0 ? da : db)
              .push_back(depth_forward(r.gen, dom.snippets[i].frame_t, cfg.depth_net)[0]);
      }
      Tensor l_d = discriminator_loss(detail::disc_logits(r.disc, da, cfg),
                                      detail::disc_logits(r.disc, db, cfg));
      r.loss_d = l_d.item();
      r.disc = sgd_step(r.disc, gradient(l_d, r.disc, gopt), cfg.alpha);
    }
  }
  return r;
}

// ----- outer loop -----

struct MetaState {
  ParameterSet gen, disc;
  AdamState opt_g, opt_d;
  int64_t iteration = 0;
};

inline MetaState init_meta_state(const MetaConfig& cfg) {
  MetaState st;
  st.gen = init_generator(cfg.depth_net, cfg.pose_net, hash_str(cfg.seed, "gen"));
  st.disc = init_discriminator(cfg.disc_net, hash_str(cfg.seed, "disc"));
  st.opt_g.lr = cfg.beta;
  st.opt_d.lr = cfg.beta;
  return st;
}

struct OuterResult {
  double l_g = 0, l_d = 0, l_c = 0;
};

// one meta-update over all tasks; throws NumericError on non-finite losses
// before any state mutation, so a caught iteration leaves state intact
inline OuterResult outer_step(MetaState& st, const std::vector<DomainData>& domains,
                              const std::vector<Task>& tasks, const IterationPlan& plan,
                              const MetaConfig& cfg) {
  Tensor l_g_total, l_d_total;
  Tensor l_c_term;
  // depth maps of each domain's shared snippet under each task's adapted generator
  std::vector<std::vector<Tensor>> shared_depths(domains.size());

  for (size_t ti = 0; ti < tasks.size(); ++ti) {
    const Task& task = tasks[ti];
    const TaskEpisode& ep = plan.tasks[ti];
    InnerResult ir = inner_adapt(st.gen, st.disc, domains, task, ep, cfg, cfg.outer_adapted_disc);

    Tensor task_loss;
    int64_t count = 0;
    std::vector<Tensor> q_disp0_a, q_disp0_b;
    for (int side = 0; side < 2; ++side) {
      const DomainData& dom = domains[side == 0 ? task.ia : task.ib];
      const std::vector<size_t>& idx = side == 0 ? ep.a.query : ep.b.query;
      for (size_t qi = 0; qi < idx.size(); ++qi) {
        SnippetForward f =
            forward_snippet(ir.gen, dom.snippets[idx[qi]], cfg, cfg.outer_supervised && dom.labeled);
        task_loss = task_loss.defined() ? add(task_loss, f.loss) : f.loss;
        ++count;
        (side == 0 ? q_disp0_a : q_disp0_b).push_back(f.disps[0]);
        if (qi == 0 && cfg.uses_consistency()) {
          Tensor d0 = f.disps[0];
          d0 = reshape(d0, Shape{d0.shape()[1], d0.shape()[2]});
          shared_depths[side == 0 ? task.ia : task.ib].push_back(
              disp_to_depth(d0, cfg.unsup.d_min, cfg.unsup.d_max));
        }
      }
    }
    task_loss = scale(task_loss, 1.0 / static_cast<double>(count));
    l_g_total = l_g_total.defined() ? add(l_g_total, task_loss) : task_loss;

    if (cfg.uses_adversarial()) {
      const ParameterSet& d_params = cfg.outer_adapted_disc ? ir.disc : st.disc;
      Tensor l_d = discriminator_loss(detail::disc_logits(d_params, q_disp0_a, cfg),
                                      detail::disc_logits(d_params, q_disp0_b, cfg));
      l_d_total = l_d_total.defined() ? add(l_d_total, l_d) : l_d;
    }
  }

  if (cfg.uses_consistency()) {
    std::vector<std::pair<Tensor, Tensor>> pairs;
    for (const auto& maps : shared_depths)
      for (size_t i = 0; i < maps.size(); ++i)
        for (size_t j = i + 1; j < maps.size(); ++j) pairs.emplace_back(maps[i], maps[j]);
    if (pairs.empty()) throw GraphError("consistency mode with no shared-image pairs");
    l_c_term = consistency_loss(pairs);
    l_g_total = add(l_g_total, scale(l_c_term, cfg.lambda_c));
  }

  OuterResult out;
  out.l_g = l_g_total.item();
  out.l_c = l_c_term.defined() ? l_c_term.item() : 0.0;
  out.l_d = l_d_total.defined() ? l_d_total.item() : 0.0;
  if (!std::isfinite(out.l_g) || std::fabs(out.l_g) > 1e6 || !std::isfinite(out.l_d) ||
      std::fabs(out.l_d) > 1e6)
    throw NumericError("outer_step: diverged loss");

  std::vector<Tensor> g_grads = gradient(l_g_total, st.gen);
  std::vector<Tensor> d_grads;
  if (l_d_total.defined()) d_grads = gradient(l_d_total, st.disc);
  // both updates or neither: adam_apply validates before mutating, so check
  // the second gradient set before applying the first
  for (const Tensor& g : d_grads)
    for (double v : g.values())
      if (!std::isfinite(v)) throw NumericError("outer_step: non-finite discriminator gradient");
  adam_apply(st.opt_g, st.gen, g_grads);
  if (l_d_total.defined()) adam_apply(st.opt_d, st.disc, d_grads);
  ++st.iteration;
  return out;
}

// ----- evaluation -----

// scores the generator's scale-0 depth on up to max_snippets of a labeled
// domain; per-snippet metrics averaged (median scaling applied per snippet)
inline MetricsReport evaluate_generator(const ParameterSet& gen, const DomainData& dom,
                                        const MetaConfig& cfg, int64_t max_snippets,
                                        bool median_scale) {
  if (dom.snippets.empty()) throw DataError("evaluate_generator: empty domain");
  NoGradGuard ng;
  MetricsReport acc;
  int64_t n = std::min<int64_t>(max_snippets, static_cast<int64_t>(dom.snippets.size()));
  if (n < 1) throw DataError("evaluate_generator: no snippets requested");
  for (int64_t i = 0; i < n; ++i) {
    const SnippetTensors& snip = dom.snippets[static_cast<size_t>(i)];
    if (!snip.gt_depth.defined())
      throw DataError("evaluate_generator: domain '" + dom.id + "' has no ground truth");
    std::vector<Tensor> disps = depth_forward(gen, snip.frame_t, cfg.depth_net);
    Tensor d0 = reshape(disps[0], Shape{disps[0].shape()[1], disps[0].shape()[2]});
    Tensor depth = disp_to_depth(d0, cfg.unsup.d_min, cfg.unsup.d_max);
    MetricsReport m = compute_metrics(depth, snip.gt_depth, cfg.unsup.d_max, median_scale);
    acc.abs_rel += m.abs_rel;
    acc.sq_rel += m.sq_rel;
    acc.rmse += m.rmse;
    acc.rmse_log += m.rmse_log;
    acc.d1 += m.d1;
    acc.d2 += m.d2;
    acc.d3 += m.d3;
    acc.scale += m.scale;
    acc.n_pixels += m.n_pixels;
  }
  double inv = 1.0 / static_cast<double>(n);
  acc.abs_rel *= inv;
  acc.sq_rel *= inv;
  acc.rmse *= inv;
  acc.rmse_log *= inv;
  acc.d1 *= inv;
  acc.d2 *= inv;
  acc.d3 *= inv;
  acc.scale *= inv;
  return acc;
}

// ----- curve log -----

struct CurveRow {
  int64_t iteration = 0;
  std::string mode;
  uint64_t seed = 0;
  double l_g = 0, l_d = 0, l_c = 0;
  MetricsReport m;
};

namespace detail {
inline std::string fmt_num(double v) {
  char b[40];
  std::snprintf(b, sizeof(b), "%.10g", v);
  return b;
}
}  // namespace detail

inline std::string curve_csv_header() {
  return "iteration,mode,seed,l_g,l_d,l_c,abs_rel,sq_rel,rmse,rmse_log,d1,d2,d3,scale";
}

inline std::string curve_csv_row(const CurveRow& r) {
  std::string s = std::to_string(r.iteration) + "," + r.mode + "," + std::to_string(r.seed);
  for (double v : {r.l_g, r.l_d, r.l_c, r.m.abs_rel, r.m.sq_rel, r.m.rmse, r.m.rmse_log, r.m.d1,
                   r.m.d2, r.m.d3, r.m.scale})
    s += "," + detail::fmt_num(v);
  return s;
}

// ----- training drivers -----

struct TrainResult {
  MetaState state;
  std::vector<CurveRow> curve;
  int64_t skipped = 0;
};

namespace detail {
inline CurveRow log_row(int64_t iter, const MetaConfig& cfg, double l_g, double l_d, double l_c,
                        const ParameterSet& gen, const DomainData* heldout) {
  CurveRow row;
  row.iteration = iter;
  row.mode = cfg.mode;
  row.seed = cfg.seed;
  row.l_g = l_g;
  row.l_d = l_d;
  row.l_c = l_c;
  if (heldout) row.m = evaluate_generator(gen, *heldout, cfg, cfg.eval_snippets, true);
  return row;
}
}  // namespace detail

// full meta-training (or joint training in basic mode); heldout may be null
inline TrainResult meta_train(const std::vector<DomainData>& domains, const DomainData* heldout,
                              const MetaConfig& cfg) {
  cfg.validate();
  if (domains.empty()) throw ConfigError("meta_train: no training domains");
  TrainResult tr;
  tr.state = init_meta_state(cfg);
  Rng sample_rng(hash_str(cfg.seed, "episodes"));

  std::vector<Task> tasks;
  if (cfg.is_meta()) {
    std::vector<std::string> ids;
    for (const auto& d : domains) ids.push_back(d.id);
    tasks = build_task_set(ids);
  }

  for (int64_t it = 1; it <= cfg.outer_iterations; ++it) {
    double l_g = 0, l_d = 0, l_c = 0;
    if (cfg.is_meta()) {
      IterationPlan plan = sample_iteration(tasks, domains, cfg, sample_rng);
      try {
        OuterResult r = outer_step(tr.state, domains, tasks, plan, cfg);
        l_g = r.l_g;
        l_d = r.l_d;
        l_c = r.l_c;
      } catch (const NumericError&) {
        ++tr.skipped;
        continue;
      }
    } else {
      // basic: joint update of the generator objective over all domains
      try {
        Tensor total;
        int64_t count = 0;
        for (const auto& dom : domains) {
          std::set<size_t> taken;
          auto idx = detail::draw_distinct(dom.snippets.size(),
                                           static_cast<size_t>(cfg.k_support), taken, sample_rng);
          for (size_t i : idx) {
            SnippetForward f = forward_snippet(tr.state.gen, dom.snippets[i], cfg, dom.labeled);
            total = total.defined() ? add(total, f.loss) : f.loss;
            ++count;
          }
        }
        total = scale(total, 1.0 / static_cast<double>(count));
        l_g = total.item();
        if (!std::isfinite(l_g) || std::fabs(l_g) > 1e6) throw NumericError("basic: diverged loss");
        adam_apply(tr.state.opt_g, tr.state.gen, gradient(total, tr.state.gen));
        ++tr.state.iteration;
      } catch (const NumericError&) {
        ++tr.skipped;
        continue;
      }
    }
    if (it % cfg.log_interval == 0 || it == cfg.outer_iterations)
      tr.curve.push_back(detail::log_row(it, cfg, l_g, l_d, l_c, tr.state.gen, heldout));
  }
  if (tr.skipped * 20 > cfg.outer_iterations)
    throw NumericError("meta_train: more than 5% of iterations diverged");
  return tr;
}

struct AdaptResult {
  ParameterSet gen;
  std::vector<CurveRow> curve;
};

// meta-test: unsupervised-only generator updates on the new domain, outer
// loop off, discriminator frozen; evaluation rows carry median-scaled metrics
inline AdaptResult adapt_to_domain(const MetaState& st, const DomainData& dom, int64_t steps,
                                   const MetaConfig& cfg) {
  cfg.validate();
  AdaptResult ar;
  ar.gen = st.gen.clone_detached(true);
  AdamState opt;
  opt.lr = cfg.alpha;
  Rng rng(hash_str(cfg.seed, "adapt"));
  ar.curve.push_back(detail::log_row(0, cfg, 0, 0, 0, ar.gen, &dom));
  for (int64_t it = 1; it <= steps; ++it) {
    std::set<size_t> taken;
    auto idx =
        detail::draw_distinct(dom.snippets.size(), static_cast<size_t>(cfg.k_support), taken, rng);
    Tensor total;
    for (size_t i : idx) {
      SnippetForward f = forward_snippet(ar.gen, dom.snippets[i], cfg, false);
      total = total.defined() ? add(total, f.loss) : f.loss;
    }
    total = scale(total, 1.0 / static_cast<double>(cfg.k_support));
    double l = total.item();
    if (!std::isfinite(l) || std::fabs(l) > 1e6) throw NumericError("adapt: diverged loss");
    adam_apply(opt, ar.gen, gradient(total, ar.gen));
    if (it % cfg.log_interval == 0 || it == steps)
      ar.curve.push_back(detail::log_row(it, cfg, l, 0, 0, ar.gen, &dom));
  }
  return ar;
}

// ----- ablation -----

struct AblationRun {
  std::string mode;  // includes the "random" no-training baseline
  uint64_t seed = 0;
  MetricsReport metrics;               // adapted, held-out, median-scaled
  std::vector<CurveRow> train_curve;   // empty for random
};

struct AblationResult {
  std::vector<AblationRun> runs;
  std::vector<AblationRun> medians;  // one per mode, seed field 0
};

namespace detail {
inline double median_field(std::vector<double> v) { return median_of(std::move(v)); }
}  // namespace detail

inline AblationResult run_ablation(const std::vector<DomainData>& domains, const DomainData& heldout,
                                   const std::vector<std::string>& modes,
                                   const std::vector<uint64_t>& seeds, const MetaConfig& base_cfg) {
  if (seeds.empty() || modes.empty()) throw ConfigError("run_ablation: empty mode or seed grid");
  AblationResult res;
  for (const std::string& mode : modes) {
    for (uint64_t seed : seeds) {
      MetaConfig cfg = base_cfg;
      cfg.seed = seed;
      AblationRun run;
      run.mode = mode;
      run.seed = seed;
      MetaState state;
      if (mode == "random") {
        cfg.mode = "maml";  // placeholder for validation; no training happens
        state = init_meta_state(cfg);
      } else {
        cfg.mode = mode;
        TrainResult tr = meta_train(domains, &heldout, cfg);
        state = std::move(tr.state);
        run.train_curve = std::move(tr.curve);
      }
      AdaptResult ar = adapt_to_domain(state, heldout, cfg.adapt_steps, cfg);
      run.metrics = evaluate_generator(ar.gen, heldout, cfg, cfg.eval_snippets, true);
      res.runs.push_back(std::move(run));
    }
    // median-of-seeds row
    AblationRun med;
    med.mode = mode;
    std::vector<double> ar, sr, rm, rl, d1, d2, d3, sc;
    for (const auto& r : res.runs) {
      if (r.mode != mode) continue;
      ar.push_back(r.metrics.abs_rel);
      sr.push_back(r.metrics.sq_rel);
      rm.push_back(r.metrics.rmse);
      rl.push_back(r.metrics.rmse_log);
      d1.push_back(r.metrics.d1);
      d2.push_back(r.metrics.d2);
      d3.push_back(r.metrics.d3);
      sc.push_back(r.metrics.scale);
    }
    med.metrics.abs_rel = detail::median_field(ar);
    med.metrics.sq_rel = detail::median_field(sr);
    med.metrics.rmse = detail::median_field(rm);
    med.metrics.rmse_log = detail::median_field(rl);
    med.metrics.d1 = detail::median_field(d1);
    med.metrics.d2 = detail::median_field(d2);
    med.metrics.d3 = detail::median_field(d3);
    med.metrics.scale = detail::median_field(sc);
    res.medians.push_back(std::move(med));
  }
  return res;
}

inline std::string ablate_csv_header() {
  return "mode,seed,abs_rel,sq_rel,rmse,rmse_log,d1,d2,d3,scale";
}

inline std::string ablate_csv_row(const std::string& mode, const std::string& seed_label,
                                  const MetricsReport& m) {
  std::string s = mode + "," + seed_label;
  for (double v : {m.abs_rel, m.sq_rel, m.rmse, m.rmse_log, m.d1, m.d2, m.d3, m.scale})
    s += "," + detail::fmt_num(v);
  return s;
}

}  // namespace metadepth
