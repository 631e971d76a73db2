#pragma once

// Depth evaluation metrics and the median-scale protocol. Median scaling is
// for runs without supervised depth (global scale unobservable from view
// synthesis alone); runs trained with labels report unscaled numbers plus the
// scale ratio itself.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "metadepth/tensor.hpp"

namespace metadepth {

constexpr double kDepthFloor = 1e-3;

struct MetricsReport {
  double abs_rel = 0, sq_rel = 0, rmse = 0, rmse_log = 0;
  double d1 = 0, d2 = 0, d3 = 0;
  double scale = 1;  // median gt/pred, reported whether or not applied
  int64_t n_pixels = 0;
};

namespace detail {
inline double median_of(std::vector<double> v) {
  size_t n = v.size();
  std::sort(v.begin(), v.end());
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}
}  // namespace detail

inline double median_scale_ratio(const std::vector<double>& pred, const std::vector<double>& gt,
                                 double cap) {
  if (pred.size() != gt.size()) throw ShapeError("median_scale_ratio: size mismatch");
  std::vector<double> ratios;
  for (size_t i = 0; i < gt.size(); ++i)
    if (gt[i] > 0 && gt[i] <= cap) ratios.push_back(gt[i] / std::max(pred[i], kDepthFloor));
  if (ratios.empty()) throw DataError("median_scale_ratio: no valid pixels");
  return detail::median_of(std::move(ratios));
}

inline MetricsReport compute_metrics(const std::vector<double>& pred, const std::vector<double>& gt,
                                     double cap, bool median_scale) {
  if (pred.size() != gt.size()) throw ShapeError("compute_metrics: size mismatch");
  if (cap <= 0) throw ConfigError("compute_metrics: cap must be positive");
  MetricsReport r;
  r.scale = median_scale_ratio(pred, gt, cap);
  double s = median_scale ? r.scale : 1.0;
  double abs_acc = 0, sq_acc = 0, se_acc = 0, sl_acc = 0;
  int64_t n = 0, k1 = 0, k2 = 0, k3 = 0;
  constexpr double t1 = 1.25, t2 = 1.25 * 1.25, t3 = 1.25 * 1.25 * 1.25;
  for (size_t i = 0; i < gt.size(); ++i) {
    double g = gt[i];
    if (!(g > 0 && g <= cap)) continue;
    double p = std::clamp(pred[i] * s, kDepthFloor, cap);
    double d = p - g;
    abs_acc += std::fabs(d) / g;
    sq_acc += d * d / g;
    se_acc += d * d;
    double l = std::log(p) - std::log(g);
    sl_acc += l * l;
    double ratio = std::max(p / g, g / p);
    if (ratio < t1) ++k1;
    if (ratio < t2) ++k2;
    if (ratio < t3) ++k3;
    ++n;
  }
  if (n == 0) throw DataError("compute_metrics: no valid pixels");
  double inv = 1.0 / static_cast<double>(n);
  r.abs_rel = abs_acc * inv;
  r.sq_rel = sq_acc * inv;
  r.rmse = std::sqrt(se_acc * inv);
  r.rmse_log = std::sqrt(sl_acc * inv);
  r.d1 = k1 * inv;
  r.d2 = k2 * inv;
  r.d3 = k3 * inv;
  r.n_pixels = n;
  return r;
}

inline MetricsReport compute_metrics(const Tensor& pred, const Tensor& gt, double cap,
                                     bool median_scale) {
  if (pred.shape() != gt.shape()) throw ShapeError("compute_metrics: shape mismatch");
  return compute_metrics(pred.values(), gt.values(), cap, median_scale);
}

}  // namespace metadepth
