#pragma once

// Pinhole camera model, SE(3) poses, and the differentiable inverse warp.
// The warp is a composite of ops from ops.hpp (gathers plus arithmetic on the
// fractional sample offsets), so second-order gradients flow through it
// without special casing.

#include <Eigen/Core>
#include <Eigen/Dense>

#include <cmath>
#include <utility>
#include <vector>

#include "metadepth/ops.hpp"

namespace metadepth {

struct CameraIntrinsics {
  double fx = 0, fy = 0, cx = 0, cy = 0;
  int64_t width = 0, height = 0;

  void validate() const {
    if (fx <= 0 || fy <= 0) throw DataError("intrinsics: focal lengths must be positive");
    if (width <= 0 || height <= 0) throw DataError("intrinsics: bad image size");
    if (cx < 0 || cx > static_cast<double>(width - 1) || cy < 0 ||
        cy > static_cast<double>(height - 1))
      throw DataError("intrinsics: principal point outside the image");
  }
};

// ----- axis-angle <-> rotation matrix (plain doubles) -----

inline Eigen::Matrix3d skew(const Eigen::Vector3d& r) {
  Eigen::Matrix3d k;
  k << 0, -r.z(), r.y(), r.z(), 0, -r.x(), -r.y(), r.x(), 0;
  return k;
}

inline Eigen::Matrix3d axis_angle_to_rotation(const Eigen::Vector3d& r) {
  double t2 = r.squaredNorm();
  Eigen::Matrix3d k = skew(r);
  double a, b;
  if (t2 < 1e-16) {  // theta below 1e-8: series keeps it exact to machine precision
    a = 1.0 - t2 / 6.0;
    b = 0.5 - t2 / 24.0;
  } else {
    double t = std::sqrt(t2);
    a = std::sin(t) / t;
    b = (1.0 - std::cos(t)) / t2;
  }
  return Eigen::Matrix3d::Identity() + a * k + b * k * k;
}

inline Eigen::Vector3d rotation_to_axis_angle(const Eigen::Matrix3d& R) {
  double c = std::clamp((R.trace() - 1.0) / 2.0, -1.0, 1.0);
  double theta = std::acos(c);
  Eigen::Vector3d v(R(2, 1) - R(1, 2), R(0, 2) - R(2, 0), R(1, 0) - R(0, 1));
  if (theta < 1e-8) return 0.5 * v;
  if (theta > M_PI - 1e-6) {
    // near pi the skew part vanishes; recover the axis from the symmetric part
    Eigen::Matrix3d s = (R + Eigen::Matrix3d::Identity()) * 0.5;
    int i = 0;
    if (s(1, 1) > s(i, i)) i = 1;
    if (s(2, 2) > s(i, i)) i = 2;
    Eigen::Vector3d axis = s.col(i) / std::sqrt(s(i, i));
    axis.normalize();
    if (v.dot(axis) < 0) axis = -axis;
    return theta * axis;
  }
  return (theta / (2.0 * std::sin(theta))) * v;
}

struct RigidTransform {
  Eigen::Vector3d rot = Eigen::Vector3d::Zero();    // axis-angle
  Eigen::Vector3d trans = Eigen::Vector3d::Zero();
  Eigen::Matrix3d R = Eigen::Matrix3d::Identity();  // cached from rot

  static RigidTransform from_axis_angle(const Eigen::Vector3d& rot, const Eigen::Vector3d& trans) {
    RigidTransform t;
    t.rot = rot;
    t.trans = trans;
    t.R = axis_angle_to_rotation(rot);
    return t;
  }
  static RigidTransform identity() { return RigidTransform{}; }

  Eigen::Vector3d apply(const Eigen::Vector3d& p) const { return R * p + trans; }

  RigidTransform inverse() const {
    RigidTransform t;
    t.R = R.transpose();
    t.rot = -rot;
    t.trans = -(t.R * trans);
    return t;
  }
  // this after other: (this.compose(other)).apply(x) == this.apply(other.apply(x))
  RigidTransform compose(const RigidTransform& other) const {
    RigidTransform t;
    t.R = R * other.R;
    t.rot = rotation_to_axis_angle(t.R);
    t.trans = R * other.trans + trans;
    return t;
  }
};

// ----- differentiable pieces -----

// axis-angle [3] -> rotation matrix [3,3] as a tensor expression
inline Tensor rotation_tensor(const Tensor& r) {
  if (r.shape().rank() != 1 || r.shape()[0] != 3)
    throw ShapeError("rotation_tensor expects [3]");
  Tensor rx = slice(r, 0, 0, 1), ry = slice(r, 0, 1, 1), rz = slice(r, 0, 2, 1);
  Tensor t2 = add(add(mul(rx, rx), mul(ry, ry)), mul(rz, rz));
  Tensor a, b;  // sin(t)/t and (1-cos(t))/t^2
  if (t2.item() < 1e-16) {
    a = add_const(scale(t2, -1.0 / 6.0), 1.0);
    b = add_const(scale(t2, -1.0 / 24.0), 0.5);
  } else {
    Tensor t = sqrt_t(t2);
    a = div(sin_t(t), t);
    b = div(add_const(neg(cos_t(t)), 1.0), t2);
  }
  Tensor one = Tensor::constant(Shape{1}, {1.0});
  // R = I + a K + b K^2 with K^2 = r r^T - t^2 I
  Tensor r00 = add(one, mul(b, sub(mul(rx, rx), t2)));
  Tensor r01 = add(neg(mul(a, rz)), mul(b, mul(rx, ry)));
  Tensor r02 = add(mul(a, ry), mul(b, mul(rx, rz)));
  Tensor r10 = add(mul(a, rz), mul(b, mul(rx, ry)));
  Tensor r11 = add(one, mul(b, sub(mul(ry, ry), t2)));
  Tensor r12 = add(neg(mul(a, rx)), mul(b, mul(ry, rz)));
  Tensor r20 = add(neg(mul(a, ry)), mul(b, mul(rx, rz)));
  Tensor r21 = add(mul(a, rx), mul(b, mul(ry, rz)));
  Tensor r22 = add(one, mul(b, sub(mul(rz, rz), t2)));
  return reshape(concat({r00, r01, r02, r10, r11, r12, r20, r21, r22}, 0), Shape{3, 3});
}

struct PointField {
  Tensor x, y, z;  // each [H,W]
};

namespace detail {
// constant pixel coordinate grids, cached per (H,W)
inline std::pair<Tensor, Tensor> pixel_grids(int64_t H, int64_t W) {
  thread_local std::map<std::pair<int64_t, int64_t>, std::pair<Tensor, Tensor>> cache;
  auto key = std::make_pair(H, W);
  auto it = cache.find(key);
  if (it != cache.end()) return it->second;
  std::vector<double> us(static_cast<size_t>(H * W)), vs(static_cast<size_t>(H * W));
  for (int64_t y = 0; y < H; ++y)
    for (int64_t x = 0; x < W; ++x) {
      us[static_cast<size_t>(y * W + x)] = static_cast<double>(x);
      vs[static_cast<size_t>(y * W + x)] = static_cast<double>(y);
    }
  auto grids = std::make_pair(Tensor::constant(Shape{H, W}, std::move(us)),
                              Tensor::constant(Shape{H, W}, std::move(vs)));
  cache[key] = grids;
  return grids;
}
}  // namespace detail

// depth map -> camera-frame points; pixel (cx,cy) lands on the optical axis
inline PointField backproject(const Tensor& depth, const CameraIntrinsics& K) {
  if (depth.shape().rank() != 2) throw ShapeError("backproject expects [H,W] depth");
  int64_t H = depth.shape()[0], W = depth.shape()[1];
  auto [u, v] = detail::pixel_grids(H, W);
  Tensor xfac = scale(add_const(u, -K.cx), 1.0 / K.fx);  // constants
  Tensor yfac = scale(add_const(v, -K.cy), 1.0 / K.fy);
  PointField p;
  p.x = mul(xfac, depth);
  p.y = mul(yfac, depth);
  p.z = depth;
  return p;
}

// rigid motion applied to a point field; R [3,3], t [3] (tensors, possibly constant)
inline PointField transform_points(const PointField& p, const Tensor& R, const Tensor& t) {
  Tensor rf = flatten(R);
  auto e = [&](int i) { return slice(rf, 0, i, 1); };
  auto tc = [&](int i) { return slice(t, 0, i, 1); };
  PointField q;
  q.x = add(add(add(mul(e(0), p.x), mul(e(1), p.y)), mul(e(2), p.z)), tc(0));
  q.y = add(add(add(mul(e(3), p.x), mul(e(4), p.y)), mul(e(5), p.z)), tc(1));
  q.z = add(add(add(mul(e(6), p.x), mul(e(7), p.y)), mul(e(8), p.z)), tc(2));
  return q;
}

struct Projection {
  Tensor u, v;      // sample coordinates [H,W]
  Tensor in_front;  // constant 0/1 mask, z > z_min
};

constexpr double kProjectZMin = 1e-3;

inline Projection project(const PointField& p, const CameraIntrinsics& K) {
  Projection out;
  out.in_front = gt_mask(p.z, Tensor::scalar(kProjectZMin));
  Tensor zsafe = maximum(p.z, Tensor::scalar(kProjectZMin));
  out.u = add_const(scale(div(p.x, zsafe), K.fx), K.cx);
  out.v = add_const(scale(div(p.y, zsafe), K.fy), K.cy);
  return out;
}

struct SampleResult {
  Tensor values;  // [C,H,W], zero where invalid
  Tensor mask;    // constant 0/1 [H,W]
};

// bilinear lookup of src at (u,v) as one fused op; integer corners come from
// detached coordinates, the fractional weights stay differentiable. The
// backward rebuilds its pieces from real ops, so higher-order gradients and
// gradients into src all work.
inline SampleResult bilinear_sample(const Tensor& src, const Tensor& u, const Tensor& v) {
  if (src.shape().rank() != 3) throw ShapeError("bilinear_sample expects [C,H,W] source");
  if (u.shape() != v.shape() || u.shape().rank() != 2)
    throw ShapeError("bilinear_sample expects matching [H,W] grids");
  int64_t C = src.shape()[0], H = src.shape()[1], W = src.shape()[2];
  int64_t oh = u.shape()[0], ow = u.shape()[1];
  size_t n = static_cast<size_t>(oh * ow);

  const auto& sv = src.values();
  const auto& uv = u.values();
  const auto& vv = v.values();
  auto mask = std::make_shared<std::vector<double>>(n);
  auto j0 = std::make_shared<std::vector<int64_t>>(n);
  auto i0 = std::make_shared<std::vector<int64_t>>(n);
  std::vector<double> out = detail::take_buffer(static_cast<size_t>(C) * n);
  for (size_t k = 0; k < n; ++k) {
    bool ok = uv[k] >= 0.0 && uv[k] <= static_cast<double>(W - 1) && vv[k] >= 0.0 &&
              vv[k] <= static_cast<double>(H - 1) && std::isfinite(uv[k]) && std::isfinite(vv[k]);
    double m = ok ? 1.0 : 0.0;
    int64_t j = static_cast<int64_t>(std::floor(uv[k]));
    int64_t i = static_cast<int64_t>(std::floor(vv[k]));
    j = std::min(std::max(j, int64_t{0}), W - 2 >= 0 ? W - 2 : 0);
    i = std::min(std::max(i, int64_t{0}), H - 2 >= 0 ? H - 2 : 0);
    (*mask)[k] = m;
    (*j0)[k] = j;
    (*i0)[k] = i;
    double fu = (uv[k] - static_cast<double>(j)) * m;
    double fv = (vv[k] - static_cast<double>(i)) * m;
    double omu = 1.0 - fu, omv = 1.0 - fv;
    bool e1 = j + 1 < W, e2 = i + 1 < H;
    for (int64_t c = 0; c < C; ++c) {
      size_t base = static_cast<size_t>((c * H + i) * W + j);
      double g00 = m > 0 ? sv[base] : 0.0;
      double g01 = m > 0 && e1 ? sv[base + 1] : 0.0;
      double g10 = m > 0 && e2 ? sv[base + static_cast<size_t>(W)] : 0.0;
      double g11 = m > 0 && e1 && e2 ? sv[base + static_cast<size_t>(W) + 1] : 0.0;
      out[static_cast<size_t>(c) * n + k] =
          m * ((g00 * (omv * omu) + g01 * (omv * fu)) + (g10 * (fv * omu) + g11 * (fv * fu)));
    }
  }
  Shape grid{oh, ow};
  Shape os{C, oh, ow};
  Tensor maskT = Tensor::constant(grid, *mask);

  auto backward = [mask, i0, j0, C, H, W, grid, os](const Tensor& g, const Tensor& self,
                                                    const std::vector<char>& needs) {
    const auto& p = self.raw()->parents;
    std::vector<Tensor> r(3);
    size_t n = mask->size();
    auto corner_idx = [&](int di, int dj) {
      auto idx = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(C) * n);
      for (int64_t c = 0; c < C; ++c)
        for (size_t k = 0; k < n; ++k) {
          int64_t flat = -1;
          if ((*mask)[k] > 0) {
            int64_t ii = (*i0)[k] + di, jj = (*j0)[k] + dj;
            if (ii < H && jj < W) flat = (c * H + ii) * W + jj;
          }
          (*idx)[static_cast<size_t>(c) * n + k] = flat;
        }
      return idx;
    };
    std::vector<double> j0f(n), i0f(n);
    for (size_t k = 0; k < n; ++k) {
      j0f[k] = static_cast<double>((*j0)[k]);
      i0f[k] = static_cast<double>((*i0)[k]);
    }
    Tensor maskT = Tensor::constant(grid, *mask);
    Tensor fu = mul(sub(p[1], Tensor::constant(grid, std::move(j0f))), maskT);
    Tensor fv = mul(sub(p[2], Tensor::constant(grid, std::move(i0f))), maskT);
    Tensor omu = add_const(neg(fu), 1.0);
    Tensor omv = add_const(neg(fv), 1.0);
    auto idx00 = corner_idx(0, 0), idx01 = corner_idx(0, 1);
    auto idx10 = corner_idx(1, 0), idx11 = corner_idx(1, 1);
    if (needs[0]) {
      Tensor gm = mul(g, maskT);
      Tensor acc = scatter_flat(mul(gm, mul(omv, omu)), idx00, p[0].shape());
      acc = add(acc, scatter_flat(mul(gm, mul(omv, fu)), idx01, p[0].shape()));
      acc = add(acc, scatter_flat(mul(gm, mul(fv, omu)), idx10, p[0].shape()));
      acc = add(acc, scatter_flat(mul(gm, mul(fv, fu)), idx11, p[0].shape()));
      r[0] = acc;
    }
    if (needs[1] || needs[2]) {
      Tensor g00 = gather_flat(p[0], idx00, os);
      Tensor g01 = gather_flat(p[0], idx01, os);
      Tensor g10 = gather_flat(p[0], idx10, os);
      Tensor g11 = gather_flat(p[0], idx11, os);
      if (needs[1])
        r[1] =
            mul(sum_axis(mul(g, add(mul(omv, sub(g01, g00)), mul(fv, sub(g11, g10)))), 0), maskT);
      if (needs[2])
        r[2] =
            mul(sum_axis(mul(g, add(mul(omu, sub(g10, g00)), mul(fu, sub(g11, g01)))), 0), maskT);
    }
    return r;
  };
  Tensor sampled = make_op("bilinear", os, std::move(out), {src, u, v}, std::move(backward));
  return {sampled, maskT};
}

struct WarpResult {
  Tensor warped;  // [C,H,W]
  Tensor mask;    // constant 0/1 [H,W]: in front and in bounds
};

// Pulls source-frame pixels into the target frame: backproject target depth,
// move points by T (target -> source coordinates), project into the source
// image, sample. pose6 = [axis-angle | translation], differentiable.
inline WarpResult inverse_warp(const Tensor& src, const Tensor& depth, const Tensor& pose6,
                               const CameraIntrinsics& K) {
  if (pose6.shape().rank() != 1 || pose6.shape()[0] != 6)
    throw ShapeError("inverse_warp expects a 6-vector pose");
  if (src.shape().rank() != 3 || depth.shape().rank() != 2 ||
      src.shape()[1] != depth.shape()[0] || src.shape()[2] != depth.shape()[1])
    throw ShapeError("inverse_warp: src " + src.shape().str() + " vs depth " +
                     depth.shape().str());
  Tensor R = rotation_tensor(slice(pose6, 0, 0, 3));
  Tensor t = slice(pose6, 0, 3, 3);
  PointField pts = transform_points(backproject(depth, K), R, t);
  Projection proj = project(pts, K);
  SampleResult s = bilinear_sample(src, proj.u, proj.v);
  return {mul(s.values, proj.in_front), mul(s.mask, proj.in_front)};
}

inline Tensor pose_constant(const RigidTransform& T) {
  return Tensor::constant(Shape{6}, {T.rot.x(), T.rot.y(), T.rot.z(), T.trans.x(), T.trans.y(),
                                     T.trans.z()});
}

inline WarpResult inverse_warp(const Tensor& src, const Tensor& depth, const RigidTransform& T,
                               const CameraIntrinsics& K) {
  return inverse_warp(src, depth, pose_constant(T), K);
}

}  // namespace metadepth
