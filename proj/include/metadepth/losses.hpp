#pragma once

// Training objectives. Generator side: photometric reconstruction with SSIM,
// edge-aware smoothness on mean-normalized disparity, optional supervised L1,
// auto-masking of pixels the static scene already explains. Adversarial side:
// sigmoid BCE on patch logits with the generator pushed toward indistinguish-
// ability (0.5), not label flipping. Plus the cross-task depth consistency.

#include <utility>
#include <vector>

#include "metadepth/geometry.hpp"
#include "metadepth/networks.hpp"

namespace metadepth {

// ----- photometric -----

constexpr double kSsimC1 = 0.01 * 0.01;
constexpr double kSsimC2 = 0.03 * 0.03;

namespace detail {

// adjoint of the 3x3 reflect-box mean on one [H,W] plane: zero-padded window
// sums folded back through the reflected border, divided by nine
inline void box3_adjoint_plane(const double* u, double* out, double* hz, int64_t H, int64_t W) {
  const int64_t Wp = W + 2;
  for (int64_t y = 0; y < H; ++y) {
    const double* ur = u + y * W;
    double* hr = hz + y * Wp;
    hr[0] = ur[0];
    hr[1] = ur[0] + ur[1];
    for (int64_t x = 1; x < W - 1; ++x) hr[x + 1] = ur[x - 1] + ur[x] + ur[x + 1];
    hr[W] = ur[W - 2] + ur[W - 1];
    hr[W + 1] = ur[W - 1];
  }
  std::fill(out, out + H * W, 0.0);
  for (int64_t y = -1; y <= H; ++y) {
    double* orow = out + reflect101(y, H) * W;
    const double* h0 = y > 0 ? hz + (y - 1) * Wp : nullptr;
    const double* h1 = (y >= 0 && y < H) ? hz + y * Wp : nullptr;
    const double* h2 = y < H - 1 ? hz + (y + 1) * Wp : nullptr;
    for (int64_t x = -1; x <= W; ++x) {
      double s = 0;
      if (h0) s += h0[x + 1];
      if (h1) s += h1[x + 1];
      if (h2) s += h2[x + 1];
      orow[reflect101(x, W)] += s * (1.0 / 9.0);
    }
  }
}

}  // namespace detail

// per-pixel SSIM averaged over channels, 3x3 windows, reflect borders -> [H,W].
// fused kernel: the five box-filtered moment planes are computed once and kept
// for the backward pass, which runs as raw loops on a first-order sweep and is
// rebuilt from ops when a higher-order graph is requested
inline Tensor ssim(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape() || a.shape().rank() != 3)
    throw ShapeError("ssim expects matching [C,H,W]");
  const int64_t C = a.shape()[0], H = a.shape()[1], W = a.shape()[2];
  if (H < 2 || W < 2) throw ShapeError("ssim: input too small");
  const size_t hw = static_cast<size_t>(H * W);
  const double* av = a.values().data();
  const double* bv = b.values().data();

  // moment planes mu_a, mu_b, E[a^2], E[b^2], E[ab], each [C,H,W]
  auto stats = std::make_shared<std::vector<double>>(5 * static_cast<size_t>(C) * hw);
  std::vector<double> hs = detail::take_buffer(5 * hw);
  std::vector<double> out = detail::take_buffer(hw);
  std::fill(out.begin(), out.end(), 0.0);
  for (int64_t c = 0; c < C; ++c) {
    const double* ap = av + c * H * W;
    const double* bp = bv + c * H * W;
    for (int64_t y = 0; y < H; ++y) {
      const double* ar = ap + y * W;
      const double* br = bp + y * W;
      double* h0 = hs.data() + y * W;
      double* h1 = h0 + hw;
      double* h2 = h1 + hw;
      double* h3 = h2 + hw;
      double* h4 = h3 + hw;
      for (int64_t x = 0; x < W; ++x) {
        int64_t xm = x > 0 ? x - 1 : 1, xp = x < W - 1 ? x + 1 : W - 2;
        double a0 = ar[xm], a1 = ar[x], a2 = ar[xp];
        double b0 = br[xm], b1 = br[x], b2 = br[xp];
        h0[x] = a0 + a1 + a2;
        h1[x] = b0 + b1 + b2;
        h2[x] = a0 * a0 + a1 * a1 + a2 * a2;
        h3[x] = b0 * b0 + b1 * b1 + b2 * b2;
        h4[x] = a0 * b0 + a1 * b1 + a2 * b2;
      }
    }
    for (int f = 0; f < 5; ++f) {
      const double* hf = hs.data() + static_cast<size_t>(f) * hw;
      double* sf = stats->data() + (static_cast<size_t>(f) * static_cast<size_t>(C) +
                                    static_cast<size_t>(c)) * hw;
      for (int64_t y = 0; y < H; ++y) {
        int64_t ym = y > 0 ? y - 1 : 1, yp = y < H - 1 ? y + 1 : H - 2;
        const double* r0 = hf + ym * W;
        const double* r1 = hf + y * W;
        const double* r2 = hf + yp * W;
        double* o = sf + y * W;
        for (int64_t x = 0; x < W; ++x) o[x] = (r0[x] + r1[x] + r2[x]) * (1.0 / 9.0);
      }
    }
    const double* ma = stats->data() + (0 * static_cast<size_t>(C) + c) * hw;
    const double* mb = ma + static_cast<size_t>(C) * hw;
    const double* a2p = mb + static_cast<size_t>(C) * hw;
    const double* b2p = a2p + static_cast<size_t>(C) * hw;
    const double* abp = b2p + static_cast<size_t>(C) * hw;
    for (size_t i = 0; i < hw; ++i) {
      double mua = ma[i], mub = mb[i];
      double n1 = 2.0 * mua * mub + kSsimC1;
      double n2 = 2.0 * (abp[i] - mua * mub) + kSsimC2;
      double d1 = mua * mua + mub * mub + kSsimC1;
      double d2 = (a2p[i] - mua * mua) + (b2p[i] - mub * mub) + kSsimC2;
      out[i] += n1 * n2 / (d1 * d2);
    }
  }
  const double inv_c = 1.0 / static_cast<double>(C);
  for (size_t i = 0; i < hw; ++i) out[i] *= inv_c;
  detail::recycle_buffer(std::move(hs));

  auto backward = [stats, C, H, W, hw, inv_c](const Tensor& g, const Tensor& self,
                                              const std::vector<char>& needs) {
    const auto& p = self.raw()->parents;
    std::vector<Tensor> r(2);
    if (detail::grad_mode_flag()) {
      // higher-order path: rebuild the moments from the parents so every
      // factor of the analytic gradient is itself differentiable
      const Tensor &A = p[0], &B = p[1];
      Tensor mu_a = box3_mean_same(A), mu_b = box3_mean_same(B);
      Tensor a2 = box3_mean_same(mul(A, A)), b2 = box3_mean_same(mul(B, B));
      Tensor ab = box3_mean_same(mul(A, B));
      Tensor n1 = add_const(scale(mul(mu_a, mu_b), 2.0), kSsimC1);
      Tensor n2 = add_const(scale(sub(ab, mul(mu_a, mu_b)), 2.0), kSsimC2);
      Tensor d1 = add_const(add(mul(mu_a, mu_a), mul(mu_b, mu_b)), kSsimC1);
      Tensor d2 = add_const(add(sub(a2, mul(mu_a, mu_a)), sub(b2, mul(mu_b, mu_b))), kSsimC2);
      Tensor dd = mul(d1, d2);
      Tensor s = div(mul(n1, n2), dd);
      Tensor gc = scale(g, inv_c);  // [H,W], broadcasts across channels
      Tensor gs = mul(gc, s);
      Tensor t1 = div(mul(gc, n2), dd);
      Tensor t2 = div(mul(gc, n1), dd);
      Tensor t12 = sub(t1, t2);
      Tensor r2t = neg(div(gs, d2));
      Tensor r12 = sub(neg(div(gs, d1)), r2t);
      Tensor adj_r2 = box3_mean_same_adjoint(r2t);
      Tensor adj_t2 = box3_mean_same_adjoint(scale(t2, 2.0));
      if (needs[0]) {
        Tensor dmua = scale(add(mul(mu_b, t12), mul(mu_a, r12)), 2.0);
        r[0] = add(box3_mean_same_adjoint(dmua),
                   add(mul(scale(A, 2.0), adj_r2), mul(B, adj_t2)));
      }
      if (needs[1]) {
        Tensor dmub = scale(add(mul(mu_a, t12), mul(mu_b, r12)), 2.0);
        r[1] = add(box3_mean_same_adjoint(dmub),
                   add(mul(scale(B, 2.0), adj_r2), mul(A, adj_t2)));
      }
      return r;
    }
    const double* gv = g.values().data();
    const double* av2 = p[0].values().data();
    const double* bv2 = p[1].values().data();
    const double* S = stats->data();
    const size_t cn = static_cast<size_t>(C) * hw;
    std::vector<double> fda = detail::take_buffer(hw), fdb = detail::take_buffer(hw);
    std::vector<double> fr = detail::take_buffer(hw), ft = detail::take_buffer(hw);
    std::vector<double> adj = detail::take_buffer(3 * hw);
    std::vector<double> hz = detail::take_buffer(static_cast<size_t>(H * (W + 2)));
    std::vector<double> ra, rb;
    if (needs[0]) ra = detail::take_buffer(cn);
    if (needs[1]) rb = detail::take_buffer(cn);
    for (int64_t c = 0; c < C; ++c) {
      const double* ma = S + 0 * cn + c * hw;
      const double* mb = S + 1 * cn + c * hw;
      const double* a2p = S + 2 * cn + c * hw;
      const double* b2p = S + 3 * cn + c * hw;
      const double* abp = S + 4 * cn + c * hw;
      for (size_t i = 0; i < hw; ++i) {
        double mua = ma[i], mub = mb[i];
        double n1 = 2.0 * mua * mub + kSsimC1;
        double n2 = 2.0 * (abp[i] - mua * mub) + kSsimC2;
        double i1 = 1.0 / (mua * mua + mub * mub + kSsimC1);
        double i2 = 1.0 / ((a2p[i] - mua * mua) + (b2p[i] - mub * mub) + kSsimC2);
        double gam = gv[i] * inv_c;
        double t1 = gam * n2 * i1 * i2, t2 = gam * n1 * i1 * i2;
        double s = n1 * n2 * i1 * i2;
        double tt = t1 - t2, rr = gam * s * (i2 - i1);
        if (needs[0]) fda[i] = 2.0 * (mub * tt + mua * rr);
        if (needs[1]) fdb[i] = 2.0 * (mua * tt + mub * rr);
        fr[i] = -gam * s * i2;
        ft[i] = 2.0 * t2;
      }
      double* adj_r = adj.data();
      double* adj_t = adj.data() + hw;
      double* adj_m = adj.data() + 2 * hw;
      detail::box3_adjoint_plane(fr.data(), adj_r, hz.data(), H, W);
      detail::box3_adjoint_plane(ft.data(), adj_t, hz.data(), H, W);
      const double* ap = av2 + c * H * W;
      const double* bp = bv2 + c * H * W;
      if (needs[0]) {
        detail::box3_adjoint_plane(fda.data(), adj_m, hz.data(), H, W);
        double* o = ra.data() + c * H * W;
        for (size_t i = 0; i < hw; ++i)
          o[i] = adj_m[i] + 2.0 * ap[i] * adj_r[i] + bp[i] * adj_t[i];
      }
      if (needs[1]) {
        detail::box3_adjoint_plane(fdb.data(), adj_m, hz.data(), H, W);
        double* o = rb.data() + c * H * W;
        for (size_t i = 0; i < hw; ++i)
          o[i] = adj_m[i] + 2.0 * bp[i] * adj_r[i] + ap[i] * adj_t[i];
      }
    }
    detail::recycle_buffer(std::move(fda));
    detail::recycle_buffer(std::move(fdb));
    detail::recycle_buffer(std::move(fr));
    detail::recycle_buffer(std::move(ft));
    detail::recycle_buffer(std::move(adj));
    detail::recycle_buffer(std::move(hz));
    if (needs[0]) r[0] = Tensor::constant(p[0].shape(), std::move(ra));
    if (needs[1]) r[1] = Tensor::constant(p[1].shape(), std::move(rb));
    return r;
  };
  return make_op("ssim", Shape{H, W}, std::move(out), {a, b}, std::move(backward));
}

// pe = w/2 (1-SSIM) + (1-w) L1, both channel-averaged -> [H,W]
inline Tensor photometric_error(const Tensor& pred, const Tensor& target, double w_ssim = 0.85) {
  if (pred.shape() != target.shape() || pred.shape().rank() != 3)
    throw ShapeError("photometric_error expects matching [C,H,W]");
  if (w_ssim < 0 || w_ssim > 1) throw ConfigError("photometric_error: w_ssim outside [0,1]");
  Tensor l1 = scale(sum_axis(abs_t(sub(pred, target)), 0),
                    1.0 / static_cast<double>(pred.shape()[0]));
  Tensor s = clamp(scale(add_const(neg(ssim(pred, target)), 1.0), 0.5), 0.0, 1.0);
  return add(scale(s, w_ssim), scale(l1, 1.0 - w_ssim));
}

// ----- smoothness -----

// edge-aware first-order smoothness on mean-normalized disparity
inline Tensor smoothness_loss(const Tensor& disp, const Tensor& image) {
  if (disp.shape().rank() != 2) throw ShapeError("smoothness_loss expects [H,W] disparity");
  if (image.shape().rank() != 3 || image.shape()[1] != disp.shape()[0] ||
      image.shape()[2] != disp.shape()[1])
    throw ShapeError("smoothness_loss: image " + image.shape().str() + " vs disparity " +
                     disp.shape().str());
  Tensor m = mean(disp);
  if (std::fabs(m.item()) < 1e-8) throw NumericError("smoothness_loss: disparity mean vanishes");
  Tensor d = div(disp, m);
  int64_t H = disp.shape()[0], W = disp.shape()[1];
  double inv_c = 1.0 / static_cast<double>(image.shape()[0]);

  Tensor dgx = abs_t(sub(slice(d, 1, 1, W - 1), slice(d, 1, 0, W - 1)));
  Tensor igx = scale(sum_axis(abs_t(sub(slice(image, 2, 1, W - 1), slice(image, 2, 0, W - 1))), 0),
                     inv_c);
  Tensor dgy = abs_t(sub(slice(d, 0, 1, H - 1), slice(d, 0, 0, H - 1)));
  Tensor igy = scale(sum_axis(abs_t(sub(slice(image, 1, 1, H - 1), slice(image, 1, 0, H - 1))), 0),
                     inv_c);
  return add(mean(mul(dgx, exp_t(neg(igx)))), mean(mul(dgy, exp_t(neg(igy)))));
}

// ----- snippet preparation -----

// constants shared by every loss evaluation of one snippet
struct SnippetTensors {
  Tensor frame_t;                     // [3,H,W] target frame
  std::vector<Tensor> sources;        // source frames, usually just t+1
  CameraIntrinsics K;
  Tensor pe_identity;                 // [H,W] min over sources of pe(source, target)
  std::vector<Tensor> pyramid;        // frame_t at scales 0..S-1 (for smoothness)
  Tensor gt_depth;                    // [H,W] or undefined
  Tensor gt_valid;                    // constant 0/1, defined with gt_depth
};

inline SnippetTensors prepare_snippet(Tensor frame_t, std::vector<Tensor> sources,
                                      const CameraIntrinsics& K, int scales,
                                      Tensor gt_depth = {}, double w_ssim = 0.85) {
  if (sources.empty()) throw DataError("prepare_snippet: no source frames");
  NoGradGuard ng;
  SnippetTensors s;
  s.frame_t = std::move(frame_t);
  s.sources = std::move(sources);
  s.K = K;
  K.validate();
  Tensor pe;
  for (const Tensor& src : s.sources) {
    Tensor e = photometric_error(src, s.frame_t, w_ssim);
    pe = pe.defined() ? minimum(pe, e) : e;
  }
  s.pe_identity = pe;
  Tensor level = s.frame_t;
  for (int k = 0; k < scales; ++k) {
    s.pyramid.push_back(level);
    if (k + 1 < scales) level = avgpool2x2(level);
  }
  if (gt_depth.defined()) {
    s.gt_depth = gt_depth;
    s.gt_valid = gt_mask(gt_depth, Tensor::scalar(0.0));
  }
  return s;
}

// ----- unsupervised / supervised objectives -----

struct UnsupCfg {
  double w_ssim = 0.85;
  double lambda_smooth = 1e-3;
  double d_min = 0.1;
  double d_max = 10.0;
};

struct LossParts {
  double photo = 0, smooth = 0, u = 0, s = 0, g = 0;
  double masked_fraction = 0;  // kept pixels at scale 0
};

// view-synthesis objective over all scales; disparity heads come in scale
// order (0 = full resolution); every photometric term is evaluated at full
// resolution after upsampling the coarse disparity
inline Tensor unsupervised_loss(const SnippetTensors& snip, const std::vector<Tensor>& disps,
                                const std::vector<Tensor>& poses, const UnsupCfg& cfg,
                                LossParts* parts = nullptr) {
  if (disps.empty()) throw ShapeError("unsupervised_loss: no disparity scales");
  if (poses.size() != snip.sources.size())
    throw ShapeError("unsupervised_loss: pose count vs source count");
  if (snip.pyramid.size() < disps.size())
    throw ShapeError("unsupervised_loss: snippet prepared with too few scales");
  int64_t H = snip.frame_t.shape()[1], W = snip.frame_t.shape()[2];

  Tensor total;
  double photo_acc = 0, smooth_acc = 0;
  for (size_t k = 0; k < disps.size(); ++k) {
    Tensor d = disps[k];
    if (d.shape().rank() == 3) {
      if (d.shape()[0] != 1) throw ShapeError("disparity must be single channel");
      d = reshape(d, Shape{d.shape()[1], d.shape()[2]});
    }
    Tensor d_full = d;
    if (d.shape()[0] != H || d.shape()[1] != W)
      d_full = reshape(resize_bilinear(reshape(d, Shape{1, d.shape()[0], d.shape()[1]}), H, W),
                       Shape{H, W});
    Tensor depth = disp_to_depth(d_full, cfg.d_min, cfg.d_max);

    Tensor pe, valid;
    for (size_t si = 0; si < snip.sources.size(); ++si) {
      WarpResult w = inverse_warp(snip.sources[si], depth, poses[si], snip.K);
      Tensor e = photometric_error(w.warped, snip.frame_t, cfg.w_ssim);
      if (!pe.defined()) {
        pe = e;
        valid = w.mask;
      } else {
        // per-pixel best source; union of validity
        pe = minimum(pe, e);
        valid = ge_mask(add(valid, w.mask), Tensor::scalar(0.5));
      }
    }
    // drop pixels the unwarped source already explains better
    Tensor automask = lt_mask(pe, snip.pe_identity);
    Tensor keep = mul(valid, automask);
    Tensor photo = masked_mean(pe, keep);

    Tensor sm = smoothness_loss(d, snip.pyramid[k]);
    Tensor lk = add(photo, scale(sm, cfg.lambda_smooth / static_cast<double>(int64_t{1} << k)));
    total = total.defined() ? add(total, lk) : lk;
    if (parts && k == 0) {
      photo_acc = photo.item();
      smooth_acc = sm.item();
      double kept = 0;
      for (double v : keep.values()) kept += v;
      parts->masked_fraction = kept / static_cast<double>(keep.numel());
    }
  }
  Tensor out = scale(total, 1.0 / static_cast<double>(disps.size()));
  if (parts) {
    parts->photo = photo_acc;
    parts->smooth = smooth_acc;
    parts->u = out.item();
  }
  return out;
}

// masked mean absolute depth error
inline Tensor supervised_loss(const Tensor& pred_depth, const Tensor& gt_depth,
                              const Tensor& valid) {
  if (pred_depth.shape() != gt_depth.shape() || pred_depth.shape() != valid.shape())
    throw ShapeError("supervised_loss: shape mismatch");
  return masked_mean(abs_t(sub(pred_depth, gt_depth)), valid);
}

// full generator objective for one snippet: unsupervised view synthesis plus,
// where labels exist and are enabled, supervised depth on the finest scale
inline Tensor generator_loss(const SnippetTensors& snip, const std::vector<Tensor>& disps,
                             const std::vector<Tensor>& poses, const UnsupCfg& cfg,
                             bool use_supervised, LossParts* parts = nullptr) {
  Tensor u = unsupervised_loss(snip, disps, poses, cfg, parts);
  Tensor g = u;
  if (use_supervised && snip.gt_depth.defined()) {
    Tensor d0 = disps[0];
    if (d0.shape().rank() == 3) d0 = reshape(d0, Shape{d0.shape()[1], d0.shape()[2]});
    Tensor s = supervised_loss(disp_to_depth(d0, cfg.d_min, cfg.d_max), snip.gt_depth,
                               snip.gt_valid);
    if (parts) parts->s = s.item();
    g = add(g, s);
  }
  if (parts) parts->g = g.item();
  return g;
}

// ----- adversarial -----

constexpr double kBceEps = 1e-7;

namespace detail {
inline Tensor gathered_probs(const std::vector<Tensor>& logit_maps) {
  if (logit_maps.empty()) throw ShapeError("adversarial loss: no logits");
  std::vector<Tensor> flat;
  flat.reserve(logit_maps.size());
  for (const Tensor& t : logit_maps) flat.push_back(flatten(t));
  return clamp(sigmoid(concat(flat, 0)), kBceEps, 1.0 - kBceEps);
}
}  // namespace detail

// both update rules minimize their own loss; nobody ascends
// L^D = -mean log D(A) - mean log(1 - D(B))
inline Tensor discriminator_loss(const std::vector<Tensor>& logits_a,
                                 const std::vector<Tensor>& logits_b) {
  Tensor pa = detail::gathered_probs(logits_a);
  Tensor pb = detail::gathered_probs(logits_b);
  return add(neg(mean(log_t(pa))), neg(mean(log_t(add_const(neg(pb), 1.0)))));
}

// generator wants patches the discriminator scores at exactly 0.5:
// -mean(0.5 log p + 0.5 log(1-p)), minimum ln 2
inline Tensor adversarial_generator_loss(const std::vector<Tensor>& logits) {
  Tensor p = detail::gathered_probs(logits);
  return neg(mean(add(scale(log_t(p), 0.5), scale(log_t(add_const(neg(p), 1.0)), 0.5))));
}

// discriminator input convention: disparity scaled by its own spatial mean
inline Tensor normalize_disp(const Tensor& disp) {
  Tensor d = disp;
  if (d.shape().rank() == 3) d = reshape(d, Shape{d.shape()[1], d.shape()[2]});
  if (d.shape().rank() != 2) throw ShapeError("normalize_disp expects [H,W]");
  Tensor m = mean(d);
  if (std::fabs(m.item()) < 1e-8) throw NumericError("normalize_disp: disparity mean vanishes");
  return div(d, m);
}

// ----- cross-task consistency -----

// mean over pairs of the mean absolute depth difference on shared images
inline Tensor consistency_loss(const std::vector<std::pair<Tensor, Tensor>>& depth_pairs) {
  if (depth_pairs.empty()) throw ShapeError("consistency_loss: no pairs");
  Tensor total;
  for (const auto& [a, b] : depth_pairs) {
    if (a.shape() != b.shape()) throw ShapeError("consistency_loss: pair shape mismatch");
    Tensor d = mean(abs_t(sub(a, b)));
    total = total.defined() ? add(total, d) : d;
  }
  return scale(total, 1.0 / static_cast<double>(depth_pairs.size()));
}

}  // namespace metadepth
