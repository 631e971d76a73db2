#pragma once

// Finite-difference oracle suite: every differentiable op and every training
// loss checked against central differences at fixed seeds. Reused by the
// `gradcheck` command and the acceptance harness. Step sizes vary per case:
// plain ops are fine at 1e-5; anything routed through bilinear sampling uses a
// smaller step so the probe stays inside one interpolation cell.

#include <string>
#include <vector>

#include "metadepth/meta.hpp"
#include "metadepth/syndata.hpp"

namespace metadepth {

struct GradCheckRow {
  std::string name;
  double max_rel = 0;
  double tol = 1e-4;
  bool ok() const { return max_rel < tol; }
};

namespace detail {

inline std::vector<double> gc_fill(Rng& rng, int64_t n, double lo, double hi) {
  std::vector<double> v(static_cast<size_t>(n));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return v;
}

// values in [lo, hi] with a random sign: keeps |x| >= lo away from kinks at 0
inline std::vector<double> gc_fill_signed(Rng& rng, int64_t n, double lo, double hi) {
  std::vector<double> v(static_cast<size_t>(n));
  for (auto& x : v) x = rng.uniform(lo, hi) * (rng.uniform(0.0, 1.0) < 0.5 ? -1.0 : 1.0);
  return v;
}

// weight tensor derived from a fixed seed; safe to construct inside the
// checked function (re-evaluation must be deterministic)
inline Tensor gc_w(uint64_t seed, const Shape& s) {
  Rng r(seed);
  return Tensor::constant(s, gc_fill(r, s.numel(), -1, 1));
}

template <class F>
void gc_case(std::vector<GradCheckRow>& rows, const std::string& name, const ParameterSet& ps,
             F&& f, double h = 1e-5, int64_t coords = 0, double tol = 1e-4) {
  FdOptions fo;
  fo.h = h;
  fo.max_coords_per_tensor = coords;
  fo.seed = 17;
  FdReport r = finite_difference_check(f, ps, fo);
  rows.push_back({name, r.max_rel_error, tol});
}

}  // namespace detail

inline std::vector<GradCheckRow> run_gradcheck_suite() {
  using detail::gc_case;
  using detail::gc_fill;
  using detail::gc_fill_signed;
  std::vector<GradCheckRow> rows;
  const Shape s3{2, 6, 8};
  const int64_t n3 = s3.numel();

  // -- elementwise binary --
  {
    Rng rng(101);
    ParameterSet ps;
    ps.add("a", Tensor::leaf(s3, gc_fill(rng, n3, -1, 1), true));
    ps.add("b", Tensor::leaf(s3, gc_fill_signed(rng, n3, 0.3, 1.2), true));
    Tensor w = Tensor::constant(s3, gc_fill(rng, n3, -1, 1));
    auto wsum = [&](const Tensor& t) { return sum(mul(w, t)); };
    gc_case(rows, "add", ps, [&] { return wsum(add(ps.get("a"), ps.get("b"))); });
    gc_case(rows, "sub", ps, [&] { return wsum(sub(ps.get("a"), ps.get("b"))); });
    gc_case(rows, "mul", ps, [&] { return wsum(mul(ps.get("a"), ps.get("b"))); });
    gc_case(rows, "div", ps, [&] { return wsum(div(ps.get("a"), ps.get("b"))); });
    gc_case(rows, "broadcast", ps, [&] {
      Tensor row = slice(reshape(ps.get("b"), Shape{2, 6 * 8}), 0, 0, 1);
      return wsum(mul(ps.get("a"), reshape(row, Shape{1, 6, 8})));
    });
  }
  // minimum/maximum away from ties
  {
    Rng rng(102);
    ParameterSet ps;
    std::vector<double> a = gc_fill(rng, n3, -1, 1), b = a;
    for (auto& x : b) x += (rng.uniform(0.0, 1.0) < 0.5 ? 1 : -1) * rng.uniform(0.05, 0.5);
    ps.add("a", Tensor::leaf(s3, a, true));
    ps.add("b", Tensor::leaf(s3, b, true));
    Tensor w = Tensor::constant(s3, gc_fill(rng, n3, -1, 1));
    gc_case(rows, "minimum", ps, [&] { return sum(mul(w, minimum(ps.get("a"), ps.get("b")))); });
    gc_case(rows, "maximum", ps, [&] { return sum(mul(w, maximum(ps.get("a"), ps.get("b")))); });
  }

  // -- elementwise unary --
  {
    Rng rng(103);
    ParameterSet px;
    px.add("x", Tensor::leaf(s3, gc_fill_signed(rng, n3, 0.1, 1.5), true));
    ParameterSet pp;
    pp.add("p", Tensor::leaf(s3, gc_fill(rng, n3, 0.2, 2.0), true));  // positive-domain ops
    Tensor w = Tensor::constant(s3, gc_fill(rng, n3, -1, 1));
    auto wsum = [&](const Tensor& t) { return sum(mul(w, t)); };
    auto x = [&] { return px.get("x"); };
    auto p = [&] { return pp.get("p"); };
    gc_case(rows, "neg", px, [&] { return wsum(neg(x())); });
    gc_case(rows, "scale", px, [&] { return wsum(scale(x(), -1.7)); });
    gc_case(rows, "add_const", px, [&] { return wsum(add_const(x(), 0.37)); });
    gc_case(rows, "exp", px, [&] { return wsum(exp_t(x())); });
    gc_case(rows, "log", pp, [&] { return wsum(log_t(p())); });
    gc_case(rows, "sqrt", pp, [&] { return wsum(sqrt_t(p())); });
    gc_case(rows, "abs", px, [&] { return wsum(abs_t(x())); });
    gc_case(rows, "sigmoid", px, [&] { return wsum(sigmoid(x())); });
    gc_case(rows, "tanh", px, [&] { return wsum(tanh_t(x())); });
    gc_case(rows, "relu", px, [&] { return wsum(relu(x())); });
    gc_case(rows, "elu", px, [&] { return wsum(elu(x())); });
    gc_case(rows, "sin", px, [&] { return wsum(sin_t(x())); });
    gc_case(rows, "cos", px, [&] { return wsum(cos_t(x())); });
    gc_case(rows, "clamp", px, [&] { return wsum(clamp(x(), -1.3, 1.3)); });
  }

  // -- shape & indexing --
  {
    Rng rng(104);
    ParameterSet ps;
    ps.add("x", Tensor::leaf(s3, gc_fill(rng, n3, -1, 1), true));
    ParameterSet ps2;
    ps2.add("x", ps.get("x"));
    ps2.add("y", Tensor::leaf(Shape{2, 6, 8}, gc_fill(rng, n3, -1, 1), true));
    Tensor w96 = Tensor::constant(s3, gc_fill(rng, n3, -1, 1));
    auto x = [&] { return ps.get("x"); };
    gc_case(rows, "reshape", ps, [&] {
      return sum(mul(reshape(w96, Shape{96}), reshape(x(), Shape{96})));
    });
    gc_case(rows, "transpose", ps, [&] {
      Tensor m = reshape(x(), Shape{12, 8});
      return sum(mul(reshape(w96, Shape{8, 12}), transpose(m)));
    });
    gc_case(rows, "slice", ps, [&] {
      Tensor t = slice(x(), 1, 2, 3);
      return sum(mul(detail::gc_w(201, t.shape()), t));
    });
    gc_case(rows, "pad_axis", ps, [&] {
      Tensor t = pad_axis(x(), 2, 1, 2);
      return sum(mul(detail::gc_w(202, t.shape()), t));
    });
    gc_case(rows, "concat", ps2, [&] {
      Tensor t = concat({ps2.get("x"), ps2.get("y")}, 0);
      return sum(mul(detail::gc_w(203, t.shape()), t));
    });
    gc_case(rows, "repeat_axis", ps, [&] {
      Tensor t = repeat_axis(x(), 0, 3);
      return sum(mul(detail::gc_w(204, t.shape()), t));
    });
    gc_case(rows, "sum_axis", ps, [&] {
      Tensor t = sum_axis(x(), 1);
      return sum(mul(detail::gc_w(205, t.shape()), t));
    });
    gc_case(rows, "sum", ps, [&] { return sum(x()); });
    gc_case(rows, "mean", ps, [&] { return mean(x()); });
    gc_case(rows, "max_axis", ps, [&] {
      Tensor t = max_axis(x(), 2);
      return sum(mul(detail::gc_w(206, t.shape()), t));
    });
    gc_case(rows, "gather_flat", ps, [&] {
      auto idx = std::make_shared<std::vector<int64_t>>();
      Rng ir(7);
      for (int i = 0; i < 64; ++i)
        idx->push_back(static_cast<int64_t>(ir.uniform(0.0, 1.0) * static_cast<double>(n3 - 1)));
      Tensor t = gather_flat(x(), idx, Shape{64});
      return sum(mul(detail::gc_w(207, t.shape()), t));
    });
    gc_case(rows, "scatter_flat", ps, [&] {
      auto idx = std::make_shared<std::vector<int64_t>>();
      Rng ir(9);
      for (int64_t i = 0; i < n3; ++i)
        idx->push_back(i % 3 == 0 ? -1
                                  : static_cast<int64_t>(ir.uniform(0.0, 1.0) * 29.0));
      Tensor t = scatter_flat(x(), idx, Shape{30});
      return sum(mul(detail::gc_w(208, t.shape()), t));
    });
  }

  // -- linear algebra & convolution --
  {
    Rng rng(105);
    ParameterSet ps;
    ps.add("A", Tensor::leaf(Shape{5, 7}, gc_fill(rng, 35, -1, 1), true));
    ps.add("B", Tensor::leaf(Shape{7, 4}, gc_fill(rng, 28, -1, 1), true));
    Tensor w = Tensor::constant(Shape{5, 4}, gc_fill(rng, 20, -1, 1));
    gc_case(rows, "matmul", ps, [&] { return sum(mul(w, matmul(ps.get("A"), ps.get("B")))); });
  }
  {
    Rng rng(106);
    ParameterSet ps;
    ps.add("x", Tensor::leaf(Shape{2, 7, 9}, gc_fill(rng, 126, -1, 1), true));
    ps.add("w", Tensor::leaf(Shape{3, 2, 3, 3}, gc_fill(rng, 54, -0.5, 0.5), true));
    ps.add("b", Tensor::leaf(Shape{3}, gc_fill(rng, 3, -0.2, 0.2), true));
    for (int stride : {1, 2}) {
      gc_case(rows, "conv2d_s" + std::to_string(stride), ps, [&, stride] {
        Tensor y = conv2d(ps.get("x"), ps.get("w"), ps.get("b"), stride, 1);
        return sum(mul(detail::gc_w(209, y.shape()), y));
      });
    }
    ParameterSet psx;
    psx.add("x", ps.get("x"));
    gc_case(rows, "im2col", psx, [&] {
      Tensor t = im2col(psx.get("x"), 3, 3, 1, 1, 1, 1);
      return sum(mul(detail::gc_w(210, t.shape()), t));
    });
    gc_case(rows, "col2im", psx, [&] {
      Tensor cols = im2col(psx.get("x"), 3, 3, 1, 1, 1, 1);
      Tensor t = col2im(cols, 2, 7, 9, 3, 3, 1, 1, 1, 1);
      return sum(mul(detail::gc_w(211, t.shape()), t));
    });
  }
  {
    Rng rng(107);
    ParameterSet ps;
    ps.add("x", Tensor::leaf(Shape{12}, gc_fill(rng, 12, -1, 1), true));
    ps.add("w", Tensor::leaf(Shape{5, 12}, gc_fill(rng, 60, -0.5, 0.5), true));
    ps.add("b", Tensor::leaf(Shape{5}, gc_fill(rng, 5, -0.2, 0.2), true));
    Tensor w = Tensor::constant(Shape{5}, gc_fill(rng, 5, -1, 1));
    gc_case(rows, "linear", ps,
            [&] { return sum(mul(w, linear(ps.get("w"), ps.get("x"), ps.get("b")))); });
  }

  // -- spatial --
  {
    Rng rng(108);
    ParameterSet ps;
    ps.add("x", Tensor::leaf(Shape{2, 8, 10}, gc_fill(rng, 160, -1, 1), true));
    auto x = [&] { return ps.get("x"); };
    auto wsum_like = [](const Tensor& t, uint64_t sd) {
      return sum(mul(detail::gc_w(sd, t.shape()), t));
    };
    gc_case(rows, "upsample_nearest_x2", ps,
            [&] { return wsum_like(upsample_nearest_x2(x()), 220); });
    gc_case(rows, "avgpool2x2", ps, [&] { return wsum_like(avgpool2x2(x()), 221); });
    gc_case(rows, "avgpool3", ps, [&] { return wsum_like(avgpool3(x(), 2), 222); });
    gc_case(rows, "maxpool3", ps, [&] { return wsum_like(maxpool3(x(), 2), 223); });
    gc_case(rows, "reflect_pad1", ps, [&] { return wsum_like(reflect_pad1(x()), 224); });
    gc_case(rows, "box3_valid", ps, [&] { return wsum_like(box3_valid(x()), 225); });
    gc_case(rows, "box3_mean_same", ps, [&] { return wsum_like(box3_mean_same(x()), 226); });
    gc_case(rows, "resize_bilinear", ps,
            [&] { return wsum_like(resize_bilinear(x(), 13, 17), 227); });
    gc_case(rows, "masked_mean", ps, [&] {
      std::vector<double> mv(160);
      Rng mr(5);
      for (auto& m : mv) m = mr.uniform(0.0, 1.0) < 0.6 ? 1.0 : 0.0;
      return masked_mean(x(), Tensor::constant(Shape{2, 8, 10}, mv));
    });
    gc_case(rows, "mean_hw", ps, [&] { return wsum_like(mean_hw(x()), 228); });
    gc_case(rows, "stack_scalars", ps,
            [&] { return wsum_like(stack_scalars({mean(x()), sum(x())}), 229); });
  }

  // -- geometry --
  {
    Rng rng(109);
    ParameterSet ps;
    ps.add("r", Tensor::leaf(Shape{3}, gc_fill(rng, 3, -0.3, 0.3), true));
    Tensor w = Tensor::constant(Shape{3, 3}, gc_fill(rng, 9, -1, 1));
    gc_case(rows, "rotation", ps, [&] { return sum(mul(w, rotation_tensor(ps.get("r")))); });
  }
  {
    Rng rng(110);
    ParameterSet ps;
    ps.add("d", Tensor::leaf(Shape{10, 12}, gc_fill(rng, 120, 0.1, 0.9), true));
    Tensor w = Tensor::constant(Shape{10, 12}, gc_fill(rng, 120, -1, 1));
    gc_case(rows, "disp_to_depth", ps,
            [&] { return sum(mul(w, disp_to_depth(ps.get("d"), 0.1, 10.0))); });
  }
  {
    // bilinear sampling through the full warp, depth and pose both live
    Rng rng(111);
    CameraIntrinsics K;
    K.fx = K.fy = 12.0;
    K.cx = 5.5;
    K.cy = 4.5;
    K.width = 12;
    K.height = 10;
    ParameterSet ps;
    ps.add("depth", Tensor::leaf(Shape{10, 12}, gc_fill(rng, 120, 1.2, 2.8), true));
    std::vector<double> pv = {0.02, -0.015, 0.01, 0.03, -0.02, 0.04};
    ps.add("pose", Tensor::leaf(Shape{6}, pv, true));
    Tensor src = Tensor::constant(Shape{3, 10, 12}, gc_fill(rng, 360, 0.05, 0.95));
    Tensor w = Tensor::constant(Shape{3, 10, 12}, gc_fill(rng, 360, -1, 1));
    gc_case(rows, "inverse_warp", ps, [&] {
      WarpResult wr = inverse_warp(src, ps.get("depth"), ps.get("pose"), K);
      return sum(mul(w, wr.warped));
    }, 1e-7, 80);
  }

  // -- losses at 16x24 --
  const int64_t LW = 16, LH = 24;
  {
    Rng rng(112);
    ParameterSet ps;
    ps.add("pred", Tensor::leaf(Shape{3, LH, LW}, gc_fill(rng, 3 * LH * LW, 0.05, 0.95), true));
    ps.add("target", Tensor::leaf(Shape{3, LH, LW}, gc_fill(rng, 3 * LH * LW, 0.05, 0.95), true));
    Tensor w = Tensor::constant(Shape{LH, LW}, gc_fill(rng, LH * LW, -1, 1));
    gc_case(rows, "ssim", ps,
            [&] { return sum(mul(w, ssim(ps.get("pred"), ps.get("target")))); }, 1e-5, 120);
    gc_case(rows, "photometric", ps,
            [&] { return sum(mul(w, photometric_error(ps.get("pred"), ps.get("target")))); },
            1e-6, 120);
  }
  {
    Rng rng(113);
    ParameterSet ps;
    ps.add("disp", Tensor::leaf(Shape{LH, LW}, gc_fill(rng, LH * LW, 0.2, 0.8), true));
    Tensor img = Tensor::constant(Shape{3, LH, LW}, gc_fill(rng, 3 * LH * LW, 0.05, 0.95));
    gc_case(rows, "smoothness", ps, [&] { return smoothness_loss(ps.get("disp"), img); });
  }
  {
    Rng rng(114);
    ParameterSet ps;
    ps.add("pred", Tensor::leaf(Shape{LH, LW}, gc_fill(rng, LH * LW, 0.5, 4.0), true));
    Tensor gt = Tensor::constant(Shape{LH, LW}, gc_fill(rng, LH * LW, 0.5, 4.0));
    std::vector<double> vv(static_cast<size_t>(LH * LW));
    for (auto& v : vv) v = rng.uniform(0.0, 1.0) < 0.8 ? 1.0 : 0.0;
    Tensor valid = Tensor::constant(Shape{LH, LW}, vv);
    gc_case(rows, "supervised", ps,
            [&] { return supervised_loss(ps.get("pred"), gt, valid); });
  }
  {
    Rng rng(115);
    ParameterSet ps;
    ps.add("la", Tensor::leaf(Shape{1, 5, 7}, gc_fill(rng, 35, -2, 2), true));
    ps.add("lb", Tensor::leaf(Shape{1, 5, 7}, gc_fill(rng, 35, -2, 2), true));
    gc_case(rows, "disc_loss", ps,
            [&] { return discriminator_loss({ps.get("la")}, {ps.get("lb")}); });
    gc_case(rows, "adversarial_g", ps,
            [&] { return adversarial_generator_loss({ps.get("la"), ps.get("lb")}); });
  }
  {
    // depths gapped by at least 0.05 per pixel so the |a-b| kink stays far
    // from every probe; one shared direction per pixel keeps the two
    // subgradients on d2 from cancelling to an exact zero (which only measures
    // rounding noise against the relative-error floor)
    Rng rng(116);
    ParameterSet ps;
    std::vector<double> d1 = gc_fill(rng, LH * LW, 1.0, 3.5), d2 = d1, d3 = d1;
    for (size_t i = 0; i < d1.size(); ++i) {
      double dir = rng.uniform(0.0, 1.0) < 0.5 ? 1.0 : -1.0;
      d2[i] = d1[i] + dir * rng.uniform(0.05, 0.4);
      d3[i] = d2[i] - dir * rng.uniform(0.05, 0.4);
    }
    ps.add("d1", Tensor::leaf(Shape{LH, LW}, d1, true));
    ps.add("d2", Tensor::leaf(Shape{LH, LW}, d2, true));
    ps.add("d3", Tensor::leaf(Shape{LH, LW}, d3, true));
    gc_case(rows, "consistency", ps, [&] {
      return consistency_loss({{ps.get("d1"), ps.get("d2")}, {ps.get("d2"), ps.get("d3")}});
    });
  }
  {
    // full unsupervised objective on a rendered snippet, disparities and pose
    // as the free variables; fd step small enough to stay inside one bilinear
    // cell and away from mask flips
    DomainSpec spec = default_domains()[0];
    RenderSettings rs;
    rs.width = LW;
    rs.height = LH;
    rs.focal = 15.0;
    Rng rng(117);
    SceneSnippet sn = render_snippet(spec, rng, rs);
    Tensor ft = Tensor::constant(Shape{3, LH, LW}, sn.frame_t);
    Tensor ft1 = Tensor::constant(Shape{3, LH, LW}, sn.frame_t1);
    SnippetTensors snip = prepare_snippet(ft, {ft1}, sn.K, 2,
                                          Tensor::constant(Shape{LH, LW}, sn.gt_depth));
    // disparity near the rendered ground truth, pose exact: reprojection error
    // stays far below the identity error, so the auto-mask and the validity
    // mask hold still under every probe (the objective is only piecewise
    // smooth across mask flips)
    UnsupCfg ucfg;
    double dk = 1.0 / ucfg.d_min - 1.0 / ucfg.d_max;
    ParameterSet ps;
    std::vector<double> d0(static_cast<size_t>(LH * LW));
    for (size_t i = 0; i < d0.size(); ++i)
      d0[i] = (1.0 / sn.gt_depth[i] - 1.0 / ucfg.d_max) / dk +
              (rng.uniform(0.0, 1.0) < 0.5 ? 1 : -1) * rng.uniform(0.0005, 0.002);
    std::vector<double> d1(static_cast<size_t>(LH / 2 * (LW / 2)));
    for (int64_t y = 0; y < LH / 2; ++y)
      for (int64_t x = 0; x < LW / 2; ++x)
        d1[static_cast<size_t>(y * (LW / 2) + x)] =
            0.25 * (d0[static_cast<size_t>(2 * y * LW + 2 * x)] +
                    d0[static_cast<size_t>(2 * y * LW + 2 * x + 1)] +
                    d0[static_cast<size_t>((2 * y + 1) * LW + 2 * x)] +
                    d0[static_cast<size_t>((2 * y + 1) * LW + 2 * x + 1)]);
    ps.add("disp0", Tensor::leaf(Shape{1, LH, LW}, d0, true));
    ps.add("disp1", Tensor::leaf(Shape{1, LH / 2, LW / 2}, d1, true));
    std::vector<double> pv(6);
    for (int k = 0; k < 6; ++k) pv[static_cast<size_t>(k)] = sn.pose[k];
    ps.add("pose", Tensor::leaf(Shape{6}, pv, true));
    gc_case(rows, "unsupervised", ps, [&] {
      return unsupervised_loss(snip, {ps.get("disp0"), ps.get("disp1")}, {ps.get("pose")}, ucfg);
    }, 1e-7, 60);
    gc_case(rows, "generator", ps, [&] {
      return generator_loss(snip, {ps.get("disp0"), ps.get("disp1")}, {ps.get("pose")}, ucfg,
                            true);
    }, 1e-7, 60);
  }
  {
    // end-to-end: network parameters through depth/pose forward into a smooth
    // objective (supervised depth plus quadratic anchors); an untrained net
    // predicts far from the scene, so the warp losses would sit on auto-mask
    // decision boundaries where central differences measure the flip, not the
    // derivative
    DomainSpec spec = default_domains()[1];
    RenderSettings rs;
    rs.width = LW;
    rs.height = LH;
    rs.focal = 15.0;
    Rng rng(118);
    SceneSnippet sn = render_snippet(spec, rng, rs);
    Tensor ft = Tensor::constant(Shape{3, LH, LW}, sn.frame_t);
    Tensor ft1 = Tensor::constant(Shape{3, LH, LW}, sn.frame_t1);
    SnippetTensors snip = prepare_snippet(ft, {ft1}, sn.K, 2,
                                          Tensor::constant(Shape{LH, LW}, sn.gt_depth));
    DepthNetConfig dc;
    dc.widths = {4, 6};
    dc.scales = 2;
    PoseNetConfig pc;
    pc.widths = {4, 6};
    ParameterSet gen = init_generator(dc, pc, 2024);
    UnsupCfg ucfg;
    gc_case(rows, "pipeline", gen, [&] {
      std::vector<Tensor> disps = depth_forward(gen, snip.frame_t, dc);
      Tensor pose = pose_forward(gen, snip.frame_t, snip.sources[0], pc);
      Tensor d0 = reshape(disps[0], Shape{LH, LW});
      Tensor s = supervised_loss(disp_to_depth(d0, ucfg.d_min, ucfg.d_max), snip.gt_depth,
                                 snip.gt_valid);
      Tensor anchors = add(mean(mul(pose, pose)), mean(mul(disps[1], disps[1])));
      return add(s, anchors);
    }, 1e-6, 6);
  }

  return rows;
}

}  // namespace metadepth
