#pragma once

// Differentiable op library. Every backward is written in terms of the public
// ops, so any gradient can itself be differentiated. Linear rearrangement ops
// come in adjoint pairs (im2col/col2im, gather/scatter, slice/pad, sum/repeat)
// which is what keeps the set closed under repeated differentiation.

#include <Eigen/Core>

#include <cmath>
#include <map>
#include <memory>
#include <tuple>
#include <vector>

#include "metadepth/tensor.hpp"

namespace metadepth {

using IndexMap = std::shared_ptr<const std::vector<int64_t>>;

namespace detail {

inline std::array<int64_t, 4> pad4(const Shape& s) {
  std::array<int64_t, 4> d{1, 1, 1, 1};
  int off = 4 - s.rank();
  for (int i = 0; i < s.rank(); ++i) d[static_cast<size_t>(off + i)] = s[i];
  return d;
}

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
  auto da = pad4(a), db = pad4(b);
  std::array<int64_t, 4> dd{1, 1, 1, 1};
  for (int i = 0; i < 4; ++i) {
    size_t u = static_cast<size_t>(i);
    if (da[u] == db[u]) dd[u] = da[u];
    else if (da[u] == 1) dd[u] = db[u];
    else if (db[u] == 1) dd[u] = da[u];
    else throw ShapeError("cannot broadcast " + a.str() + " with " + b.str());
  }
  int rank = std::max(a.rank(), b.rank());
  std::vector<int64_t> dims;
  for (int i = 4 - rank; i < 4; ++i) dims.push_back(dd[static_cast<size_t>(i)]);
  return Shape::of(dims);
}

template <class F>
std::vector<double> ew_bcast(const Shape& out, const Tensor& a, const Tensor& b, F&& f) {
  const auto& av = a.values();
  const auto& bv = b.values();
  size_t n = static_cast<size_t>(out.numel());
  std::vector<double> r = detail::take_buffer(n);
  if (a.shape() == b.shape()) {
    for (size_t i = 0; i < n; ++i) r[i] = f(av[i], bv[i]);
    return r;
  }
  if (a.numel() == 1) {
    double s = av[0];
    for (size_t i = 0; i < n; ++i) r[i] = f(s, bv[i]);
    return r;
  }
  if (b.numel() == 1) {
    double s = bv[0];
    for (size_t i = 0; i < n; ++i) r[i] = f(av[i], s);
    return r;
  }
  auto od = pad4(out);
  auto da = pad4(a.shape()), db = pad4(b.shape());
  int64_t sa[4], sb[4], ra = 1, rb = 1;
  for (int i = 3; i >= 0; --i) {
    size_t u = static_cast<size_t>(i);
    sa[i] = (da[u] == 1) ? 0 : ra;
    ra *= da[u];
    sb[i] = (db[u] == 1) ? 0 : rb;
    rb *= db[u];
  }
  size_t k = 0;
  for (int64_t i0 = 0; i0 < od[0]; ++i0)
    for (int64_t i1 = 0; i1 < od[1]; ++i1)
      for (int64_t i2 = 0; i2 < od[2]; ++i2) {
        int64_t ba = i0 * sa[0] + i1 * sa[1] + i2 * sa[2];
        int64_t bb = i0 * sb[0] + i1 * sb[1] + i2 * sb[2];
        for (int64_t i3 = 0; i3 < od[3]; ++i3, ++k)
          r[k] = f(av[static_cast<size_t>(ba + i3 * sa[3])],
                   bv[static_cast<size_t>(bb + i3 * sb[3])]);
      }
  return r;
}

}  // namespace detail

// forward declarations used inside backward closures
inline Tensor add(const Tensor& a, const Tensor& b);
inline Tensor sub(const Tensor& a, const Tensor& b);
inline Tensor mul(const Tensor& a, const Tensor& b);
inline Tensor div(const Tensor& a, const Tensor& b);
inline Tensor neg(const Tensor& x);
inline Tensor scale(const Tensor& x, double c);
inline Tensor reshape(const Tensor& t, const Shape& s);
inline Tensor transpose(const Tensor& t);
inline Tensor matmul(const Tensor& a, const Tensor& b);
inline Tensor sum_axis(const Tensor& t, int axis);
inline Tensor repeat_axis(const Tensor& t, int axis, int64_t n);
inline Tensor slice(const Tensor& t, int axis, int64_t start, int64_t len);
inline Tensor pad_axis(const Tensor& t, int axis, int64_t before, int64_t after);
inline Tensor im2col(const Tensor& x, int kh, int kw, int sh, int sw, int ph, int pw);
inline Tensor col2im(const Tensor& cols, int64_t C, int64_t H, int64_t W, int kh, int kw, int sh,
                     int sw, int ph, int pw);
inline Tensor gather_flat(const Tensor& src, IndexMap idx, const Shape& out_shape);
inline Tensor scatter_flat(const Tensor& src, IndexMap idx, const Shape& out_shape);
inline Tensor box3_valid(const Tensor& x);
inline Tensor sin_t(const Tensor& x);
inline Tensor cos_t(const Tensor& x);

// Sums g down to `target` (inverse of broadcasting); used by every binary backward.
inline Tensor reduce_to(Tensor g, const Shape& target) {
  if (g.shape() == target) return g;
  while (g.shape().rank() > target.rank()) g = sum_axis(g, 0);
  for (int i = 0; i < target.rank(); ++i) {
    if (g.shape()[i] != target[i]) {
      if (target[i] != 1)
        throw ShapeError("reduce_to: " + g.shape().str() + " vs " + target.str());
      g = sum_axis(g, i);
      std::vector<int64_t> dims;
      for (int k = 0; k < g.shape().rank(); ++k) dims.push_back(g.shape()[k]);
      dims.insert(dims.begin() + i, 1);
      g = reshape(g, Shape::of(dims));
    }
  }
  return g;
}

// ----- binary elementwise -----

inline Tensor add(const Tensor& a, const Tensor& b) {
  Shape out = detail::broadcast_shape(a.shape(), b.shape());
  auto v = detail::ew_bcast(out, a, b, [](double x, double y) { return x + y; });
  return make_op("add", out, std::move(v), {a, b},
                 [](const Tensor& g, const Tensor& self, const std::vector<char>& needs) {
                   const auto& p = self.raw()->parents;
                   std::vector<Tensor> r(2);
                   if (needs[0]) r[0] = reduce_to(g, p[0].shape());
                   if (needs[1]) r[1] = reduce_to(g, p[1].shape());
                   return r;
                 });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  Shape out = detail::broadcast_shape(a.shape(), b.shape());
  auto v = detail::ew_bcast(out, a, b, [](double x, double y) { return x - y; });
  return make_op("sub", out, std::move(v), {a, b},
                 [](const Tensor& g, const Tensor& self, const std::vector<char>& needs) {
                   const auto& p = self.raw()->parents;
                   std::vector<Tensor> r(2);
                   if (needs[0]) r[0] = reduce_to(g, p[0].shape());
                   if (needs[1]) r[1] = reduce_to(neg(g), p[1].shape());
                   return r;
                 });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  Shape out = detail::broadcast_shape(a.shape(), b.shape());
  auto v = detail::ew_bcast(out, a, b, [](double x, double y) { return x * y; });
  return make_op("mul", out, std::move(v), {a, b},
                 [](const Tensor& g, const Tensor& self, const std::vector<char>& needs) {
                   const auto& p = self.raw()->parents;
                   std::vector<Tensor> r(2);
                   if (needs[0]) r[0] = reduce_to(mul(g, p[1]), p[0].shape());
                   if (needs[1]) r[1] = reduce_to(mul(g, p[0]), p[1].shape());
                   return r;
                 });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
  Shape out = detail::broadcast_shape(a.shape(), b.shape());
  auto v = detail::ew_bcast(out, a, b, [](double x, double y) { return x / y; });
  return make_op("div", out, std::move(v), {a, b},
                 [](const Tensor& g, const Tensor& self, const std::vector<char>& needs) {
                   const auto& p = self.raw()->parents;
                   std::vector<Tensor> r(2);
                   if (needs[0]) r[0] = reduce_to(div(g, p[1]), p[0].shape());
                   if (needs[1])
                     r[1] = reduce_to(neg(div(mul(g, p[0]), mul(p[1], p[1]))), p[1].shape());
                   return r;
                 });
}

// ----- unary elementwise -----

namespace detail {
template <class F, class B>
Tensor unary(const char* name, const Tensor& x, F&& f, B&& bw) {
  const auto& xv = x.values();
  std::vector<double> v = detail::take_buffer(xv.size());
  for (size_t i = 0; i < v.size(); ++i) v[i] = f(xv[i]);
  return make_op(name, x.shape(), std::move(v), {x}, std::forward<B>(bw));
}
}  // namespace detail

inline Tensor neg(const Tensor& x) {
  return detail::unary("neg", x, [](double v) { return -v; },
                       [](const Tensor& g, const Tensor&, const std::vector<char>&) {
                         return std::vector<Tensor>{neg(g)};
                       });
}

inline Tensor scale(const Tensor& x, double c) {
  return detail::unary("scale", x, [c](double v) { return c * v; },
                       [c](const Tensor& g, const Tensor&, const std::vector<char>&) {
                         return std::vector<Tensor>{scale(g, c)};
                       });
}

inline Tensor add_const(const Tensor& x, double c) {
  return detail::unary("add_const", x, [c](double v) { return v + c; },
                       [](const Tensor& g, const Tensor&, const std::vector<char>&) {
                         return std::vector<Tensor>{g};
                       });
}

inline Tensor exp_t(const Tensor& x) {
  return detail::unary("exp", x, [](double v) { return std::exp(v); },
                       [](const Tensor& g, const Tensor& self, const std::vector<char>&) {
                         return std::vector<Tensor>{mul(g, self)};
                       });
}

inline Tensor log_t(const Tensor& x) {
  return detail::unary("log", x, [](double v) { return std::log(v); },
                       [](const Tensor& g, const Tensor& self, const std::vector<char>&) {
                         return std::vector<Tensor>{div(g, self.raw()->parents[0])};
                       });
}

inline Tensor sqrt_t(const Tensor& x) {
  return detail::unary("sqrt", x, [](double v) { return std::sqrt(v); },
                       [](const Tensor& g, const Tensor& self, const std::vector<char>&) {
                         return std::vector<Tensor>{div(g, scale(self, 2.0))};
                       });
}

inline Tensor sign_mask(const Tensor& x) {
  const auto& xv = x.values();
  std::vector<double> v = detail::take_buffer(xv.size());
  for (size_t i = 0; i < v.size(); ++i) v[i] = (xv[i] > 0) ? 1.0 : (xv[i] < 0 ? -1.0 : 0.0);
  return Tensor::constant(x.shape(), std::move(v));
}

inline Tensor abs_t(const Tensor& x) {
  return detail::unary("abs", x, [](double v) { return std::fabs(v); },
                       [](const Tensor& g, const Tensor& self, const std::vector<char>&) {
                         return std::vector<Tensor>{mul(g, sign_mask(self.raw()->parents[0]))};
                       });
}

inline Tensor sigmoid(const Tensor& x) {
  return detail::unary(
      "sigmoid", x,
      [](double v) { return v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v)); },
      [](const Tensor& g, const Tensor& self, const std::vector<char>&) {
        return std::vector<Tensor>{mul(mul(g, self), add_const(neg(self), 1.0))};
      });
}

inline Tensor tanh_t(const Tensor& x) {
  return detail::unary("tanh", x, [](double v) { return std::tanh(v); },
                       [](const Tensor& g, const Tensor& self, const std::vector<char>&) {
                         return std::vector<Tensor>{mul(g, add_const(neg(mul(self, self)), 1.0))};
                       });
}

inline Tensor pos_mask(const Tensor& x) {
  const auto& xv = x.values();
  std::vector<double> v = detail::take_buffer(xv.size());
  for (size_t i = 0; i < v.size(); ++i) v[i] = xv[i] > 0 ? 1.0 : 0.0;
  return Tensor::constant(x.shape(), std::move(v));
}

inline Tensor relu(const Tensor& x) {
  return detail::unary("relu", x, [](double v) { return v > 0 ? v : 0.0; },
                       [](const Tensor& g, const Tensor& self, const std::vector<char>&) {
                         return std::vector<Tensor>{mul(g, pos_mask(self.raw()->parents[0]))};
                       });
}

inline Tensor elu(const Tensor& x) {
  return detail::unary(
      "elu", x, [](double v) { return v > 0 ? v : std::expm1(v); },
      [](const Tensor& g, const Tensor& self, const std::vector<char>&) {
        // d/dx = 1 for x>0, exp(x) = y+1 otherwise
        Tensor m = pos_mask(self.raw()->parents[0]);
        Tensor slope = add(m, mul(sub(Tensor::ones(m.shape()), m), add_const(self, 1.0)));
        return std::vector<Tensor>{mul(g, slope)};
      });
}

inline Tensor sin_t(const Tensor& x) {
  return detail::unary("sin", x, [](double v) { return std::sin(v); },
                       [](const Tensor& g, const Tensor& self, const std::vector<char>&) {
                         return std::vector<Tensor>{mul(g, cos_t(self.raw()->parents[0]))};
                       });
}

inline Tensor cos_t(const Tensor& x) {
  return detail::unary("cos", x, [](double v) { return std::cos(v); },
                       [](const Tensor& g, const Tensor& self, const std::vector<char>&) {
                         return std::vector<Tensor>{neg(mul(g, sin_t(self.raw()->parents[0])))};
                       });
}

// differentiable value copy; adapted parameter sets use this to keep provenance
inline Tensor copy(const Tensor& x) {
  return detail::unary("copy", x, [](double v) { return v; },
                       [](const Tensor& g, const Tensor&, const std::vector<char>&) {
                         return std::vector<Tensor>{g};
                       });
}

// ----- comparison masks (constants, never differentiated) -----

namespace detail {
template <class F>
Tensor cmp_mask(const Tensor& a, const Tensor& b, F&& f) {
  Shape out = broadcast_shape(a.shape(), b.shape());
  auto v = ew_bcast(out, a, b, std::forward<F>(f));
  return Tensor::constant(out, std::move(v));
}
}  // namespace detail

inline Tensor lt_mask(const Tensor& a, const Tensor& b) {
  return detail::cmp_mask(a, b, [](double x, double y) { return x < y ? 1.0 : 0.0; });
}
inline Tensor le_mask(const Tensor& a, const Tensor& b) {
  return detail::cmp_mask(a, b, [](double x, double y) { return x <= y ? 1.0 : 0.0; });
}
inline Tensor gt_mask(const Tensor& a, const Tensor& b) {
  return detail::cmp_mask(a, b, [](double x, double y) { return x > y ? 1.0 : 0.0; });
}
inline Tensor ge_mask(const Tensor& a, const Tensor& b) {
  return detail::cmp_mask(a, b, [](double x, double y) { return x >= y ? 1.0 : 0.0; });
}

inline Tensor minimum(const Tensor& a, const Tensor& b) {
  Tensor m = le_mask(a, b);  // ties take a
  return add(mul(a, m), mul(b, sub(Tensor::ones(m.shape()), m)));
}
inline Tensor maximum(const Tensor& a, const Tensor& b) {
  Tensor m = ge_mask(a, b);
  return add(mul(a, m), mul(b, sub(Tensor::ones(m.shape()), m)));
}
inline Tensor clamp(const Tensor& x, double lo, double hi) {
  if (lo > hi) throw ShapeError("clamp: lo > hi");
  return minimum(maximum(x, Tensor::scalar(lo)), Tensor::scalar(hi));
}

// ----- shape ops -----

inline Tensor reshape(const Tensor& t, const Shape& s) {
  if (s.numel() != t.numel())
    throw ShapeError("reshape " + t.shape().str() + " -> " + s.str());
  std::vector<double> rv = detail::take_buffer(t.values().size());
  std::copy(t.values().begin(), t.values().end(), rv.begin());
  return make_op("reshape", s, std::move(rv), {t},
                 [](const Tensor& g, const Tensor& self, const std::vector<char>&) {
                   return std::vector<Tensor>{reshape(g, self.raw()->parents[0].shape())};
                 });
}

inline Tensor flatten(const Tensor& t) { return reshape(t, Shape{t.numel()}); }

inline Tensor transpose(const Tensor& t) {
  if (t.shape().rank() != 2) throw ShapeError("transpose expects rank 2");
  int64_t m = t.shape()[0], n = t.shape()[1];
  const auto& x = t.values();
  std::vector<double> v = detail::take_buffer(static_cast<size_t>(m * n));
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j)
      v[static_cast<size_t>(j * m + i)] = x[static_cast<size_t>(i * n + j)];
  return make_op("transpose", Shape{n, m}, std::move(v), {t},
                 [](const Tensor& g, const Tensor&, const std::vector<char>&) {
                   return std::vector<Tensor>{transpose(g)};
                 });
}

namespace detail {
inline void axis_split(const Shape& s, int axis, int64_t& outer, int64_t& n, int64_t& inner) {
  if (axis < 0 || axis >= s.rank()) throw ShapeError("axis out of range for " + s.str());
  outer = 1;
  inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s[i];
  n = s[axis];
  for (int i = axis + 1; i < s.rank(); ++i) inner *= s[i];
}
}  // namespace detail

inline Tensor slice(const Tensor& t, int axis, int64_t start, int64_t len) {
  int64_t outer, n, inner;
  detail::axis_split(t.shape(), axis, outer, n, inner);
  if (start < 0 || len <= 0 || start + len > n)
    throw ShapeError("slice range [" + std::to_string(start) + "," + std::to_string(start + len) +
                     ") out of axis size " + std::to_string(n));
  std::vector<int64_t> dims;
  for (int i = 0; i < t.shape().rank(); ++i) dims.push_back(i == axis ? len : t.shape()[i]);
  Shape os = Shape::of(dims);
  const auto& x = t.values();
  std::vector<double> v = detail::take_buffer(static_cast<size_t>(os.numel()));
  size_t k = 0;
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t j = start; j < start + len; ++j) {
      const double* src = x.data() + (o * n + j) * inner;
      for (int64_t i = 0; i < inner; ++i) v[k++] = src[i];
    }
  int64_t after = n - start - len;
  return make_op("slice", os, std::move(v), {t},
                 [axis, start, after](const Tensor& g, const Tensor&, const std::vector<char>&) {
                   return std::vector<Tensor>{pad_axis(g, axis, start, after)};
                 });
}

inline Tensor pad_axis(const Tensor& t, int axis, int64_t before, int64_t after) {
  if (before < 0 || after < 0) throw ShapeError("pad_axis: negative padding");
  int64_t outer, n, inner;
  detail::axis_split(t.shape(), axis, outer, n, inner);
  std::vector<int64_t> dims;
  for (int i = 0; i < t.shape().rank(); ++i)
    dims.push_back(i == axis ? n + before + after : t.shape()[i]);
  Shape os = Shape::of(dims);
  const auto& x = t.values();
  std::vector<double> v(static_cast<size_t>(os.numel()), 0.0);
  int64_t on = n + before + after;
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t j = 0; j < n; ++j) {
      const double* src = x.data() + (o * n + j) * inner;
      double* dst = v.data() + (o * on + before + j) * inner;
      for (int64_t i = 0; i < inner; ++i) dst[i] = src[i];
    }
  int64_t len = n;
  return make_op("pad_axis", os, std::move(v), {t},
                 [axis, before, len](const Tensor& g, const Tensor&, const std::vector<char>&) {
                   return std::vector<Tensor>{slice(g, axis, before, len)};
                 });
}

inline Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat of nothing");
  const Shape& s0 = parts[0].shape();
  int64_t total = 0;
  for (const Tensor& p : parts) {
    if (p.shape().rank() != s0.rank()) throw ShapeError("concat rank mismatch");
    for (int i = 0; i < s0.rank(); ++i)
      if (i != axis && p.shape()[i] != s0[i])
        throw ShapeError("concat dim mismatch at axis " + std::to_string(i));
    total += p.shape()[axis];
  }
  std::vector<int64_t> dims;
  for (int i = 0; i < s0.rank(); ++i) dims.push_back(i == axis ? total : s0[i]);
  Shape os = Shape::of(dims);
  int64_t outer, n, inner;
  detail::axis_split(os, axis, outer, n, inner);
  std::vector<double> v = detail::take_buffer(static_cast<size_t>(os.numel()));
  int64_t off = 0;
  for (const Tensor& p : parts) {
    int64_t pn = p.shape()[axis];
    const auto& x = p.values();
    for (int64_t o = 0; o < outer; ++o)
      for (int64_t j = 0; j < pn; ++j) {
        const double* src = x.data() + (o * pn + j) * inner;
        double* dst = v.data() + (o * n + off + j) * inner;
        for (int64_t i = 0; i < inner; ++i) dst[i] = src[i];
      }
    off += pn;
  }
  std::vector<int64_t> lens;
  for (const Tensor& p : parts) lens.push_back(p.shape()[axis]);
  return make_op("concat", os, std::move(v), parts,
                 [axis, lens](const Tensor& g, const Tensor&, const std::vector<char>& needs) {
                   std::vector<Tensor> r(lens.size());
                   int64_t off2 = 0;
                   for (size_t i = 0; i < lens.size(); ++i) {
                     if (needs[i]) r[i] = slice(g, axis, off2, lens[i]);
                     off2 += lens[i];
                   }
                   return r;
                 });
}

// ----- reductions -----

inline Tensor sum_axis(const Tensor& t, int axis) {
  int64_t outer, n, inner;
  detail::axis_split(t.shape(), axis, outer, n, inner);
  std::vector<int64_t> dims;
  for (int i = 0; i < t.shape().rank(); ++i)
    if (i != axis) dims.push_back(t.shape()[i]);
  Shape os = Shape::of(dims);  // rank 0 when input was rank 1
  const auto& x = t.values();
  std::vector<double> v(static_cast<size_t>(os.numel()), 0.0);
  for (int64_t o = 0; o < outer; ++o) {
    double* dst = v.data() + o * inner;
    for (int64_t j = 0; j < n; ++j) {
      const double* src = x.data() + (o * n + j) * inner;
      for (int64_t i = 0; i < inner; ++i) dst[i] += src[i];
    }
  }
  int64_t nn = n;
  return make_op("sum_axis", os, std::move(v), {t},
                 [axis, nn](const Tensor& g, const Tensor&, const std::vector<char>&) {
                   return std::vector<Tensor>{repeat_axis(g, axis, nn)};
                 });
}

inline Tensor repeat_axis(const Tensor& t, int axis, int64_t n) {
  if (t.shape().rank() >= 4) throw ShapeError("repeat_axis: rank would exceed 4");
  if (axis < 0 || axis > t.shape().rank()) throw ShapeError("repeat_axis: bad axis");
  if (n <= 0) throw ShapeError("repeat_axis: bad count");
  std::vector<int64_t> dims;
  for (int i = 0; i < t.shape().rank(); ++i) dims.push_back(t.shape()[i]);
  dims.insert(dims.begin() + axis, n);
  Shape os = Shape::of(dims);
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= t.shape()[i];
  for (int i = axis; i < t.shape().rank(); ++i) inner *= t.shape()[i];
  const auto& x = t.values();
  std::vector<double> v = detail::take_buffer(static_cast<size_t>(os.numel()));
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t j = 0; j < n; ++j) {
      const double* src = x.data() + o * inner;
      double* dst = v.data() + (o * n + j) * inner;
      for (int64_t i = 0; i < inner; ++i) dst[i] = src[i];
    }
  return make_op("repeat_axis", os, std::move(v), {t},
                 [axis](const Tensor& g, const Tensor&, const std::vector<char>&) {
                   return std::vector<Tensor>{sum_axis(g, axis)};
                 });
}

inline Tensor sum(const Tensor& t) {
  if (t.shape().rank() == 0) return copy(t);
  return sum_axis(flatten(t), 0);
}

inline Tensor mean(const Tensor& t) { return scale(sum(t), 1.0 / static_cast<double>(t.numel())); }

// max over one axis; realized as a gather against captured argmax positions,
// so the backward (scatter) comes for free and stays differentiable
inline Tensor max_axis(const Tensor& t, int axis) {
  int64_t outer, n, inner;
  detail::axis_split(t.shape(), axis, outer, n, inner);
  std::vector<int64_t> dims;
  for (int i = 0; i < t.shape().rank(); ++i)
    if (i != axis) dims.push_back(t.shape()[i]);
  Shape os = Shape::of(dims);
  const auto& x = t.values();
  auto idx = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(os.numel()));
  size_t k = 0;
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t i = 0; i < inner; ++i, ++k) {
      int64_t best = (o * n) * inner + i;
      double bv = x[static_cast<size_t>(best)];
      for (int64_t j = 1; j < n; ++j) {
        int64_t cand = (o * n + j) * inner + i;
        double cv = x[static_cast<size_t>(cand)];
        if (cv > bv) { bv = cv; best = cand; }
      }
      (*idx)[k] = best;
    }
  return gather_flat(t, idx, os);
}

// ----- matmul -----

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.shape().rank() != 2 || b.shape().rank() != 2)
    throw ShapeError("matmul expects rank-2 operands");
  int64_t m = a.shape()[0], k = a.shape()[1], k2 = b.shape()[0], n = b.shape()[1];
  if (k != k2)
    throw ShapeError("matmul inner dims " + a.shape().str() + " x " + b.shape().str());
  using RM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Eigen::Map<const RM> A(a.values().data(), m, k);
  Eigen::Map<const RM> B(b.values().data(), k, n);
  std::vector<double> v = detail::take_buffer(static_cast<size_t>(m * n));
  Eigen::Map<RM> O(v.data(), m, n);
  O.noalias() = A * B;
  return make_op("matmul", Shape{m, n}, std::move(v), {a, b},
                 [](const Tensor& g, const Tensor& self, const std::vector<char>& needs) {
                   const auto& p = self.raw()->parents;
                   std::vector<Tensor> r(2);
                   if (needs[0]) r[0] = matmul(g, transpose(p[1]));
                   if (needs[1]) r[1] = matmul(transpose(p[0]), g);
                   return r;
                 });
}

// ----- im2col / col2im -----

namespace detail {
struct ConvGeom {
  int64_t C, H, W;
  int kh, kw, sh, sw, ph, pw;
  int64_t oh, ow;
};

inline ConvGeom conv_geom(const Shape& x, int kh, int kw, int sh, int sw, int ph, int pw) {
  if (x.rank() != 3) throw ShapeError("im2col expects [C,H,W], got " + x.str());
  if (kh <= 0 || kw <= 0 || sh <= 0 || sw <= 0 || ph < 0 || pw < 0)
    throw ShapeError("bad conv geometry");
  ConvGeom g{x[0], x[1], x[2], kh, kw, sh, sw, ph, pw, 0, 0};
  int64_t eh = g.H + 2 * ph - kh, ew = g.W + 2 * pw - kw;
  if (eh < 0 || ew < 0) throw ShapeError("kernel larger than padded input");
  g.oh = eh / sh + 1;
  g.ow = ew / sw + 1;
  return g;
}
}  // namespace detail

inline Tensor im2col(const Tensor& x, int kh, int kw, int sh, int sw, int ph, int pw) {
  auto g = detail::conv_geom(x.shape(), kh, kw, sh, sw, ph, pw);
  int64_t rows = g.C * kh * kw, cols = g.oh * g.ow;
  const auto& xv = x.values();
  std::vector<double> v(static_cast<size_t>(rows * cols), 0.0);
  for (int64_t c = 0; c < g.C; ++c)
    for (int ki = 0; ki < kh; ++ki)
      for (int kj = 0; kj < kw; ++kj) {
        int64_t row = (c * kh + ki) * kw + kj;
        double* dst = v.data() + row * cols;
        const double* src = xv.data() + c * g.H * g.W;
        for (int64_t oy = 0; oy < g.oh; ++oy) {
          int64_t y = oy * sh - ph + ki;
          if (y < 0 || y >= g.H) continue;
          for (int64_t ox = 0; ox < g.ow; ++ox) {
            int64_t xx = ox * sw - pw + kj;
            if (xx < 0 || xx >= g.W) continue;
            dst[oy * g.ow + ox] = src[y * g.W + xx];
          }
        }
      }
  int64_t C = g.C, H = g.H, W = g.W;
  return make_op("im2col", Shape{rows, cols}, std::move(v), {x},
                 [C, H, W, kh, kw, sh, sw, ph, pw](const Tensor& gr, const Tensor&,
                                                   const std::vector<char>&) {
                   return std::vector<Tensor>{col2im(gr, C, H, W, kh, kw, sh, sw, ph, pw)};
                 });
}

inline Tensor col2im(const Tensor& cols, int64_t C, int64_t H, int64_t W, int kh, int kw, int sh,
                     int sw, int ph, int pw) {
  auto g = detail::conv_geom(Shape{C, H, W}, kh, kw, sh, sw, ph, pw);
  int64_t rows = C * kh * kw, ncols = g.oh * g.ow;
  if (cols.shape().rank() != 2 || cols.shape()[0] != rows || cols.shape()[1] != ncols)
    throw ShapeError("col2im: got " + cols.shape().str());
  const auto& xv = cols.values();
  std::vector<double> v(static_cast<size_t>(C * H * W), 0.0);
  for (int64_t c = 0; c < C; ++c)
    for (int ki = 0; ki < kh; ++ki)
      for (int kj = 0; kj < kw; ++kj) {
        int64_t row = (c * kh + ki) * kw + kj;
        const double* src = xv.data() + row * ncols;
        double* dst = v.data() + c * H * W;
        for (int64_t oy = 0; oy < g.oh; ++oy) {
          int64_t y = oy * sh - ph + ki;
          if (y < 0 || y >= H) continue;
          for (int64_t ox = 0; ox < g.ow; ++ox) {
            int64_t xx = ox * sw - pw + kj;
            if (xx < 0 || xx >= W) continue;
            dst[y * W + xx] += src[oy * g.ow + ox];
          }
        }
      }
  return make_op("col2im", Shape{C, H, W}, std::move(v), {cols},
                 [kh, kw, sh, sw, ph, pw](const Tensor& gr, const Tensor&,
                                          const std::vector<char>&) {
                   return std::vector<Tensor>{im2col(gr, kh, kw, sh, sw, ph, pw)};
                 });
}

// ----- gather / scatter -----

inline Tensor gather_flat(const Tensor& src, IndexMap idx, const Shape& out_shape) {
  if (!idx || static_cast<int64_t>(idx->size()) != out_shape.numel())
    throw ShapeError("gather_flat: index size mismatch");
  const auto& x = src.values();
  int64_t n = src.numel();
  std::vector<double> v = detail::take_buffer(idx->size());
  for (size_t i = 0; i < idx->size(); ++i) {
    int64_t j = (*idx)[i];
    if (j >= n) throw ShapeError("gather_flat: index out of range");
    v[i] = (j >= 0) ? x[static_cast<size_t>(j)] : 0.0;
  }
  Shape ss = src.shape();
  return make_op("gather", out_shape, std::move(v), {src},
                 [idx, ss](const Tensor& g, const Tensor&, const std::vector<char>&) {
                   return std::vector<Tensor>{scatter_flat(g, idx, ss)};
                 });
}

// adds src[i] into out[idx[i]]; negative indices drop the element
inline Tensor scatter_flat(const Tensor& src, IndexMap idx, const Shape& out_shape) {
  if (!idx || static_cast<int64_t>(idx->size()) != src.numel())
    throw ShapeError("scatter_flat: index size mismatch");
  const auto& x = src.values();
  int64_t n = out_shape.numel();
  std::vector<double> v(static_cast<size_t>(n), 0.0);
  for (size_t i = 0; i < idx->size(); ++i) {
    int64_t j = (*idx)[i];
    if (j >= n) throw ShapeError("scatter_flat: index out of range");
    if (j >= 0) v[static_cast<size_t>(j)] += x[i];
  }
  Shape ss = src.shape();
  return make_op("scatter", out_shape, std::move(v), {src},
                 [idx, ss](const Tensor& g, const Tensor&, const std::vector<char>&) {
                   return std::vector<Tensor>{gather_flat(g, idx, ss)};
                 });
}

// ----- 3x3 window sum (SSIM building block) -----

inline Tensor box3_valid(const Tensor& x) {
  if (x.shape().rank() != 3) throw ShapeError("box3_valid expects [C,H,W]");
  int64_t C = x.shape()[0], H = x.shape()[1], W = x.shape()[2];
  if (H < 3 || W < 3) throw ShapeError("box3_valid: input smaller than window");
  int64_t oh = H - 2, ow = W - 2;
  const auto& xv = x.values();
  std::vector<double> v = detail::take_buffer(static_cast<size_t>(C * oh * ow));
  std::vector<double> hsum = detail::take_buffer(static_cast<size_t>(H * ow));
  for (int64_t c = 0; c < C; ++c) {
    const double* src = xv.data() + c * H * W;
    for (int64_t y = 0; y < H; ++y)
      for (int64_t j = 0; j < ow; ++j)
        hsum[static_cast<size_t>(y * ow + j)] =
            src[y * W + j] + src[y * W + j + 1] + src[y * W + j + 2];
    double* dst = v.data() + c * oh * ow;
    for (int64_t i = 0; i < oh; ++i)
      for (int64_t j = 0; j < ow; ++j)
        dst[i * ow + j] = hsum[static_cast<size_t>(i * ow + j)] +
                          hsum[static_cast<size_t>((i + 1) * ow + j)] +
                          hsum[static_cast<size_t>((i + 2) * ow + j)];
  }
  return make_op("box3", Shape{C, oh, ow}, std::move(v), {x},
                 [](const Tensor& g, const Tensor&, const std::vector<char>&) {
                   // adjoint of a valid 3x3 window sum is the same sum over a
                   // zero-padded field
                   Tensor p = pad_axis(pad_axis(g, 1, 2, 2), 2, 2, 2);
                   return std::vector<Tensor>{box3_valid(p)};
                 });
}

// ----- composites -----

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator-(const Tensor& a) { return neg(a); }
inline Tensor operator*(const Tensor& a, double c) { return scale(a, c); }
inline Tensor operator*(double c, const Tensor& a) { return scale(a, c); }

// Convolution is computed by direct loops rather than im2col + matmul: the
// channel counts here are small enough that gemm packing costs more than it
// saves. conv2d / conv2d_xgrad / conv2d_wgrad form a closed set, each
// backward written in terms of the other two, so higher-order derivatives work.
inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad);
inline Tensor conv2d_xgrad(const Tensor& g, const Tensor& w, int stride, int pad, int64_t H,
                           int64_t W);
inline Tensor conv2d_wgrad(const Tensor& x, const Tensor& g, int stride, int pad, int kh, int kw);

namespace detail {
// range of output positions o with 0 <= o*stride - pad + k < limit
struct ConvSpan {
  int64_t lo, hi;
};
inline ConvSpan conv_span(int64_t limit, int64_t count, int stride, int pad, int k) {
  int64_t s = stride;
  int64_t lo = pad - k > 0 ? (pad - k + s - 1) / s : 0;
  int64_t top = limit + pad - k;  // exclusive bound on o*stride
  int64_t hi = top > 0 ? std::min<int64_t>(count, (top + s - 1) / s) : 0;
  return {lo, hi < lo ? lo : hi};
}
}  // namespace detail

inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
  if (w.shape().rank() != 4) throw ShapeError("conv2d weight expects [Cout,Cin,kh,kw]");
  int64_t cout = w.shape()[0], cin = w.shape()[1];
  int kh = static_cast<int>(w.shape()[2]), kw = static_cast<int>(w.shape()[3]);
  if (x.shape().rank() != 3 || x.shape()[0] != cin)
    throw ShapeError("conv2d input " + x.shape().str() + " vs weight " + w.shape().str());
  if (b.defined() && (b.shape().rank() != 1 || b.shape()[0] != cout))
    throw ShapeError("conv2d bias shape");
  auto geo = detail::conv_geom(x.shape(), kh, kw, stride, stride, pad, pad);
  int64_t H = geo.H, W = geo.W, oh = geo.oh, ow = geo.ow;
  const auto& xv = x.values();
  const auto& wv = w.values();
  std::vector<double> v = detail::take_buffer(static_cast<size_t>(cout * oh * ow));
  for (int64_t co = 0; co < cout; ++co) {
    double* oplane = v.data() + co * oh * ow;
    std::fill(oplane, oplane + oh * ow, b.defined() ? b.values()[static_cast<size_t>(co)] : 0.0);
    for (int64_t ci = 0; ci < cin; ++ci) {
      const double* xplane = xv.data() + ci * H * W;
      const double* wk = wv.data() + (co * cin + ci) * kh * kw;
      for (int ky = 0; ky < kh; ++ky) {
        auto ys = detail::conv_span(H, oh, stride, pad, ky);
        for (int kx = 0; kx < kw; ++kx) {
          auto xs = detail::conv_span(W, ow, stride, pad, kx);
          double ws = wk[ky * kw + kx];
          for (int64_t oy = ys.lo; oy < ys.hi; ++oy) {
            const double* xrow = xplane + (oy * stride - pad + ky) * W - pad + kx;
            double* orow = oplane + oy * ow;
            if (stride == 1) {
              for (int64_t ox = xs.lo; ox < xs.hi; ++ox) orow[ox] += ws * xrow[ox];
            } else {
              for (int64_t ox = xs.lo; ox < xs.hi; ++ox) orow[ox] += ws * xrow[ox * stride];
            }
          }
        }
      }
    }
  }
  std::vector<Tensor> parents = b.defined() ? std::vector<Tensor>{x, w, b} : std::vector<Tensor>{x, w};
  auto backward = [stride, pad, H, W, kh, kw](const Tensor& g, const Tensor& self,
                                              const std::vector<char>& needs) {
    const auto& p = self.raw()->parents;
    std::vector<Tensor> r(p.size());
    if (needs[0]) r[0] = conv2d_xgrad(g, p[1], stride, pad, H, W);
    if (needs[1]) r[1] = conv2d_wgrad(p[0], g, stride, pad, kh, kw);
    if (p.size() > 2 && needs[2])
      r[2] = sum_axis(reshape(g, Shape{g.shape()[0], g.shape()[1] * g.shape()[2]}), 1);
    return r;
  };
  return make_op("conv2d", Shape{cout, oh, ow}, std::move(v), std::move(parents),
                 std::move(backward));
}

// adjoint of conv2d with respect to its input: scatters g back through w
inline Tensor conv2d_xgrad(const Tensor& g, const Tensor& w, int stride, int pad, int64_t H,
                           int64_t W) {
  if (w.shape().rank() != 4 || g.shape().rank() != 3 || g.shape()[0] != w.shape()[0])
    throw ShapeError("conv2d_xgrad: " + g.shape().str() + " vs " + w.shape().str());
  int64_t cout = w.shape()[0], cin = w.shape()[1];
  int kh = static_cast<int>(w.shape()[2]), kw = static_cast<int>(w.shape()[3]);
  int64_t oh = g.shape()[1], ow = g.shape()[2];
  const auto& gv = g.values();
  const auto& wv = w.values();
  std::vector<double> v(static_cast<size_t>(cin * H * W), 0.0);
  for (int64_t ci = 0; ci < cin; ++ci) {
    double* xplane = v.data() + ci * H * W;
    for (int64_t co = 0; co < cout; ++co) {
      const double* gplane = gv.data() + co * oh * ow;
      const double* wk = wv.data() + (co * cin + ci) * kh * kw;
      for (int ky = 0; ky < kh; ++ky) {
        auto ys = detail::conv_span(H, oh, stride, pad, ky);
        for (int kx = 0; kx < kw; ++kx) {
          auto xs = detail::conv_span(W, ow, stride, pad, kx);
          double ws = wk[ky * kw + kx];
          for (int64_t oy = ys.lo; oy < ys.hi; ++oy) {
            double* xrow = xplane + (oy * stride - pad + ky) * W - pad + kx;
            const double* grow = gplane + oy * ow;
            if (stride == 1) {
              for (int64_t ox = xs.lo; ox < xs.hi; ++ox) xrow[ox] += ws * grow[ox];
            } else {
              for (int64_t ox = xs.lo; ox < xs.hi; ++ox) xrow[ox * stride] += ws * grow[ox];
            }
          }
        }
      }
    }
  }
  auto backward = [stride, pad, H, W, kh, kw](const Tensor& gg, const Tensor& self,
                                              const std::vector<char>& needs) {
    const auto& p = self.raw()->parents;  // {g, w}
    std::vector<Tensor> r(2);
    if (needs[0]) r[0] = conv2d(gg, p[1], Tensor(), stride, pad);
    if (needs[1]) r[1] = conv2d_wgrad(gg, p[0], stride, pad, kh, kw);
    return r;
  };
  return make_op("conv2d_xgrad", Shape{cin, H, W}, std::move(v), {g, w}, std::move(backward));
}

// adjoint of conv2d with respect to its weights: per-tap correlation of x and g
inline Tensor conv2d_wgrad(const Tensor& x, const Tensor& g, int stride, int pad, int kh, int kw) {
  if (x.shape().rank() != 3 || g.shape().rank() != 3)
    throw ShapeError("conv2d_wgrad: " + x.shape().str() + " vs " + g.shape().str());
  int64_t cin = x.shape()[0], H = x.shape()[1], W = x.shape()[2];
  int64_t cout = g.shape()[0], oh = g.shape()[1], ow = g.shape()[2];
  const auto& xv = x.values();
  const auto& gv = g.values();
  std::vector<double> v = detail::take_buffer(static_cast<size_t>(cout * cin * kh * kw));
  for (int64_t co = 0; co < cout; ++co) {
    const double* gplane = gv.data() + co * oh * ow;
    for (int64_t ci = 0; ci < cin; ++ci) {
      const double* xplane = xv.data() + ci * H * W;
      double* wk = v.data() + (co * cin + ci) * kh * kw;
      for (int ky = 0; ky < kh; ++ky) {
        auto ys = detail::conv_span(H, oh, stride, pad, ky);
        for (int kx = 0; kx < kw; ++kx) {
          auto xs = detail::conv_span(W, ow, stride, pad, kx);
          // four independent accumulators so the row reduction vectorizes;
          // the grouping is fixed, so results stay deterministic
          double a0 = 0.0, a1 = 0.0, a2 = 0.0, a3 = 0.0;
          for (int64_t oy = ys.lo; oy < ys.hi; ++oy) {
            const double* xrow = xplane + (oy * stride - pad + ky) * W - pad + kx;
            const double* grow = gplane + oy * ow;
            int64_t ox = xs.lo;
            if (stride == 1) {
              for (; ox + 4 <= xs.hi; ox += 4) {
                a0 += xrow[ox] * grow[ox];
                a1 += xrow[ox + 1] * grow[ox + 1];
                a2 += xrow[ox + 2] * grow[ox + 2];
                a3 += xrow[ox + 3] * grow[ox + 3];
              }
              for (; ox < xs.hi; ++ox) a0 += xrow[ox] * grow[ox];
            } else {
              for (; ox < xs.hi; ++ox) a0 += xrow[ox * stride] * grow[ox];
            }
          }
          wk[ky * kw + kx] = (a0 + a1) + (a2 + a3);
        }
      }
    }
  }
  auto backward = [stride, pad, H, W, kh, kw](const Tensor& gw, const Tensor& self,
                                              const std::vector<char>& needs) {
    const auto& p = self.raw()->parents;  // {x, g}
    std::vector<Tensor> r(2);
    if (needs[0]) r[0] = conv2d_xgrad(p[1], gw, stride, pad, H, W);
    if (needs[1]) r[1] = conv2d(p[0], gw, Tensor(), stride, pad);
    return r;
  };
  return make_op("conv2d_wgrad", Shape{cout, cin, kh, kw}, std::move(v), {x, g},
                 std::move(backward));
}

inline Tensor linear(const Tensor& w, const Tensor& x, const Tensor& b) {
  if (w.shape().rank() != 2 || x.shape().rank() != 1)
    throw ShapeError("linear expects [m,k] and [k]");
  Tensor y = reshape(matmul(w, reshape(x, Shape{x.shape()[0], 1})), Shape{w.shape()[0]});
  if (b.defined()) y = add(y, b);
  return y;
}

namespace detail {
// index map caches for fixed-geometry rearrangements; keyed per thread
using IdxKey = std::tuple<int, int64_t, int64_t, int64_t, int64_t, int64_t>;
inline std::map<IdxKey, IndexMap>& idx_cache() {
  thread_local std::map<IdxKey, IndexMap> cache;
  return cache;
}
}  // namespace detail

inline Tensor upsample_nearest_x2(const Tensor& t) {
  if (t.shape().rank() != 3) throw ShapeError("upsample expects [C,H,W]");
  int64_t C = t.shape()[0], H = t.shape()[1], W = t.shape()[2];
  detail::IdxKey key{1, C, H, W, 0, 0};
  auto& cache = detail::idx_cache();
  auto it = cache.find(key);
  IndexMap idx;
  if (it != cache.end()) {
    idx = it->second;
  } else {
    auto m = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(C * 4 * H * W));
    size_t k = 0;
    for (int64_t c = 0; c < C; ++c)
      for (int64_t y = 0; y < 2 * H; ++y)
        for (int64_t x = 0; x < 2 * W; ++x, ++k)
          (*m)[k] = (c * H + y / 2) * W + x / 2;
    idx = m;
    cache[key] = idx;
  }
  return gather_flat(t, idx, Shape{C, 2 * H, 2 * W});
}

inline Tensor avgpool2x2(const Tensor& t) {
  if (t.shape().rank() != 3) throw ShapeError("avgpool2x2 expects [C,H,W]");
  int64_t C = t.shape()[0], H = t.shape()[1], W = t.shape()[2];
  if (H % 2 || W % 2) throw ShapeError("avgpool2x2 needs even spatial dims");
  Tensor cols = im2col(t, 2, 2, 2, 2, 0, 0);                 // [C*4, H/2*W/2]
  Tensor grouped = reshape(cols, Shape{C, 4, (H / 2) * (W / 2)});
  return reshape(scale(sum_axis(grouped, 1), 0.25), Shape{C, H / 2, W / 2});
}

inline Tensor avgpool3(const Tensor& t, int stride) {
  if (t.shape().rank() != 3) throw ShapeError("avgpool3 expects [C,H,W]");
  int64_t C = t.shape()[0];
  auto g = detail::conv_geom(t.shape(), 3, 3, stride, stride, 0, 0);
  Tensor cols = im2col(t, 3, 3, stride, stride, 0, 0);
  Tensor grouped = reshape(cols, Shape{C, 9, g.oh * g.ow});
  return reshape(scale(sum_axis(grouped, 1), 1.0 / 9.0), Shape{C, g.oh, g.ow});
}

inline Tensor maxpool3(const Tensor& t, int stride) {
  if (t.shape().rank() != 3) throw ShapeError("maxpool3 expects [C,H,W]");
  int64_t C = t.shape()[0], H = t.shape()[1], W = t.shape()[2];
  auto g = detail::conv_geom(t.shape(), 3, 3, stride, stride, 0, 0);
  const auto& x = t.values();
  auto idx = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(C * g.oh * g.ow));
  size_t k = 0;
  for (int64_t c = 0; c < C; ++c)
    for (int64_t oy = 0; oy < g.oh; ++oy)
      for (int64_t ox = 0; ox < g.ow; ++ox, ++k) {
        int64_t best = -1;
        double bv = 0;
        for (int ki = 0; ki < 3; ++ki)
          for (int kj = 0; kj < 3; ++kj) {
            int64_t y = oy * stride + ki, xx = ox * stride + kj;
            int64_t flat = (c * H + y) * W + xx;
            double cv = x[static_cast<size_t>(flat)];
            if (best < 0 || cv > bv) { bv = cv; best = flat; }
          }
        (*idx)[k] = best;
      }
  return gather_flat(t, idx, Shape{C, g.oh, g.ow});
}

namespace detail {
inline int64_t reflect101(int64_t i, int64_t n) {
  if (i < 0) return -i;
  if (i >= n) return 2 * n - 2 - i;
  return i;
}

inline IndexMap reflect_pad1_index(int64_t C, int64_t H, int64_t W) {
  IdxKey key{2, C, H, W, 0, 0};
  auto& cache = idx_cache();
  auto it = cache.find(key);
  if (it != cache.end()) return it->second;
  auto m = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(C * (H + 2) * (W + 2)));
  size_t k = 0;
  for (int64_t c = 0; c < C; ++c)
    for (int64_t y = -1; y <= H; ++y)
      for (int64_t x = -1; x <= W; ++x, ++k)
        (*m)[k] = (c * H + reflect101(y, H)) * W + reflect101(x, W);
  cache[key] = m;
  return m;
}
}  // namespace detail

// reflect-pad by one pixel, realized as a constant-index gather
inline Tensor reflect_pad1(const Tensor& t) {
  if (t.shape().rank() != 3) throw ShapeError("reflect_pad1 expects [C,H,W]");
  int64_t C = t.shape()[0], H = t.shape()[1], W = t.shape()[2];
  if (H < 2 || W < 2) throw ShapeError("reflect_pad1: input too small");
  return gather_flat(t, detail::reflect_pad1_index(C, H, W), Shape{C, H + 2, W + 2});
}

// 3x3 box mean at the input resolution (reflect borders)
inline Tensor box3_mean_same(const Tensor& t) {
  return scale(box3_valid(reflect_pad1(t)), 1.0 / 9.0);
}

// adjoint of box3_mean_same: window-sum over a zero-padded field, then fold
// the reflect border back and divide by nine
inline Tensor box3_mean_same_adjoint(const Tensor& u) {
  if (u.shape().rank() != 3) throw ShapeError("box3_mean_same_adjoint expects [C,H,W]");
  int64_t C = u.shape()[0], H = u.shape()[1], W = u.shape()[2];
  Tensor s = box3_valid(pad_axis(pad_axis(u, 1, 2, 2), 2, 2, 2));
  return scale(scatter_flat(s, detail::reflect_pad1_index(C, H, W), Shape{C, H, W}), 1.0 / 9.0);
}

// bilinear resize with constant sample grid (used to lift coarse disparity to
// full resolution); border-clamped, pixel-center aligned
inline Tensor resize_bilinear(const Tensor& t, int64_t oh, int64_t ow) {
  if (t.shape().rank() != 3) throw ShapeError("resize_bilinear expects [C,H,W]");
  int64_t C = t.shape()[0], H = t.shape()[1], W = t.shape()[2];
  if (oh == H && ow == W) return t;
  double fy = static_cast<double>(H) / static_cast<double>(oh);
  double fx = static_cast<double>(W) / static_cast<double>(ow);
  size_t n = static_cast<size_t>(C * oh * ow);
  auto i00 = std::make_shared<std::vector<int64_t>>(n);
  auto i01 = std::make_shared<std::vector<int64_t>>(n);
  auto i10 = std::make_shared<std::vector<int64_t>>(n);
  auto i11 = std::make_shared<std::vector<int64_t>>(n);
  std::vector<double> w00 = detail::take_buffer(n), w01 = detail::take_buffer(n),
                      w10 = detail::take_buffer(n), w11 = detail::take_buffer(n);
  size_t k = 0;
  for (int64_t c = 0; c < C; ++c)
    for (int64_t y = 0; y < oh; ++y)
      for (int64_t x = 0; x < ow; ++x, ++k) {
        double sy = (static_cast<double>(y) + 0.5) * fy - 0.5;
        double sx = (static_cast<double>(x) + 0.5) * fx - 0.5;
        sy = std::min(std::max(sy, 0.0), static_cast<double>(H - 1));
        sx = std::min(std::max(sx, 0.0), static_cast<double>(W - 1));
        int64_t y0 = static_cast<int64_t>(std::floor(sy));
        int64_t x0 = static_cast<int64_t>(std::floor(sx));
        int64_t y1 = std::min(y0 + 1, H - 1), x1 = std::min(x0 + 1, W - 1);
        double ay = sy - static_cast<double>(y0), ax = sx - static_cast<double>(x0);
        (*i00)[k] = (c * H + y0) * W + x0;
        (*i01)[k] = (c * H + y0) * W + x1;
        (*i10)[k] = (c * H + y1) * W + x0;
        (*i11)[k] = (c * H + y1) * W + x1;
        w00[k] = (1 - ay) * (1 - ax);
        w01[k] = (1 - ay) * ax;
        w10[k] = ay * (1 - ax);
        w11[k] = ay * ax;
      }
  Shape os{C, oh, ow};
  Tensor out = add(add(mul(gather_flat(t, i00, os), Tensor::constant(os, std::move(w00))),
                       mul(gather_flat(t, i01, os), Tensor::constant(os, std::move(w01)))),
                   add(mul(gather_flat(t, i10, os), Tensor::constant(os, std::move(w10))),
                       mul(gather_flat(t, i11, os), Tensor::constant(os, std::move(w11)))));
  return out;
}

// mean over pixels kept by a constant 0/1 mask; refuses a fully masked field
inline Tensor masked_mean(const Tensor& x, const Tensor& mask) {
  if (mask.requires_grad()) throw GraphError("masked_mean: mask must be constant");
  double count = 0;
  for (double m : mask.values()) count += m;
  if (count <= 0.0) throw NumericError("masked_mean: mask excludes every element");
  return scale(sum(mul(x, mask)), 1.0 / count);
}

inline Tensor mean_hw(const Tensor& t) {
  if (t.shape().rank() != 3) throw ShapeError("mean_hw expects [C,H,W]");
  double inv = 1.0 / static_cast<double>(t.shape()[1] * t.shape()[2]);
  return scale(sum_axis(sum_axis(t, 2), 1), inv);
}

inline Tensor stack_scalars(const std::vector<Tensor>& xs) {
  std::vector<Tensor> parts;
  parts.reserve(xs.size());
  for (const Tensor& x : xs) parts.push_back(reshape(x, Shape{1}));
  return concat(parts, 0);
}

}  // namespace metadepth
