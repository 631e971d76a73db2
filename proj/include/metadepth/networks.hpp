#pragma once

// DepthNet (encoder-decoder with skips, sigmoid disparity heads), PoseNet
// (conv encoder + global average + zero-initialized linear head), and a patch
// discriminator. Plus the disparity->depth mapping and checkpoint I/O.

#include <bit>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "metadepth/optim.hpp"
#include "metadepth/random.hpp"

namespace metadepth {

struct DepthNetConfig {
  std::vector<int64_t> widths{16, 32, 64};  // encoder channels per stride-2 stage
  int scales = 2;                           // disparity heads, scale 0 = full res
  void validate() const {
    if (widths.empty()) throw ConfigError("depth net needs at least one stage");
    for (int64_t w : widths)
      if (w <= 0) throw ConfigError("depth net widths must be positive");
    if (scales < 1 || scales > static_cast<int>(widths.size()) + 1)
      throw ConfigError("depth net scales must lie in [1, stages+1]");
  }
  int64_t dec_width(size_t i) const {
    return i > 0 ? widths[i - 1] : std::max<int64_t>(widths[0] / 2, 4);
  }
};

struct PoseNetConfig {
  std::vector<int64_t> widths{16, 32, 64};
  double pose_scale = 0.01;  // keeps early iterations near the identity motion
  void validate() const {
    if (widths.empty()) throw ConfigError("pose net needs at least one stage");
    for (int64_t w : widths)
      if (w <= 0) throw ConfigError("pose net widths must be positive");
    if (pose_scale <= 0) throw ConfigError("pose scale must be positive");
  }
};

struct DiscriminatorConfig {
  std::vector<int64_t> widths{16, 32, 64};
  void validate() const {
    if (widths.empty()) throw ConfigError("discriminator needs at least one stage");
    for (int64_t w : widths)
      if (w <= 0) throw ConfigError("discriminator widths must be positive");
  }
};

// ----- init -----

namespace detail {

inline Tensor conv_weight(Rng& rng, int64_t cout, int64_t cin, int k) {
  double bound = std::sqrt(3.0 / static_cast<double>(cin * k * k));
  std::vector<double> v(static_cast<size_t>(cout * cin * k * k));
  for (auto& x : v) x = rng.uniform(-bound, bound);
  return Tensor::leaf(Shape{cout, cin, k, k}, std::move(v), true);
}

inline Tensor zeros_leaf(const Shape& s) {
  return Tensor::leaf(s, std::vector<double>(static_cast<size_t>(s.numel()), 0.0), true);
}

inline void add_conv(ParameterSet& ps, Rng& rng, const std::string& name, int64_t cin,
                     int64_t cout, int k = 3) {
  ps.add(name + ".w", conv_weight(rng, cout, cin, k));
  ps.add(name + ".b", zeros_leaf(Shape{cout}));
}

}  // namespace detail

// theta_G: DepthNet and PoseNet parameters live in one set under prefixes
inline ParameterSet init_generator(const DepthNetConfig& dcfg, const PoseNetConfig& pcfg,
                                   uint64_t seed) {
  dcfg.validate();
  pcfg.validate();
  Rng rng(hash_combine(seed, 0x67656eULL));
  ParameterSet ps;
  size_t n = dcfg.widths.size();
  for (size_t i = 0; i < n; ++i)
    detail::add_conv(ps, rng, "depth.enc" + std::to_string(i),
                     i == 0 ? 3 : dcfg.widths[i - 1], dcfg.widths[i]);
  for (size_t ii = n; ii-- > 0;) {
    int64_t in_a = ii == n - 1 ? dcfg.widths[n - 1] : dcfg.dec_width(ii + 1);
    int64_t dw = dcfg.dec_width(ii);
    detail::add_conv(ps, rng, "depth.dec" + std::to_string(ii) + ".a", in_a, dw);
    int64_t in_b = dw + (ii > 0 ? dcfg.widths[ii - 1] : 0);
    detail::add_conv(ps, rng, "depth.dec" + std::to_string(ii) + ".b", in_b, dw);
  }
  for (int k = 0; k < dcfg.scales; ++k) {
    int64_t in_h = k < static_cast<int>(n) ? dcfg.dec_width(static_cast<size_t>(k))
                                           : dcfg.widths[n - 1];
    detail::add_conv(ps, rng, "depth.disp" + std::to_string(k), in_h, 1);
  }

  size_t m = pcfg.widths.size();
  for (size_t i = 0; i < m; ++i)
    detail::add_conv(ps, rng, "pose.enc" + std::to_string(i), i == 0 ? 6 : pcfg.widths[i - 1],
                     pcfg.widths[i]);
  // zero head: the first forward predicts the identity motion
  ps.add("pose.head.w", detail::zeros_leaf(Shape{6, pcfg.widths[m - 1]}));
  ps.add("pose.head.b", detail::zeros_leaf(Shape{6}));
  return ps;
}

inline ParameterSet init_discriminator(const DiscriminatorConfig& cfg, uint64_t seed) {
  cfg.validate();
  Rng rng(hash_combine(seed, 0x64697363ULL));
  ParameterSet ps;
  for (size_t i = 0; i < cfg.widths.size(); ++i)
    detail::add_conv(ps, rng, "disc.enc" + std::to_string(i), i == 0 ? 1 : cfg.widths[i - 1],
                     cfg.widths[i]);
  detail::add_conv(ps, rng, "disc.out", cfg.widths.back(), 1);
  return ps;
}

// ----- forward passes -----

namespace detail {
inline Tensor conv_block(const ParameterSet& ps, const std::string& name, const Tensor& x,
                         int stride) {
  return elu(conv2d(x, ps.get(name + ".w"), ps.get(name + ".b"), stride, 1));
}
inline void check_divisible(const Shape& s, size_t stages, const char* who) {
  int64_t f = int64_t{1} << stages;
  if (s[s.rank() - 2] % f || s[s.rank() - 1] % f)
    throw ShapeError(std::string(who) + ": input " + s.str() + " not divisible by " +
                     std::to_string(f));
}
}  // namespace detail

// disparity maps, scale 0 first at full input resolution, scale k at 1/2^k
inline std::vector<Tensor> depth_forward(const ParameterSet& ps, const Tensor& image,
                                         const DepthNetConfig& cfg) {
  cfg.validate();
  if (image.shape().rank() != 3 || image.shape()[0] != 3)
    throw ShapeError("depth_forward expects [3,H,W]");
  size_t n = cfg.widths.size();
  detail::check_divisible(image.shape(), n, "depth_forward");

  std::vector<Tensor> feats;
  Tensor x = image;
  for (size_t i = 0; i < n; ++i) {
    x = detail::conv_block(ps, "depth.enc" + std::to_string(i), x, 2);
    feats.push_back(x);
  }
  std::vector<Tensor> disps(static_cast<size_t>(cfg.scales));
  if (cfg.scales > static_cast<int>(n)) {
    Tensor h = conv2d(x, ps.get("depth.disp" + std::to_string(n) + ".w"),
                      ps.get("depth.disp" + std::to_string(n) + ".b"), 1, 1);
    disps[n] = sigmoid(h);
  }
  for (size_t ii = n; ii-- > 0;) {
    std::string dec = "depth.dec" + std::to_string(ii);
    x = detail::conv_block(ps, dec + ".a", x, 1);
    x = upsample_nearest_x2(x);
    if (ii > 0) x = concat({x, feats[ii - 1]}, 0);
    x = detail::conv_block(ps, dec + ".b", x, 1);
    if (static_cast<int>(ii) < cfg.scales) {
      std::string head = "depth.disp" + std::to_string(ii);
      disps[ii] = sigmoid(conv2d(x, ps.get(head + ".w"), ps.get(head + ".b"), 1, 1));
    }
  }
  return disps;
}

// 6-vector [axis-angle | translation] mapping frame a into frame b's camera
inline Tensor pose_forward(const ParameterSet& ps, const Tensor& frame_a, const Tensor& frame_b,
                           const PoseNetConfig& cfg) {
  cfg.validate();
  if (frame_a.shape() != frame_b.shape() || frame_a.shape().rank() != 3 ||
      frame_a.shape()[0] != 3)
    throw ShapeError("pose_forward expects two [3,H,W] frames");
  size_t n = cfg.widths.size();
  detail::check_divisible(frame_a.shape(), n, "pose_forward");
  Tensor x = concat({frame_a, frame_b}, 0);
  for (size_t i = 0; i < n; ++i)
    x = detail::conv_block(ps, "pose.enc" + std::to_string(i), x, 2);
  Tensor pooled = mean_hw(x);
  return scale(linear(ps.get("pose.head.w"), pooled, ps.get("pose.head.b")), cfg.pose_scale);
}

// patch logits over a single-channel map (no sigmoid; losses handle that)
inline Tensor disc_forward(const ParameterSet& ps, const Tensor& map,
                           const DiscriminatorConfig& cfg) {
  cfg.validate();
  Tensor x = map;
  if (x.shape().rank() == 2) x = reshape(x, Shape{1, x.shape()[0], x.shape()[1]});
  if (x.shape().rank() != 3 || x.shape()[0] != 1)
    throw ShapeError("disc_forward expects [1,H,W] or [H,W]");
  detail::check_divisible(x.shape(), cfg.widths.size(), "disc_forward");
  for (size_t i = 0; i < cfg.widths.size(); ++i)
    x = detail::conv_block(ps, "disc.enc" + std::to_string(i), x, 2);
  return conv2d(x, ps.get("disc.out.w"), ps.get("disc.out.b"), 1, 1);
}

// sigmoid disparity -> metric depth; disp 0 -> d_max, disp 1 -> d_min
inline Tensor disp_to_depth(const Tensor& disp, double d_min, double d_max) {
  if (d_min <= 0 || d_max <= d_min) throw ConfigError("disp_to_depth: need 0 < d_min < d_max");
  Tensor inv = add_const(scale(disp, 1.0 / d_min - 1.0 / d_max), 1.0 / d_max);
  return div(Tensor::scalar(1.0), inv);
}

// ----- checkpoint I/O -----
// layout: "MADP" | u32 version | u32 count | per tensor:
//   u16 name_len | name | u8 rank | u32 extents... | f64 values (LE, row major)

namespace detail {

inline void put_u16(std::string& out, uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
}
inline void put_u32(std::string& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_f64(std::string& out, double d) {
  uint64_t v = std::bit_cast<uint64_t>(d);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

struct ByteReader {
  const std::string& buf;
  size_t pos = 0;
  explicit ByteReader(const std::string& b) : buf(b) {}
  uint8_t u8() {
    if (pos + 1 > buf.size()) throw DataError("checkpoint truncated");
    return static_cast<uint8_t>(buf[pos++]);
  }
  uint16_t u16() {
    uint16_t v = u8();
    return static_cast<uint16_t>(v | (static_cast<uint16_t>(u8()) << 8));
  }
  uint32_t u32() {
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(u8()) << (8 * i);
    return v;
  }
  double f64() {
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(u8()) << (8 * i);
    return std::bit_cast<double>(v);
  }
  std::string str(size_t n) {
    if (pos + n > buf.size()) throw DataError("checkpoint truncated");
    std::string s = buf.substr(pos, n);
    pos += n;
    return s;
  }
};

inline void append_set(std::string& out, const std::string& prefix, const ParameterSet& ps) {
  for (const auto& [name, t] : ps) {
    std::string full = prefix + name;
    if (full.size() > 0xffff) throw DataError("parameter name too long");
    put_u16(out, static_cast<uint16_t>(full.size()));
    out += full;
    out.push_back(static_cast<char>(t.shape().rank()));
    for (int i = 0; i < t.shape().rank(); ++i)
      put_u32(out, static_cast<uint32_t>(t.shape()[i]));
    for (double v : t.values()) put_f64(out, v);
  }
}

}  // namespace detail

constexpr uint32_t kCheckpointVersion = 1;

inline void save_checkpoint(const std::string& path, const ParameterSet& gen,
                            const ParameterSet& disc) {
  std::string out = "MADP";
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u32(out, static_cast<uint32_t>(gen.size() + disc.size()));
  detail::append_set(out, "gen.", gen);
  detail::append_set(out, "disc.", disc);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("cannot write checkpoint '" + path + "'");
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw DataError("short write on checkpoint '" + path + "'");
}

struct Checkpoint {
  ParameterSet gen, disc;
};

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open checkpoint '" + path + "'");
  std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  detail::ByteReader r(buf);
  if (r.str(4) != "MADP") throw DataError("'" + path + "' is not a checkpoint file");
  uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    throw DataError("unsupported checkpoint version " + std::to_string(version));
  uint32_t count = r.u32();
  Checkpoint ck;
  for (uint32_t i = 0; i < count; ++i) {
    std::string name = r.str(r.u16());
    int rank = r.u8();
    if (rank > 4) throw DataError("checkpoint tensor rank > 4");
    std::vector<int64_t> dims;
    for (int d = 0; d < rank; ++d) dims.push_back(static_cast<int64_t>(r.u32()));
    Shape s = Shape::of(dims);
    std::vector<double> v(static_cast<size_t>(s.numel()));
    for (auto& x : v) x = r.f64();
    Tensor t = Tensor::leaf(s, std::move(v), true);
    if (name.rfind("gen.", 0) == 0) ck.gen.add(name.substr(4), t);
    else if (name.rfind("disc.", 0) == 0) ck.disc.add(name.substr(5), t);
    else throw DataError("checkpoint tensor '" + name + "' has unknown group");
  }
  if (r.pos != buf.size()) throw DataError("trailing bytes in checkpoint '" + path + "'");
  return ck;
}

}  // namespace metadepth
