#pragma once

// Procedural scene generator and the on-disk dataset format. A scene is a
// background plane plus fronto-parallel textured rectangles; both frames are
// ray-cast through the same code path (frame t with identity motion), so
// identity motion reproduces frame t bitwise. Textures are smooth sin plaids
// attached to surface coordinates, which keeps the scene Lambertian: the
// second view samples the same surface colors and reprojection residuals stay
// at interpolation/quantization level. Colors are quantized to k/255 before
// returning so the PPM round trip is exact.
//
// render_snippet always fills gt_depth and gt_depth_next in memory; the
// labeled flag only controls whether depth reaches disk. gt_depth_next never
// does, it exists for the occlusion-aware reprojection oracle.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "metadepth/geometry.hpp"
#include "metadepth/losses.hpp"
#include "metadepth/random.hpp"

namespace metadepth {

struct Rgb {
  double r = 0, g = 0, b = 0;
};

struct DomainSpec {
  std::string id;
  std::vector<Rgb> palette;     // [0] background, rest rectangle bases
  int count_lo = 4, count_hi = 7;
  double d_near = 0.8, d_far = 4.0;
  double size_lo = 0.45, size_hi = 0.85;  // rectangle extents, scene units
  double noise_amp = 0.18;                // plaid amplitude
  double gain = 1.0;                      // global illumination
  double period_scale = 0.11;             // plaid period = scale * surface depth
  bool labeled = false;

  void validate() const {
    if (id.empty()) throw ConfigError("domain spec: empty id");
    if (palette.size() < 2) throw ConfigError("domain spec '" + id + "': palette needs >= 2 colors");
    if (!(d_near > 0 && d_near < d_far)) throw ConfigError("domain spec '" + id + "': bad depth range");
    if (noise_amp < 0 || noise_amp > 0.3)
      throw ConfigError("domain spec '" + id + "': noise amplitude outside [0, 0.3]");
    if (count_lo < 1 || count_hi < count_lo) throw ConfigError("domain spec '" + id + "': bad count range");
    if (size_lo <= 0 || size_hi < size_lo) throw ConfigError("domain spec '" + id + "': bad size range");
    if (period_scale <= 0 || gain <= 0) throw ConfigError("domain spec '" + id + "': bad texture params");
  }
};

struct RenderSettings {
  int64_t width = 64, height = 96;
  double focal = 60.0;

  CameraIntrinsics intrinsics() const {
    CameraIntrinsics K;
    K.fx = K.fy = focal;
    K.cx = width / 2.0 - 0.5;
    K.cy = height / 2.0 - 0.5;
    K.width = width;
    K.height = height;
    K.validate();
    return K;
  }
};

struct SceneSnippet {
  std::vector<double> frame_t, frame_t1;  // [3,H,W], values k/255
  std::vector<double> gt_depth;           // [H,W] frame t
  std::vector<double> gt_depth_next;      // [H,W] frame t+1, in-memory only
  double pose[6] = {0, 0, 0, 0, 0, 0};    // axis-angle + translation, t -> t+1
  CameraIntrinsics K;
  std::string domain_id;
  std::string snippet_id;
  bool labeled = false;
};

namespace detail {

struct SceneRect {
  double z = 0, x0 = 0, x1 = 0, y0 = 0, y1 = 0;
  Rgb base;
  double tint[3] = {1, 1, 1};
  double period = 1, phase_x = 0, phase_y = 0;
};

struct Scene {
  std::vector<SceneRect> rects;  // sorted near to far
  SceneRect background;          // extent ignored
};

inline double plaid(const SceneRect& r, double x, double y, int c, double amp) {
  double base = c == 0 ? r.base.r : c == 1 ? r.base.g : r.base.b;
  double w = 6.283185307179586 / r.period;
  double tex = 0.5 * std::sin(w * x + r.phase_x) + 0.5 * std::sin(w * y + r.phase_y);
  return base + amp * r.tint[c] * tex;
}

inline uint8_t quantize(double v) {
  double c = v < 0 ? 0 : v > 1 ? 1 : v;
  return static_cast<uint8_t>(std::lround(c * 255.0));
}

// ray-cast one view; cam-to-world A, b (world point = A * cam point + b)
inline void raycast(const Scene& sc, const DomainSpec& spec, const CameraIntrinsics& K,
                    const Eigen::Matrix3d& A, const Eigen::Vector3d& b, std::vector<double>& rgb,
                    std::vector<double>& depth) {
  int64_t W = K.width, H = K.height;
  rgb.assign(static_cast<size_t>(3 * H * W), 0.0);
  depth.assign(static_cast<size_t>(H * W), 0.0);
  for (int64_t v = 0; v < H; ++v) {
    for (int64_t u = 0; u < W; ++u) {
      Eigen::Vector3d d((u - K.cx) / K.fx, (v - K.cy) / K.fy, 1.0);
      Eigen::Vector3d Ad = A * d;
      const SceneRect* hit = &sc.background;
      // s solves (s * Ad + b).z == plane depth; hit point is in scene coords
      double s_hit = (sc.background.z - b.z()) / Ad.z();
      double xh = s_hit * Ad.x() + b.x();
      double yh = s_hit * Ad.y() + b.y();
      // rects are near-to-far; first in-extent hit wins
      for (const SceneRect& r : sc.rects) {
        double s = (r.z - b.z()) / Ad.z();
        if (s <= 0 || s >= s_hit) continue;
        double xw = s * Ad.x() + b.x();
        double yw = s * Ad.y() + b.y();
        if (xw >= r.x0 && xw <= r.x1 && yw >= r.y0 && yw <= r.y1) {
          hit = &r;
          s_hit = s;
          xh = xw;
          yh = yw;
          break;
        }
      }
      size_t px = static_cast<size_t>(v * W + u);
      depth[px] = s_hit;
      for (int c = 0; c < 3; ++c) {
        double val = plaid(*hit, xh, yh, c, spec.noise_amp) * spec.gain;
        rgb[static_cast<size_t>(c) * H * W + px] = quantize(val) / 255.0;
      }
    }
  }
}

}  // namespace detail

inline SceneSnippet render_snippet(const DomainSpec& spec, Rng& rng,
                                   const RenderSettings& rs = {}) {
  spec.validate();
  CameraIntrinsics K = rs.intrinsics();

  detail::Scene sc;
  int n = spec.count_lo + static_cast<int>(rng.uniform_int(spec.count_hi - spec.count_lo + 1));
  sc.rects.resize(static_cast<size_t>(n));
  for (auto& r : sc.rects) {
    r.z = rng.uniform(spec.d_near, 0.9 * spec.d_far);
    double half_w = r.z * (K.width / 2.0) / K.fx;
    double half_h = r.z * (K.height / 2.0) / K.fy;
    double cx = rng.uniform(-0.75 * half_w, 0.75 * half_w);
    double cy = rng.uniform(-0.75 * half_h, 0.75 * half_h);
    double sx = rng.uniform(spec.size_lo, spec.size_hi);
    double sy = rng.uniform(spec.size_lo, spec.size_hi);
    r.x0 = cx - sx / 2;
    r.x1 = cx + sx / 2;
    r.y0 = cy - sy / 2;
    r.y1 = cy + sy / 2;
    size_t pi = 1 + static_cast<size_t>(rng.uniform_int(static_cast<int64_t>(spec.palette.size()) - 1));
    r.base = spec.palette[pi];
    double jr = rng.uniform(-0.05, 0.05), jg = rng.uniform(-0.05, 0.05), jb = rng.uniform(-0.05, 0.05);
    r.base.r += jr;
    r.base.g += jg;
    r.base.b += jb;
    static const double tints[4][3] = {{1, .7, .5}, {.5, 1, .7}, {.7, .5, 1}, {1, 1, 1}};
    const double* t = tints[rng.uniform_int(4)];
    r.tint[0] = t[0];
    r.tint[1] = t[1];
    r.tint[2] = t[2];
    r.period = spec.period_scale * r.z;
    r.phase_x = rng.uniform(0.0, 6.283185307179586);
    r.phase_y = rng.uniform(0.0, 6.283185307179586);
  }
  std::sort(sc.rects.begin(), sc.rects.end(),
            [](const detail::SceneRect& a, const detail::SceneRect& b) { return a.z < b.z; });
  sc.background.z = spec.d_far;
  sc.background.base = spec.palette[0];
  sc.background.period = spec.period_scale * spec.d_far;
  sc.background.phase_x = rng.uniform(0.0, 6.283185307179586);
  sc.background.phase_y = rng.uniform(0.0, 6.283185307179586);

  // small camera motion, bounded but bounded away from zero so pose carries signal
  double axis[3];
  double norm = 0;
  do {
    for (double& a : axis) a = rng.uniform(-1.0, 1.0);
    norm = std::sqrt(axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]);
  } while (norm < 0.1);
  double angle = rng.uniform(0.2, 1.0) * 0.05;
  double tdir[3];
  double tn = 0;
  do {
    for (double& a : tdir) a = rng.uniform(-1.0, 1.0);
    tn = std::sqrt(tdir[0] * tdir[0] + tdir[1] * tdir[1] + tdir[2] * tdir[2]);
  } while (tn < 0.1);
  double tmag = rng.uniform(0.25, 1.0) * 0.2 * spec.d_near;

  SceneSnippet out;
  out.K = K;
  out.domain_id = spec.id;
  out.labeled = spec.labeled;
  for (int i = 0; i < 3; ++i) {
    out.pose[i] = axis[i] / norm * angle;
    out.pose[3 + i] = tdir[i] / tn * tmag;
  }

  // frame t: camera at scene origin
  detail::raycast(sc, spec, K, Eigen::Matrix3d::Identity(), Eigen::Vector3d::Zero(), out.frame_t,
                  out.gt_depth);

  // frame t+1: X_t1 = R X_t + T, so cam-to-scene is A = R^T, b = -R^T T
  Eigen::Matrix3d R = axis_angle_to_rotation(Eigen::Vector3d(out.pose[0], out.pose[1], out.pose[2]));
  Eigen::Matrix3d A = R.transpose();
  Eigen::Vector3d b = -(A * Eigen::Vector3d(out.pose[3], out.pose[4], out.pose[5]));
  detail::raycast(sc, spec, K, A, b, out.frame_t1, out.gt_depth_next);
  return out;
}

// masked mean L1 between frame t and the inverse-warped frame t+1 under the
// ground truth, the scene's photometric noise floor; geometry module is the
// cross-oracle. The mask drops out-of-view pixels, pixels occluded in t+1,
// and pixels whose bilinear footprint straddles a depth edge.
inline double reprojection_residual(const SceneSnippet& sn) {
  if (sn.gt_depth.empty() || sn.gt_depth_next.empty())
    throw DataError("reprojection_residual needs in-memory ground truth");
  NoGradGuard ng;
  int64_t H = sn.K.height, W = sn.K.width;
  Tensor depth = Tensor::constant(Shape{H, W}, sn.gt_depth);
  Tensor src = Tensor::constant(Shape{3, H, W}, sn.frame_t1);
  RigidTransform T = RigidTransform::from_axis_angle(
      Eigen::Vector3d(sn.pose[0], sn.pose[1], sn.pose[2]),
      Eigen::Vector3d(sn.pose[3], sn.pose[4], sn.pose[5]));
  WarpResult wr = inverse_warp(src, depth, T, sn.K);

  // project every target pixel and compare against the t+1 depth buffer
  std::vector<double> mask(static_cast<size_t>(H * W), 0.0);
  for (int64_t v = 0; v < H; ++v) {
    for (int64_t u = 0; u < W; ++u) {
      size_t px = static_cast<size_t>(v * W + u);
      double z = sn.gt_depth[px];
      Eigen::Vector3d X(z * (u - sn.K.cx) / sn.K.fx, z * (v - sn.K.cy) / sn.K.fy, z);
      Eigen::Vector3d Y = T.apply(X);
      if (Y.z() < kProjectZMin) continue;
      double uu = sn.K.fx * Y.x() / Y.z() + sn.K.cx;
      double vv = sn.K.fy * Y.y() / Y.z() + sn.K.cy;
      int64_t u0 = static_cast<int64_t>(std::floor(uu)), v0 = static_cast<int64_t>(std::floor(vv));
      if (u0 < 0 || v0 < 0 || u0 + 1 >= W || v0 + 1 >= H) continue;
      double zmin = 1e300, zmax = 0;
      for (int dy = 0; dy < 2; ++dy)
        for (int dx = 0; dx < 2; ++dx) {
          double zz = sn.gt_depth_next[static_cast<size_t>((v0 + dy) * W + u0 + dx)];
          zmin = std::min(zmin, zz);
          zmax = std::max(zmax, zz);
        }
      bool occluded = Y.z() > zmin * 1.02;         // something nearer covers the point
      bool edge = (zmax - zmin) > 0.02 * zmin;     // footprint spans a depth edge
      if (!occluded && !edge) mask[px] = 1.0;
    }
  }
  Tensor m = mul(wr.mask, Tensor::constant(Shape{H, W}, mask));
  Tensor target = Tensor::constant(Shape{3, H, W}, sn.frame_t);
  Tensor l1 = scale(sum_axis(abs_t(sub(wr.warped, target)), 0), 1.0 / 3.0);
  return masked_mean(l1, m).item();
}

// ----- default domain roster -----

// five desk domains: two labeled stand-ins, two unlabeled, one held out
inline std::vector<DomainSpec> default_domains() {
  std::vector<DomainSpec> out(5);
  out[0].id = "syn-a";
  out[0].labeled = true;
  out[0].palette = {{0.55, 0.30, 0.22}, {0.85, 0.45, 0.30}, {0.75, 0.55, 0.25}, {0.90, 0.65, 0.40}};
  out[0].d_near = 0.8;
  out[0].d_far = 4.0;
  out[0].count_lo = 4;
  out[0].count_hi = 7;
  out[0].size_lo = 0.45;
  out[0].size_hi = 0.85;
  out[0].noise_amp = 0.18;
  out[0].gain = 1.0;
  out[0].period_scale = 0.11;

  out[1].id = "syn-b";
  out[1].labeled = true;
  out[1].palette = {{0.20, 0.32, 0.58}, {0.30, 0.55, 0.85}, {0.25, 0.70, 0.75}, {0.45, 0.50, 0.90}};
  out[1].d_near = 1.5;
  out[1].d_far = 6.0;
  out[1].count_lo = 5;
  out[1].count_hi = 8;
  out[1].size_lo = 0.60;
  out[1].size_hi = 1.10;
  out[1].noise_amp = 0.22;
  out[1].gain = 0.95;
  out[1].period_scale = 0.13;

  out[2].id = "real-a";
  out[2].labeled = false;
  out[2].palette = {{0.28, 0.50, 0.26}, {0.40, 0.75, 0.35}, {0.55, 0.65, 0.30}, {0.35, 0.60, 0.45}};
  out[2].d_near = 0.6;
  out[2].d_far = 3.0;
  out[2].count_lo = 3;
  out[2].count_hi = 6;
  out[2].size_lo = 0.35;
  out[2].size_hi = 0.70;
  out[2].noise_amp = 0.25;
  out[2].gain = 1.10;
  out[2].period_scale = 0.10;

  out[3].id = "real-b";
  out[3].labeled = false;
  out[3].palette = {{0.55, 0.55, 0.58}, {0.75, 0.75, 0.78}, {0.62, 0.60, 0.70}, {0.80, 0.68, 0.60}};
  out[3].d_near = 2.0;
  out[3].d_far = 8.0;
  out[3].count_lo = 4;
  out[3].count_hi = 8;
  out[3].size_lo = 0.80;
  out[3].size_hi = 1.50;
  out[3].noise_amp = 0.15;
  out[3].gain = 0.90;
  out[3].period_scale = 0.15;

  out[4].id = "held";
  out[4].labeled = true;  // depth exported for evaluation; adaptation ignores it
  out[4].palette = {{0.42, 0.25, 0.48}, {0.62, 0.35, 0.70}, {0.55, 0.45, 0.78}, {0.70, 0.30, 0.55}};
  out[4].d_near = 1.0;
  out[4].d_far = 5.0;
  out[4].count_lo = 4;
  out[4].count_hi = 7;
  out[4].size_lo = 0.50;
  out[4].size_hi = 0.95;
  out[4].noise_amp = 0.20;
  out[4].gain = 1.05;
  out[4].period_scale = 0.12;
  return out;
}

// ----- image and depth files -----

inline void write_ppm(const std::string& path, const std::vector<double>& rgb, int64_t width,
                      int64_t height) {
  if (rgb.size() != static_cast<size_t>(3 * width * height))
    throw ShapeError("write_ppm: buffer size vs dimensions");
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open for write: " + path);
  f << "P6\n" << width << " " << height << "\n255\n";
  std::vector<uint8_t> row(static_cast<size_t>(width) * 3);
  size_t plane = static_cast<size_t>(width * height);
  for (int64_t y = 0; y < height; ++y) {
    for (int64_t x = 0; x < width; ++x) {
      size_t px = static_cast<size_t>(y * width + x);
      for (int c = 0; c < 3; ++c) row[static_cast<size_t>(x) * 3 + c] = detail::quantize(rgb[c * plane + px]);
    }
    f.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
  }
  if (!f) throw DataError("short write: " + path);
}

namespace detail {
inline int ppm_token(std::istream& in) {
  // next integer token, skipping whitespace and # comments
  int ch;
  while ((ch = in.get()) != EOF) {
    if (ch == '#') {
      while ((ch = in.get()) != EOF && ch != '\n') {}
    } else if (!std::isspace(ch)) {
      break;
    }
  }
  if (ch == EOF) throw DataError("ppm: truncated header");
  int val = 0;
  bool any = false;
  while (ch != EOF && std::isdigit(ch)) {
    val = val * 10 + (ch - '0');
    any = true;
    ch = in.get();
  }
  if (!any) throw DataError("ppm: malformed header");
  if (ch != EOF) in.unget();
  return val;
}
}  // namespace detail

inline std::vector<double> read_ppm(const std::string& path, int64_t& width, int64_t& height) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open: " + path);
  char m0 = 0, m1 = 0;
  f.get(m0);
  f.get(m1);
  if (m0 != 'P' || m1 != '6') throw DataError("not a P6 ppm: " + path);
  width = detail::ppm_token(f);
  height = detail::ppm_token(f);
  int maxval = detail::ppm_token(f);
  if (width <= 0 || height <= 0) throw DataError("ppm: bad dimensions: " + path);
  if (maxval != 255) throw DataError("ppm: expected maxval 255: " + path);
  f.get();  // single whitespace after maxval
  size_t plane = static_cast<size_t>(width * height);
  std::vector<uint8_t> raw(plane * 3);
  f.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (f.gcount() != static_cast<std::streamsize>(raw.size()))
    throw DataError("ppm: truncated pixel data: " + path);
  std::vector<double> rgb(plane * 3);
  for (size_t px = 0; px < plane; ++px)
    for (size_t c = 0; c < 3; ++c) rgb[c * plane + px] = raw[px * 3 + c] / 255.0;
  return rgb;
}

namespace detail {
inline void put_u32(std::ofstream& f, uint32_t v) {
  uint8_t b[4] = {static_cast<uint8_t>(v), static_cast<uint8_t>(v >> 8),
                  static_cast<uint8_t>(v >> 16), static_cast<uint8_t>(v >> 24)};
  f.write(reinterpret_cast<const char*>(b), 4);
}
inline uint32_t get_u32(std::ifstream& f, const std::string& path) {
  uint8_t b[4];
  f.read(reinterpret_cast<char*>(b), 4);
  if (f.gcount() != 4) throw DataError("depth file truncated: " + path);
  return static_cast<uint32_t>(b[0]) | static_cast<uint32_t>(b[1]) << 8 |
         static_cast<uint32_t>(b[2]) << 16 | static_cast<uint32_t>(b[3]) << 24;
}
}  // namespace detail

inline void write_depth(const std::string& path, const std::vector<double>& depth, int64_t width,
                        int64_t height) {
  if (depth.size() != static_cast<size_t>(width * height))
    throw ShapeError("write_depth: buffer size vs dimensions");
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open for write: " + path);
  f.write("DPTH", 4);
  detail::put_u32(f, static_cast<uint32_t>(width));
  detail::put_u32(f, static_cast<uint32_t>(height));
  for (double d : depth) {
    float fd = static_cast<float>(d);
    uint32_t u;
    std::memcpy(&u, &fd, 4);
    detail::put_u32(f, u);
  }
  if (!f) throw DataError("short write: " + path);
}

inline std::vector<double> read_depth(const std::string& path, int64_t& width, int64_t& height) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open: " + path);
  char magic[4] = {};
  f.read(magic, 4);
  if (f.gcount() != 4 || std::string(magic, 4) != "DPTH")
    throw DataError("bad depth magic: " + path);
  width = detail::get_u32(f, path);
  height = detail::get_u32(f, path);
  if (width <= 0 || height <= 0 || width > 1 << 20 || height > 1 << 20)
    throw DataError("depth file: bad dimensions: " + path);
  std::vector<double> out(static_cast<size_t>(width * height));
  for (double& d : out) {
    uint32_t u = detail::get_u32(f, path);
    float fd;
    std::memcpy(&fd, &u, 4);
    d = fd;
  }
  f.get();
  if (!f.eof()) throw DataError("depth file: trailing bytes: " + path);
  return out;
}

// ----- manifest and dataset directories -----

struct ManifestEntry {
  std::string id;
  std::string frame_t_path, frame_t1_path, depth_path;  // depth empty if none
  double pose[6] = {0, 0, 0, 0, 0, 0};
  double fx = 0, fy = 0, cx = 0, cy = 0;
};

struct DomainDataset {
  std::string domain_id;
  bool labeled = false;
  std::string dir;
  std::vector<ManifestEntry> entries;
};

namespace detail {
inline std::string fmt_g17(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}
}  // namespace detail

inline void write_manifest(const DomainDataset& ds) {
  std::ofstream f(ds.dir + "/manifest.txt");
  if (!f) throw DataError("cannot open for write: " + ds.dir + "/manifest.txt");
  f << "domain " << ds.domain_id << " labeled " << (ds.labeled ? 1 : 0) << "\n";
  for (const auto& e : ds.entries) {
    f << e.id << " " << e.frame_t_path << " " << e.frame_t1_path << " "
      << (e.depth_path.empty() ? "-" : e.depth_path);
    for (double p : e.pose) f << " " << detail::fmt_g17(p);
    f << " " << detail::fmt_g17(e.fx) << " " << detail::fmt_g17(e.fy) << " "
      << detail::fmt_g17(e.cx) << " " << detail::fmt_g17(e.cy) << "\n";
  }
  if (!f) throw DataError("short write: " + ds.dir + "/manifest.txt");
}

inline DomainDataset read_manifest(const std::string& dir) {
  std::ifstream f(dir + "/manifest.txt");
  if (!f) throw DataError("cannot open: " + dir + "/manifest.txt");
  DomainDataset ds;
  ds.dir = dir;
  std::string line;
  if (!std::getline(f, line)) throw DataError("manifest: empty file: " + dir);
  {
    std::istringstream is(line);
    std::string kw_domain, kw_labeled;
    int lab = -1;
    is >> kw_domain >> ds.domain_id >> kw_labeled >> lab;
    if (kw_domain != "domain" || kw_labeled != "labeled" || (lab != 0 && lab != 1) || !is)
      throw DataError("manifest: malformed header: " + dir);
    ds.labeled = lab == 1;
  }
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::istringstream is(line);
    ManifestEntry e;
    std::string depth;
    is >> e.id >> e.frame_t_path >> e.frame_t1_path >> depth;
    for (double& p : e.pose) is >> p;
    is >> e.fx >> e.fy >> e.cx >> e.cy;
    if (!is) throw DataError("manifest: malformed entry line: " + dir);
    if (depth != "-") e.depth_path = depth;
    if (ds.labeled && e.depth_path.empty())
      throw DataError("manifest: labeled domain entry without depth: " + dir);
    ds.entries.push_back(std::move(e));
  }
  return ds;
}

inline std::string snippet_name(int64_t index) {
  char buf[24];
  std::snprintf(buf, sizeof(buf), "%06lld", static_cast<long long>(index));
  return buf;
}

inline DomainDataset generate_domain(const DomainSpec& spec, int64_t count, const std::string& out_dir,
                                     uint64_t seed, const RenderSettings& rs = {}) {
  spec.validate();
  if (count < 1) throw ConfigError("generate_domain: count must be positive");
  namespace fs = std::filesystem;
  fs::create_directories(out_dir + "/frames");
  if (spec.labeled) fs::create_directories(out_dir + "/depth");

  DomainDataset ds;
  ds.domain_id = spec.id;
  ds.labeled = spec.labeled;
  ds.dir = out_dir;
  for (int64_t i = 0; i < count; ++i) {
    std::string sid = snippet_name(i);
    // independent stream per snippet
    Rng rng(hash_combine(hash_str(seed, spec.id), static_cast<uint64_t>(i)));
    SceneSnippet sn = render_snippet(spec, rng, rs);
    ManifestEntry e;
    e.id = sid;
    e.frame_t_path = "frames/" + sid + "_t.ppm";
    e.frame_t1_path = "frames/" + sid + "_t1.ppm";
    write_ppm(out_dir + "/" + e.frame_t_path, sn.frame_t, rs.width, rs.height);
    write_ppm(out_dir + "/" + e.frame_t1_path, sn.frame_t1, rs.width, rs.height);
    if (spec.labeled) {
      e.depth_path = "depth/" + sid + ".dpth";
      write_depth(out_dir + "/" + e.depth_path, sn.gt_depth, rs.width, rs.height);
    }
    for (int k = 0; k < 6; ++k) e.pose[k] = sn.pose[k];
    e.fx = sn.K.fx;
    e.fy = sn.K.fy;
    e.cx = sn.K.cx;
    e.cy = sn.K.cy;
    ds.entries.push_back(std::move(e));
  }
  write_manifest(ds);
  return ds;
}

inline SceneSnippet load_snippet_entry(const DomainDataset& ds, const ManifestEntry& e) {
  SceneSnippet sn;
  int64_t w1 = 0, h1 = 0, w2 = 0, h2 = 0;
  sn.frame_t = read_ppm(ds.dir + "/" + e.frame_t_path, w1, h1);
  sn.frame_t1 = read_ppm(ds.dir + "/" + e.frame_t1_path, w2, h2);
  if (w1 != w2 || h1 != h2)
    throw DataError("snippet " + e.id + ": frame dimensions disagree");
  if (!e.depth_path.empty()) {
    int64_t wd = 0, hd = 0;
    sn.gt_depth = read_depth(ds.dir + "/" + e.depth_path, wd, hd);
    if (wd != w1 || hd != h1)
      throw DataError("snippet " + e.id + ": depth dimensions disagree with frames");
  } else if (ds.labeled) {
    throw DataError("snippet " + e.id + ": labeled domain but no depth file");
  }
  for (int k = 0; k < 6; ++k) sn.pose[k] = e.pose[k];
  sn.K.fx = e.fx;
  sn.K.fy = e.fy;
  sn.K.cx = e.cx;
  sn.K.cy = e.cy;
  sn.K.width = w1;
  sn.K.height = h1;
  sn.K.validate();
  sn.domain_id = ds.domain_id;
  sn.snippet_id = e.id;
  sn.labeled = ds.labeled;
  return sn;
}

inline SceneSnippet load_snippet(const std::string& dir, const std::string& snippet_id) {
  DomainDataset ds = read_manifest(dir);
  for (const auto& e : ds.entries)
    if (e.id == snippet_id) return load_snippet_entry(ds, e);
  throw DataError("snippet '" + snippet_id + "' not in manifest: " + dir);
}

}  // namespace metadepth
