#pragma once

// Run configuration: the meta-learning hyperparameters plus the file-system
// plumbing the command-line driver needs (dataset paths, output directory,
// resolution). Parsed from line-based `key = value` text with `#` comments;
// command-line overrides use the same syntax and win over the file.

#include <cstdlib>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "metadepth/meta.hpp"

namespace metadepth {

struct RunConfig {
  MetaConfig meta;
  std::vector<std::string> train_dirs;  // meta-training domain datasets
  std::string heldout_dir;              // held-out domain dataset
  std::string data_dir;                 // dataset for adapt/eval
  std::string checkpoint;               // input checkpoint for adapt/eval
  std::string out_dir = ".";
  int64_t width = 64, height = 96;      // gen-data resolution
  double focal = 60.0;
  int64_t snippets = 40;                // gen-data count per domain
  int64_t workers = 1;                  // worker pool for data generation
  bool quiet = false;
  bool median_scale = true;                              // eval scaling mode
  std::vector<std::string> modes{"maml", "maml_at", "maml_at_lc"};  // ablate grid
  std::vector<uint64_t> seeds{1, 2, 3};                             // ablate grid

  void validate() const {
    meta.validate();
    if (width < 8 || height < 8) throw ConfigError("resolution must be at least 8x8");
    if (snippets < 1) throw ConfigError("snippets must be >= 1");
    if (workers < 1) throw ConfigError("workers must be >= 1");
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  size_t b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  size_t e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline double parse_f64(const std::string& key, const std::string& v) {
  char* end = nullptr;
  double x = std::strtod(v.c_str(), &end);
  if (end == v.c_str() || *end != '\0')
    throw ConfigError("key '" + key + "': cannot parse '" + v + "' as a number");
  return x;
}

inline int64_t parse_i64(const std::string& key, const std::string& v) {
  char* end = nullptr;
  long long x = std::strtoll(v.c_str(), &end, 10);
  if (end == v.c_str() || *end != '\0')
    throw ConfigError("key '" + key + "': cannot parse '" + v + "' as an integer");
  return x;
}

inline uint64_t parse_u64(const std::string& key, const std::string& v) {
  char* end = nullptr;
  unsigned long long x = std::strtoull(v.c_str(), &end, 10);
  if (end == v.c_str() || *end != '\0' || (!v.empty() && v[0] == '-'))
    throw ConfigError("key '" + key + "': cannot parse '" + v + "' as an unsigned integer");
  return x;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "off" || v == "no") return false;
  throw ConfigError("key '" + key + "': cannot parse '" + v + "' as a boolean");
}

template <class T, class F>
std::vector<T> parse_list(const std::string& key, const std::string& v, F&& one) {
  std::vector<T> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty()) throw ConfigError("key '" + key + "': empty list element");
    out.push_back(one(key, item));
  }
  if (out.empty()) throw ConfigError("key '" + key + "': empty list");
  return out;
}

}  // namespace detail

// applies one key=value assignment to cfg; throws on unknown key or bad value
inline void apply_config_key(RunConfig& cfg, const std::string& key, const std::string& value) {
  using detail::parse_bool;
  using detail::parse_f64;
  using detail::parse_i64;
  using detail::parse_u64;
  MetaConfig& m = cfg.meta;
  if (key == "alpha") m.alpha = parse_f64(key, value);
  else if (key == "beta") m.beta = parse_f64(key, value);
  else if (key == "k_support") m.k_support = parse_i64(key, value);
  else if (key == "k_query") m.k_query = parse_i64(key, value);
  else if (key == "inner_steps") m.inner_steps = parse_i64(key, value);
  else if (key == "second_order") m.second_order = parse_bool(key, value);
  else if (key == "mode") m.mode = value;
  else if (key == "lambda_adv") m.lambda_adv = parse_f64(key, value);
  else if (key == "lambda_c") m.lambda_c = parse_f64(key, value);
  else if (key == "outer_supervised") m.outer_supervised = parse_bool(key, value);
  else if (key == "outer_adapted_disc") m.outer_adapted_disc = parse_bool(key, value);
  else if (key == "seed") m.seed = parse_u64(key, value);
  else if (key == "outer_iterations") m.outer_iterations = parse_i64(key, value);
  else if (key == "adapt_steps") m.adapt_steps = parse_i64(key, value);
  else if (key == "log_interval") m.log_interval = parse_i64(key, value);
  else if (key == "eval_snippets") m.eval_snippets = parse_i64(key, value);
  else if (key == "w_ssim") m.unsup.w_ssim = parse_f64(key, value);
  else if (key == "lambda_smooth") m.unsup.lambda_smooth = parse_f64(key, value);
  else if (key == "d_min") m.unsup.d_min = parse_f64(key, value);
  else if (key == "d_max") m.unsup.d_max = parse_f64(key, value);
  else if (key == "depth_widths")
    m.depth_net.widths = detail::parse_list<int64_t>(key, value, parse_i64);
  else if (key == "depth_scales") m.depth_net.scales = static_cast<int>(parse_i64(key, value));
  else if (key == "pose_widths")
    m.pose_net.widths = detail::parse_list<int64_t>(key, value, parse_i64);
  else if (key == "pose_scale") m.pose_net.pose_scale = parse_f64(key, value);
  else if (key == "disc_widths")
    m.disc_net.widths = detail::parse_list<int64_t>(key, value, parse_i64);
  else if (key == "train_dirs")
    cfg.train_dirs = detail::parse_list<std::string>(
        key, value, [](const std::string&, const std::string& s) { return s; });
  else if (key == "heldout_dir") cfg.heldout_dir = value;
  else if (key == "data_dir") cfg.data_dir = value;
  else if (key == "checkpoint") cfg.checkpoint = value;
  else if (key == "out_dir") cfg.out_dir = value;
  else if (key == "width") cfg.width = parse_i64(key, value);
  else if (key == "height") cfg.height = parse_i64(key, value);
  else if (key == "focal") cfg.focal = parse_f64(key, value);
  else if (key == "snippets") cfg.snippets = parse_i64(key, value);
  else if (key == "workers") cfg.workers = parse_i64(key, value);
  else if (key == "quiet") cfg.quiet = parse_bool(key, value);
  else if (key == "median_scale") cfg.median_scale = parse_bool(key, value);
  else if (key == "modes")
    cfg.modes = detail::parse_list<std::string>(
        key, value, [](const std::string&, const std::string& s) { return s; });
  else if (key == "seeds") cfg.seeds = detail::parse_list<uint64_t>(key, value, parse_u64);
  else throw ConfigError("unknown config key '" + key + "'");
}

namespace detail {

// splits "key = value"; empty return means a blank/comment line
inline bool split_assignment(const std::string& line, std::string& key, std::string& value) {
  std::string s = line;
  size_t hash = s.find('#');
  if (hash != std::string::npos) s = s.substr(0, hash);
  s = trim(s);
  if (s.empty()) return false;
  size_t eq = s.find('=');
  if (eq == std::string::npos) throw ConfigError("config line without '=': '" + trim(line) + "'");
  key = trim(s.substr(0, eq));
  value = trim(s.substr(eq + 1));
  if (key.empty()) throw ConfigError("config line with empty key: '" + trim(line) + "'");
  return true;
}

}  // namespace detail

// path may be empty (no file, overrides only); overrides are key=value strings
// applied after the file. Duplicates within one source keep the last value and
// emit a warning; an override replacing a file key is the intended mechanism
// and stays silent. The seed must be set somewhere.
inline RunConfig parse_config(const std::string& path, const std::vector<std::string>& overrides,
                              std::vector<std::string>* warnings = nullptr) {
  RunConfig cfg;
  bool seed_set = false;
  auto warn = [&](const std::string& msg) {
    if (warnings) warnings->push_back(msg);
    else std::fprintf(stderr, "warning: %s\n", msg.c_str());
  };

  auto apply_source = [&](const std::vector<std::pair<std::string, std::string>>& kvs,
                          const std::string& what) {
    std::set<std::string> seen;
    for (const auto& [k, v] : kvs) {
      if (!seen.insert(k).second)
        warn("duplicate key '" + k + "' in " + what + "; last occurrence wins");
      apply_config_key(cfg, k, v);
      if (k == "seed") seed_set = true;
    }
  };

  if (!path.empty()) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config file '" + path + "'");
    std::vector<std::pair<std::string, std::string>> kvs;
    std::string line, key, value;
    while (std::getline(f, line))
      if (detail::split_assignment(line, key, value)) kvs.emplace_back(key, value);
    apply_source(kvs, "'" + path + "'");
  }

  std::vector<std::pair<std::string, std::string>> kvs;
  for (const std::string& ov : overrides) {
    std::string key, value;
    if (!detail::split_assignment(ov, key, value))
      throw ConfigError("empty override '" + ov + "'");
    kvs.emplace_back(key, value);
  }
  apply_source(kvs, "command-line overrides");

  if (!seed_set) throw ConfigError("seed is mandatory; set it in the config file or with seed=N");
  cfg.validate();
  return cfg;
}

// serializes the resolved configuration back to config syntax (the checkpoint
// sidecar); re-parsing the output plus the same seed reproduces the run
inline std::string render_config(const RunConfig& cfg) {
  std::ostringstream os;
  const MetaConfig& m = cfg.meta;
  auto num = [](double v) { return detail::fmt_num(v); };
  auto list_i = [](const std::vector<int64_t>& v) {
    std::string s;
    for (size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
    return s;
  };
  os << "alpha = " << num(m.alpha) << "\n";
  os << "beta = " << num(m.beta) << "\n";
  os << "k_support = " << m.k_support << "\n";
  os << "k_query = " << m.k_query << "\n";
  os << "inner_steps = " << m.inner_steps << "\n";
  os << "second_order = " << (m.second_order ? "true" : "false") << "\n";
  os << "mode = " << m.mode << "\n";
  os << "lambda_adv = " << num(m.lambda_adv) << "\n";
  os << "lambda_c = " << num(m.lambda_c) << "\n";
  os << "outer_supervised = " << (m.outer_supervised ? "true" : "false") << "\n";
  os << "outer_adapted_disc = " << (m.outer_adapted_disc ? "true" : "false") << "\n";
  os << "seed = " << m.seed << "\n";
  os << "outer_iterations = " << m.outer_iterations << "\n";
  os << "adapt_steps = " << m.adapt_steps << "\n";
  os << "log_interval = " << m.log_interval << "\n";
  os << "eval_snippets = " << m.eval_snippets << "\n";
  os << "w_ssim = " << num(m.unsup.w_ssim) << "\n";
  os << "lambda_smooth = " << num(m.unsup.lambda_smooth) << "\n";
  os << "d_min = " << num(m.unsup.d_min) << "\n";
  os << "d_max = " << num(m.unsup.d_max) << "\n";
  os << "depth_widths = " << list_i(m.depth_net.widths) << "\n";
  os << "depth_scales = " << m.depth_net.scales << "\n";
  os << "pose_widths = " << list_i(m.pose_net.widths) << "\n";
  os << "pose_scale = " << num(m.pose_net.pose_scale) << "\n";
  os << "disc_widths = " << list_i(m.disc_net.widths) << "\n";
  if (!cfg.train_dirs.empty()) {
    os << "train_dirs = ";
    for (size_t i = 0; i < cfg.train_dirs.size(); ++i) os << (i ? "," : "") << cfg.train_dirs[i];
    os << "\n";
  }
  if (!cfg.heldout_dir.empty()) os << "heldout_dir = " << cfg.heldout_dir << "\n";
  if (!cfg.data_dir.empty()) os << "data_dir = " << cfg.data_dir << "\n";
  if (!cfg.checkpoint.empty()) os << "checkpoint = " << cfg.checkpoint << "\n";
  os << "out_dir = " << cfg.out_dir << "\n";
  os << "width = " << cfg.width << "\n";
  os << "height = " << cfg.height << "\n";
  os << "focal = " << num(cfg.focal) << "\n";
  os << "snippets = " << cfg.snippets << "\n";
  os << "workers = " << cfg.workers << "\n";
  os << "median_scale = " << (cfg.median_scale ? "true" : "false") << "\n";
  return os.str();
}

}  // namespace metadepth
