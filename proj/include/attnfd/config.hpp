#pragma once

#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "attnfd/dataset.hpp"
#include "attnfd/distill.hpp"
#include "attnfd/tensor.hpp"

namespace attnfd {

/// Effective settings of one run. Every field has a default; the key=value
/// file overrides them and any unknown key is an error.
struct RunConfig {
  uint64_t seed = 1;
  Method method = Method::attnfd;
  std::vector<TapId> taps = {TapId::B, TapId::E, TapId::D};

  std::string data_dir;
  int canvas = 64;
  int classes = 4;
  int train_count = 512;
  int val_count = 128;
  int shapes_min = 1;
  int shapes_max = 3;
  real noise = real(0.45);

  std::vector<int> teacher_widths = {32, 64, 128};
  std::vector<int> student_widths = {8, 16, 32};
  int reduction = 8;

  real lr0 = real(0.05);
  real lr_min = 0;
  real momentum = real(0.9);
  real weight_decay = 0;
  int epochs = 30;
  int calib_epochs = 5;
  int batch_size = 16;
  int eval_every = 5;

  real alpha = 2;
  int distill_epochs = 30;
  real kd_temperature = 4;
  int at_power = 2;
  NormMode normalize = NormMode::channel_slice;

  bool aug_enabled = true;
  real aug_scale_min = real(0.5);
  real aug_scale_max = real(2.0);

  ShapesSpec shapes_spec() const {
    ShapesSpec s;
    s.canvas = canvas;
    s.classes = classes;
    s.shapes_min = shapes_min;
    s.shapes_max = shapes_max;
    s.noise = noise;
    s.seed = seed;
    return s;
  }

  AugPolicy aug_policy() const {
    AugPolicy p;
    p.enabled = aug_enabled;
    p.scale_min = aug_scale_min;
    p.scale_max = aug_scale_max;
    p.crop = canvas;
    return p;
  }

  DistillConfig distill_config() const {
    DistillConfig d;
    d.alpha = alpha;
    d.method = method;
    d.tap_ids = taps;
    d.kd_temperature = kd_temperature;
    d.at_power = at_power;
    d.normalize = normalize;
    return d;
  }

  SegNetConfig teacher_net() const { return {3, classes, teacher_widths, reduction}; }
  SegNetConfig student_net() const { return {3, classes, student_widths, reduction}; }

  void validate() const {
    shapes_spec().validate();
    if (train_count < 0 || val_count < 0) throw ConfigError("data counts must be >= 0");
    if (teacher_widths.empty() || student_widths.empty())
      throw ConfigError("net widths must be nonempty");
    if (teacher_widths.size() != student_widths.size())
      throw ConfigError("teacher and student must have the same depth");
    if (!(lr0 > lr_min) || lr_min < 0)
      throw ConfigError("train.lr0 must exceed train.lr_min >= 0");
    if (momentum < 0 || momentum >= 1) throw ConfigError("train.momentum must be in [0,1)");
    if (weight_decay < 0) throw ConfigError("train.weight_decay must be >= 0");
    if (epochs < 0 || calib_epochs < 0 || distill_epochs < 0)
      throw ConfigError("epoch counts must be >= 0");
    if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
    if (eval_every < 1) throw ConfigError("train.eval_every must be >= 1");
    distill_config().validate();
    AugPolicy ap = aug_policy();
    ap.validate();
    const int div = 1 << int(teacher_widths.size());
    if (canvas % div != 0)
      throw ConfigError("data.canvas must be divisible by 2^depth = " + std::to_string(div));
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  std::size_t b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  std::size_t e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline int64_t parse_i64(const std::string& key, const std::string& v) {
  char* end = nullptr;
  errno = 0;
  long long x = std::strtoll(v.c_str(), &end, 10);
  if (v.empty() || end != v.c_str() + v.size() || errno != 0)
    throw ConfigError("config key '" + key + "': not an integer: '" + v + "'");
  return x;
}

inline uint64_t parse_u64(const std::string& key, const std::string& v) {
  char* end = nullptr;
  errno = 0;
  unsigned long long x = std::strtoull(v.c_str(), &end, 10);
  if (v.empty() || v[0] == '-' || end != v.c_str() + v.size() || errno != 0)
    throw ConfigError("config key '" + key + "': not a nonnegative integer: '" + v + "'");
  return x;
}

inline real parse_real(const std::string& key, const std::string& v) {
  char* end = nullptr;
  errno = 0;
  double x = std::strtod(v.c_str(), &end);
  if (v.empty() || end != v.c_str() + v.size() || errno != 0)
    throw ConfigError("config key '" + key + "': not a number: '" + v + "'");
  return real(x);
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("config key '" + key + "': expected true/false, got '" + v + "'");
}

inline std::vector<std::string> split_commas(const std::string& v) {
  std::vector<std::string> parts;
  std::string cur;
  for (char c : v) {
    if (c == ',') {
      parts.push_back(trim(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  parts.push_back(trim(cur));
  return parts;
}

inline std::vector<int> parse_widths(const std::string& key, const std::string& v) {
  std::vector<int> out;
  for (const std::string& p : split_commas(v)) out.push_back(int(parse_i64(key, p)));
  return out;
}

inline std::vector<TapId> parse_taps(const std::string& v) {
  std::vector<TapId> out;
  for (const std::string& p : split_commas(v)) {
    TapId t;
    if (p == "B")
      t = TapId::B;
    else if (p == "E")
      t = TapId::E;
    else if (p == "D")
      t = TapId::D;
    else
      throw ConfigError("config key 'taps': expected letters from {B,E,D}, got '" + p + "'");
    for (TapId seen : out)
      if (seen == t) throw ConfigError("config key 'taps': duplicate tap '" + p + "'");
    out.push_back(t);
  }
  return out;
}

/// Shortest decimal form that parses back to exactly the same value.
inline std::string format_real(real v) {
  char buf[64];
  for (int prec = 1; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof buf, "%.*g", prec, double(v));
    if (std::strtod(buf, nullptr) == double(v)) return buf;
  }
  return buf;
}

inline std::string format_widths(const std::vector<int>& w) {
  std::string s;
  for (std::size_t i = 0; i < w.size(); ++i) {
    if (i) s += ',';
    s += std::to_string(w[i]);
  }
  return s;
}

inline std::string format_taps(const std::vector<TapId>& taps) {
  std::string s;
  for (std::size_t i = 0; i < taps.size(); ++i) {
    if (i) s += ',';
    s += tap_name(taps[i]);
  }
  return s;
}

inline const char* method_name(Method m) {
  switch (m) {
    case Method::attnfd: return "attnfd";
    case Method::kd: return "kd";
    case Method::at: return "at";
    default: return "none";
  }
}

inline Method parse_method(const std::string& v) {
  if (v == "attnfd") return Method::attnfd;
  if (v == "kd") return Method::kd;
  if (v == "at") return Method::at;
  if (v == "none") return Method::none;
  throw ConfigError("config key 'method': expected attnfd|kd|at|none, got '" + v + "'");
}

}  // namespace detail

/// Applies key=value overrides from `text` on top of defaults (or `base`).
/// '#' starts a comment; unknown or duplicate keys are errors.
inline RunConfig parse_config_text(const std::string& text, RunConfig base = RunConfig{}) {
  using Setter = std::function<void(RunConfig&, const std::string&, const std::string&)>;
  static const std::map<std::string, Setter> keys = {
      {"seed", [](RunConfig& c, const std::string& k, const std::string& v) {
         c.seed = detail::parse_u64(k, v);
       }},
      {"method", [](RunConfig& c, const std::string&, const std::string& v) {
         c.method = detail::parse_method(v);
       }},
      {"taps", [](RunConfig& c, const std::string&, const std::string& v) {
         c.taps = detail::parse_taps(v);
       }},
      {"data.dir", [](RunConfig& c, const std::string&, const std::string& v) {
         c.data_dir = v;
       }},
      {"data.canvas", [](RunConfig& c, const std::string& k, const std::string& v) {
         c.canvas = int(detail::parse_i64(k, v));
       }},
      {"data.classes", [](RunConfig& c, const std::string& k, const std::string& v) {
         c.classes = int(detail::parse_i64(k, v));
       }},
      {"data.train_count", [](RunConfig& c, const std::string& k, const std::string& v) {
         c.train_count = int(detail::parse_i64(k, v));
       }},
      {"data.val_count", [](RunConfig& c, const std::string& k, const std::string& v) {
         c.val_count = int(detail::parse_i64(k, v));
       }},
      {"data.shapes_min", [](RunConfig& c, const std::string& k, const std::string& v) {
         c.shapes_min = int(detail::parse_i64(k, v));
       }},
      {"data.shapes_max", [](RunConfig& c, const std::string& k, const std::string& v) {
         c.shapes_max = int(detail::parse_i64(k, v));
       }},
      {"data.noise", [](RunConfig& c, const std::string& k, const std::string& v) {
         c.noise = detail::parse_real(k, v);
       }},
      {"net.teacher_widths", [](RunConfig& c, const std::string& k, const std::string& v) {
         c.teacher_widths = detail::parse_widths(k, v);
       }},
      {"net.student_widths", [](RunConfig& c, const std::string& k, const std::string& v) {
         c.student_widths = detail::parse_widths(k, v);
       }},
      {"net.reduction", [](RunConfig& c, const std::string& k, const std::string& v) {
         c.reduction = int(detail::parse_i64(k, v));
       }},
      {"train.lr0", [](RunConfig& c, const std::string& k, const std::string& v) {
         c.lr0 = detail::parse_real(k, v);
       }},
      {"train.lr_min", [](RunConfig& c, const std::string& k, const std::string& v) {
         c.lr_min = detail::parse_real(k, v);
       }},
      {"train.momentum", [](RunConfig& c, const std::string& k, const std::string& v) {
         c.momentum = detail::parse_real(k, v);
       }},
      {"train.weight_decay", [](RunConfig& c, const std::string& k, const std::string& v) {
         c.weight_decay = detail::parse_real(k, v);
       }},
      {"train.epochs", [](RunConfig& c, const std::string& k, const std::string& v) {
         c.epochs = int(detail::parse_i64(k, v));
       }},
      {"train.calib_epochs", [](RunConfig& c, const std::string& k, const std::string& v) {
         c.calib_epochs = int(detail::parse_i64(k, v));
       }},
      {"train.batch_size", [](RunConfig& c, const std::string& k, const std::string& v) {
         c.batch_size = int(detail::parse_i64(k, v));
       }},
      {"train.eval_every", [](RunConfig& c, const std::string& k, const std::string& v) {
         c.eval_every = int(detail::parse_i64(k, v));
       }},
      {"distill.alpha", [](RunConfig& c, const std::string& k, const std::string& v) {
         c.alpha = detail::parse_real(k, v);
       }},
      {"distill.epochs", [](RunConfig& c, const std::string& k, const std::string& v) {
         c.distill_epochs = int(detail::parse_i64(k, v));
       }},
      {"distill.kd_temperature", [](RunConfig& c, const std::string& k, const std::string& v) {
         c.kd_temperature = detail::parse_real(k, v);
       }},
      {"distill.at_power", [](RunConfig& c, const std::string& k, const std::string& v) {
         c.at_power = int(detail::parse_i64(k, v));
       }},
      {"distill.normalize", [](RunConfig& c, const std::string&, const std::string& v) {
         if (v == "channel")
           c.normalize = NormMode::channel_slice;
         else if (v == "pixel")
           c.normalize = NormMode::pixel_vector;
         else
           throw ConfigError("config key 'distill.normalize': expected channel|pixel, got '" +
                             v + "'");
       }},
      {"aug.enabled", [](RunConfig& c, const std::string& k, const std::string& v) {
         c.aug_enabled = detail::parse_bool(k, v);
       }},
      {"aug.scale_min", [](RunConfig& c, const std::string& k, const std::string& v) {
         c.aug_scale_min = detail::parse_real(k, v);
       }},
      {"aug.scale_max", [](RunConfig& c, const std::string& k, const std::string& v) {
         c.aug_scale_max = detail::parse_real(k, v);
       }},
  };

  RunConfig cfg = std::move(base);
  std::set<std::string> seen;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(lineno) + ": expected key=value");
    std::string key = detail::trim(line.substr(0, eq));
    std::string value = detail::trim(line.substr(eq + 1));
    auto it = keys.find(key);
    if (it == keys.end())
      throw ConfigError("config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
    if (!seen.insert(key).second)
      throw ConfigError("config line " + std::to_string(lineno) + ": duplicate key '" + key +
                        "'");
    it->second(cfg, key, value);
  }
  return cfg;
}

inline RunConfig load_config_file(const std::string& path, RunConfig base = RunConfig{}) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open config " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse_config_text(ss.str(), std::move(base));
}

/// Canonical echo of the effective config: every key, sorted, one per line.
/// Reparsing this text reproduces the config exactly.
inline std::string config_to_text(const RunConfig& c) {
  std::map<std::string, std::string> kv;
  kv["seed"] = std::to_string(c.seed);
  kv["method"] = detail::method_name(c.method);
  kv["taps"] = detail::format_taps(c.taps);
  kv["data.dir"] = c.data_dir;
  kv["data.canvas"] = std::to_string(c.canvas);
  kv["data.classes"] = std::to_string(c.classes);
  kv["data.train_count"] = std::to_string(c.train_count);
  kv["data.val_count"] = std::to_string(c.val_count);
  kv["data.shapes_min"] = std::to_string(c.shapes_min);
  kv["data.shapes_max"] = std::to_string(c.shapes_max);
  kv["data.noise"] = detail::format_real(c.noise);
  kv["net.teacher_widths"] = detail::format_widths(c.teacher_widths);
  kv["net.student_widths"] = detail::format_widths(c.student_widths);
  kv["net.reduction"] = std::to_string(c.reduction);
  kv["train.lr0"] = detail::format_real(c.lr0);
  kv["train.lr_min"] = detail::format_real(c.lr_min);
  kv["train.momentum"] = detail::format_real(c.momentum);
  kv["train.weight_decay"] = detail::format_real(c.weight_decay);
  kv["train.epochs"] = std::to_string(c.epochs);
  kv["train.calib_epochs"] = std::to_string(c.calib_epochs);
  kv["train.batch_size"] = std::to_string(c.batch_size);
  kv["train.eval_every"] = std::to_string(c.eval_every);
  kv["distill.alpha"] = detail::format_real(c.alpha);
  kv["distill.epochs"] = std::to_string(c.distill_epochs);
  kv["distill.kd_temperature"] = detail::format_real(c.kd_temperature);
  kv["distill.at_power"] = std::to_string(c.at_power);
  kv["distill.normalize"] = c.normalize == NormMode::channel_slice ? "channel" : "pixel";
  kv["aug.enabled"] = c.aug_enabled ? "true" : "false";
  kv["aug.scale_min"] = detail::format_real(c.aug_scale_min);
  kv["aug.scale_max"] = detail::format_real(c.aug_scale_max);

  std::string out;
  for (const auto& [k, v] : kv) out += k + " = " + v + "\n";
  return out;
}

inline uint64_t config_digest(const RunConfig& c) { return fnv1a64(config_to_text(c)); }

}  // namespace attnfd
