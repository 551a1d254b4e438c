#pragma once

// Experiment configuration.
//
// Text format: one `key = value` per line; `#` starts a comment; a line
// `[section]` prefixes following keys with `section.`. Lists are comma
// separated. Unknown keys are rejected. See README.md for the key table.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <system_error>
#include <type_traits>
#include <vector>

#include "earth_adapter/adapter.hpp"
#include "earth_adapter/backbone.hpp"

namespace ea::cfg {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class Mode { kPretrain, kDG, kDA };

inline const char* mode_name(Mode m) {
  switch (m) {
    case Mode::kPretrain: return "pretrain";
    case Mode::kDG: return "dg";
    case Mode::kDA: return "da";
  }
  return "?";
}

struct TrainConfig {
  Mode mode = Mode::kDA;

  ViTConfig backbone;
  std::string backbone_checkpoint;  // pretrained backbone+decoder; required for dg/da
  long pretrain_steps = 500;
  double pretrain_lr = 1e-3;
  std::size_t pretrain_batch = 4;

  AdapterConfig adapter;
  bool freq_layers_set = false;  // unset: the last three blocks

  long steps = 2000;
  std::size_t batch = 1;
  double lr_decoder = 1e-4;
  double lr_peft = 1e-4;
  double weight_decay = 0.01;
  double lambda_uda = 0.5;
  double ema_alpha = 0.99;
  std::uint64_t seed = 0;
  long eval_interval = 500;

  std::string benchmark;
  std::string out_dir = "out";

  /// Fills derived defaults and checks ranges; throws ConfigError naming the key.
  void finalize() {
    if (!freq_layers_set) {
      adapter.freq_layers.clear();
      for (std::size_t l = backbone.depth >= 3 ? backbone.depth - 3 : 0; l < backbone.depth; ++l)
        adapter.freq_layers.push_back(l);
      freq_layers_set = true;
    }
    try {
      backbone.validate();
    } catch (const std::exception& e) {
      throw ConfigError(std::string("backbone: ") + e.what());
    }
    for (auto l : adapter.freq_layers)
      if (l >= backbone.depth) throw ConfigError("adapter.freq_layers: layer " + std::to_string(l) + " out of range");
    for (auto l : adapter.layers)
      if (l >= backbone.depth) throw ConfigError("adapter.layers: layer " + std::to_string(l) + " out of range");
    if (!(adapter.rho >= 0.0 && adapter.rho <= 1.0)) throw ConfigError("adapter.cutoff: must lie in [0,1]");
    if (adapter.dim == 0) throw ConfigError("adapter.dim: must be positive");
    if (steps < 0) throw ConfigError("train.steps: must be non-negative");
    if (batch == 0) throw ConfigError("train.batch: must be positive");
    if (!(lr_decoder >= 0.0)) throw ConfigError("train.lr_decoder: must be non-negative");
    if (!(lr_peft >= 0.0)) throw ConfigError("train.lr_peft: must be non-negative");
    if (!(ema_alpha >= 0.0 && ema_alpha < 1.0)) throw ConfigError("train.ema_alpha: must lie in [0,1)");
    if (!(lambda_uda >= 0.0)) throw ConfigError("train.lambda_uda: must be non-negative");
    if (eval_interval <= 0) throw ConfigError("train.eval_interval: must be positive");
    if (pretrain_steps < 0) throw ConfigError("backbone.pretrain_steps: must be non-negative");
    if (pretrain_batch == 0) throw ConfigError("backbone.pretrain_batch: must be positive");
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::string fmt_double(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

template <class T>
T parse_number(const std::string& key, const std::string& v) {
  if constexpr (std::is_unsigned_v<T>) {
    if (!v.empty() && v[0] == '-') throw ConfigError(key + ": must be non-negative, got '" + v + "'");
  }
  T out{};
  const char* end = v.data() + v.size();
  auto [ptr, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || ptr != end || v.empty()) throw ConfigError(key + ": cannot parse '" + v + "'");
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "on") return true;
  if (v == "false" || v == "0" || v == "off") return false;
  throw ConfigError(key + ": expected true/false, got '" + v + "'");
}

inline std::vector<std::size_t> parse_list(const std::string& key, const std::string& v) {
  std::vector<std::size_t> out;
  if (trim(v).empty() || trim(v) == "none") return out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_number<std::size_t>(key, trim(item)));
  return out;
}

inline std::string join(const std::vector<std::size_t>& v) {
  if (v.empty()) return "none";
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

}  // namespace detail

/// Applies one key. Throws ConfigError for unknown keys or malformed values.
inline void set_key(TrainConfig& c, const std::string& key, const std::string& raw) {
  using detail::parse_bool;
  using detail::parse_number;
  const std::string v = detail::trim(raw);
  if (key == "mode") {
    if (v == "pretrain") c.mode = Mode::kPretrain;
    else if (v == "dg") c.mode = Mode::kDG;
    else if (v == "da") c.mode = Mode::kDA;
    else throw ConfigError("mode: expected pretrain, dg or da, got '" + v + "'");
  } else if (key == "backbone.image_size") c.backbone.image_size = parse_number<std::size_t>(key, v);
  else if (key == "backbone.patch") c.backbone.patch_size = parse_number<std::size_t>(key, v);
  else if (key == "backbone.depth") c.backbone.depth = parse_number<std::size_t>(key, v);
  else if (key == "backbone.dim") c.backbone.dim = parse_number<std::size_t>(key, v);
  else if (key == "backbone.heads") c.backbone.heads = parse_number<std::size_t>(key, v);
  else if (key == "backbone.mlp_ratio") c.backbone.mlp_ratio = parse_number<std::size_t>(key, v);
  else if (key == "backbone.decoder_dim") c.backbone.decoder_dim = parse_number<std::size_t>(key, v);
  else if (key == "backbone.classes") c.backbone.num_classes = parse_number<std::size_t>(key, v);
  else if (key == "backbone.checkpoint") c.backbone_checkpoint = v;
  else if (key == "backbone.pretrain_steps") c.pretrain_steps = parse_number<long>(key, v);
  else if (key == "backbone.pretrain_lr") c.pretrain_lr = parse_number<double>(key, v);
  else if (key == "backbone.pretrain_batch") c.pretrain_batch = parse_number<std::size_t>(key, v);
  else if (key == "adapter.dim") c.adapter.dim = parse_number<std::size_t>(key, v);
  else if (key == "adapter.cutoff") c.adapter.rho = parse_number<double>(key, v);
  else if (key == "adapter.freq_layers") {
    c.adapter.freq_layers = detail::parse_list(key, v);
    c.freq_layers_set = true;
  } else if (key == "adapter.layers") {
    // Empty means every block.
    if (v == "none") throw ConfigError(key + ": use 'all' or a layer list; disable experts with adapter.spatial/low/high");
    c.adapter.layers = v == "all" ? std::vector<std::size_t>{} : detail::parse_list(key, v);
  } else if (key == "adapter.alpha_init") c.adapter.alpha_init = parse_number<double>(key, v);
  else if (key == "adapter.spatial") c.adapter.spatial = parse_bool(key, v);
  else if (key == "adapter.low") c.adapter.low = parse_bool(key, v);
  else if (key == "adapter.high") c.adapter.high = parse_bool(key, v);
  else if (key == "train.steps") c.steps = parse_number<long>(key, v);
  else if (key == "train.batch") c.batch = parse_number<std::size_t>(key, v);
  else if (key == "train.lr_decoder") c.lr_decoder = parse_number<double>(key, v);
  else if (key == "train.lr_peft") c.lr_peft = parse_number<double>(key, v);
  else if (key == "train.weight_decay") c.weight_decay = parse_number<double>(key, v);
  else if (key == "train.lambda_uda") c.lambda_uda = parse_number<double>(key, v);
  else if (key == "train.ema_alpha") c.ema_alpha = parse_number<double>(key, v);
  else if (key == "train.seed") c.seed = parse_number<std::uint64_t>(key, v);
  else if (key == "train.eval_interval") c.eval_interval = parse_number<long>(key, v);
  else if (key == "data.benchmark") c.benchmark = v;
  else if (key == "out.dir") c.out_dir = v;
  else throw ConfigError("unknown config key '" + key + "'");
}

inline TrainConfig parse(const std::string& text) {
  TrainConfig c;
  std::istringstream is(text);
  std::string line, section;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
    line = detail::trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError("line " + std::to_string(lineno) + ": malformed section header");
      section = detail::trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    std::string key = detail::trim(line.substr(0, eq));
    if (!section.empty()) key = section + "." + key;
    set_key(c, key, line.substr(eq + 1));
  }
  return c;
}

inline TrainConfig load(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config '" + path.string() + "'");
  std::stringstream ss;
  ss << is.rdbuf();
  return parse(ss.str());
}

/// Canonical default-filled echo; parse(echo(c)) reproduces c.
inline std::string echo(const TrainConfig& c) {
  using detail::fmt_double;
  std::ostringstream os;
  auto b = [](bool v) { return v ? "true" : "false"; };
  os << "mode = " << mode_name(c.mode) << '\n'
     << "backbone.image_size = " << c.backbone.image_size << '\n'
     << "backbone.patch = " << c.backbone.patch_size << '\n'
     << "backbone.depth = " << c.backbone.depth << '\n'
     << "backbone.dim = " << c.backbone.dim << '\n'
     << "backbone.heads = " << c.backbone.heads << '\n'
     << "backbone.mlp_ratio = " << c.backbone.mlp_ratio << '\n'
     << "backbone.decoder_dim = " << c.backbone.decoder_dim << '\n'
     << "backbone.classes = " << c.backbone.num_classes << '\n'
     << "backbone.checkpoint = " << c.backbone_checkpoint << '\n'
     << "backbone.pretrain_steps = " << c.pretrain_steps << '\n'
     << "backbone.pretrain_lr = " << fmt_double(c.pretrain_lr) << '\n'
     << "backbone.pretrain_batch = " << c.pretrain_batch << '\n'
     << "adapter.dim = " << c.adapter.dim << '\n'
     << "adapter.cutoff = " << fmt_double(c.adapter.rho) << '\n'
     << "adapter.freq_layers = " << detail::join(c.adapter.freq_layers) << '\n'
     << "adapter.layers = " << (c.adapter.layers.empty() ? std::string("all") : detail::join(c.adapter.layers)) << '\n'
     << "adapter.alpha_init = " << fmt_double(c.adapter.alpha_init) << '\n'
     << "adapter.spatial = " << b(c.adapter.spatial) << '\n'
     << "adapter.low = " << b(c.adapter.low) << '\n'
     << "adapter.high = " << b(c.adapter.high) << '\n'
     << "train.steps = " << c.steps << '\n'
     << "train.batch = " << c.batch << '\n'
     << "train.lr_decoder = " << fmt_double(c.lr_decoder) << '\n'
     << "train.lr_peft = " << fmt_double(c.lr_peft) << '\n'
     << "train.weight_decay = " << fmt_double(c.weight_decay) << '\n'
     << "train.lambda_uda = " << fmt_double(c.lambda_uda) << '\n'
     << "train.ema_alpha = " << fmt_double(c.ema_alpha) << '\n'
     << "train.seed = " << c.seed << '\n'
     << "train.eval_interval = " << c.eval_interval << '\n'
     << "data.benchmark = " << c.benchmark << '\n'
     << "out.dir = " << c.out_dir << '\n';
  return os.str();
}

}  // namespace ea::cfg
