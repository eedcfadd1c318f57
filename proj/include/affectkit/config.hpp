#pragma once

#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "affectkit/errors.hpp"
#include "affectkit/model.hpp"
#include "affectkit/postproc.hpp"
#include "affectkit/trainer.hpp"

namespace affectkit {

/// Everything a config file can set. Sections: [arch], [train], [data], [postproc].
struct Config {
  TrainConfig train;
  PostprocSettings postproc;
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string::npos) return {};
  return s.substr(first, s.find_last_not_of(" \t\r") - first + 1);
}

inline double to_real(const std::string& v) {
  double out = 0.0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size() || !std::isfinite(out)) {
    throw ArgumentError("'" + v + "' is not a finite number");
  }
  return out;
}

/// A real written plainly or as a fraction "a/b".
inline double to_ratio(const std::string& v) {
  const auto slash = v.find('/');
  if (slash == std::string::npos) return to_real(v);
  const double den = to_real(v.substr(slash + 1));
  if (den == 0.0) throw ArgumentError("'" + v + "' divides by zero");
  return to_real(v.substr(0, slash)) / den;
}

inline std::uint64_t to_count(const std::string& v) {
  std::uint64_t out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) throw ArgumentError("'" + v + "' is not a non-negative integer");
  return out;
}

inline bool to_bool(const std::string& v) {
  if (v == "true") return true;
  if (v == "false") return false;
  throw ArgumentError("'" + v + "' is not true or false");
}

inline std::string from_bool(bool b) { return b ? "true" : "false"; }

}  // namespace detail

struct ConfigKey {
  std::string section;
  std::string key;
  std::string doc;
  std::function<std::string(const Config&)> get;
  std::function<void(Config&, const std::string&)> set;

  std::string full() const { return section + "." + key; }
};

/// Every recognised key, in echo order.
inline const std::vector<ConfigKey>& config_keys() {
  using namespace detail;
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> k;
    auto add = [&k](std::string section, std::string key, std::string doc, auto get, auto set) {
      k.push_back({std::move(section), std::move(key), std::move(doc), get, set});
    };
    auto count_str = [](auto v) { return std::to_string(v); };
    // [arch]
    add("arch", "backbone", "vgg or resnet", [](const Config& c) { return std::string(to_string(c.train.arch.backbone)); },
        [](Config& c, const std::string& v) { c.train.arch.backbone = parse_backbone(v); });
    add("arch", "variant", "cnn-only, basic, 1rnn, 2rnn, 2rnn-fc, 3rnn, 3rnn-fc, fc-rnn (resnet) or fusion",
        [](const Config& c) { return std::string(to_string(c.train.arch.variant)); },
        [](Config& c, const std::string& v) { c.train.arch.variant = parse_variant(v); });
    add("arch", "conv_tap", "3rnn conv feature: last or penultimate",
        [](const Config& c) { return std::string(to_string(c.train.arch.conv_tap)); },
        [](Config& c, const std::string& v) { c.train.arch.conv_tap = parse_conv_tap(v); });
    add("arch", "fusion_fc", "fusion: hidden FC before the output",
        [](const Config& c) { return from_bool(c.train.arch.fusion_fc); },
        [](Config& c, const std::string& v) { c.train.arch.fusion_fc = to_bool(v); });
    add("arch", "branch_b_fc", "fusion: FC between the resnet branch and its GRU",
        [](const Config& c) { return from_bool(c.train.arch.branch_b_fc); },
        [](Config& c, const std::string& v) { c.train.arch.branch_b_fc = to_bool(v); });
    add("arch", "resnet_projection", "1x1 projection on shape-changing shortcuts",
        [](const Config& c) { return from_bool(c.train.arch.resnet_projection); },
        [](Config& c, const std::string& v) { c.train.arch.resnet_projection = to_bool(v); });
    add("arch", "scale", "width multiplier in (0,1], e.g. 1/8",
        [](const Config& c) { return format_real(c.train.arch.scale); },
        [](Config& c, const std::string& v) { c.train.arch.scale = to_ratio(v); });
    add("arch", "input_side", "frame side after resizing", [=](const Config& c) { return count_str(c.train.arch.input_side); },
        [](Config& c, const std::string& v) { c.train.arch.input_side = to_count(v); });
    add("arch", "channels", "frame channels", [=](const Config& c) { return count_str(c.train.arch.channels); },
        [](Config& c, const std::string& v) { c.train.arch.channels = to_count(v); });
    add("arch", "rnn_width", "GRU units per layer", [=](const Config& c) { return count_str(c.train.arch.rnn_width); },
        [](Config& c, const std::string& v) { c.train.arch.rnn_width = to_count(v); });
    add("arch", "rnn_layers", "stacked GRU layers", [=](const Config& c) { return count_str(c.train.arch.rnn_layers); },
        [](Config& c, const std::string& v) { c.train.arch.rnn_layers = to_count(v); });
    add("arch", "fusion_fc_width", "units of the hidden head FC",
        [=](const Config& c) { return count_str(c.train.arch.fusion_fc_width); },
        [](Config& c, const std::string& v) { c.train.arch.fusion_fc_width = to_count(v); });
    add("arch", "dropout_fc", "dropout after FC layers", [](const Config& c) { return format_real(c.train.arch.dropout_fc); },
        [](Config& c, const std::string& v) { c.train.arch.dropout_fc = to_real(v); });
    add("arch", "dropout_rnn", "dropout between GRU layers",
        [](const Config& c) { return format_real(c.train.arch.dropout_rnn); },
        [](Config& c, const std::string& v) { c.train.arch.dropout_rnn = to_real(v); });
    // [train]
    add("train", "aggregator", "per-sequence aggregation in the loss: mean or median",
        [](const Config& c) { return std::string(to_string(c.train.aggregator)); },
        [](Config& c, const std::string& v) { c.train.aggregator = parse_aggregator(v); });
    add("train", "learning_rate", "step size", [](const Config& c) { return format_real(c.train.learning_rate); },
        [](Config& c, const std::string& v) { c.train.learning_rate = to_real(v); });
    add("train", "optimizer", "adam or sgd", [](const Config& c) { return std::string(to_string(c.train.optimizer)); },
        [](Config& c, const std::string& v) { c.train.optimizer = parse_optimizer(v); });
    add("train", "batch", "sequences per batch", [=](const Config& c) { return count_str(c.train.batch); },
        [](Config& c, const std::string& v) { c.train.batch = to_count(v); });
    add("train", "seq_len", "frames per sequence", [=](const Config& c) { return count_str(c.train.seq_len); },
        [](Config& c, const std::string& v) { c.train.seq_len = to_count(v); });
    add("train", "epochs", "passes over the training set", [=](const Config& c) { return count_str(c.train.epochs); },
        [](Config& c, const std::string& v) { c.train.epochs = to_count(v); });
    add("train", "seed", "seed for initialization, shuffling and dropout",
        [=](const Config& c) { return count_str(c.train.seed); },
        [](Config& c, const std::string& v) { c.train.seed = to_count(v); });
    add("train", "clip_norm", "global gradient-norm clip (0 disables)",
        [](const Config& c) { return format_real(c.train.clip_norm); },
        [](Config& c, const std::string& v) { c.train.clip_norm = to_real(v); });
    add("train", "init_mode", "fresh, load-whole or load-components",
        [](const Config& c) { return std::string(to_string(c.train.init_mode)); },
        [](Config& c, const std::string& v) { c.train.init_mode = parse_init_mode(v); });
    add("train", "init_checkpoint", "checkpoint for load-whole",
        [](const Config& c) { return c.train.init_checkpoint.string(); },
        [](Config& c, const std::string& v) { c.train.init_checkpoint = v; });
    add("train", "init_a", "load-components: vgg branch checkpoint", [](const Config& c) { return c.train.init_a.string(); },
        [](Config& c, const std::string& v) { c.train.init_a = v; });
    add("train", "init_b", "load-components: resnet branch checkpoint",
        [](const Config& c) { return c.train.init_b.string(); },
        [](Config& c, const std::string& v) { c.train.init_b = v; });
    // [data]
    add("data", "valence_min", "lower end of the valence label range",
        [](const Config& c) { return format_real(c.postproc.ranges.valence[0]); },
        [](Config& c, const std::string& v) { c.postproc.ranges.valence[0] = to_real(v); });
    add("data", "valence_max", "upper end of the valence label range",
        [](const Config& c) { return format_real(c.postproc.ranges.valence[1]); },
        [](Config& c, const std::string& v) { c.postproc.ranges.valence[1] = to_real(v); });
    add("data", "arousal_min", "lower end of the arousal label range",
        [](const Config& c) { return format_real(c.postproc.ranges.arousal[0]); },
        [](Config& c, const std::string& v) { c.postproc.ranges.arousal[0] = to_real(v); });
    add("data", "arousal_max", "upper end of the arousal label range",
        [](const Config& c) { return format_real(c.postproc.ranges.arousal[1]); },
        [](Config& c, const std::string& v) { c.postproc.ranges.arousal[1] = to_real(v); });
    // [postproc]
    add("postproc", "window_valence", "median window for valence (odd)",
        [=](const Config& c) { return count_str(c.postproc.window_valence); },
        [](Config& c, const std::string& v) { c.postproc.window_valence = to_count(v); });
    add("postproc", "window_arousal", "median window for arousal (odd)",
        [=](const Config& c) { return count_str(c.postproc.window_arousal); },
        [](Config& c, const std::string& v) { c.postproc.window_arousal = to_count(v); });
    add("postproc", "aggregator", "frame-to-utterance aggregation: mean or median",
        [](const Config& c) { return std::string(to_string(c.postproc.aggregator)); },
        [](Config& c, const std::string& v) { c.postproc.aggregator = parse_aggregator(v); });
    add("postproc", "smoothing", "blend short utterances with their neighbours",
        [](const Config& c) { return from_bool(c.postproc.smoothing); },
        [](Config& c, const std::string& v) { c.postproc.smoothing = to_bool(v); });
    add("postproc", "min_frames", "utterances shorter than this are smoothed",
        [=](const Config& c) { return count_str(c.postproc.min_frames); },
        [](Config& c, const std::string& v) { c.postproc.min_frames = to_count(v); });
    add("postproc", "alpha", "weight of an utterance's own value when smoothing",
        [](const Config& c) { return format_real(c.postproc.alpha); },
        [](Config& c, const std::string& v) { c.postproc.alpha = to_real(v); });
    return k;
  }();
  return keys;
}

/// Sets section.key from text; errors name the key.
inline void set_config_value(Config& c, const std::string& section, const std::string& key, const std::string& value) {
  for (const auto& k : config_keys()) {
    if (k.section == section && k.key == key) {
      try {
        k.set(c, value);
      } catch (const Error& e) {
        throw ConfigError(section + "." + key + ": " + e.what());
      }
      c.train.ranges = c.postproc.ranges;
      return;
    }
  }
  throw ConfigError("unknown config key " + section + "." + key);
}

/// Cross-field checks once every value is in.
inline void validate(const Config& c) {
  try {
    validate(c.train);
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
  const auto& p = c.postproc;
  if (p.window_valence % 2 == 0) throw ConfigError("postproc.window_valence must be odd");
  if (p.window_arousal % 2 == 0) throw ConfigError("postproc.window_arousal must be odd");
  if (!(p.alpha >= 0.0 && p.alpha <= 1.0)) throw ConfigError("postproc.alpha must lie in [0,1]");
  if (!(p.ranges.valence[0] < p.ranges.valence[1])) throw ConfigError("data.valence_min must be below data.valence_max");
  if (!(p.ranges.arousal[0] < p.ranges.arousal[1])) throw ConfigError("data.arousal_min must be below data.arousal_max");
}

/**
 * Reads `[section]` headers and `key = value` lines into `base`. Blank lines
 * and lines starting with '#' or ';' are ignored.
 */
inline Config parse_config(const std::string& text, const std::string& origin, Config base = {}) {
  std::istringstream in(text);
  std::string line, section;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    line = detail::trim(line);
    if (line.empty() || line[0] == '#' || line[0] == ';') continue;
    const std::string where = origin + " line " + std::to_string(line_no);
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(where + ": malformed section header");
      section = detail::trim(line.substr(1, line.size() - 2));
      if (section != "arch" && section != "train" && section != "data" && section != "postproc") {
        throw ConfigError(where + ": unknown section [" + section + "]");
      }
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + ": expected key = value");
    if (section.empty()) throw ConfigError(where + ": key outside any section");
    try {
      set_config_value(base, section, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError(where + ": " + e.what());
    }
  }
  return base;
}

inline Config load_config(const std::filesystem::path& path, Config base = {}) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  std::stringstream s;
  s << in.rdbuf();
  return parse_config(s.str(), path.string(), std::move(base));
}

/// Applies "section.key=value".
inline void apply_override(Config& c, const std::string& assignment) {
  const auto eq = assignment.find('=');
  const auto dot = assignment.find('.');
  if (eq == std::string::npos || dot == std::string::npos || dot > eq) {
    throw ConfigError("override '" + assignment + "' is not section.key=value");
  }
  set_config_value(c, detail::trim(assignment.substr(0, dot)), detail::trim(assignment.substr(dot + 1, eq - dot - 1)),
                   detail::trim(assignment.substr(eq + 1)));
}

/// Every key with its effective value, parseable by parse_config.
inline std::string render_config(const Config& c) {
  std::string out, section;
  for (const auto& k : config_keys()) {
    if (k.section != section) {
      out += (section.empty() ? "[" : "\n[") + k.section + "]\n";
      section = k.section;
    }
    out += k.key + " = " + k.get(c) + "\n";
  }
  return out;
}

}  // namespace affectkit
