#pragma once

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "affectkit/checkpoint.hpp"
#include "affectkit/data.hpp"
#include "affectkit/errors.hpp"
#include "affectkit/objective.hpp"
#include "affectkit/tensor.hpp"

namespace affectkit {

/// Per-frame predictions of one utterance.
struct FrameTrack {
  std::string id;
  Tensor values;                      ///< [T,2] (valence, arousal)
  std::vector<std::uint8_t> pad_mask;  ///< empty or [T]; nonzero frames are ignored

  std::size_t length() const { return values.dim(0); }
  std::size_t live_frames() const {
    return static_cast<std::size_t>(std::count(pad_mask.begin(), pad_mask.end(), 0)) +
           (pad_mask.empty() ? length() : 0);
  }
};

struct UtterancePrediction {
  std::string id;
  double valence = 0.0;
  double arousal = 0.0;
  std::size_t frames = 0;  ///< unmasked frame count
};

struct LabelRanges {
  std::array<double, 2> valence{-1.0, 1.0};
  std::array<double, 2> arousal{0.0, 1.0};
};

/**
 * Running median over an odd window centred on each sample, edges padded by
 * replicating the first and last values. A window longer than the signal is
 * reduced to the largest odd length that fits.
 */
inline std::vector<double> median_filter(std::span<const double> signal, std::size_t window) {
  if (window == 0 || window % 2 == 0) {
    throw ArgumentError("median window must be odd and positive, got " + std::to_string(window));
  }
  const std::size_t n = signal.size();
  if (n == 0) return {};
  if (window > n) window = n % 2 == 1 ? n : n - 1;
  if (window == 1) return {signal.begin(), signal.end()};
  const auto half = static_cast<std::ptrdiff_t>(window / 2);
  const auto last = static_cast<std::ptrdiff_t>(n) - 1;
  auto at = [&](std::ptrdiff_t i) { return signal[static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(i, 0, last))]; };

  std::vector<double> sorted;
  sorted.reserve(window);
  for (std::ptrdiff_t i = -half; i <= half; ++i) sorted.push_back(at(i));
  std::sort(sorted.begin(), sorted.end());
  std::vector<double> out(n);
  for (std::size_t i = 0;; ++i) {
    out[i] = sorted[window / 2];
    if (i + 1 == n) break;
    const auto centre = static_cast<std::ptrdiff_t>(i);
    sorted.erase(std::lower_bound(sorted.begin(), sorted.end(), at(centre - half)));
    const double incoming = at(centre + half + 1);
    sorted.insert(std::upper_bound(sorted.begin(), sorted.end(), incoming), incoming);
  }
  return out;
}

/// Median-filters each column of the unmasked frames; masked frames are left as they are.
inline FrameTrack filter_track(const FrameTrack& track, std::size_t window_valence = 81,
                               std::size_t window_arousal = 3) {
  FrameTrack out = track;
  std::vector<std::size_t> live;
  for (std::size_t t = 0; t < track.length(); ++t) {
    if (track.pad_mask.empty() || track.pad_mask[t] == 0) live.push_back(t);
  }
  const std::array<std::size_t, 2> windows{window_valence, window_arousal};
  std::vector<double> column(live.size());
  for (std::size_t d = 0; d < 2; ++d) {
    for (std::size_t i = 0; i < live.size(); ++i) column[i] = track.values[live[i] * 2 + d];
    const auto filtered = median_filter(column, windows[d]);
    for (std::size_t i = 0; i < live.size(); ++i) out.values[live[i] * 2 + d] = filtered[i];
  }
  return out;
}

/// Aggregate of the unmasked frames per dimension, clamped into the label ranges.
inline UtterancePrediction utterance_score(const FrameTrack& track, Aggregator agg, const LabelRanges& ranges = {}) {
  if (track.values.rank() != 2 || track.values.dim(1) != 2) {
    throw ShapeError("track " + track.id + " must be [T,2], got " + to_string(track.values.shape()));
  }
  if (!track.pad_mask.empty() && track.pad_mask.size() != track.length()) {
    throw ShapeError("track " + track.id + ": mask length mismatch");
  }
  if (track.live_frames() == 0) throw DataError("track " + track.id + " has every frame masked");
  std::array<std::vector<double>, 2> columns;
  for (std::size_t t = 0; t < track.length(); ++t) {
    columns[0].push_back(track.values[t * 2]);
    columns[1].push_back(track.values[t * 2 + 1]);
  }
  UtterancePrediction p;
  p.id = track.id;
  p.frames = track.live_frames();
  p.valence = std::clamp(aggregate(columns[0], agg, track.pad_mask), ranges.valence[0], ranges.valence[1]);
  p.arousal = std::clamp(aggregate(columns[1], agg, track.pad_mask), ranges.arousal[0], ranges.arousal[1]);
  if (!std::isfinite(p.valence) || !std::isfinite(p.arousal)) {
    throw NumericalError("track " + track.id + " aggregates to a non-finite value");
  }
  return p;
}

/// Video of an utterance id: everything before the last '_'.
inline std::string video_of(const std::string& id) {
  const auto cut = id.rfind('_');
  return cut == std::string::npos ? id : id.substr(0, cut);
}

/**
 * Utterances with fewer than `min_frames` frames are blended with their
 * neighbours: alpha * own + (1 - alpha) * mean(previous, next), where the
 * neighbours are the adjacent list entries of the same video and their
 * values are taken before any blending. An utterance with no neighbour in
 * its video stays as it is.
 */
inline std::vector<UtterancePrediction> smooth_short_utterances(const std::vector<UtterancePrediction>& preds,
                                                                std::size_t min_frames, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ArgumentError("smoothing alpha must lie in [0,1]");
  std::vector<UtterancePrediction> out = preds;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (preds[i].frames >= min_frames) continue;
    const std::string video = video_of(preds[i].id);
    std::vector<const UtterancePrediction*> neighbours;
    if (i > 0 && video_of(preds[i - 1].id) == video) neighbours.push_back(&preds[i - 1]);
    if (i + 1 < preds.size() && video_of(preds[i + 1].id) == video) neighbours.push_back(&preds[i + 1]);
    if (neighbours.empty()) continue;
    double v = 0.0, a = 0.0;
    for (const auto* n : neighbours) {
      v += n->valence;
      a += n->arousal;
    }
    const auto count = static_cast<double>(neighbours.size());
    out[i].valence = alpha * preds[i].valence + (1.0 - alpha) * v / count;
    out[i].arousal = alpha * preds[i].arousal + (1.0 - alpha) * a / count;
  }
  return out;
}

struct PostprocSettings {
  std::size_t window_valence = 81;
  std::size_t window_arousal = 3;
  Aggregator aggregator = Aggregator::median;
  bool smoothing = true;
  std::size_t min_frames = 16;
  double alpha = 0.5;
  LabelRanges ranges;
};

struct EvalReport {
  double ccc_valence = 0.0;
  double ccc_arousal = 0.0;
  std::size_t utterances = 0;
  std::map<std::string, std::string> settings;  ///< echoed post-processing settings
};

/// Golds keyed by id, in the order of `preds`. Any id missing on either side is an error listing them.
inline std::vector<std::array<double, 2>> match_gold(const std::vector<UtterancePrediction>& preds,
                                                     const std::vector<Utterance>& gold) {
  std::map<std::string, std::array<double, 2>> by_id;
  for (const auto& u : gold) by_id[u.id] = {u.valence, u.arousal};
  std::set<std::string> pred_ids;
  std::vector<std::string> extra, missing;
  for (const auto& p : preds) {
    if (!pred_ids.insert(p.id).second) throw DataError("duplicate prediction id " + p.id);
    if (!by_id.contains(p.id)) extra.push_back(p.id);
  }
  for (const auto& u : gold) {
    if (!pred_ids.contains(u.id)) missing.push_back(u.id);
  }
  if (!extra.empty() || !missing.empty()) {
    auto join = [](const std::vector<std::string>& ids) {
      std::string s;
      for (const auto& id : ids) s += (s.empty() ? "" : " ") + id;
      return s.empty() ? std::string("none") : s;
    };
    throw DataError("prediction ids do not match gold ids; missing: " + join(missing) + "; extra: " + join(extra));
  }
  std::vector<std::array<double, 2>> out;
  for (const auto& p : preds) out.push_back(by_id.at(p.id));
  return out;
}

/// CCC per dimension over utterances.
inline EvalReport evaluate(const std::vector<UtterancePrediction>& preds, const std::vector<Utterance>& gold) {
  const auto matched = match_gold(preds, gold);
  std::array<std::vector<double>, 2> p, g;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    p[0].push_back(preds[i].valence);
    p[1].push_back(preds[i].arousal);
    g[0].push_back(matched[i][0]);
    g[1].push_back(matched[i][1]);
  }
  EvalReport r;
  r.utterances = preds.size();
  r.ccc_valence = ccc(p[0], g[0]);
  r.ccc_arousal = ccc(p[1], g[1]);
  return r;
}

/// Shortest text that reads back to exactly `v`.
inline std::string format_real(double v) {
  char buf[64];
  const auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

inline std::string format_real(double v, int significant) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", significant, v);
  return buf;
}

inline std::map<std::string, std::string> describe(const PostprocSettings& s) {
  return {{"aggregator", to_string(s.aggregator)},
          {"window_valence", std::to_string(s.window_valence)},
          {"window_arousal", std::to_string(s.window_arousal)},
          {"smoothing", s.smoothing ? "true" : "false"},
          {"min_frames", std::to_string(s.min_frames)},
          {"alpha", format_real(s.alpha)}};
}

/// What the keep-if-improved runner did per dimension (0 valence, 1 arousal).
struct RunnerTrace {
  std::array<bool, 2> filter_applied{false, false};
  std::array<bool, 2> smoothing_applied{false, false};
  std::array<double, 2> ccc_raw{0.0, 0.0};
  std::array<double, 2> ccc_final{0.0, 0.0};
};

namespace detail {

inline std::vector<UtterancePrediction> score_all(const std::vector<FrameTrack>& tracks, const PostprocSettings& s,
                                                  bool filter) {
  std::vector<UtterancePrediction> out;
  for (const auto& t : tracks) {
    out.push_back(utterance_score(filter ? filter_track(t, s.window_valence, s.window_arousal) : t, s.aggregator,
                                  s.ranges));
  }
  return out;
}

inline std::array<double, 2> ccc_pair(const std::vector<UtterancePrediction>& preds,
                                      const std::vector<std::array<double, 2>>& gold) {
  std::array<std::vector<double>, 2> p, g;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    p[0].push_back(preds[i].valence);
    p[1].push_back(preds[i].arousal);
    g[0].push_back(gold[i][0]);
    g[1].push_back(gold[i][1]);
  }
  return {ccc(p[0], g[0]), ccc(p[1], g[1])};
}

/// Takes dimension d from `candidate` where use[d] holds.
inline std::vector<UtterancePrediction> pick(const std::vector<UtterancePrediction>& base,
                                             const std::vector<UtterancePrediction>& candidate,
                                             std::array<bool, 2> use) {
  std::vector<UtterancePrediction> out = base;
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (use[0]) out[i].valence = candidate[i].valence;
    if (use[1]) out[i].arousal = candidate[i].arousal;
  }
  return out;
}

}  // namespace detail

/**
 * Frame tracks to utterance predictions: median filter, aggregate, smooth
 * short utterances. With `gold` given, each step is kept per dimension only
 * when validation CCC does not decrease; without it every step is applied.
 */
inline std::vector<UtterancePrediction> run_postprocess(const std::vector<FrameTrack>& tracks,
                                                        const PostprocSettings& s,
                                                        const std::vector<Utterance>* gold = nullptr,
                                                        RunnerTrace* trace = nullptr) {
  RunnerTrace local;
  RunnerTrace& tr = trace != nullptr ? *trace : local;
  tr = {};
  auto raw = detail::score_all(tracks, s, false);
  auto filtered = detail::score_all(tracks, s, true);
  if (gold == nullptr) {
    tr.filter_applied = {true, true};
    tr.smoothing_applied = {s.smoothing, s.smoothing};
    return s.smoothing ? smooth_short_utterances(filtered, s.min_frames, s.alpha) : filtered;
  }
  const auto golds = match_gold(raw, *gold);
  tr.ccc_raw = detail::ccc_pair(raw, golds);
  const auto with_filter = detail::ccc_pair(filtered, golds);
  for (std::size_t d = 0; d < 2; ++d) tr.filter_applied[d] = with_filter[d] >= tr.ccc_raw[d];
  auto current = detail::pick(raw, filtered, tr.filter_applied);
  auto current_ccc = detail::ccc_pair(current, golds);
  if (s.smoothing) {
    const auto smoothed = smooth_short_utterances(current, s.min_frames, s.alpha);
    const auto with_smoothing = detail::ccc_pair(smoothed, golds);
    for (std::size_t d = 0; d < 2; ++d) tr.smoothing_applied[d] = with_smoothing[d] >= current_ccc[d];
    current = detail::pick(current, smoothed, tr.smoothing_applied);
    current_ccc = detail::ccc_pair(current, golds);
  }
  tr.ccc_final = current_ccc;
  return current;
}

// ---- files ----

inline void save_tracks(const fs::path& path, const std::vector<FrameTrack>& tracks) {
  std::vector<NamedTensor> entries;
  for (const auto& t : tracks) {
    if (!t.pad_mask.empty() && std::any_of(t.pad_mask.begin(), t.pad_mask.end(), [](auto m) { return m != 0; })) {
      throw ArgumentError("track " + t.id + " has masked frames; only unpadded tracks are stored");
    }
    entries.push_back({t.id, t.values});
  }
  save_tensors(path, entries);
}

inline std::vector<FrameTrack> load_tracks(const fs::path& path) {
  std::vector<FrameTrack> out;
  std::set<std::string> ids;
  for (auto& e : load_tensors(path)) {
    if (e.tensor.rank() != 2 || e.tensor.dim(1) != 2) {
      throw DataError(path.string() + ": track " + e.name + " must be [T,2], got " + to_string(e.tensor.shape()));
    }
    if (!ids.insert(e.name).second) throw DataError(path.string() + ": duplicate track " + e.name);
    out.push_back({e.name, std::move(e.tensor), {}});
  }
  if (out.empty()) throw DataError(path.string() + " holds no tracks");
  return out;
}

inline std::string format_fixed6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  std::string s = buf;
  if (s == "-0.000000") s = "0.000000";
  return s;
}

inline void write_predictions(const fs::path& path, const std::vector<UtterancePrediction>& preds) {
  std::string text = "id,valence,arousal\n";
  for (const auto& p : preds) text += p.id + "," + format_fixed6(p.valence) + "," + format_fixed6(p.arousal) + "\n";
  write_file_bytes(path, text);
}

inline std::vector<UtterancePrediction> read_predictions(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open predictions " + path.string());
  std::string line;
  if (!std::getline(in, line) || detail::strip_cr(line) != "id,valence,arousal") {
    throw DataError(path.string() + " line 1: expected header 'id,valence,arousal'");
  }
  std::vector<UtterancePrediction> out;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    line = detail::strip_cr(line);
    if (line.empty()) continue;
    const std::string where = path.string() + " line " + std::to_string(line_no);
    const auto fields = detail::split_commas(line);
    if (fields.size() != 3 || fields[0].empty()) throw DataError(where + ": expected id,valence,arousal");
    out.push_back({fields[0], detail::parse_real(fields[1], "valence", where),
                   detail::parse_real(fields[2], "arousal", where), 0});
  }
  return out;
}

inline std::string report_text(const EvalReport& r) {
  std::string s = "ccc_valence=" + format_real(r.ccc_valence) + "\nccc_arousal=" + format_real(r.ccc_arousal) +
                  "\nutterances=" + std::to_string(r.utterances) + "\n";
  for (const auto& [k, v] : r.settings) s += k + "=" + v + "\n";
  return s;
}

inline std::string report_json(const EvalReport& r) {
  nlohmann::ordered_json j;
  j["ccc_valence"] = r.ccc_valence;
  j["ccc_arousal"] = r.ccc_arousal;
  j["utterances"] = r.utterances;
  j["settings"] = nlohmann::ordered_json::object();
  for (const auto& [k, v] : r.settings) j["settings"][k] = v;
  return j.dump(2) + "\n";
}

}  // namespace affectkit
