#pragma once

#include <png.h>

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
#include <numbers>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "affectkit/checkpoint.hpp"
#include "affectkit/errors.hpp"
#include "affectkit/parallel.hpp"
#include "affectkit/random.hpp"
#include "affectkit/sequence_batch.hpp"
#include "affectkit/tensor.hpp"

namespace affectkit {

namespace fs = std::filesystem;

inline constexpr const char* kManifestHeader = "id,frames_dir,valence,arousal";
inline constexpr const char* kRawFramesFile = "frames.bin";
inline constexpr const char* kRawFramesEntry = "frames";

enum class FrameFormat { raw, png };

/// One annotated clip. Frames stay on disk until load_frames.
struct Utterance {
  std::string id;
  fs::path frames_dir;
  FrameFormat format = FrameFormat::raw;
  std::vector<fs::path> frame_files;  ///< png only, temporal order
  std::size_t frame_count = 0;
  Shape frame_shape;                  ///< H, W, C
  double valence = 0.0;
  double arousal = 0.0;

  /// Source video: the id up to its last '_' (the whole id when there is none).
  std::string video() const {
    const auto cut = id.rfind('_');
    return cut == std::string::npos ? id : id.substr(0, cut);
  }
};

namespace detail {

inline double parse_real(const std::string& text, const std::string& what, const std::string& where) {
  double value = 0.0;
  const char* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, value);
  if (ec != std::errc() || ptr != end || !std::isfinite(value)) {
    throw DataError(where + ": " + what + " '" + text + "' is not a finite number");
  }
  return value;
}

inline std::vector<std::string> split_commas(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream s(line);
  while (std::getline(s, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline std::string strip_cr(std::string line) {
  if (!line.empty() && line.back() == '\r') line.pop_back();
  return line;
}

inline bool is_png_frame_name(const std::string& name) {
  if (!name.starts_with("frame_") || !name.ends_with(".png")) return false;
  const std::string digits = name.substr(6, name.size() - 10);
  return !digits.empty() && std::all_of(digits.begin(), digits.end(), [](char c) { return c >= '0' && c <= '9'; });
}

struct PngHeader {
  std::size_t height = 0, width = 0, channels = 0;
};

inline PngHeader read_png_header(const fs::path& path, png_image& image) {
  image = {};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str())) {
    throw DataError("cannot read png " + path.string() + ": " + image.message);
  }
  const bool color = (image.format & PNG_FORMAT_FLAG_COLOR) != 0;
  image.format = color ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  return {image.height, image.width, color ? 3u : 1u};
}

/// Locates the frames of one utterance and records count and per-frame shape.
inline void scan_frames(Utterance& u, const std::string& where) {
  if (!fs::is_directory(u.frames_dir)) throw DataError(where + ": missing frames directory " + u.frames_dir.string());
  const fs::path raw = u.frames_dir / kRawFramesFile;
  if (fs::exists(raw)) {
    const ContainerIndex index = load_index(raw);
    if (index.entries.size() != 1 || index.entries[0].first != kRawFramesEntry || index.entries[0].second.size() != 4) {
      throw DataError(where + ": " + raw.string() + " must hold one [T,H,W,C] entry named 'frames'");
    }
    const Shape& s = index.entries[0].second;
    u.format = FrameFormat::raw;
    u.frame_count = s[0];
    u.frame_shape = {s[1], s[2], s[3]};
    return;
  }
  u.format = FrameFormat::png;
  for (const auto& entry : fs::directory_iterator(u.frames_dir)) {
    if (entry.is_regular_file() && is_png_frame_name(entry.path().filename().string())) {
      u.frame_files.push_back(entry.path());
    }
  }
  if (u.frame_files.empty()) {
    throw DataError(where + ": missing frame files in " + u.frames_dir.string() + " (expected " + kRawFramesFile +
                    " or frame_000001.png ...)");
  }
  std::sort(u.frame_files.begin(), u.frame_files.end());
  png_image image;
  const PngHeader h = read_png_header(u.frame_files.front(), image);
  png_image_free(&image);
  u.frame_count = u.frame_files.size();
  u.frame_shape = {h.height, h.width, h.channels};
}

}  // namespace detail

/**
 * Reads a manifest (`id,frames_dir,valence,arousal`). Relative frame
 * directories resolve against the manifest's directory. Errors name the file
 * and the 1-based line number.
 */
inline std::vector<Utterance> load_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest " + path.string());
  std::string line;
  if (!std::getline(in, line) || detail::strip_cr(line) != kManifestHeader) {
    throw DataError("manifest " + path.string() + " line 1: expected header '" + kManifestHeader + "'");
  }
  const fs::path base = path.parent_path();
  std::vector<Utterance> out;
  std::map<std::string, std::size_t> seen;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    line = detail::strip_cr(line);
    if (line.empty()) continue;
    const std::string where = "manifest " + path.string() + " line " + std::to_string(line_no);
    const auto fields = detail::split_commas(line);
    if (fields.size() != 4) {
      throw DataError(where + ": expected 4 fields, got " + std::to_string(fields.size()));
    }
    Utterance u;
    u.id = fields[0];
    if (u.id.empty()) throw DataError(where + ": empty id");
    if (std::any_of(u.id.begin(), u.id.end(), [](unsigned char c) { return c <= ' '; })) {
      throw DataError(where + ": id '" + u.id + "' contains whitespace");
    }
    if (auto it = seen.find(u.id); it != seen.end()) {
      throw DataError(where + ": duplicate id '" + u.id + "' (first on line " + std::to_string(it->second) + ")");
    }
    seen.emplace(u.id, line_no);
    if (fields[1].empty()) throw DataError(where + ": empty frames_dir");
    u.frames_dir = fs::path(fields[1]).is_absolute() ? fs::path(fields[1]) : base / fields[1];
    u.valence = detail::parse_real(fields[2], "valence", where);
    u.arousal = detail::parse_real(fields[3], "arousal", where);
    detail::scan_frames(u, where);
    if (u.frame_count == 0) throw DataError(where + ": utterance has no frames");
    out.push_back(std::move(u));
  }
  return out;
}

inline void write_manifest(const fs::path& path, const std::vector<Utterance>& utterances) {
  std::ostringstream s;
  s << kManifestHeader << '\n';
  s.precision(17);
  for (const auto& u : utterances) {
    fs::path rel = fs::absolute(u.frames_dir).lexically_relative(fs::absolute(path).parent_path());
    if (rel.empty() || *rel.begin() == "..") rel = fs::absolute(u.frames_dir);
    s << u.id << ',' << rel.generic_string() << ',' << u.valence << ',' << u.arousal << '\n';
  }
  write_file_bytes(path, s.str());
}

/// Raw pixel values [T,H,W,C] of one utterance, in [0,255].
inline Tensor load_frames(const Utterance& u) {
  if (u.format == FrameFormat::raw) {
    auto entries = load_tensors(u.frames_dir / kRawFramesFile);
    if (entries.size() != 1 || entries[0].tensor.rank() != 4) {
      throw DataError(u.id + ": raw frame container must hold one [T,H,W,C] entry");
    }
    return std::move(entries[0].tensor);
  }
  const std::size_t h = u.frame_shape.at(0), w = u.frame_shape.at(1), c = u.frame_shape.at(2);
  Tensor out(Shape{u.frame_files.size(), h, w, c});
  std::vector<png_byte> buffer(h * w * c);
  for (std::size_t t = 0; t < u.frame_files.size(); ++t) {
    png_image image;
    const auto header = detail::read_png_header(u.frame_files[t], image);
    if (header.height != h || header.width != w || header.channels != c) {
      png_image_free(&image);
      throw DataError(u.id + ": frame " + u.frame_files[t].filename().string() + " is " +
                      std::to_string(header.height) + "x" + std::to_string(header.width) + "x" +
                      std::to_string(header.channels) + ", expected " + to_string(u.frame_shape));
    }
    if (!png_image_finish_read(&image, nullptr, buffer.data(), 0, nullptr)) {
      throw DataError("cannot decode png " + u.frame_files[t].string() + ": " + image.message);
    }
    std::copy(buffer.begin(), buffer.end(), out.data() + t * buffer.size());
  }
  return out;
}

/// Writes pixels [H,W,C] (C = 1 or 3, values rounded into [0,255]) as an 8-bit PNG.
inline void write_png(const fs::path& path, const Tensor& pixels) {
  if (pixels.rank() != 3 || (pixels.dim(2) != 1 && pixels.dim(2) != 3)) {
    throw ShapeError("write_png expects [H,W,1] or [H,W,3], got " + to_string(pixels.shape()));
  }
  std::vector<png_byte> buffer(pixels.size());
  for (std::size_t i = 0; i < pixels.size(); ++i) {
    buffer[i] = static_cast<png_byte>(std::clamp(std::lround(pixels[i]), 0L, 255L));
  }
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(pixels.dim(1));
  image.height = static_cast<png_uint_32>(pixels.dim(0));
  image.format = pixels.dim(2) == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  fs::create_directories(path.parent_path());
  if (!png_image_write_to_file(&image, path.c_str(), 0, buffer.data(), 0, nullptr)) {
    throw DataError("cannot write png " + path.string() + ": " + image.message);
  }
}

/**
 * Maps pixels [H,W,C] in [0,255] to [-1,1] by x/127.5 - 1 and resizes to
 * side x side with bilinear interpolation (half-pixel centers, edge clamp).
 */
inline Tensor normalize_frame(const Tensor& pixels, std::size_t side) {
  if (pixels.rank() != 3) throw ShapeError("normalize_frame expects [H,W,C], got " + to_string(pixels.shape()));
  for (double v : pixels.values()) {
    if (!(v >= 0.0 && v <= 255.0)) throw DataError("pixel value " + std::to_string(v) + " outside [0,255]");
  }
  const std::size_t h = pixels.dim(0), w = pixels.dim(1), c = pixels.dim(2);
  Tensor scaled(pixels.shape());
  for (std::size_t i = 0; i < pixels.size(); ++i) scaled[i] = pixels[i] / 127.5 - 1.0;
  if (h == side && w == side) return scaled;

  auto source = [](std::size_t i, std::size_t from, std::size_t to) {
    const double x = (static_cast<double>(i) + 0.5) * static_cast<double>(from) / static_cast<double>(to) - 0.5;
    const double clamped = std::clamp(x, 0.0, static_cast<double>(from - 1));
    const auto lo = static_cast<std::size_t>(std::floor(clamped));
    const std::size_t hi = std::min(lo + 1, from - 1);
    return std::tuple{lo, hi, clamped - static_cast<double>(lo)};
  };
  Tensor out(Shape{side, side, c});
  for (std::size_t y = 0; y < side; ++y) {
    const auto [y0, y1, fy] = source(y, h, side);
    for (std::size_t x = 0; x < side; ++x) {
      const auto [x0, x1, fx] = source(x, w, side);
      for (std::size_t k = 0; k < c; ++k) {
        const double top = std::lerp(scaled[(y0 * w + x0) * c + k], scaled[(y0 * w + x1) * c + k], fx);
        const double bottom = std::lerp(scaled[(y1 * w + x0) * c + k], scaled[(y1 * w + x1) * c + k], fx);
        out[(y * side + x) * c + k] = std::lerp(top, bottom, fy);
      }
    }
  }
  return out;
}

/// Inverse of the intensity map, rounded back onto the 0..255 grid.
inline Tensor denormalize(const Tensor& normalized) {
  Tensor out(normalized.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = std::clamp(std::round((normalized[i] + 1.0) * 127.5), 0.0, 255.0);
  }
  return out;
}

/// The utterance's (valence, arousal) pair once per frame.
inline std::vector<std::array<double, 2>> broadcast_labels(const Utterance& u) {
  return std::vector<std::array<double, 2>>(u.frame_count, {u.valence, u.arousal});
}

/// A window of T frame positions inside one utterance.
struct Sequence {
  std::size_t utterance = 0;  ///< index into the corpus
  std::size_t start = 0;
  std::size_t valid = 0;      ///< real frames; positions >= valid repeat the last frame
  std::size_t length = 0;     ///< T

  std::size_t frame(std::size_t t) const { return start + std::min(t, valid - 1); }
  bool padded(std::size_t t) const { return t >= valid; }
};

/**
 * Non-overlapping windows of T frames; a leftover tail becomes one more
 * window made of the last T frames. Utterances shorter than T give a single
 * window padded by repeating the final frame.
 */
inline std::vector<Sequence> make_sequences(const Utterance& u, std::size_t time, std::size_t utterance_index = 0) {
  if (time == 0) throw ArgumentError("sequence length must be at least 1");
  const std::size_t n = u.frame_count;
  if (n == 0) throw DataError("utterance " + u.id + " has no frames");
  std::vector<Sequence> out;
  if (n < time) {
    out.push_back({utterance_index, 0, n, time});
    return out;
  }
  std::size_t start = 0;
  for (; start + time <= n; start += time) out.push_back({utterance_index, start, time, time});
  if (start < n) out.push_back({utterance_index, n - time, time, time});
  return out;
}

inline std::vector<Sequence> make_sequences(const std::vector<Utterance>& corpus, std::size_t time) {
  std::vector<Sequence> out;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    auto seqs = make_sequences(corpus[i], time, i);
    out.insert(out.end(), seqs.begin(), seqs.end());
  }
  return out;
}

enum class BatchMode { train, eval };

/**
 * Groups sequence indices into batches of B. Training shuffles with `seed`
 * and drops a remainder smaller than B; evaluation keeps order and the
 * remainder.
 */
inline std::vector<std::vector<std::size_t>> make_batches(std::size_t sequences, std::size_t batch, BatchMode mode,
                                                          std::uint64_t seed) {
  if (batch < 2) throw ArgumentError("batch size must be at least 2, got " + std::to_string(batch));
  if (mode == BatchMode::train && sequences < batch) {
    throw DataError("training needs at least " + std::to_string(batch) + " sequences, got " +
                    std::to_string(sequences));
  }
  std::vector<std::size_t> order(sequences);
  for (std::size_t i = 0; i < sequences; ++i) order[i] = i;
  if (mode == BatchMode::train) {
    Rng rng(seed);
    rng.shuffle(order.begin(), order.end());
  }
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < sequences; i += batch) {
    const std::size_t end = std::min(sequences, i + batch);
    if (end - i < batch && mode == BatchMode::train) break;
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i), order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return out;
}

/// Utterances with their frames decoded and normalized to [T,side,side,C].
struct Corpus {
  std::vector<Utterance> utterances;
  std::vector<Tensor> frames;
  std::size_t side = 0;
  std::size_t channels = 0;
};

/// Decodes and normalizes every utterance (in parallel across utterances).
inline Corpus load_corpus(std::vector<Utterance> utterances, std::size_t side, std::size_t channels) {
  Corpus corpus;
  corpus.side = side;
  corpus.channels = channels;
  corpus.frames.resize(utterances.size());
  parallel_for(utterances.size(), [&](std::size_t i) {
    const Utterance& u = utterances[i];
    const Tensor pixels = load_frames(u);
    if (pixels.dim(3) != channels) {
      throw DataError(u.id + ": frames have " + std::to_string(pixels.dim(3)) + " channels, config expects " +
                      std::to_string(channels));
    }
    const std::size_t frame_size = pixels.dim(1) * pixels.dim(2) * pixels.dim(3);
    Tensor out(Shape{pixels.dim(0), side, side, channels});
    const std::size_t out_size = side * side * channels;
    for (std::size_t t = 0; t < pixels.dim(0); ++t) {
      Tensor frame(Shape{pixels.dim(1), pixels.dim(2), pixels.dim(3)},
                   std::vector<double>(pixels.data() + t * frame_size, pixels.data() + (t + 1) * frame_size));
      const Tensor norm = normalize_frame(frame, side);
      std::copy(norm.data(), norm.data() + out_size, out.data() + t * out_size);
    }
    corpus.frames[i] = std::move(out);
  });
  corpus.utterances = std::move(utterances);
  return corpus;
}

/// Gathers the listed sequences into one batch.
inline SequenceBatch assemble_batch(const Corpus& corpus, const std::vector<Sequence>& sequences,
                                    const std::vector<std::size_t>& indices) {
  if (indices.empty()) throw ArgumentError("empty batch");
  const std::size_t time = sequences.at(indices[0]).length;
  const std::size_t frame_size = corpus.side * corpus.side * corpus.channels;
  SequenceBatch batch;
  batch.frames = Tensor(Shape{indices.size(), time, corpus.side, corpus.side, corpus.channels});
  batch.pad_mask.assign(indices.size() * time, 0);
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const Sequence& s = sequences.at(indices[b]);
    if (s.length != time) throw ShapeError("batch mixes sequence lengths");
    const Utterance& u = corpus.utterances.at(s.utterance);
    const Tensor& frames = corpus.frames.at(s.utterance);
    for (std::size_t t = 0; t < time; ++t) {
      const double* src = frames.data() + s.frame(t) * frame_size;
      std::copy(src, src + frame_size, batch.frames.data() + (b * time + t) * frame_size);
      batch.pad_mask[b * time + t] = s.padded(t) ? 1 : 0;
    }
    batch.labels.push_back({u.valence, u.arousal});
    batch.source.push_back(u.id);
  }
  return batch;
}

/// Settings of the synthetic corpus generator.
struct SynthOptions {
  std::size_t utterances = 16;
  std::size_t frames_min = 40;
  std::size_t frames_max = 200;
  std::size_t side = 32;
  std::size_t channels = 3;
  std::size_t utterances_per_video = 4;
  std::array<double, 2> valence_range{-1.0, 1.0};
  std::array<double, 2> arousal_range{0.0, 1.0};
  double noise = 2.0;  ///< pixel noise standard deviation
  FrameFormat format = FrameFormat::raw;
  std::uint64_t seed = 0;
};

/**
 * Pixel (y, x) of frame t for labels (v, a):
 *   128 + 80 v + 40 a sin(2 pi x / P + 0.3 t) + noise,  P = side / 4,
 * clamped to [0,255] and rounded. Mean brightness encodes valence; the
 * amplitude of the horizontal stripes (hence the horizontal gradient)
 * encodes arousal.
 */
inline Tensor synth_frames(double valence, double arousal, std::size_t count, const SynthOptions& opt, Rng& rng) {
  const std::size_t side = opt.side, c = opt.channels;
  const double period = static_cast<double>(side) / 4.0;
  Tensor out(Shape{count, side, side, c});
  std::size_t i = 0;
  for (std::size_t t = 0; t < count; ++t) {
    const double phase = 0.3 * static_cast<double>(t);
    for (std::size_t y = 0; y < side; ++y) {
      for (std::size_t x = 0; x < side; ++x) {
        const double clean = 128.0 + 80.0 * valence +
                             40.0 * arousal * std::sin(2.0 * std::numbers::pi * static_cast<double>(x) / period + phase);
        for (std::size_t k = 0; k < c; ++k) {
          const double noisy = opt.noise > 0.0 ? clean + opt.noise * rng.normal() : clean;
          out[i++] = std::clamp(std::round(noisy), 0.0, 255.0);
        }
      }
    }
  }
  return out;
}

/**
 * Writes `utterances` synthetic clips under `dir` (frames/<id>/...) and
 * dir/manifest.csv. Ids are v<video>_<k>; labels are uniform in the
 * configured ranges. The same options give byte-identical output.
 */
inline std::vector<Utterance> synth_corpus(const fs::path& dir, const SynthOptions& opt) {
  if (opt.utterances == 0) throw ArgumentError("synth needs at least one utterance");
  if (opt.side < 12 || opt.side % 4 != 0) throw ArgumentError("synth side must be a multiple of 4 and at least 12");
  if (opt.frames_min == 0 || opt.frames_min > opt.frames_max) throw ArgumentError("synth frame range is empty");
  if (opt.utterances_per_video == 0) throw ArgumentError("utterances_per_video must be positive");
  if (opt.format == FrameFormat::png && opt.channels != 1 && opt.channels != 3) {
    throw ArgumentError("png frames need 1 or 3 channels");
  }
  for (const auto& r : {opt.valence_range, opt.arousal_range}) {
    if (!(r[0] <= r[1])) throw ArgumentError("synth label range is empty");
  }
  std::vector<Utterance> out(opt.utterances);
  parallel_for(opt.utterances, [&](std::size_t i) {
    Rng rng(mix_seed(opt.seed, i));
    Utterance& u = out[i];
    const std::size_t video = i / opt.utterances_per_video, k = i % opt.utterances_per_video;
    char id[32];
    std::snprintf(id, sizeof id, "v%03zu_%02zu", video, k);
    u.id = id;
    u.frame_count = opt.frames_min + rng.below(opt.frames_max - opt.frames_min + 1);
    u.valence = rng.uniform(opt.valence_range[0], opt.valence_range[1]);
    u.arousal = rng.uniform(opt.arousal_range[0], opt.arousal_range[1]);
    u.frames_dir = dir / "frames" / u.id;
    u.format = opt.format;
    u.frame_shape = {opt.side, opt.side, opt.channels};
    const Tensor frames = synth_frames(u.valence, u.arousal, u.frame_count, opt, rng);
    if (fs::exists(u.frames_dir)) fs::remove_all(u.frames_dir);
    if (opt.format == FrameFormat::raw) {
      save_tensors(u.frames_dir / kRawFramesFile, {{kRawFramesEntry, frames}});
      return;
    }
    const std::size_t frame_size = opt.side * opt.side * opt.channels;
    for (std::size_t t = 0; t < u.frame_count; ++t) {
      char name[32];
      std::snprintf(name, sizeof name, "frame_%06zu.png", t + 1);
      Tensor frame(u.frame_shape, std::vector<double>(frames.data() + t * frame_size,
                                                       frames.data() + (t + 1) * frame_size));
      write_png(u.frames_dir / name, frame);
      u.frame_files.push_back(u.frames_dir / name);
    }
  });
  write_manifest(dir / "manifest.csv", out);
  return out;
}

}  // namespace affectkit
