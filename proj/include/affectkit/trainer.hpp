#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "affectkit/checkpoint.hpp"
#include "affectkit/data.hpp"
#include "affectkit/errors.hpp"
#include "affectkit/graph.hpp"
#include "affectkit/model.hpp"
#include "affectkit/objective.hpp"
#include "affectkit/optim.hpp"
#include "affectkit/postproc.hpp"

namespace affectkit {

enum class InitMode { fresh, load_whole, load_components };

inline const char* to_string(InitMode m) {
  switch (m) {
    case InitMode::fresh: return "fresh";
    case InitMode::load_whole: return "load-whole";
    case InitMode::load_components: return "load-components";
  }
  return "?";
}

inline InitMode parse_init_mode(const std::string& s) {
  if (s == "fresh") return InitMode::fresh;
  if (s == "load-whole") return InitMode::load_whole;
  if (s == "load-components") return InitMode::load_components;
  throw ArgumentError("unknown init mode '" + s + "' (expected fresh, load-whole or load-components)");
}

struct TrainConfig {
  ArchitectureSpec arch;
  Aggregator aggregator = Aggregator::median;
  double learning_rate = 0.001;
  OptimizerKind optimizer = OptimizerKind::adam;
  std::size_t batch = 4;
  std::size_t seq_len = 80;
  std::size_t epochs = 10;
  std::uint64_t seed = 0;
  double clip_norm = 5.0;
  LabelRanges ranges;        ///< clamp for per-epoch utterance scores
  InitMode init_mode = InitMode::fresh;
  fs::path init_checkpoint;  ///< load-whole
  fs::path init_a;           ///< load-components: vgg branch checkpoint (empty: fresh)
  fs::path init_b;           ///< load-components: resnet branch checkpoint (empty: fresh)
  fs::path checkpoint_dir;   ///< empty: keep checkpoints in memory only
};

inline void validate(const TrainConfig& cfg) {
  if (!(cfg.learning_rate >= 0.0 && cfg.learning_rate < 1.0)) {
    throw ArgumentError("train.learning_rate must lie in [0,1)");
  }
  if (cfg.batch < 2) throw ArgumentError("train.batch must be at least 2 (the loss correlates across the batch)");
  if (cfg.seq_len == 0) throw ArgumentError("train.seq_len must be at least 1");
  if (!(cfg.clip_norm >= 0.0)) throw ArgumentError("train.clip_norm must be non-negative");
  if (cfg.init_mode == InitMode::load_whole && cfg.init_checkpoint.empty()) {
    throw ArgumentError("init_mode load-whole needs train.init_checkpoint");
  }
  if (cfg.init_mode == InitMode::load_components && cfg.arch.variant != Variant::fusion) {
    throw ArgumentError("init_mode load-components applies to the fusion variant only");
  }
}

// ---- checkpoints ----

/// Parameters plus the architecture that produced them.
struct Checkpoint {
  ArchitectureSpec arch;
  std::size_t seq_len = 80;
  ParameterSet params;
};

inline std::vector<NamedTensor> encode_checkpoint(const Checkpoint& c) {
  const ArchitectureSpec& a = c.arch;
  auto scalar = [](double v) { return Tensor::scalar(v); };
  std::vector<NamedTensor> entries{
      {"arch.backbone", scalar(static_cast<double>(a.backbone))},
      {"arch.variant", scalar(static_cast<double>(a.variant))},
      {"arch.conv_tap", scalar(static_cast<double>(a.conv_tap))},
      {"arch.fusion_fc", scalar(a.fusion_fc)},
      {"arch.branch_b_fc", scalar(a.branch_b_fc)},
      {"arch.resnet_projection", scalar(a.resnet_projection)},
      {"arch.scale", scalar(a.scale)},
      {"arch.input_side", scalar(static_cast<double>(a.input_side))},
      {"arch.channels", scalar(static_cast<double>(a.channels))},
      {"arch.rnn_width", scalar(static_cast<double>(a.rnn_width))},
      {"arch.rnn_layers", scalar(static_cast<double>(a.rnn_layers))},
      {"arch.fusion_fc_width", scalar(static_cast<double>(a.fusion_fc_width))},
      {"arch.dropout_fc", scalar(a.dropout_fc)},
      {"arch.dropout_rnn", scalar(a.dropout_rnn)},
      {"meta.seq_len", scalar(static_cast<double>(c.seq_len))},
  };
  for (const auto& [name, p] : c.params) entries.push_back({name, p.value});
  return entries;
}

inline Checkpoint decode_checkpoint(std::vector<NamedTensor> entries, const std::string& origin) {
  std::map<std::string, double> meta;
  Checkpoint c;
  for (auto& e : entries) {
    if (e.name.starts_with("arch.") || e.name.starts_with("meta.")) {
      meta[e.name] = e.tensor.item();
    } else {
      c.params.emplace(e.name, Parameter{e.tensor, Tensor(e.tensor.shape())});
    }
  }
  auto get = [&](const std::string& key) {
    auto it = meta.find(key);
    if (it == meta.end()) throw DataError(origin + " lacks checkpoint field " + key);
    return it->second;
  };
  auto count = [&](const std::string& key) {
    const double v = get(key);
    if (!(v >= 0.0 && v < 1e9) || v != std::floor(v)) throw DataError(origin + ": bad checkpoint field " + key);
    return static_cast<std::size_t>(v);
  };
  auto code = [&](const std::string& key, std::size_t limit) {
    const std::size_t v = count(key);
    if (v > limit) throw DataError(origin + ": bad checkpoint field " + key);
    return v;
  };
  ArchitectureSpec& a = c.arch;
  a.backbone = static_cast<Backbone>(code("arch.backbone", 1));
  a.variant = static_cast<Variant>(code("arch.variant", static_cast<std::size_t>(Variant::fusion)));
  a.conv_tap = static_cast<ConvTap>(code("arch.conv_tap", 1));
  a.fusion_fc = get("arch.fusion_fc") != 0.0;
  a.branch_b_fc = get("arch.branch_b_fc") != 0.0;
  a.resnet_projection = get("arch.resnet_projection") != 0.0;
  a.scale = get("arch.scale");
  a.input_side = count("arch.input_side");
  a.channels = count("arch.channels");
  a.rnn_width = count("arch.rnn_width");
  a.rnn_layers = count("arch.rnn_layers");
  a.fusion_fc_width = count("arch.fusion_fc_width");
  a.dropout_fc = get("arch.dropout_fc");
  a.dropout_rnn = get("arch.dropout_rnn");
  c.seq_len = count("meta.seq_len");
  return c;
}

inline void save_checkpoint(const fs::path& path, const Checkpoint& c) { save_tensors(path, encode_checkpoint(c)); }

inline Checkpoint load_checkpoint(const fs::path& path) {
  return decode_checkpoint(load_tensors(path), path.string());
}

/// Checks that `params` holds exactly the tensors `net` declares, with matching shapes.
inline void check_parameters(const Network& net, const ParameterSet& params, const std::string& origin) {
  for (const auto& decl : net.params) {
    auto it = params.find(decl.name);
    if (it == params.end()) throw DataError(origin + ": missing tensor " + decl.name);
    if (it->second.value.shape() != decl.shape) {
      throw DataError(origin + ": tensor " + decl.name + " has shape " + to_string(it->second.value.shape()) +
                      ", architecture expects " + to_string(decl.shape));
    }
  }
  if (params.size() != net.params.size()) {
    for (const auto& [name, p] : params) {
      if (!net.has_param(name)) throw DataError(origin + ": unexpected tensor " + name);
    }
  }
}

// ---- initialization ----

/**
 * Fusion parameters from two standalone branch checkpoints. Tensors of
 * checkpoint a go to `fusion.a.*`, of b to `fusion.b.*` (each branch's own
 * output layer is not used); everything else, and any branch whose path is
 * empty, is freshly initialized from `seed`.
 */
inline ParameterSet init_fusion(const Network& net, std::uint64_t seed, const fs::path& checkpoint_a,
                                const fs::path& checkpoint_b) {
  if (net.spec.variant != Variant::fusion) throw ArgumentError("init_fusion needs a fusion network");
  ParameterSet params = init_parameters(net, seed);
  auto load_branch = [&](const fs::path& path, const std::string& prefix) {
    if (path.empty()) return;
    const Checkpoint c = load_checkpoint(path);
    for (const auto& [name, p] : c.params) {
      const std::string target = prefix + name;
      auto it = params.find(target);
      if (it == params.end()) continue;  // the branch's standalone output layer
      if (it->second.value.shape() != p.value.shape()) {
        throw DataError(path.string() + ": tensor " + name + " has shape " + to_string(p.value.shape()) +
                        ", fusion expects " + to_string(it->second.value.shape()) + " for " + target);
      }
      it->second.value = p.value;
    }
    for (const auto& decl : net.params) {
      if (decl.name.starts_with(prefix) && !c.params.contains(decl.name.substr(prefix.size()))) {
        throw DataError(path.string() + ": missing tensor " + decl.name.substr(prefix.size()) + " for " + decl.name);
      }
    }
  };
  load_branch(checkpoint_a, "fusion.a.");
  load_branch(checkpoint_b, "fusion.b.");
  return params;
}

inline ParameterSet initial_parameters(const Network& net, const TrainConfig& cfg) {
  switch (cfg.init_mode) {
    case InitMode::fresh: return init_parameters(net, cfg.seed);
    case InitMode::load_whole: {
      Checkpoint c = load_checkpoint(cfg.init_checkpoint);
      check_parameters(net, c.params, cfg.init_checkpoint.string());
      return std::move(c.params);
    }
    case InitMode::load_components: return init_fusion(net, cfg.seed, cfg.init_a, cfg.init_b);
  }
  throw ArgumentError("bad init mode");
}

// ---- prediction ----

/**
 * Per-frame predictions for every utterance of `corpus`, windowed like
 * training (non-overlapping T-frame windows, final window = last T frames,
 * short utterances padded). Each frame takes the prediction of the first
 * window that covers it; padded positions are dropped.
 */
inline std::vector<FrameTrack> predict_tracks(const Network& net, const ParameterSet& params, const Corpus& corpus,
                                              std::size_t seq_len, std::size_t batch = 4) {
  const auto sequences = make_sequences(corpus.utterances, seq_len);
  std::vector<FrameTrack> tracks;
  std::vector<std::vector<std::uint8_t>> filled;
  for (const auto& u : corpus.utterances) {
    tracks.push_back({u.id, Tensor(Shape{u.frame_count, widths::outputs}), {}});
    filled.emplace_back(u.frame_count, 0);
  }
  for (const auto& group : make_batches(sequences.size(), std::max<std::size_t>(batch, 2), BatchMode::eval, 0)) {
    const SequenceBatch b = assemble_batch(corpus, sequences, group);
    const Tensor out = forward_sequence(net, params, b, Mode::eval);
    for (std::size_t i = 0; i < group.size(); ++i) {
      const Sequence& s = sequences[group[i]];
      for (std::size_t t = 0; t < s.valid; ++t) {
        const std::size_t f = s.start + t;
        if (filled[s.utterance][f]) continue;
        filled[s.utterance][f] = 1;
        for (std::size_t d = 0; d < widths::outputs; ++d) {
          tracks[s.utterance].values[f * widths::outputs + d] = out[(i * seq_len + t) * widths::outputs + d];
        }
      }
    }
  }
  for (const auto& t : tracks) {
    if (!t.values.all_finite()) throw NumericalError("non-finite prediction for " + t.id);
  }
  return tracks;
}

/// Utterance-level CCC of raw (unfiltered) predictions against the corpus labels.
inline std::array<double, 2> corpus_ccc(const Network& net, const ParameterSet& params, const Corpus& corpus,
                                        std::size_t seq_len, Aggregator agg, std::size_t batch = 4,
                                        const LabelRanges& ranges = {}) {
  std::vector<UtterancePrediction> preds;
  for (const auto& t : predict_tracks(net, params, corpus, seq_len, batch)) preds.push_back(utterance_score(t, agg, ranges));
  const EvalReport r = evaluate(preds, corpus.utterances);
  return {r.ccc_valence, r.ccc_arousal};
}

// ---- training ----

struct StepRecord {
  std::size_t step = 0;
  double loss = 0.0;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double ccc_valence = 0.0;
  double ccc_arousal = 0.0;
};

struct TrainLog {
  std::vector<StepRecord> steps;
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;
  double wall_seconds = 0.0;
};

inline std::string format_step(const StepRecord& r) {
  return "step=" + std::to_string(r.step) + " loss=" + format_real(r.loss, 9);
}

inline std::string format_epoch(const EpochRecord& r) {
  return "epoch=" + std::to_string(r.epoch) + " ccc_v=" + format_real(r.ccc_valence, 9) +
         " ccc_a=" + format_real(r.ccc_arousal, 9);
}

struct TrainResult {
  Network net;
  ParameterSet last;
  ParameterSet best;
  TrainLog log;
};

struct TrainHooks {
  std::ostream* log_stream = nullptr;                    ///< receives step/epoch lines as they happen
  std::function<bool(const EpochRecord&)> after_epoch;  ///< return true to stop after this epoch
};

/// Loss of one batch; builds the graph, runs backward into params' grads when `backward` is set.
inline double batch_loss(const Network& net, ParameterSet& params, const SequenceBatch& batch, Aggregator agg,
                         Mode mode, std::uint64_t dropout_seed, bool backward) {
  Graph g(backward ? GradMode::enabled : GradMode::disabled);
  Rng rng(dropout_seed);
  const SequenceTrace trace = trace_sequence(g, net, bind_trainable(g, params), batch.frames, mode, &rng);
  const NodeId loss = ccc_loss_joint(g, trace.output, batch.labels, agg, batch.pad_mask);
  const double value = g.value(loss).item();
  if (backward && std::isfinite(value)) g.backward(loss);
  return value;
}

/**
 * End-to-end training: per step forward, joint CCC loss, backward, clip,
 * update; per epoch an eval-mode pass over `val` scored per utterance with
 * the training aggregator. The epoch with the highest summed validation CCC
 * gives `best`. A non-finite loss aborts with the step number.
 */
inline TrainResult train(const TrainConfig& cfg, const Corpus& train_set, const Corpus& val_set,
                         const TrainHooks& hooks = {}) {
  validate(cfg);
  if (train_set.utterances.empty()) throw DataError("empty training set");
  if (val_set.utterances.empty()) throw DataError("empty validation set");
  const auto t0 = std::chrono::steady_clock::now();
  TrainResult result{build_network(cfg.arch), {}, {}, {}};
  result.last = initial_parameters(result.net, cfg);
  ParameterSet& params = result.last;
  const auto sequences = make_sequences(train_set.utterances, cfg.seq_len);
  Optimizer opt(cfg.optimizer, cfg.learning_rate);
  auto emit = [&](const std::string& line) {
    if (hooks.log_stream != nullptr) *hooks.log_stream << line << '\n' << std::flush;
  };
  auto save = [&](const ParameterSet& p, const char* name) {
    if (!cfg.checkpoint_dir.empty()) save_checkpoint(cfg.checkpoint_dir / name, {cfg.arch, cfg.seq_len, p});
  };

  double best_score = -1e300;
  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto plan = make_batches(sequences.size(), cfg.batch, BatchMode::train, mix_seed(cfg.seed, epoch));
    for (const auto& group : plan) {
      ++step;
      const SequenceBatch batch = assemble_batch(train_set, sequences, group);
      for (auto& [name, p] : params) p.zero_grad();
      const double loss =
          batch_loss(result.net, params, batch, cfg.aggregator, Mode::train, mix_seed(cfg.seed ^ 0x5eedull, step), true);
      result.log.steps.push_back({step, loss});
      emit(format_step(result.log.steps.back()));
      if (!std::isfinite(loss)) {
        throw NumericalError("non-finite loss at step " + std::to_string(step) + " (epoch " + std::to_string(epoch) +
                             ")");
      }
      clip_grad_norm(params, cfg.clip_norm);
      opt.step(params);
    }
    const auto scores = corpus_ccc(result.net, params, val_set, cfg.seq_len, cfg.aggregator, cfg.batch, cfg.ranges);
    const EpochRecord record{epoch, scores[0], scores[1]};
    result.log.epochs.push_back(record);
    emit(format_epoch(record));
    save(params, "last.ckpt");
    if (scores[0] + scores[1] > best_score) {
      best_score = scores[0] + scores[1];
      result.best = params;
      result.log.best_epoch = epoch;
      save(params, "best.ckpt");
    }
    if (hooks.after_epoch && hooks.after_epoch(record)) break;
  }
  if (result.log.epochs.empty()) {
    result.best = params;
    save(params, "last.ckpt");
    save(params, "best.ckpt");
  }
  result.log.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return result;
}

}  // namespace affectkit
