// affectkit command-line tool: synth, train, predict, postprocess, eval, plot.

#include <CLI11.hpp>

#include <chrono>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "affectkit/affectkit.hpp"

namespace fs = std::filesystem;
using namespace affectkit;

namespace {

constexpr int kExitArgument = 2;
constexpr int kExitData = 3;
constexpr int kExitNumerical = 4;

std::string read_text(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

fs::path directory_of(const fs::path& file) {
  return file.has_parent_path() ? file.parent_path() : fs::path(".");
}

Config load_effective(const std::string& config_path, const std::vector<std::string>& overrides) {
  Config cfg = config_path.empty() ? Config{} : load_config(config_path);
  for (const auto& o : overrides) apply_override(cfg, o);
  validate(cfg);
  return cfg;
}

Network build_checked(const ArchitectureSpec& spec) {
  try {
    return build_network(spec);
  } catch (const Error& e) {
    throw ConfigError(std::string("arch: ") + e.what());
  }
}

int cmd_synth(const fs::path& out, SynthOptions opt, const std::string& format) {
  if (format == "raw") {
    opt.format = FrameFormat::raw;
  } else if (format == "png") {
    opt.format = FrameFormat::png;
  } else {
    throw ArgumentError("--format must be raw or png");
  }
  const auto utterances = synth_corpus(out, opt);
  std::cout << "wrote " << utterances.size() << " utterances to " << (out / "manifest.csv").string() << "\n";
  return 0;
}

int cmd_train(const std::string& config_path, const std::vector<std::string>& overrides, const fs::path& train_manifest,
              const fs::path& val_manifest, const fs::path& out) {
  Config cfg = load_effective(config_path, overrides);
  build_checked(cfg.train.arch);
  cfg.train.checkpoint_dir = out;
  fs::create_directories(out);
  write_file_bytes(out / "train.cfg", render_config(cfg));

  const auto& arch = cfg.train.arch;
  const Corpus train_set = load_corpus(load_manifest(train_manifest), arch.input_side, arch.channels);
  const Corpus val_set = load_corpus(load_manifest(val_manifest), arch.input_side, arch.channels);

  std::ofstream log(out / "train.log");
  TrainHooks hooks;
  hooks.log_stream = &log;
  hooks.after_epoch = [](const EpochRecord& r) {
    std::cout << format_epoch(r) << "\n" << std::flush;
    return false;
  };
  try {
    const TrainResult result = train(cfg.train, train_set, val_set, hooks);
    std::cout << "best_epoch=" << result.log.best_epoch << "\n";
    std::cerr << "wall_seconds=" << format_real(result.log.wall_seconds, 4) << "\n";
  } catch (const NumericalError& e) {
    log << "abort " << e.what() << "\n";
    throw;
  }
  return 0;
}

int cmd_predict(const fs::path& checkpoint, const fs::path& manifest, const fs::path& out, std::size_t seq_len,
                std::size_t batch) {
  Checkpoint ckpt = load_checkpoint(checkpoint);
  const Network net = build_checked(ckpt.arch);
  check_parameters(net, ckpt.params, checkpoint.string());
  if (seq_len == 0) seq_len = ckpt.seq_len;
  const Corpus corpus = load_corpus(load_manifest(manifest), ckpt.arch.input_side, ckpt.arch.channels);
  const auto tracks = predict_tracks(net, ckpt.params, corpus, seq_len, batch);
  save_tracks(out, tracks);
  Config echo;
  echo.train.arch = ckpt.arch;
  echo.train.seq_len = seq_len;
  write_file_bytes(directory_of(out) / "predict.cfg", render_config(echo));
  std::cout << "wrote " << tracks.size() << " tracks to " << out.string() << "\n";
  return 0;
}

struct PostprocessFlags {
  std::string tracks, out, gold, config;
  std::vector<std::string> overrides;
  std::size_t window_valence = 81, window_arousal = 3, min_frames = 16;
  std::string agg = "median", smoothing = "true";
  double alpha = 0.5;
};

int cmd_postprocess(const PostprocessFlags& f, const CLI::App& app) {
  Config cfg = f.config.empty() ? Config{} : load_config(f.config);
  for (const auto& o : f.overrides) apply_override(cfg, o);
  auto given = [&app](const char* name) { return app.get_option(name)->count() > 0; };
  // Explicit flags win over the file; untouched flags leave file values alone.
  if (given("--window-valence") || f.config.empty()) cfg.postproc.window_valence = f.window_valence;
  if (given("--window-arousal") || f.config.empty()) cfg.postproc.window_arousal = f.window_arousal;
  if (given("--agg") || f.config.empty()) cfg.postproc.aggregator = parse_aggregator(f.agg);
  if (given("--min-frames") || f.config.empty()) cfg.postproc.min_frames = f.min_frames;
  if (given("--alpha") || f.config.empty()) cfg.postproc.alpha = f.alpha;
  if (given("--smoothing") || f.config.empty()) set_config_value(cfg, "postproc", "smoothing", f.smoothing);
  validate(cfg);

  const auto tracks = load_tracks(f.tracks);
  std::vector<Utterance> gold;
  RunnerTrace trace;
  if (!f.gold.empty()) gold = load_manifest(f.gold);
  const auto preds = run_postprocess(tracks, cfg.postproc, f.gold.empty() ? nullptr : &gold, &trace);
  const fs::path out(f.out);
  write_predictions(out, preds);
  write_file_bytes(directory_of(out) / "postprocess.cfg", render_config(cfg));
  if (!f.gold.empty()) {
    const char* dims[] = {"valence", "arousal"};
    for (int d = 0; d < 2; ++d) {
      std::cout << "filter_" << dims[d] << "=" << (trace.filter_applied[d] ? "kept" : "rejected") << " smoothing_"
                << dims[d] << "=" << (trace.smoothing_applied[d] ? "kept" : "rejected") << "\n";
    }
  }
  std::cout << "wrote " << preds.size() << " predictions to " << out.string() << "\n";
  return 0;
}

int cmd_eval(const fs::path& preds_path, const fs::path& gold_path, const std::string& out_dir) {
  const auto preds = read_predictions(preds_path);
  const auto gold = load_manifest(gold_path);
  EvalReport report = evaluate(preds, gold);
  const fs::path settings = directory_of(preds_path) / "postprocess.cfg";
  if (fs::exists(settings)) report.settings = describe(load_config(settings).postproc);
  const fs::path dir = out_dir.empty() ? directory_of(preds_path) : fs::path(out_dir);
  write_file_bytes(dir / "report.txt", report_text(report));
  write_file_bytes(dir / "report.json", report_json(report));
  std::cout << report_text(report);
  return 0;
}

int cmd_plot(const fs::path& log_path, const fs::path& out, const std::string& preds_path,
             const std::string& gold_path) {
  const TrainLog log = parse_train_log(read_text(log_path));
  std::vector<std::pair<UtterancePrediction, Utterance>> pairs;
  if (!preds_path.empty() || !gold_path.empty()) {
    if (preds_path.empty() || gold_path.empty()) throw ArgumentError("--preds and --gold go together");
    const auto preds = read_predictions(preds_path);
    const auto gold = load_manifest(gold_path);
    const auto matched = match_gold(preds, gold);
    for (std::size_t i = 0; i < preds.size(); ++i) {
      Utterance g;
      g.id = preds[i].id;
      g.valence = matched[i][0];
      g.arousal = matched[i][1];
      pairs.emplace_back(preds[i], g);
    }
  }
  write_file_bytes(out, render_svg(training_panels(log, pairs)));
  std::cout << "wrote " << out.string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"affectkit: CNN-RNN valence/arousal estimation"};
  app.option_defaults()->always_capture_default();
  app.require_subcommand(1);

  // synth
  auto* synth = app.add_subcommand("synth", "Generate a synthetic corpus with a manifest");
  std::string synth_out, synth_format = "raw";
  SynthOptions synth_opt;
  synth->add_option("--out", synth_out, "Output directory")->required();
  synth->add_option("--utterances", synth_opt.utterances, "Number of utterances");
  synth->add_option("--side", synth_opt.side, "Frame side in pixels (multiple of 4)");
  synth->add_option("--seed", synth_opt.seed, "Generator seed");
  synth->add_option("--frames-min", synth_opt.frames_min, "Fewest frames per utterance");
  synth->add_option("--frames-max", synth_opt.frames_max, "Most frames per utterance");
  synth->add_option("--channels", synth_opt.channels, "Channels per frame");
  synth->add_option("--per-video", synth_opt.utterances_per_video, "Utterances per source video");
  synth->add_option("--noise", synth_opt.noise, "Pixel noise standard deviation");
  synth->add_option("--format", synth_format, "Frame storage: raw or png");

  // train
  auto* train_cmd = app.add_subcommand("train", "Train a network");
  std::string train_config, train_manifest, val_manifest, train_out;
  std::vector<std::string> train_overrides;
  train_cmd->add_option("--config", train_config, "Config file ([arch] [train] [data] [postproc])");
  train_cmd->add_option("--train", train_manifest, "Training manifest")->required();
  train_cmd->add_option("--val", val_manifest, "Validation manifest")->required();
  train_cmd->add_option("--out", train_out, "Output directory for checkpoints and log")->required();
  train_cmd->add_option("--set", train_overrides, "Override a config key: section.key=value (repeatable)");
  {
    std::string keys = "Config keys and defaults:\n";
    const Config defaults;
    for (const auto& k : config_keys()) keys += "  " + k.full() + " = " + k.get(defaults) + "    " + k.doc + "\n";
    train_cmd->footer(keys);
  }

  // predict
  auto* predict = app.add_subcommand("predict", "Per-frame predictions for a manifest");
  std::string predict_ckpt, predict_manifest, predict_out;
  std::size_t predict_seq = 0, predict_batch = 4;
  predict->add_option("--checkpoint", predict_ckpt, "Checkpoint written by train")->required();
  predict->add_option("--manifest", predict_manifest, "Manifest to predict")->required();
  predict->add_option("--out", predict_out, "Output tracks file")->required();
  predict->add_option("--seq-len", predict_seq, "Window length (0: the checkpoint's training value)");
  predict->add_option("--batch", predict_batch, "Sequences per forward pass");

  // postprocess
  auto* post = app.add_subcommand("postprocess", "Median filter, aggregate and smooth frame tracks");
  PostprocessFlags pf;
  post->add_option("--tracks", pf.tracks, "Tracks file written by predict")->required();
  post->add_option("--out", pf.out, "Output predictions CSV")->required();
  post->add_option("--window-valence", pf.window_valence, "Median window for valence (odd)");
  post->add_option("--window-arousal", pf.window_arousal, "Median window for arousal (odd)");
  post->add_option("--agg", pf.agg, "Frame aggregation: mean or median");
  post->add_option("--smoothing", pf.smoothing, "Smooth short utterances: true or false");
  post->add_option("--min-frames", pf.min_frames, "Utterances shorter than this are smoothed");
  post->add_option("--alpha", pf.alpha, "Own-value weight when smoothing");
  post->add_option("--gold", pf.gold, "Validation manifest: keep each step only if CCC does not drop");
  post->add_option("--config", pf.config, "Config file; explicit flags override it");
  post->add_option("--set", pf.overrides, "Override a config key: section.key=value (repeatable)");

  // eval
  auto* eval = app.add_subcommand("eval", "CCC of utterance predictions against a manifest");
  std::string eval_preds, eval_gold, eval_out;
  eval->add_option("--preds", eval_preds, "Predictions CSV")->required();
  eval->add_option("--gold", eval_gold, "Gold manifest")->required();
  eval->add_option("--out", eval_out, "Report directory (default: next to the predictions)");

  // plot
  auto* plot = app.add_subcommand("plot", "SVG of training curves and prediction-vs-gold scatter");
  std::string plot_log, plot_out, plot_preds, plot_gold;
  plot->add_option("--log", plot_log, "train.log written by train")->required();
  plot->add_option("--out", plot_out, "Output SVG file")->required();
  plot->add_option("--preds", plot_preds, "Predictions CSV for the scatter panel");
  plot->add_option("--gold", plot_gold, "Gold manifest for the scatter panel");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitArgument;
  }

  try {
    if (*synth) return cmd_synth(synth_out, synth_opt, synth_format);
    if (*train_cmd) return cmd_train(train_config, train_overrides, train_manifest, val_manifest, train_out);
    if (*predict) return cmd_predict(predict_ckpt, predict_manifest, predict_out, predict_seq, predict_batch);
    if (*post) return cmd_postprocess(pf, *post);
    if (*eval) return cmd_eval(eval_preds, eval_gold, eval_out);
    if (*plot) return cmd_plot(plot_log, plot_out, plot_preds, plot_gold);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitArgument;
  } catch (const ArgumentError& e) {
    std::cerr << "argument error: " << e.what() << "\n";
    return kExitArgument;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const std::exception& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  }
  return kExitArgument;
}
