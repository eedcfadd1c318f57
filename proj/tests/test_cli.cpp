#include <gtest/gtest.h>

#include <nlohmann/json.hpp>

#include "affectkit/affectkit.hpp"
#include "test_support.hpp"

using namespace affectkit;
using affectkit::testing::CliResult;
using affectkit::testing::run_cli;
using affectkit::testing::scratch_dir;
using affectkit::testing::slurp;

namespace {

const std::vector<std::string> kTinyModel{"--set", "arch.scale=1/32", "--set", "arch.input_side=32",
                                          "--set", "arch.rnn_width=8",  "--set", "arch.variant=2rnn",
                                          "--set", "train.seq_len=8",   "--set", "train.epochs=2",
                                          "--set", "train.seed=5"};

std::vector<std::string> concat(std::vector<std::string> a, const std::vector<std::string>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

// Tiny synth -> train run shared by the pipeline tests.
struct Pipeline {
  fs::path dir;
  fs::path corpus;
  fs::path run;

  explicit Pipeline(const std::string& name) : dir(scratch_dir(name)), corpus(dir / "corpus"), run(dir / "run") {
    CliResult r = run_cli({"synth", "--out", corpus.string(), "--utterances", "8", "--side", "32", "--frames-min", "5",
                           "--frames-max", "30", "--seed", "3"},
                          dir);
    EXPECT_EQ(r.code, 0) << r.err;
    r = run_cli(concat({"train", "--train", (corpus / "manifest.csv").string(), "--val",
                        (corpus / "manifest.csv").string(), "--out", run.string()},
                       kTinyModel),
                dir);
    EXPECT_EQ(r.code, 0) << r.err;
  }

  fs::path manifest() const { return corpus / "manifest.csv"; }
};

}  // namespace

TEST(Cli, HelpAndUsageErrors) {
  const fs::path dir = scratch_dir("cli_usage");
  EXPECT_EQ(run_cli({"--help"}, dir).code, 0);
  const CliResult missing = run_cli({"synth"}, dir);
  EXPECT_EQ(missing.code, 2);
  EXPECT_NE(missing.err.find("--out"), std::string::npos) << missing.err;
  EXPECT_EQ(run_cli({"frobnicate"}, dir).code, 2);
  EXPECT_EQ(run_cli({"synth", "--out", (dir / "x").string(), "--side", "30"}, dir).code, 2);
}

TEST(Cli, SynthIsReproducible) {
  const fs::path dir = scratch_dir("cli_synth");
  for (const char* sub : {"a", "b"}) {
    ASSERT_EQ(run_cli({"synth", "--out", (dir / sub).string(), "--utterances", "5", "--side", "16", "--seed", "9",
                       "--frames-min", "3", "--frames-max", "12"},
                      dir)
                  .code,
              0);
  }
  EXPECT_EQ(slurp(dir / "a" / "manifest.csv"), slurp(dir / "b" / "manifest.csv"));
  const auto utts = load_manifest(dir / "a" / "manifest.csv");
  ASSERT_EQ(utts.size(), 5u);
  for (const auto& u : utts) {
    EXPECT_EQ(slurp(u.frames_dir / "frames.bin"), slurp(dir / "b" / "frames" / u.id / "frames.bin"));
  }
}

TEST(Cli, TrainRejectsBadConfigNamingTheKey) {
  const fs::path dir = scratch_dir("cli_bad_config");
  ASSERT_EQ(run_cli({"synth", "--out", (dir / "c").string(), "--utterances", "4", "--side", "32"}, dir).code, 0);
  const std::string manifest = (dir / "c" / "manifest.csv").string();
  const CliResult r =
      run_cli({"train", "--train", manifest, "--val", manifest, "--out", (dir / "run").string(), "--set", "arch.variant=4rnn"},
              dir);
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("arch.variant"), std::string::npos) << r.err;

  affectkit::write_file_bytes(dir / "bad.cfg", "[train]\nlearning_rate = 2\n");
  const CliResult lr = run_cli({"train", "--config", (dir / "bad.cfg").string(), "--train", manifest, "--val", manifest,
                                "--out", (dir / "run").string()},
                               dir);
  EXPECT_EQ(lr.code, 2);
  EXPECT_NE(lr.err.find("learning_rate"), std::string::npos) << lr.err;
}

TEST(Cli, TrainWritesCheckpointsLogAndConfigEcho) {
  const Pipeline p("cli_train");
  for (const char* f : {"last.ckpt", "best.ckpt", "train.log", "train.cfg"}) EXPECT_TRUE(fs::exists(p.run / f)) << f;
  const Config echoed = load_config(p.run / "train.cfg");
  EXPECT_EQ(echoed.train.arch.variant, Variant::rnn2);
  EXPECT_EQ(echoed.train.seq_len, 8u);
  const TrainLog log = parse_train_log(slurp(p.run / "train.log"));
  EXPECT_EQ(log.epochs.size(), 2u);
  EXPECT_FALSE(log.steps.empty());
}

TEST(Cli, PipelineReportMatchesObjective) {
  const Pipeline p("cli_pipeline");
  const fs::path tracks = p.dir / "pred" / "tracks.bin";
  ASSERT_EQ(run_cli({"predict", "--checkpoint", (p.run / "best.ckpt").string(), "--manifest", p.manifest().string(),
                     "--out", tracks.string()},
                    p.dir)
                .code,
            0);
  const fs::path preds = p.dir / "post" / "preds.csv";
  const CliResult post = run_cli({"postprocess", "--tracks", tracks.string(), "--out", preds.string()}, p.dir);
  ASSERT_EQ(post.code, 0) << post.err;
  const CliResult eval = run_cli({"eval", "--preds", preds.string(), "--gold", p.manifest().string(), "--out",
                                  (p.dir / "report").string()},
                                 p.dir);
  ASSERT_EQ(eval.code, 0) << eval.err;

  const auto read = read_predictions(preds);
  const auto gold = load_manifest(p.manifest());
  std::vector<double> pv, pa, gv, ga;
  for (const auto& r : read) {
    const auto it = std::find_if(gold.begin(), gold.end(), [&](const Utterance& u) { return u.id == r.id; });
    ASSERT_NE(it, gold.end());
    pv.push_back(r.valence);
    pa.push_back(r.arousal);
    gv.push_back(it->valence);
    ga.push_back(it->arousal);
  }
  const auto j = nlohmann::json::parse(slurp(p.dir / "report" / "report.json"));
  EXPECT_NEAR(j["ccc_valence"].get<double>(), ccc(pv, gv), 1e-12);
  EXPECT_NEAR(j["ccc_arousal"].get<double>(), ccc(pa, ga), 1e-12);
  EXPECT_EQ(j["utterances"].get<std::size_t>(), gold.size());
  EXPECT_EQ(j["settings"]["window_valence"], "81");
  EXPECT_EQ(slurp(p.dir / "report" / "report.txt"), eval.out);
}

TEST(Cli, PredictIsDeterministicAndHonoursSequenceLength) {
  const Pipeline p("cli_predict");
  std::vector<std::string> args{"predict", "--checkpoint", (p.run / "last.ckpt").string(), "--manifest", p.manifest().string(),
                                "--out"};
  ASSERT_EQ(run_cli(concat(args, {(p.dir / "a.bin").string()}), p.dir).code, 0);
  ASSERT_EQ(run_cli(concat(args, {(p.dir / "b.bin").string()}), p.dir).code, 0);
  EXPECT_EQ(slurp(p.dir / "a.bin"), slurp(p.dir / "b.bin"));
  const auto tracks = load_tracks(p.dir / "a.bin");
  const auto utts = load_manifest(p.manifest());
  ASSERT_EQ(tracks.size(), utts.size());
  for (std::size_t i = 0; i < tracks.size(); ++i) {
    EXPECT_EQ(tracks[i].id, utts[i].id);
    EXPECT_EQ(tracks[i].length(), utts[i].frame_count);
  }
  const Config echo = load_config(p.dir / "predict.cfg");
  EXPECT_EQ(echo.train.seq_len, 8u);
}

TEST(Cli, UnitWindowsAndMeanGiveFrameMeans) {
  const Pipeline p("cli_means");
  const fs::path tracks = p.dir / "tracks.bin";
  ASSERT_EQ(run_cli({"predict", "--checkpoint", (p.run / "last.ckpt").string(), "--manifest", p.manifest().string(),
                     "--out", tracks.string()},
                    p.dir)
                .code,
            0);
  const fs::path preds = p.dir / "out" / "preds.csv";
  ASSERT_EQ(run_cli({"postprocess", "--tracks", tracks.string(), "--out", preds.string(), "--window-valence", "1",
                     "--window-arousal", "1", "--agg", "mean", "--smoothing", "false", "--set", "data.valence_min=-100",
                     "--set", "data.valence_max=100", "--set", "data.arousal_min=-100", "--set", "data.arousal_max=100"},
                    p.dir)
                .code,
            0);
  const auto read = read_predictions(preds);
  const auto ts = load_tracks(tracks);
  ASSERT_EQ(read.size(), ts.size());
  for (std::size_t i = 0; i < ts.size(); ++i) {
    double v = 0, a = 0;
    for (std::size_t t = 0; t < ts[i].length(); ++t) {
      v += ts[i].values[t * 2];
      a += ts[i].values[t * 2 + 1];
    }
    const auto n = static_cast<double>(ts[i].length());
    EXPECT_NEAR(read[i].valence, v / n, 5e-7);
    EXPECT_NEAR(read[i].arousal, a / n, 5e-7);
  }
  const Config echo = load_config(p.dir / "out" / "postprocess.cfg");
  EXPECT_EQ(echo.postproc.window_valence, 1u);
  EXPECT_EQ(echo.postproc.aggregator, Aggregator::mean);
}

TEST(Cli, PostprocessWithGoldReportsDecisions) {
  const Pipeline p("cli_gold");
  const fs::path tracks = p.dir / "tracks.bin";
  ASSERT_EQ(run_cli({"predict", "--checkpoint", (p.run / "last.ckpt").string(), "--manifest", p.manifest().string(),
                     "--out", tracks.string()},
                    p.dir)
                .code,
            0);
  const CliResult r = run_cli({"postprocess", "--tracks", tracks.string(), "--out", (p.dir / "p.csv").string(), "--gold",
                               p.manifest().string()},
                              p.dir);
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("filter_valence="), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("filter_arousal="), std::string::npos) << r.out;
}

TEST(Cli, EvalIdMismatchIsADataError) {
  const fs::path dir = scratch_dir("cli_mismatch");
  ASSERT_EQ(run_cli({"synth", "--out", (dir / "c").string(), "--utterances", "4", "--side", "16"}, dir).code, 0);
  write_predictions(dir / "p.csv", {{"nobody_1", 0.1, 0.2, 1}});
  const CliResult r = run_cli({"eval", "--preds", (dir / "p.csv").string(), "--gold", (dir / "c" / "manifest.csv").string()}, dir);
  EXPECT_EQ(r.code, 3);
  EXPECT_NE(r.err.find("nobody_1"), std::string::npos) << r.err;
}

TEST(Cli, NanDuringTrainingExitsFour) {
  const fs::path dir = scratch_dir("cli_nan");
  ASSERT_EQ(run_cli({"synth", "--out", (dir / "c").string(), "--utterances", "8", "--side", "32", "--frames-min", "5",
                     "--frames-max", "10"},
                    dir)
                .code,
            0);
  Config c;
  for (std::size_t i = 0; i + 1 < kTinyModel.size(); i += 2) apply_override(c, kTinyModel[i + 1]);
  const Network net = build_network(c.train.arch);
  ParameterSet params = init_parameters(net, 1);
  params.at("out.bias").value[1] = std::numeric_limits<double>::infinity();
  save_checkpoint(dir / "inf.ckpt", {c.train.arch, 8, params});
  const std::string manifest = (dir / "c" / "manifest.csv").string();
  const CliResult r = run_cli(concat({"train", "--train", manifest, "--val", manifest, "--out", (dir / "run").string(),
                                      "--set", "train.init_mode=load-whole", "--set",
                                      "train.init_checkpoint=" + (dir / "inf.ckpt").string()},
                                     kTinyModel),
                              dir);
  EXPECT_EQ(r.code, 4) << r.err;
  EXPECT_NE(r.err.find("non-finite loss at step 1"), std::string::npos) << r.err;
  EXPECT_NE(slurp(dir / "run" / "train.log").find("abort"), std::string::npos);
}

TEST(Cli, PlotIsDeterministicWithDataExtents) {
  const fs::path dir = scratch_dir("cli_plot");
  affectkit::write_file_bytes(dir / "train.log",
                              "step=1 loss=2\nstep=2 loss=1.5\nstep=3 loss=1\nepoch=1 ccc_v=0.1 ccc_a=0.3\n"
                              "epoch=2 ccc_v=0.5 ccc_a=0.2\n");
  ASSERT_EQ(run_cli({"plot", "--log", (dir / "train.log").string(), "--out", (dir / "a.svg").string()}, dir).code, 0);
  ASSERT_EQ(run_cli({"plot", "--log", (dir / "train.log").string(), "--out", (dir / "b.svg").string()}, dir).code, 0);
  const std::string svg = slurp(dir / "a.svg");
  EXPECT_EQ(svg, slurp(dir / "b.svg"));
  // Steps 1..3 and losses 1..2, padded by 5% of the span.
  EXPECT_NE(svg.find("data-x-min=\"0.9\" data-x-max=\"3.1\" data-y-min=\"0.95\" data-y-max=\"2.05\""), std::string::npos)
      << svg;
  // Epochs 1..2, CCC 0.1..0.5.
  EXPECT_NE(svg.find("data-x-min=\"0.95\" data-x-max=\"2.05\" data-y-min=\"0.08\" data-y-max=\"0.52\""), std::string::npos)
      << svg;

  affectkit::write_file_bytes(dir / "empty.log", "nothing here\n");
  EXPECT_EQ(run_cli({"plot", "--log", (dir / "empty.log").string(), "--out", (dir / "c.svg").string()}, dir).code, 3);
}
