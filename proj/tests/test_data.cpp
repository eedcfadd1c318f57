#include <gtest/gtest.h>

#include <chrono>
#include <fstream>
#include <numbers>
#include <numeric>
#include <set>

#include "affectkit/data.hpp"
#include "affectkit/objective.hpp"
#include "test_support.hpp"

using namespace affectkit;
using affectkit::testing::scratch_dir;

namespace {

void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  std::ofstream(path) << text;
}

// Raw-container frames directory holding `count` constant frames.
void write_raw_frames(const fs::path& dir, std::size_t count, std::size_t side = 4, double value = 100) {
  save_tensors(dir / "frames.bin", {{"frames", Tensor(Shape{count, side, side, 3}, value)}});
}

Utterance utterance_with(std::size_t frames, double v = 0.5, double a = 0.2) {
  Utterance u;
  u.id = "u_0";
  u.frame_count = frames;
  u.valence = v;
  u.arousal = a;
  return u;
}

std::string read_bytes(const fs::path& p) { return read_file_bytes(p); }

// Decodes labels back from synthetic frames: mean brightness for valence,
// RMS of the cyclic horizontal difference for arousal.
std::array<double, 2> decode_labels(const Tensor& frames) {
  const std::size_t t = frames.dim(0), side = frames.dim(1), c = frames.dim(3);
  const double period = static_cast<double>(side) / 4.0;
  double total = 0, squared = 0;
  std::size_t n = 0;
  for (std::size_t f = 0; f < t; ++f) {
    for (std::size_t y = 0; y < side; ++y) {
      for (std::size_t x = 0; x < side; ++x) {
        for (std::size_t k = 0; k < c; ++k) {
          const auto at = [&](std::size_t xx) { return frames[((f * side + y) * side + xx) * c + k]; };
          total += at(x);
          const double d = at((x + 1) % side) - at(x);
          squared += d * d;
          ++n;
        }
      }
    }
  }
  const double mean = total / static_cast<double>(n);
  const double rms = std::sqrt(squared / static_cast<double>(n));
  return {(mean - 128.0) / 80.0, rms / (40.0 * std::sqrt(1.0 - std::cos(2.0 * std::numbers::pi / period)))};
}

}  // namespace

TEST(Manifest, LoadsRowsInOrder) {
  const fs::path dir = scratch_dir("manifest_order");
  for (const char* id : {"a_1", "a_2", "b_1"}) write_raw_frames(dir / "f" / id, 3);
  write_text(dir / "m.csv", "id,frames_dir,valence,arousal\na_1,f/a_1,0.5,0.1\na_2,f/a_2,-0.25,0.9\nb_1,f/b_1,0,0\n");
  const auto utts = load_manifest(dir / "m.csv");
  ASSERT_EQ(utts.size(), 3u);
  EXPECT_EQ(utts[0].id, "a_1");
  EXPECT_EQ(utts[1].id, "a_2");
  EXPECT_EQ(utts[2].id, "b_1");
  EXPECT_DOUBLE_EQ(utts[1].valence, -0.25);
  EXPECT_DOUBLE_EQ(utts[1].arousal, 0.9);
  EXPECT_EQ(utts[0].frame_count, 3u);
  EXPECT_EQ(utts[0].frame_shape, (Shape{4, 4, 3}));
  EXPECT_EQ(utts[1].video(), "a");
}

TEST(Manifest, ErrorsNameTheLine) {
  const fs::path dir = scratch_dir("manifest_errors");
  write_raw_frames(dir / "f" / "a", 2);
  auto expect_error = [&](const std::string& body, const std::string& fragment) {
    write_text(dir / "m.csv", "id,frames_dir,valence,arousal\n" + body);
    try {
      load_manifest(dir / "m.csv");
      ADD_FAILURE() << "no error for " << body;
    } catch (const DataError& e) {
      EXPECT_NE(std::string(e.what()).find(fragment), std::string::npos) << e.what();
    }
  };
  expect_error("a,f/a,0.1,0.2\nb,f/a,high,0.2\n", "line 3");
  expect_error("a,f/a,0.1,0.2\nb,f/a,high,0.2\n", "valence");
  expect_error("a,f/a,0.1,0.2\na,f/a,0.3,0.2\n", "duplicate id 'a'");
  expect_error("a,f/missing,0.1,0.2\n", "line 2");
  expect_error("a,f/a,0.1\n", "expected 4 fields");
  write_text(dir / "bad.csv", "name,dir,v,a\n");
  EXPECT_THROW(load_manifest(dir / "bad.csv"), DataError);
}

TEST(Manifest, PngDirectoriesLoad) {
  const fs::path dir = scratch_dir("manifest_png");
  for (std::size_t t = 1; t <= 3; ++t) {
    char name[32];
    std::snprintf(name, sizeof name, "frame_%06zu.png", t);
    write_png(dir / "f" / name, Tensor(Shape{5, 6, 3}, 10.0 * static_cast<double>(t)));
  }
  write_text(dir / "m.csv", "id,frames_dir,valence,arousal\nclip_1,f,0.5,0.5\n");
  const auto utts = load_manifest(dir / "m.csv");
  ASSERT_EQ(utts[0].format, FrameFormat::png);
  EXPECT_EQ(utts[0].frame_count, 3u);
  const Tensor frames = load_frames(utts[0]);
  EXPECT_EQ(frames.shape(), (Shape{3, 5, 6, 3}));
  EXPECT_EQ(frames[0], 10.0);
  EXPECT_EQ(frames[frames.size() - 1], 30.0);
}

TEST(Manifest, RawDirectoryRoundTripsThroughSynth) {
  const fs::path dir = scratch_dir("manifest_synth");
  SynthOptions opt;
  opt.utterances = 5;
  opt.frames_min = 3;
  opt.frames_max = 9;
  opt.side = 16;
  opt.seed = 4;
  const auto written = synth_corpus(dir, opt);
  const auto loaded = load_manifest(dir / "manifest.csv");
  ASSERT_EQ(loaded.size(), written.size());
  for (std::size_t i = 0; i < loaded.size(); ++i) {
    EXPECT_EQ(loaded[i].id, written[i].id);
    EXPECT_EQ(loaded[i].frame_count, written[i].frame_count);
    EXPECT_EQ(loaded[i].frame_shape, (Shape{16, 16, 3}));
    EXPECT_EQ(loaded[i].valence, written[i].valence);
    EXPECT_EQ(load_frames(loaded[i]).dim(0), loaded[i].frame_count);
  }
}

TEST(Normalize, Endpoints) {
  const auto at = [](double v) { return normalize_frame(Tensor(Shape{1, 1, 1}, v), 1)[0]; };
  EXPECT_DOUBLE_EQ(at(0), -1.0);
  EXPECT_DOUBLE_EQ(at(255), 1.0);
  EXPECT_NEAR(at(128), 0.00392156862745098, 1e-15);
}

TEST(Normalize, ConstantImageStaysConstantAfterResize) {
  const Tensor n = normalize_frame(Tensor(Shape{7, 5, 3}, 200.0), 32);
  EXPECT_EQ(n.shape(), (Shape{32, 32, 3}));
  for (double v : n.values()) EXPECT_NEAR(v, 200.0 / 127.5 - 1.0, 1e-15);
}

TEST(Normalize, RejectsOutOfRange) {
  EXPECT_THROW(normalize_frame(Tensor(Shape{2, 2, 1}, 256.0), 2), DataError);
  EXPECT_THROW(normalize_frame(Tensor(Shape{2, 2, 1}, -1.0), 2), DataError);
}

TEST(Normalize, BilinearMatchesHandComputedUpsample) {
  // 1x2 image [0, 255] upsampled to width 4 with half-pixel centres:
  // source x = -0.25, 0.25, 0.75, 1.25 -> clamp -> 0, 0.25, 0.75, 1.
  const Tensor n = normalize_frame(Tensor(Shape{2, 2, 1}, {0, 255, 0, 255}), 4);
  const double expected[] = {-1.0, -0.5, 0.5, 1.0};
  for (std::size_t y = 0; y < 4; ++y) {
    for (std::size_t x = 0; x < 4; ++x) EXPECT_NEAR(n[y * 4 + x], expected[x], 1e-15);
  }
}

TEST(Normalize, InvertibleUpToQuantization) {
  Rng rng(3);
  Tensor px(Shape{6, 6, 3});
  for (double& v : px.values()) v = static_cast<double>(rng.below(256));
  const Tensor n = normalize_frame(px, 6);
  for (double v : n.values()) {
    EXPECT_GE(v, -1.0);
    EXPECT_LE(v, 1.0);
  }
  EXPECT_EQ(denormalize(n), px);
}

TEST(BroadcastLabels, CopiesThePair) {
  const auto labels = broadcast_labels(utterance_with(3, 0.5, 0.2));
  ASSERT_EQ(labels.size(), 3u);
  for (const auto& l : labels) EXPECT_EQ(l, (std::array<double, 2>{0.5, 0.2}));
  EXPECT_EQ(broadcast_labels(utterance_with(1)).size(), 1u);
}

TEST(MakeSequences, Examples) {
  const auto s = make_sequences(utterance_with(200), 80);
  ASSERT_EQ(s.size(), 3u);
  EXPECT_EQ(s[0].start, 0u);
  EXPECT_EQ(s[1].start, 80u);
  EXPECT_EQ(s[2].start, 120u);
  for (const auto& w : s) EXPECT_EQ(w.valid, 80u);

  const auto exact = make_sequences(utterance_with(80), 80);
  ASSERT_EQ(exact.size(), 1u);
  EXPECT_EQ(exact[0].valid, 80u);

  const auto shortw = make_sequences(utterance_with(5), 80);
  ASSERT_EQ(shortw.size(), 1u);
  std::size_t padded = 0;
  for (std::size_t t = 0; t < 80; ++t) padded += shortw[0].padded(t);
  EXPECT_EQ(padded, 75u);
  EXPECT_EQ(shortw[0].frame(79), 4u);
  EXPECT_THROW(make_sequences(utterance_with(5), 0), ArgumentError);
}

TEST(MakeSequences, WindowsCoverEveryFrame) {
  for (std::size_t n = 1; n <= 60; ++n) {
    for (std::size_t t = 1; t <= 20; ++t) {
      std::vector<int> hits(n, 0);
      for (const auto& w : make_sequences(utterance_with(n), t)) {
        ASSERT_EQ(w.length, t);
        for (std::size_t k = 0; k < t; ++k) {
          ASSERT_LT(w.frame(k), n);
          if (!w.padded(k)) ++hits[w.frame(k)];
        }
      }
      for (int h : hits) ASSERT_GE(h, 1) << "n=" << n << " t=" << t;
    }
  }
}

TEST(MakeBatches, Examples) {
  EXPECT_EQ(make_batches(10, 4, BatchMode::train, 1).size(), 2u);
  const auto eval = make_batches(10, 4, BatchMode::eval, 1);
  ASSERT_EQ(eval.size(), 3u);
  EXPECT_EQ(eval[2].size(), 2u);
  EXPECT_EQ(make_batches(10, 4, BatchMode::train, 9), make_batches(10, 4, BatchMode::train, 9));
  EXPECT_NE(make_batches(40, 4, BatchMode::train, 9), make_batches(40, 4, BatchMode::train, 10));
  EXPECT_THROW(make_batches(3, 4, BatchMode::train, 1), DataError);
  EXPECT_THROW(make_batches(10, 1, BatchMode::eval, 1), ArgumentError);
}

TEST(MakeBatches, TrainBatchesArePermutationPrefix) {
  const auto batches = make_batches(11, 3, BatchMode::train, 5);
  std::set<std::size_t> seen;
  for (const auto& b : batches) {
    EXPECT_EQ(b.size(), 3u);
    for (std::size_t i : b) EXPECT_TRUE(seen.insert(i).second);
  }
  EXPECT_EQ(seen.size(), 9u);
}

TEST(AssembleBatch, LabelsAndMaskFollowSources) {
  const fs::path dir = scratch_dir("assemble");
  SynthOptions opt;
  opt.utterances = 3;
  opt.frames_min = 2;
  opt.frames_max = 7;
  opt.side = 12;
  opt.seed = 11;
  synth_corpus(dir, opt);
  const Corpus corpus = load_corpus(load_manifest(dir / "manifest.csv"), 12, 3);
  const auto seqs = make_sequences(corpus.utterances, 5);
  std::vector<std::size_t> all(seqs.size());
  std::iota(all.begin(), all.end(), 0);
  const SequenceBatch batch = assemble_batch(corpus, seqs, all);
  EXPECT_EQ(batch.frames.shape(), (Shape{seqs.size(), 5, 12, 12, 3}));
  for (std::size_t b = 0; b < seqs.size(); ++b) {
    const Utterance& u = corpus.utterances[seqs[b].utterance];
    EXPECT_EQ(batch.source[b], u.id);
    EXPECT_EQ(batch.labels[b], (std::array<double, 2>{u.valence, u.arousal}));
    for (std::size_t t = 0; t < 5; ++t) {
      EXPECT_EQ(batch.pad_mask[b * 5 + t], (t >= u.frame_count) ? 1 : 0);
    }
  }
  for (double v : batch.frames.values()) {
    ASSERT_GE(v, -1.0);
    ASSERT_LE(v, 1.0);
  }
}

TEST(Synth, ByteIdenticalOnRegeneration) {
  SynthOptions opt;
  opt.utterances = 4;
  opt.frames_min = 5;
  opt.frames_max = 12;
  opt.side = 16;
  opt.seed = 7;
  const fs::path a = scratch_dir("synth_a"), b = scratch_dir("synth_b");
  synth_corpus(a, opt);
  synth_corpus(b, opt);
  EXPECT_EQ(read_bytes(a / "manifest.csv"), read_bytes(b / "manifest.csv"));
  for (const auto& u : load_manifest(a / "manifest.csv")) {
    EXPECT_EQ(read_bytes(u.frames_dir / "frames.bin"), read_bytes(b / "frames" / u.id / "frames.bin"));
  }
  opt.seed = 8;
  const fs::path c = scratch_dir("synth_c");
  synth_corpus(c, opt);
  EXPECT_NE(read_bytes(a / "manifest.csv"), read_bytes(c / "manifest.csv"));
}

TEST(Synth, LabelsDecodeBackAtZeroNoise) {
  SynthOptions opt;
  opt.utterances = 24;
  opt.frames_min = 4;
  opt.frames_max = 10;
  opt.side = 32;
  opt.noise = 0.0;
  opt.seed = 13;
  const fs::path dir = scratch_dir("synth_decode");
  synth_corpus(dir, opt);
  std::vector<double> gv, ga, dv, da;
  for (const auto& u : load_manifest(dir / "manifest.csv")) {
    const auto decoded = decode_labels(load_frames(u));
    gv.push_back(u.valence);
    ga.push_back(u.arousal);
    dv.push_back(decoded[0]);
    da.push_back(decoded[1]);
    EXPECT_GE(u.valence, -1.0);
    EXPECT_LE(u.valence, 1.0);
    EXPECT_GE(u.arousal, 0.0);
    EXPECT_LE(u.arousal, 1.0);
  }
  EXPECT_GT(ccc(dv, gv), 0.99);
  EXPECT_GT(ccc(da, ga), 0.99);
}

TEST(Synth, SixteenUtterancesAtSide32RunInSeconds) {
  SynthOptions opt;
  opt.utterances = 16;
  opt.frames_min = 40;
  opt.frames_max = 200;
  opt.side = 32;
  opt.seed = 1;
  const auto start = std::chrono::steady_clock::now();
  synth_corpus(scratch_dir("synth_timing"), opt);
  EXPECT_LT(std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count(), 10.0);
}

TEST(Synth, PngFormatMatchesRawFrames) {
  SynthOptions opt;
  opt.utterances = 2;
  opt.frames_min = 3;
  opt.frames_max = 3;
  opt.side = 12;
  opt.seed = 2;
  const fs::path raw = scratch_dir("synth_raw"), png = scratch_dir("synth_png");
  synth_corpus(raw, opt);
  opt.format = FrameFormat::png;
  synth_corpus(png, opt);
  const auto a = load_manifest(raw / "manifest.csv"), b = load_manifest(png / "manifest.csv");
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(load_frames(a[i]), load_frames(b[i]));
}
