#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "affectkit/model.hpp"
#include "test_support.hpp"

using namespace affectkit;

namespace {

ArchitectureSpec spec_of(Backbone backbone, Variant variant, double scale, std::size_t side) {
  ArchitectureSpec s;
  s.backbone = backbone;
  s.variant = variant;
  s.scale = scale;
  s.input_side = side;
  return s;
}

// Every buildable configuration: nine single-branch variants (3rnn twice,
// once per conv tap) and the four fusion combinations.
std::vector<std::pair<std::string, ArchitectureSpec>> all_configurations(double scale, std::size_t side) {
  std::vector<std::pair<std::string, ArchitectureSpec>> out;
  for (Variant v : {Variant::cnn_only, Variant::basic, Variant::rnn1, Variant::rnn2, Variant::rnn2_fc, Variant::rnn3,
                    Variant::rnn3_fc}) {
    out.emplace_back(std::string("vgg/") + to_string(v), spec_of(Backbone::vgg, v, scale, side));
  }
  auto penultimate = spec_of(Backbone::vgg, Variant::rnn3, scale, side);
  penultimate.conv_tap = ConvTap::penultimate;
  out.emplace_back("vgg/3rnn-penultimate", penultimate);
  out.emplace_back("resnet/basic", spec_of(Backbone::resnet, Variant::basic, scale, side));
  out.emplace_back("resnet/fc-rnn", spec_of(Backbone::resnet, Variant::fc_rnn, scale, side));
  for (bool branch_fc : {false, true}) {
    for (bool fusion_fc : {false, true}) {
      auto s = spec_of(Backbone::vgg, Variant::fusion, scale, side);
      s.branch_b_fc = branch_fc;
      s.fusion_fc = fusion_fc;
      out.emplace_back("fusion/b_fc=" + std::to_string(branch_fc) + "/fc=" + std::to_string(fusion_fc), s);
    }
  }
  return out;
}

std::set<std::string> inventory(const Network& net) {
  std::set<std::string> names;
  for (const auto& p : net.params) names.insert(p.name);
  return names;
}

// ---- independent parameter-count arithmetic ----

std::size_t scaled(double scale, std::size_t w) { return std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(scale * static_cast<double>(w)))); }
std::size_t conv_params(std::size_t k, std::size_t cin, std::size_t cout) { return k * k * cin * cout + cout; }
std::size_t dense_params(std::size_t in, std::size_t out) { return in * out + out; }
std::size_t gru_params(std::size_t in, std::size_t width) { return 3 * width * (in + width) + 3 * width; }
std::size_t gru_stack(std::size_t in, std::size_t width) { return gru_params(in, width) + gru_params(width, width); }

struct VggCount {
  std::size_t conv = 0;
  std::size_t last_conv_flat = 0, pool_flat = 0, fc1 = 0;
};

VggCount vgg_count(double scale, std::size_t side, std::size_t channels) {
  const std::size_t widths[] = {64, 128, 256, 512, 512};
  const std::size_t convs[] = {2, 2, 3, 3, 3};
  VggCount c;
  std::size_t cin = channels;
  for (int b = 0; b < 5; ++b) {
    const std::size_t w = scaled(scale, widths[b]);
    for (std::size_t i = 0; i < convs[b]; ++i) {
      c.conv += conv_params(3, cin, w);
      cin = w;
    }
    if (b == 4) c.last_conv_flat = side * side * w;
    side /= 2;
  }
  c.pool_flat = side * side * cin;
  c.fc1 = scaled(scale, 4096);
  c.conv += dense_params(c.pool_flat, c.fc1);
  return c;
}

std::size_t resnet_count(double scale, std::size_t channels, bool fc, std::size_t* features) {
  const std::size_t bases[] = {64, 128, 256, 512};
  const std::size_t blocks[] = {3, 4, 6, 3};
  std::size_t cin = scaled(scale, 64);
  std::size_t n = conv_params(7, channels, cin);
  for (int s = 0; s < 4; ++s) {
    const std::size_t base = scaled(scale, bases[s]), out = 4 * base;
    for (std::size_t b = 0; b < blocks[s]; ++b) {
      n += conv_params(1, cin, base) + conv_params(3, base, base) + conv_params(1, base, out);
      if (b == 0) n += conv_params(1, cin, out);  // every stage entry changes width or stride
      cin = out;
    }
  }
  *features = cin;
  if (fc) {
    n += dense_params(cin, scaled(scale, 4096));
    *features = scaled(scale, 4096);
  }
  return n;
}

std::size_t expected_count(const ArchitectureSpec& s) {
  const std::size_t m = s.rnn_width;
  if (s.backbone == Backbone::resnet) {
    std::size_t f = 0;
    const std::size_t n = resnet_count(s.scale, s.channels, s.variant == Variant::fc_rnn, &f);
    return n + gru_stack(f, m) + dense_params(m, 2);
  }
  const VggCount v = vgg_count(s.scale, s.input_side, s.channels);
  const std::size_t fc_w = s.fusion_fc_width;
  switch (s.variant) {
    case Variant::cnn_only: {
      const std::size_t fc2 = scaled(s.scale, 2048);
      return v.conv + dense_params(v.fc1, fc2) + dense_params(fc2, 2);
    }
    case Variant::basic: return v.conv + gru_stack(v.fc1, m) + dense_params(m, 2);
    case Variant::rnn1: return v.conv + gru_stack(v.last_conv_flat + v.pool_flat + v.fc1, m) + dense_params(m, 2);
    case Variant::rnn2: return v.conv + gru_stack(v.pool_flat, m) + gru_stack(v.fc1, m) + dense_params(2 * m, 2);
    case Variant::rnn2_fc:
      return v.conv + gru_stack(v.pool_flat, m) + gru_stack(v.fc1, m) + dense_params(2 * m, fc_w) + dense_params(fc_w, 2);
    case Variant::rnn3:
      return v.conv + gru_stack(v.last_conv_flat, m) + gru_stack(v.pool_flat, m) + gru_stack(v.fc1, m) +
             dense_params(3 * m, 2);
    case Variant::rnn3_fc:
      return v.conv + gru_stack(v.last_conv_flat, m) + gru_stack(v.pool_flat, m) + gru_stack(v.fc1, m) +
             dense_params(3 * m, fc_w) + dense_params(fc_w, 2);
    case Variant::fusion: {
      std::size_t f = 0;
      const std::size_t b = resnet_count(s.scale, s.channels, s.branch_b_fc, &f) + gru_stack(f, m);
      const std::size_t a = v.conv + gru_stack(v.fc1, m);
      const std::size_t head = s.fusion_fc ? dense_params(2 * m, fc_w) + dense_params(fc_w, 2) : dense_params(2 * m, 2);
      return a + b + head;
    }
    default: return 0;
  }
}

Tensor random_frames(std::size_t b, std::size_t t, std::size_t side, std::uint64_t seed) {
  Rng rng(seed);
  Tensor f(Shape{b, t, side, side, 3});
  for (double& v : f.values()) v = rng.uniform(-1, 1);
  return f;
}

}  // namespace

TEST(Builders, EveryConfigurationBuildsAtFullAndEighthScale) {
  for (auto [scale, side] : {std::pair{1.0, std::size_t{96}}, std::pair{0.125, std::size_t{32}}}) {
    for (const auto& [label, spec] : all_configurations(scale, side)) {
      SCOPED_TRACE(label + " scale " + std::to_string(scale));
      Network net;
      ASSERT_NO_THROW(net = build_network(spec));
      EXPECT_EQ(net.parameter_count(), expected_count(spec));
      // Two outputs per frame.
      const std::string out = net.heads.empty() ? net.frame_output + ".weight" : net.output + ".weight";
      auto it = std::find_if(net.params.begin(), net.params.end(), [&](const ParamDecl& p) { return p.name == out; });
      ASSERT_NE(it, net.params.end());
      EXPECT_EQ(it->shape.back(), 2u);
      // Every head and layer input resolves to a declared tap.
      for (const auto& l : net.layers) {
        for (const auto& in : l.inputs) EXPECT_TRUE(net.taps.contains(in)) << in;
      }
      for (const auto& h : net.heads) {
        EXPECT_TRUE(net.taps.contains(h.input)) << h.input;
        for (const auto& s : h.sources) EXPECT_TRUE(net.taps.contains(s)) << s;
      }
      // Builders are pure.
      EXPECT_EQ(inventory(build_network(spec)), inventory(net));
    }
  }
}

TEST(Builders, GoldenEighthScaleCounts) {
  EXPECT_EQ(build_network(spec_of(Backbone::vgg, Variant::rnn3, 0.125, 32)).parameter_count(), 1028778u);
}

TEST(Builders, FullScaleWidths) {
  const Network cnn = build_network(spec_of(Backbone::vgg, Variant::cnn_only, 1.0, 96));
  EXPECT_EQ(cnn.taps.at("pool5"), (Shape{3, 3, 512}));
  EXPECT_EQ(cnn.layer("fc1").out_shape, Shape{4096});
  EXPECT_EQ(cnn.taps.at("pool5_flat"), Shape{4608});
  EXPECT_EQ(cnn.layer("fc2").out_shape, Shape{2048});

  const Network rnn1 = build_network(spec_of(Backbone::vgg, Variant::rnn1, 1.0, 96));
  EXPECT_EQ(rnn1.taps.at("conv5_3"), (Shape{6, 6, 512}));
  ASSERT_EQ(rnn1.heads.size(), 1u);
  EXPECT_EQ(rnn1.heads[0].input_width, 27136u);
  EXPECT_EQ(rnn1.heads[0].input_width, 6u * 6 * 512 + 3 * 3 * 512 + 4096);
}

TEST(Builders, EighthScaleWidths) {
  const Network net = build_network(spec_of(Backbone::vgg, Variant::cnn_only, 0.125, 32));
  EXPECT_EQ(net.taps.at("pool5"), (Shape{1, 1, 64}));
  EXPECT_EQ(net.layer("fc1").out_shape, Shape{512});
  EXPECT_THROW(build_network(spec_of(Backbone::vgg, Variant::basic, 0.125, 48)), ShapeError);
}

TEST(Builders, RnnTapsFollowTheVariant) {
  auto sources = [](const ArchitectureSpec& s) {
    std::vector<std::vector<std::string>> out;
    for (const auto& h : build_network(s).heads) out.push_back(h.sources);
    return out;
  };
  using V = std::vector<std::vector<std::string>>;
  EXPECT_EQ(sources(spec_of(Backbone::vgg, Variant::basic, 0.125, 32)), (V{{"fc1"}}));
  EXPECT_EQ(sources(spec_of(Backbone::vgg, Variant::rnn1, 0.125, 32)), (V{{"conv5_3", "pool5", "fc1"}}));
  EXPECT_EQ(sources(spec_of(Backbone::vgg, Variant::rnn2, 0.125, 32)), (V{{"pool5"}, {"fc1"}}));
  EXPECT_EQ(sources(spec_of(Backbone::vgg, Variant::rnn3, 0.125, 32)), (V{{"conv5_3"}, {"pool5"}, {"fc1"}}));
  auto pen = spec_of(Backbone::vgg, Variant::rnn3_fc, 0.125, 32);
  pen.conv_tap = ConvTap::penultimate;
  EXPECT_EQ(sources(pen), (V{{"conv5_2"}, {"pool5"}, {"fc1"}}));

  const Network rnn3 = build_network(spec_of(Backbone::vgg, Variant::rnn3, 1.0, 96));
  std::size_t concat = 0;
  for (const auto& h : rnn3.heads) concat += h.width;
  EXPECT_EQ(concat, 384u);
}

TEST(Builders, FcVariantsDifferByOneLayer) {
  auto diff = [](const ArchitectureSpec& a, const ArchitectureSpec& b) {
    const auto x = inventory(build_network(a)), y = inventory(build_network(b));
    std::vector<std::string> d;
    std::set_symmetric_difference(x.begin(), x.end(), y.begin(), y.end(), std::back_inserter(d));
    return d;
  };
  EXPECT_EQ(diff(spec_of(Backbone::vgg, Variant::rnn2, 0.125, 32), spec_of(Backbone::vgg, Variant::rnn2_fc, 0.125, 32)),
            (std::vector<std::string>{"head_fc.bias", "head_fc.weight"}));
  EXPECT_EQ(diff(spec_of(Backbone::resnet, Variant::basic, 0.125, 32),
                 spec_of(Backbone::resnet, Variant::fc_rnn, 0.125, 32)),
            (std::vector<std::string>{"fc1.bias", "fc1.weight"}));
  const Network fc = build_network(spec_of(Backbone::vgg, Variant::rnn2_fc, 0.125, 32));
  EXPECT_EQ(fc.head_fc_width, 64u);
}

TEST(Builders, ResnetStagesAndProjection) {
  const Network net = build_network(spec_of(Backbone::resnet, Variant::basic, 1.0, 96));
  EXPECT_EQ(net.taps.at("res2_3"), (Shape{23, 23, 256}));
  EXPECT_EQ(net.taps.at("res3_4"), (Shape{12, 12, 512}));
  EXPECT_EQ(net.taps.at("res4_6"), (Shape{6, 6, 1024}));
  EXPECT_EQ(net.taps.at("res5_3"), (Shape{3, 3, 2048}));
  EXPECT_EQ(net.taps.at("gap"), Shape{2048});
  auto no_projection = spec_of(Backbone::resnet, Variant::basic, 0.125, 32);
  no_projection.resnet_projection = false;
  try {
    build_network(no_projection);
    FAIL() << "expected a shortcut mismatch";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("shortcut mismatch at res2_1"), std::string::npos) << e.what();
  }
}

TEST(Builders, FusionCombinationsAreDistinct) {
  std::set<std::set<std::string>> inventories;
  for (const auto& [label, spec] : all_configurations(0.125, 32)) {
    if (spec.variant != Variant::fusion) continue;
    const Network net = build_network(spec);
    inventories.insert(inventory(net));
    std::size_t concat = 0;
    for (const auto& h : net.heads) concat += h.width;
    EXPECT_EQ(concat, 256u);
    // Each branch keeps the standalone names, minus its own output layer.
    const auto [a, b] = fusion_branches(spec);
    for (const auto& [prefix, branch] : {std::pair{"fusion.a.", a}, std::pair{"fusion.b.", b}}) {
      for (const auto& p : build_network(branch).params) {
        if (p.name.starts_with("out.")) continue;
        EXPECT_TRUE(net.has_param(prefix + p.name)) << label << " " << prefix << p.name;
      }
    }
  }
  EXPECT_EQ(inventories.size(), 4u);
}

TEST(Builders, RejectsBadSpecs) {
  auto s = spec_of(Backbone::vgg, Variant::fc_rnn, 0.125, 32);
  EXPECT_THROW(build_network(s), ArgumentError);
  s = spec_of(Backbone::vgg, Variant::basic, 1.5, 32);
  EXPECT_THROW(build_network(s), ArgumentError);
  s = spec_of(Backbone::vgg, Variant::basic, 0.125, 32);
  s.dropout_fc = 1.0;
  EXPECT_THROW(build_network(s), ArgumentError);
  EXPECT_THROW(parse_variant("4rnn"), ArgumentError);
  EXPECT_EQ(spec_of(Backbone::vgg, Variant::basic, 1.0 / 1024, 32).scaled(64), 1u);
}

TEST(Init, BiasesZeroAndWeightsWithinLimits) {
  const Network net = build_network(spec_of(Backbone::vgg, Variant::rnn3_fc, 0.125, 32));
  const ParameterSet params = init_parameters(net, 3);
  for (const auto& decl : net.params) {
    const Tensor& v = params.at(decl.name).value;
    ASSERT_EQ(v.shape(), decl.shape);
    if (decl.name.ends_with(".bias")) {
      for (double x : v.values()) ASSERT_EQ(x, 0.0) << decl.name;
    } else {
      const double limit = std::sqrt(6.0 / static_cast<double>(decl.fan_in));
      double max_abs = 0;
      for (double x : v.values()) max_abs = std::max(max_abs, std::abs(x));
      EXPECT_LE(max_abs, limit) << decl.name;
      EXPECT_GT(max_abs, 0.0) << decl.name;
    }
  }
}

TEST(Init, DeterministicPerSeedAndName) {
  const Network net = build_network(spec_of(Backbone::vgg, Variant::rnn2, 0.125, 32));
  const auto a = init_parameters(net, 5), b = init_parameters(net, 5), c = init_parameters(net, 6);
  for (const auto& [name, p] : a) {
    EXPECT_EQ(p.value, b.at(name).value);
    if (!name.ends_with(".bias")) {
      EXPECT_NE(p.value, c.at(name).value) << name;
    }
  }
  // Shared names draw the same values in different networks.
  const Network other = build_network(spec_of(Backbone::vgg, Variant::rnn3, 0.125, 32));
  EXPECT_EQ(init_parameters(other, 5).at("conv3_2.weight").value, a.at("conv3_2.weight").value);
}

TEST(Init, ActivationsStayOrderOne) {
  for (const auto& [label, spec] : all_configurations(0.125, 32)) {
    SCOPED_TRACE(label);
    const Network net = build_network(spec);
    const Tensor out = forward_sequence(net, init_parameters(net, 1), random_frames(2, 3, 32, 9), Mode::eval);
    ASSERT_EQ(out.shape(), (Shape{2, 3, 2}));
    double max_abs = 0;
    for (double v : out.values()) max_abs = std::max(max_abs, std::abs(v));
    EXPECT_TRUE(out.all_finite());
    EXPECT_LT(max_abs, 10.0);
    EXPECT_GT(max_abs, 1e-6);
  }
}

TEST(Forward, ZeroParametersGiveZeroOutputs) {
  for (Variant v : {Variant::cnn_only, Variant::basic, Variant::rnn3}) {
    const Network net = build_network(spec_of(Backbone::vgg, v, 0.125, 32));
    ParameterSet params = init_parameters(net, 1);
    for (auto& [name, p] : params) p.value.fill(0.0);
    const Tensor out = forward_sequence(net, params, random_frames(2, 4, 32, 3), Mode::eval);
    for (double x : out.values()) EXPECT_EQ(x, 0.0);
  }
}

TEST(Forward, ShapeAndSpatialMismatch) {
  const Network net = build_network(spec_of(Backbone::vgg, Variant::basic, 0.125, 32));
  const ParameterSet params = init_parameters(net, 1);
  EXPECT_EQ(forward_sequence(net, params, random_frames(4, 1, 32, 1), Mode::eval).shape(), (Shape{4, 1, 2}));
  EXPECT_THROW(forward_sequence(net, params, random_frames(4, 2, 64, 1), Mode::eval), ShapeError);
}

TEST(Forward, BatchPermutationAndStateReset) {
  const Network net = build_network(spec_of(Backbone::vgg, Variant::rnn2_fc, 0.125, 32));
  const ParameterSet params = init_parameters(net, 2);
  const Tensor frames = random_frames(3, 5, 32, 4);
  const Tensor out = forward_sequence(net, params, frames, Mode::eval);
  // Reverse the batch order.
  const std::size_t per = frames.size() / 3;
  Tensor reversed(frames.shape());
  for (std::size_t b = 0; b < 3; ++b) std::copy_n(frames.data() + b * per, per, reversed.data() + (2 - b) * per);
  const Tensor out_rev = forward_sequence(net, params, reversed, Mode::eval);
  for (std::size_t b = 0; b < 3; ++b) {
    for (std::size_t i = 0; i < 10; ++i) EXPECT_NEAR(out[b * 10 + i], out_rev[(2 - b) * 10 + i], 1e-12);
  }
  // The same sequence twice gives the same outputs: no state carried over.
  EXPECT_EQ(forward_sequence(net, params, frames, Mode::eval), out);
}

TEST(Forward, ZeroedBranchBLeavesOnlyBranchA) {
  auto spec = spec_of(Backbone::vgg, Variant::fusion, 0.125, 32);
  const Network net = build_network(spec);
  ParameterSet params = init_parameters(net, 3);
  for (auto& [name, p] : params) {
    if (name.starts_with("fusion.b.")) p.value.fill(0.0);
  }
  const Tensor frames = random_frames(2, 3, 32, 5);
  const Tensor base = forward_sequence(net, params, frames, Mode::eval);
  // Rows 128..255 of the output weight read branch B, which is now silent.
  Tensor& w = params.at("fusion.out.weight").value;
  for (std::size_t r = 128; r < 256; ++r) {
    for (std::size_t c = 0; c < 2; ++c) w[r * 2 + c] += 3.0;
  }
  EXPECT_EQ(forward_sequence(net, params, frames, Mode::eval), base);
}
