#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "affectkit/errors.hpp"
#include "affectkit/graph.hpp"
#include "affectkit/ops.hpp"
#include "affectkit/random.hpp"
#include "affectkit/sequence_batch.hpp"
#include "affectkit/tensor.hpp"

namespace affectkit {

enum class Backbone { vgg, resnet };
enum class Variant { cnn_only, basic, rnn1, rnn2, rnn2_fc, rnn3, rnn3_fc, fc_rnn, fusion };
enum class ConvTap { last, penultimate };

inline const char* to_string(Backbone b) { return b == Backbone::vgg ? "vgg" : "resnet"; }
inline const char* to_string(ConvTap t) { return t == ConvTap::last ? "last" : "penultimate"; }
inline const char* to_string(Variant v) {
  switch (v) {
    case Variant::cnn_only: return "cnn-only";
    case Variant::basic: return "basic";
    case Variant::rnn1: return "1rnn";
    case Variant::rnn2: return "2rnn";
    case Variant::rnn2_fc: return "2rnn-fc";
    case Variant::rnn3: return "3rnn";
    case Variant::rnn3_fc: return "3rnn-fc";
    case Variant::fc_rnn: return "fc-rnn";
    case Variant::fusion: return "fusion";
  }
  return "?";
}

inline Backbone parse_backbone(const std::string& s) {
  if (s == "vgg") return Backbone::vgg;
  if (s == "resnet") return Backbone::resnet;
  throw ArgumentError("unknown backbone '" + s + "'");
}
inline Variant parse_variant(const std::string& s) {
  for (Variant v : {Variant::cnn_only, Variant::basic, Variant::rnn1, Variant::rnn2, Variant::rnn2_fc, Variant::rnn3,
                    Variant::rnn3_fc, Variant::fc_rnn, Variant::fusion}) {
    if (s == to_string(v)) return v;
  }
  throw ArgumentError("unknown variant '" + s + "'");
}
inline ConvTap parse_conv_tap(const std::string& s) {
  if (s == "last") return ConvTap::last;
  if (s == "penultimate") return ConvTap::penultimate;
  throw ArgumentError("unknown conv tap '" + s + "'");
}

/// Full-size widths of the two backbones and the heads on top of them.
namespace widths {
inline constexpr std::array<std::size_t, 5> vgg_channels{64, 128, 256, 512, 512};
inline constexpr std::array<std::size_t, 5> vgg_convs{2, 2, 3, 3, 3};
inline constexpr std::size_t fc1 = 4096;
inline constexpr std::size_t fc2 = 2048;
inline constexpr std::size_t resnet_stem = 64;
inline constexpr std::array<std::size_t, 4> resnet_base{64, 128, 256, 512};
inline constexpr std::array<std::size_t, 4> resnet_blocks{3, 4, 6, 3};
inline constexpr std::size_t bottleneck_expansion = 4;
inline constexpr std::size_t outputs = 2;
}  // namespace widths

/**
 * Declarative description of one network variant. `scale` shrinks every
 * convolution and FC width; the GRU width, head FC width and the 2 outputs
 * are never scaled.
 */
struct ArchitectureSpec {
  Backbone backbone = Backbone::vgg;
  Variant variant = Variant::basic;
  ConvTap conv_tap = ConvTap::last;     ///< 3rnn variants only
  bool fusion_fc = false;               ///< fusion only: hidden FC before the output
  bool branch_b_fc = false;             ///< fusion only: ResNet branch has an FC before its GRU
  bool resnet_projection = true;        ///< 1x1 projection on shortcuts that change shape
  double scale = 1.0;
  std::size_t input_side = 96;
  std::size_t channels = 3;
  std::size_t rnn_width = 128;
  std::size_t rnn_layers = 2;
  std::size_t fusion_fc_width = 64;     ///< hidden FC of 2rnn-fc, 3rnn-fc and fusion heads
  double dropout_fc = 0.5;
  double dropout_rnn = 0.2;

  std::size_t scaled(std::size_t full) const {
    const auto w = static_cast<long>(std::lround(scale * static_cast<double>(full)));
    return w < 1 ? 1 : static_cast<std::size_t>(w);
  }

  friend bool operator==(const ArchitectureSpec&, const ArchitectureSpec&) = default;
};

enum class LayerKind { conv, maxpool, global_avg_pool, flatten, dense, dropout, add, concat };

/// One per-frame layer. Its output is addressable by `name`; "frames" is the network input.
struct FrameLayer {
  LayerKind kind = LayerKind::conv;
  std::string name;
  std::vector<std::string> inputs;
  std::size_t kernel = 0;
  std::size_t stride = 1;
  std::size_t units = 0;
  Activation act = Activation::none;
  double drop = 0.0;
  Shape out_shape{};  ///< per frame
};

/// Stacked GRU unrolled over time on one frame-level feature.
struct RnnHead {
  std::string name;
  std::string input;                 ///< frame layer feeding the head
  std::vector<std::string> sources;  ///< backbone taps the input is made of
  std::size_t input_width = 0;
  std::size_t width = 0;
  std::size_t layers = 2;
  double dropout_between = 0.0;
};

enum class InitKind { relu_uniform, linear_uniform, recurrent_uniform, zero };

struct ParamDecl {
  std::string name;
  Shape shape;
  InitKind init = InitKind::zero;
  std::size_t fan_in = 1;
};

/// A built architecture: layer list, recurrent heads and declared parameters. Holds no values.
struct Network {
  ArchitectureSpec spec;
  std::vector<ArchitectureSpec> branches;  ///< fusion: {vgg branch, resnet branch}
  std::vector<FrameLayer> layers;
  std::vector<RnnHead> heads;
  std::string frame_output;  ///< cnn-only: per-frame 2-unit layer
  std::string head_fc;       ///< optional hidden FC over the concatenated head outputs
  std::size_t head_fc_width = 0;
  std::string output;        ///< output dense over the head features
  std::vector<ParamDecl> params;
  std::map<std::string, Shape> taps;

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params) n += element_count(p.shape);
    return n;
  }

  const FrameLayer& layer(const std::string& name) const {
    for (const auto& l : layers) {
      if (l.name == name) return l;
    }
    throw ArgumentError("network has no layer '" + name + "'");
  }

  bool has_param(const std::string& name) const {
    for (const auto& p : params) {
      if (p.name == name) return true;
    }
    return false;
  }
};

namespace detail {

class NetworkBuilder {
public:
  NetworkBuilder(Network& net, std::string prefix) : net_(net), prefix_(std::move(prefix)) {
    if (!net_.taps.contains("frames")) {
      net_.taps["frames"] = Shape{net_.spec.input_side, net_.spec.input_side, net_.spec.channels};
    }
  }

  std::string name(const std::string& local) const { return prefix_ + local; }

  const Shape& shape(const std::string& full) const {
    auto it = net_.taps.find(full);
    if (it == net_.taps.end()) throw ArgumentError("layer input '" + full + "' is not defined");
    return it->second;
  }

  std::string conv(const std::string& local, const std::string& in, std::size_t k, std::size_t stride,
                   std::size_t cout, Activation act, InitKind init = InitKind::relu_uniform) {
    const Shape& s = shape(in);
    if (s.size() != 3) throw ShapeError("conv layer " + name(local) + " needs a spatial input");
    FrameLayer l{.kind = LayerKind::conv, .name = name(local), .inputs = {in}, .kernel = k, .stride = stride, .units = cout, .act = act};
    l.out_shape = {conv_output_extent(s[0], k, stride, Padding::same), conv_output_extent(s[1], k, stride, Padding::same),
                   cout};
    declare(l.name + ".weight", {k, k, s[2], cout}, init, k * k * s[2]);
    declare(l.name + ".bias", {cout}, InitKind::zero, 1);
    return push(std::move(l));
  }

  std::string maxpool(const std::string& local, const std::string& in, std::size_t k, std::size_t stride) {
    const Shape& s = shape(in);
    if (s.size() != 3 || s[0] < k || s[1] < k) {
      throw ShapeError("pool layer " + name(local) + ": window " + std::to_string(k) + " exceeds " + to_string(s));
    }
    FrameLayer l{.kind = LayerKind::maxpool, .name = name(local), .inputs = {in}, .kernel = k, .stride = stride};
    l.out_shape = {(s[0] - k) / stride + 1, (s[1] - k) / stride + 1, s[2]};
    return push(std::move(l));
  }

  std::string global_avg_pool(const std::string& local, const std::string& in) {
    FrameLayer l{.kind = LayerKind::global_avg_pool, .name = name(local), .inputs = {in}};
    l.out_shape = {shape(in).back()};
    return push(std::move(l));
  }

  std::string flatten(const std::string& in) {
    const std::string full = in + "_flat";
    if (net_.taps.contains(full)) return full;
    FrameLayer l{.kind = LayerKind::flatten, .name = full, .inputs = {in}};
    l.out_shape = {element_count(shape(in))};
    return push(std::move(l));
  }

  std::string dense(const std::string& local, const std::string& in, std::size_t units, Activation act) {
    const std::string flat = shape(in).size() == 1 ? in : flatten(in);
    const std::size_t n = shape(flat)[0];
    FrameLayer l{.kind = LayerKind::dense, .name = name(local), .inputs = {flat}, .units = units, .act = act};
    l.out_shape = {units};
    declare(l.name + ".weight", {n, units}, act == Activation::relu ? InitKind::relu_uniform : InitKind::linear_uniform,
            n);
    declare(l.name + ".bias", {units}, InitKind::zero, 1);
    return push(std::move(l));
  }

  std::string dropout(const std::string& local, const std::string& in, double p) {
    FrameLayer l{.kind = LayerKind::dropout, .name = name(local), .inputs = {in}};
    l.drop = p;
    l.out_shape = shape(in);
    return push(std::move(l));
  }

  std::string add(const std::string& local, const std::string& a, const std::string& b, Activation act) {
    if (shape(a) != shape(b)) {
      throw ShapeError("shortcut mismatch at " + name(local) + ": residual " + to_string(shape(a)) + " vs shortcut " +
                       to_string(shape(b)) + " (enable projection shortcuts)");
    }
    FrameLayer l{.kind = LayerKind::add, .name = name(local), .inputs = {a, b}, .act = act};
    l.out_shape = shape(a);
    return push(std::move(l));
  }

  std::string concat(const std::string& local, const std::vector<std::string>& ins) {
    std::vector<std::string> flat;
    std::size_t total = 0;
    for (const auto& in : ins) {
      flat.push_back(shape(in).size() == 1 ? in : flatten(in));
      total += shape(flat.back())[0];
    }
    FrameLayer l{.kind = LayerKind::concat, .name = name(local), .inputs = flat};
    l.out_shape = {total};
    return push(std::move(l));
  }

  void rnn_head(const std::string& local, const std::string& in, std::vector<std::string> sources) {
    const ArchitectureSpec& spec = net_.spec;
    const std::string flat = shape(in).size() == 1 ? in : flatten(in);
    RnnHead h{name(local), flat, std::move(sources), shape(flat)[0], spec.rnn_width, spec.rnn_layers, spec.dropout_rnn};
    std::size_t width_in = h.input_width;
    for (std::size_t l = 0; l < h.layers; ++l) {
      const std::string base = h.name + ".l" + std::to_string(l);
      declare(base + ".w_input", {width_in, 3 * h.width}, InitKind::recurrent_uniform, h.width);
      declare(base + ".w_hidden", {h.width, 3 * h.width}, InitKind::recurrent_uniform, h.width);
      declare(base + ".bias", {3 * h.width}, InitKind::zero, 1);
      width_in = h.width;
    }
    net_.heads.push_back(std::move(h));
  }

  /// Head merge: concat of head outputs, optional hidden FC, then the 2-unit output.
  void output_head(const std::string& fc_local, std::size_t fc_width, const std::string& out_local) {
    std::size_t width = 0;
    for (const auto& h : net_.heads) width += h.width;
    if (fc_width > 0) {
      net_.head_fc = name(fc_local);
      net_.head_fc_width = fc_width;
      declare(net_.head_fc + ".weight", {width, fc_width}, InitKind::relu_uniform, width);
      declare(net_.head_fc + ".bias", {fc_width}, InitKind::zero, 1);
      width = fc_width;
    }
    net_.output = name(out_local);
    declare(net_.output + ".weight", {width, widths::outputs}, InitKind::linear_uniform, width);
    declare(net_.output + ".bias", {widths::outputs}, InitKind::zero, 1);
  }

private:
  std::string push(FrameLayer l) {
    if (net_.taps.contains(l.name)) throw ArgumentError("duplicate layer name '" + l.name + "'");
    net_.taps[l.name] = l.out_shape;
    net_.layers.push_back(std::move(l));
    return net_.layers.back().name;
  }

  void declare(std::string pname, Shape shape, InitKind init, std::size_t fan_in) {
    net_.params.push_back({std::move(pname), std::move(shape), init, fan_in});
  }

  Network& net_;
  std::string prefix_;
};

struct VggTaps {
  std::string last_conv, penultimate_conv, last_pool, fc1;
};

/// Blocks 1-5 of conv/pool layers, then FC1 with dropout.
inline VggTaps vgg_backbone(NetworkBuilder& b, const ArchitectureSpec& spec) {
  if (spec.input_side % 32 != 0) {
    throw ShapeError("vgg backbone needs input_side divisible by 32 (five 2x2 pools), got " +
                     std::to_string(spec.input_side));
  }
  VggTaps taps;
  std::string x = "frames";
  std::vector<std::string> convs;
  for (std::size_t block = 0; block < widths::vgg_channels.size(); ++block) {
    for (std::size_t i = 0; i < widths::vgg_convs[block]; ++i) {
      x = b.conv("conv" + std::to_string(block + 1) + "_" + std::to_string(i + 1), x, 3, 1,
                 spec.scaled(widths::vgg_channels[block]), Activation::relu);
      convs.push_back(x);
    }
    x = b.maxpool("pool" + std::to_string(block + 1), x, 2, 2);
  }
  taps.last_conv = convs.back();
  taps.penultimate_conv = convs[convs.size() - 2];
  taps.last_pool = x;
  const std::string fc1 = b.dense("fc1", x, spec.scaled(widths::fc1), Activation::relu);
  taps.fc1 = b.dropout("fc1_dropout", fc1, spec.dropout_fc);
  return taps;
}

/// 7x7/2 stem, 3x3/2 pool, four bottleneck stages, global average pool.
inline std::string resnet_backbone(NetworkBuilder& b, const ArchitectureSpec& spec) {
  std::string x = b.conv("conv1", "frames", 7, 2, spec.scaled(widths::resnet_stem), Activation::relu);
  x = b.maxpool("pool1", x, 3, 2);
  for (std::size_t stage = 0; stage < widths::resnet_base.size(); ++stage) {
    const std::size_t base = spec.scaled(widths::resnet_base[stage]);
    const std::size_t out = base * widths::bottleneck_expansion;
    for (std::size_t block = 0; block < widths::resnet_blocks[stage]; ++block) {
      const std::size_t stride = (stage > 0 && block == 0) ? 2 : 1;
      const std::string unit = "res" + std::to_string(stage + 2) + "_" + std::to_string(block + 1);
      std::string r = b.conv(unit + ".a", x, 1, 1, base, Activation::relu);
      r = b.conv(unit + ".b", r, 3, stride, base, Activation::relu);
      r = b.conv(unit + ".c", r, 1, 1, out, Activation::none, InitKind::linear_uniform);
      std::string shortcut = x;
      const Shape& in_shape = b.shape(x);
      const bool reshapes = stride != 1 || in_shape.back() != out;
      if (reshapes && spec.resnet_projection) {
        shortcut = b.conv(unit + ".proj", x, 1, stride, out, Activation::none, InitKind::linear_uniform);
      }
      x = b.add(unit, r, shortcut, Activation::relu);
    }
  }
  return b.global_avg_pool("gap", x);
}

inline void check_common(const ArchitectureSpec& spec) {
  if (!(spec.scale > 0.0 && spec.scale <= 1.0)) throw ArgumentError("scale must lie in (0,1]");
  if (spec.input_side == 0 || spec.channels == 0) throw ArgumentError("input_side and channels must be positive");
  if (spec.rnn_width == 0 || spec.rnn_layers == 0) throw ArgumentError("rnn_width and rnn_layers must be positive");
  for (double p : {spec.dropout_fc, spec.dropout_rnn}) {
    if (!(p >= 0.0 && p < 1.0)) throw ArgumentError("dropout probabilities must lie in [0,1)");
  }
}

}  // namespace detail

/// Plain CNN: VGG conv/pool blocks, FC 4096 -> FC 2048 -> 2 (widths scaled).
inline Network build_vgg_cnn(const ArchitectureSpec& spec) {
  if (spec.backbone != Backbone::vgg || spec.variant != Variant::cnn_only) {
    throw ArgumentError("build_vgg_cnn needs backbone=vgg, variant=cnn-only");
  }
  detail::check_common(spec);
  Network net;
  net.spec = spec;
  detail::NetworkBuilder b(net, "");
  const auto taps = detail::vgg_backbone(b, spec);
  std::string x = b.dense("fc2", taps.fc1, spec.scaled(widths::fc2), Activation::relu);
  x = b.dropout("fc2_dropout", x, spec.dropout_fc);
  net.frame_output = b.dense("out", x, widths::outputs, Activation::none);
  return net;
}

/// VGG conv/pool -> FC1 (+dropout) -> stacked GRU -> 2 outputs.
inline Network build_basic_cnn_rnn(const ArchitectureSpec& spec) {
  if (spec.backbone != Backbone::vgg || spec.variant != Variant::basic) {
    throw ArgumentError("build_basic_cnn_rnn needs backbone=vgg, variant=basic");
  }
  detail::check_common(spec);
  Network net;
  net.spec = spec;
  detail::NetworkBuilder b(net, "");
  const auto taps = detail::vgg_backbone(b, spec);
  b.rnn_head("rnn", taps.fc1, {"fc1"});
  b.output_head("head_fc", 0, "out");
  return net;
}

/**
 * Multi-tap VGG variants.
 *   1rnn: one GRU stack over concat(last conv, last pool, FC1).
 *   2rnn: GRU stacks over last pool and FC1, outputs concatenated.
 *   3rnn: GRU stacks over a conv tap, last pool and FC1.
 * The -fc forms add a hidden FC of `fusion_fc_width` units before the output.
 */
inline Network build_multi_rnn(const ArchitectureSpec& spec) {
  if (spec.backbone != Backbone::vgg) throw ArgumentError("build_multi_rnn needs backbone=vgg");
  detail::check_common(spec);
  Network net;
  net.spec = spec;
  detail::NetworkBuilder b(net, "");
  const auto taps = detail::vgg_backbone(b, spec);
  std::size_t head_fc = 0;
  switch (spec.variant) {
    case Variant::rnn1: {
      const std::string joined = b.concat("rnn_input", {taps.last_conv, taps.last_pool, taps.fc1});
      b.rnn_head("rnn", joined, {taps.last_conv, taps.last_pool, "fc1"});
      break;
    }
    case Variant::rnn2_fc:
      head_fc = spec.fusion_fc_width;
      [[fallthrough]];
    case Variant::rnn2:
      b.rnn_head("rnn_pool", taps.last_pool, {taps.last_pool});
      b.rnn_head("rnn_fc", taps.fc1, {"fc1"});
      break;
    case Variant::rnn3_fc:
      head_fc = spec.fusion_fc_width;
      [[fallthrough]];
    case Variant::rnn3: {
      const std::string conv = spec.conv_tap == ConvTap::last ? taps.last_conv : taps.penultimate_conv;
      b.rnn_head("rnn_conv", conv, {conv});
      b.rnn_head("rnn_pool", taps.last_pool, {taps.last_pool});
      b.rnn_head("rnn_fc", taps.fc1, {"fc1"});
      break;
    }
    default:
      throw ArgumentError(std::string("build_multi_rnn does not handle variant ") + to_string(spec.variant));
  }
  b.output_head("head_fc", head_fc, "out");
  return net;
}

/// Bottleneck ResNet -> [FC (+dropout)] -> stacked GRU -> 2 outputs.
inline Network build_resnet_rnn(const ArchitectureSpec& spec) {
  if (spec.backbone != Backbone::resnet || (spec.variant != Variant::basic && spec.variant != Variant::fc_rnn)) {
    throw ArgumentError("build_resnet_rnn needs backbone=resnet, variant basic or fc-rnn");
  }
  detail::check_common(spec);
  Network net;
  net.spec = spec;
  detail::NetworkBuilder b(net, "");
  std::string x = detail::resnet_backbone(b, spec);
  std::string source = x;
  if (spec.variant == Variant::fc_rnn) {
    x = b.dense("fc1", x, spec.scaled(widths::fc1), Activation::relu);
    x = b.dropout("fc1_dropout", x, spec.dropout_fc);
    source = "fc1";
  }
  b.rnn_head("rnn", x, {source});
  b.output_head("head_fc", 0, "out");
  return net;
}

/// The two standalone branch specs a fusion spec stands for.
inline std::array<ArchitectureSpec, 2> fusion_branches(const ArchitectureSpec& spec) {
  ArchitectureSpec a = spec;
  a.backbone = Backbone::vgg;
  a.variant = Variant::basic;
  a.fusion_fc = false;
  a.branch_b_fc = false;
  ArchitectureSpec b = spec;
  b.backbone = Backbone::resnet;
  b.variant = spec.branch_b_fc ? Variant::fc_rnn : Variant::basic;
  b.fusion_fc = false;
  b.branch_b_fc = false;
  return {a, b};
}

/**
 * Two CNN-RNN branches on the same frames. Branch parameters live under
 * `fusion.a.` (VGG CNN-FC-RNN) and `fusion.b.` (ResNet RNN, optional FC) with
 * the same local names as the standalone networks, so they load component-wise.
 */
inline Network build_fusion(const ArchitectureSpec& spec_a, const ArchitectureSpec& spec_b, bool fusion_fc) {
  if (spec_a.backbone != Backbone::vgg || spec_a.variant != Variant::basic) {
    throw ArgumentError("fusion branch a must be a vgg basic (CNN-FC-RNN) network");
  }
  if (spec_b.backbone != Backbone::resnet || (spec_b.variant != Variant::basic && spec_b.variant != Variant::fc_rnn)) {
    throw ArgumentError("fusion branch b must be a resnet basic or fc-rnn network");
  }
  if (spec_a.input_side != spec_b.input_side || spec_a.channels != spec_b.channels) {
    throw ShapeError("fusion branches must consume the same frames");
  }
  const Network a = build_basic_cnn_rnn(spec_a);
  const Network b = build_resnet_rnn(spec_b);

  Network net;
  net.spec = spec_a;
  net.spec.variant = Variant::fusion;
  net.spec.fusion_fc = fusion_fc;
  net.spec.branch_b_fc = spec_b.variant == Variant::fc_rnn;
  net.branches = {spec_a, spec_b};
  net.taps["frames"] = a.taps.at("frames");
  auto graft = [&net](const Network& branch, const std::string& prefix) {
    auto rename = [&prefix](const std::string& n) { return n == "frames" ? n : prefix + n; };
    for (FrameLayer l : branch.layers) {
      l.name = rename(l.name);
      for (auto& in : l.inputs) in = rename(in);
      net.taps[l.name] = l.out_shape;
      net.layers.push_back(std::move(l));
    }
    for (RnnHead h : branch.heads) {
      h.name = rename(h.name);
      h.input = rename(h.input);
      for (auto& s : h.sources) s = rename(s);
      net.heads.push_back(std::move(h));
    }
    for (ParamDecl p : branch.params) {
      if (p.name.starts_with(branch.output + ".")) continue;
      p.name = rename(p.name);
      net.params.push_back(std::move(p));
    }
  };
  graft(a, "fusion.a.");
  graft(b, "fusion.b.");
  detail::NetworkBuilder builder(net, "fusion.");
  builder.output_head("head_fc", fusion_fc ? spec_a.fusion_fc_width : 0, "out");
  return net;
}

/// Dispatches on backbone and variant.
inline Network build_network(const ArchitectureSpec& spec) {
  if (spec.variant == Variant::fusion) {
    const auto [a, b] = fusion_branches(spec);
    return build_fusion(a, b, spec.fusion_fc);
  }
  if (spec.backbone == Backbone::resnet) return build_resnet_rnn(spec);
  switch (spec.variant) {
    case Variant::cnn_only: return build_vgg_cnn(spec);
    case Variant::basic: return build_basic_cnn_rnn(spec);
    case Variant::fc_rnn: throw ArgumentError("fc-rnn is a resnet variant");
    default: return build_multi_rnn(spec);
  }
}

/**
 * Fresh parameters. Weights are uniform with limit sqrt(6/fan_in) in front of
 * a ReLU, sqrt(3/fan_in) for linear layers and 1/sqrt(width) for GRU
 * matrices; biases start at zero. Each tensor draws from its own stream
 * derived from (seed, name), so values do not depend on declaration order.
 */
inline ParameterSet init_parameters(const Network& net, std::uint64_t seed) {
  ParameterSet params;
  for (const auto& decl : net.params) {
    Parameter p{Tensor(decl.shape), Tensor(decl.shape)};
    double limit = 0.0;
    switch (decl.init) {
      case InitKind::relu_uniform: limit = std::sqrt(6.0 / static_cast<double>(decl.fan_in)); break;
      case InitKind::linear_uniform: limit = std::sqrt(3.0 / static_cast<double>(decl.fan_in)); break;
      case InitKind::recurrent_uniform: limit = 1.0 / std::sqrt(static_cast<double>(decl.fan_in)); break;
      case InitKind::zero: break;
    }
    if (limit > 0.0) {
      Rng rng(mix_seed(seed, hash_name(decl.name)));
      for (double& v : p.value.values()) v = rng.uniform(-limit, limit);
    }
    params.emplace(decl.name, std::move(p));
  }
  return params;
}

/// Maps a parameter name to a graph node.
using ParamBinder = std::function<NodeId(const std::string&)>;

inline ParamBinder bind_trainable(Graph& g, ParameterSet& params) {
  return [&g, &params](const std::string& name) {
    auto it = params.find(name);
    if (it == params.end()) throw DataError("missing parameter '" + name + "'");
    return g.parameter(it->second);
  };
}

inline ParamBinder bind_frozen(Graph& g, const ParameterSet& params) {
  return [&g, &params](const std::string& name) {
    auto it = params.find(name);
    if (it == params.end()) throw DataError("missing parameter '" + name + "'");
    return g.constant(it->second.value);
  };
}

/// Node ids of one sequence-level forward pass.
struct SequenceTrace {
  NodeId output;                          ///< [B,T,2]
  std::map<std::string, NodeId> layers;   ///< frame layer outputs, [B*T, ...] sequence-major
  std::map<std::string, NodeId> heads;    ///< top GRU outputs, [T*B, width] time-major
};

/**
 * Runs the CNN on every frame of frames [B,T,H,W,C], unrolls each GRU head
 * over T from a zero state, and applies the linear 2-unit output per frame.
 */
inline SequenceTrace trace_sequence(Graph& g, const Network& net, const ParamBinder& bind, const Tensor& frames,
                                    Mode mode, Rng* rng) {
  const ArchitectureSpec& spec = net.spec;
  if (frames.rank() != 5 || frames.dim(2) != spec.input_side || frames.dim(3) != spec.input_side ||
      frames.dim(4) != spec.channels) {
    throw ShapeError("frames " + to_string(frames.shape()) + " do not match network input [B,T," +
                     std::to_string(spec.input_side) + "," + std::to_string(spec.input_side) + "," +
                     std::to_string(spec.channels) + "]");
  }
  const std::size_t batch = frames.dim(0);
  const std::size_t time = frames.dim(1);
  SequenceTrace trace;
  trace.layers["frames"] =
      g.input(frames.reshaped(Shape{batch * time, spec.input_side, spec.input_side, spec.channels}));

  auto node = [&trace](const std::string& name) { return trace.layers.at(name); };
  for (const FrameLayer& l : net.layers) {
    NodeId out;
    switch (l.kind) {
      case LayerKind::conv:
        out = conv2d(g, node(l.inputs[0]), bind(l.name + ".weight"), l.stride, Padding::same);
        out = activation(g, add_bias(g, out, bind(l.name + ".bias")), l.act);
        break;
      case LayerKind::maxpool: out = maxpool2d(g, node(l.inputs[0]), l.kernel, l.stride); break;
      case LayerKind::global_avg_pool: out = global_avg_pool(g, node(l.inputs[0])); break;
      case LayerKind::flatten: out = flatten_rows(g, node(l.inputs[0])); break;
      case LayerKind::dense:
        out = dense(g, node(l.inputs[0]), bind(l.name + ".weight"), bind(l.name + ".bias"));
        out = activation(g, out, l.act);
        break;
      case LayerKind::dropout: out = dropout(g, node(l.inputs[0]), l.drop, mode, rng); break;
      case LayerKind::add: out = activation(g, add(g, node(l.inputs[0]), node(l.inputs[1])), l.act); break;
      case LayerKind::concat: {
        std::vector<NodeId> parts;
        for (const auto& in : l.inputs) parts.push_back(node(in));
        out = concat(g, parts);
        break;
      }
    }
    trace.layers[l.name] = out;
  }

  if (net.heads.empty()) {
    trace.output = reshape(g, node(net.frame_output), Shape{batch, time, widths::outputs});
    return trace;
  }

  std::vector<NodeId> head_outputs;
  for (const RnnHead& h : net.heads) {
    const NodeId features = node(h.input);
    std::vector<GruWeights> weights;
    std::vector<NodeId> state;
    for (std::size_t l = 0; l < h.layers; ++l) {
      const std::string base = h.name + ".l" + std::to_string(l);
      weights.push_back({bind(base + ".w_input"), bind(base + ".w_hidden"), bind(base + ".bias")});
      state.push_back(g.input(Tensor(Shape{batch, h.width})));
    }
    std::vector<NodeId> tops;
    for (std::size_t t = 0; t < time; ++t) {
      std::vector<std::size_t> rows(batch);
      for (std::size_t b = 0; b < batch; ++b) rows[b] = b * time + t;
      NodeId x = gather_rows(g, features, std::move(rows));
      for (std::size_t l = 0; l < h.layers; ++l) {
        state[l] = gru_step(g, x, state[l], weights[l]);
        x = state[l];
        if (l + 1 < h.layers) x = dropout(g, x, h.dropout_between, mode, rng);
      }
      tops.push_back(x);
    }
    const NodeId out = concat_rows(g, tops);
    trace.heads[h.name] = out;
    head_outputs.push_back(out);
  }
  for (NodeId out : head_outputs) {
    if (g.value(out).dim(0) != g.value(head_outputs[0]).dim(0)) throw ShapeError("fusion branches differ in length");
  }
  NodeId merged = concat(g, head_outputs);
  if (!net.head_fc.empty()) {
    merged = activation(g, dense(g, merged, bind(net.head_fc + ".weight"), bind(net.head_fc + ".bias")),
                        Activation::relu);
  }
  const NodeId out = dense(g, merged, bind(net.output + ".weight"), bind(net.output + ".bias"));
  std::vector<std::size_t> order(batch * time);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t t = 0; t < time; ++t) order[b * time + t] = t * batch + b;
  }
  trace.output = reshape(g, gather_rows(g, out, std::move(order)), Shape{batch, time, widths::outputs});
  return trace;
}

/// Gradient-free forward of frames [B,T,H,W,C] to predictions [B,T,2].
inline Tensor forward_sequence(const Network& net, const ParameterSet& params, const Tensor& frames, Mode mode,
                               Rng* rng = nullptr) {
  Graph g(GradMode::disabled);
  const SequenceTrace trace = trace_sequence(g, net, bind_frozen(g, params), frames, mode, rng);
  return g.value(trace.output);
}

inline Tensor forward_sequence(const Network& net, const ParameterSet& params, const SequenceBatch& batch, Mode mode,
                               Rng* rng = nullptr) {
  return forward_sequence(net, params, batch.frames, mode, rng);
}

}  // namespace affectkit
