#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "affectkit/errors.hpp"
#include "affectkit/tensor.hpp"

namespace affectkit {

/// Trainable tensor together with its accumulated gradient.
struct Parameter {
  Tensor value;
  Tensor grad;

  void zero_grad() { grad = Tensor(value.shape()); }
};

/// Named parameters, iterated in name order.
using ParameterSet = std::map<std::string, Parameter>;

struct NodeId {
  std::size_t index = 0;
  friend bool operator==(NodeId, NodeId) = default;
};

enum class GradMode { enabled, disabled };

class Graph;

/// What a backward function sees when its node is visited.
class BackwardContext {
public:
  const Tensor& grad_output() const { return *grad_out_; }
  const Tensor& output() const { return *out_; }
  const Tensor& input(std::size_t i) const { return *inputs_[i]; }
  /// Gradient slot of input i, or nullptr when that input needs no gradient.
  Tensor* input_grad(std::size_t i) const { return grads_[i]; }

private:
  friend class Graph;
  const Tensor* grad_out_ = nullptr;
  const Tensor* out_ = nullptr;
  std::vector<const Tensor*> inputs_;
  std::vector<Tensor*> grads_;
};

using BackwardFn = std::function<void(const BackwardContext&)>;

/// Per-node gradients produced by one backward pass.
class Gradients {
public:
  /// Gradient of node `id`, or nullptr if it did not depend on anything trainable.
  const Tensor* of(NodeId id) const {
    if (id.index >= grads_.size() || grads_[id.index].empty()) return nullptr;
    return &grads_[id.index];
  }

private:
  friend class Graph;
  std::vector<Tensor> grads_;
};

/**
 * Tape of operations. Nodes are appended in evaluation order, so insertion
 * order is a topological order and backward walks it in reverse.
 *
 * Parameter and constant-reference nodes point at tensors owned elsewhere;
 * those must outlive the graph.
 */
class Graph {
public:
  explicit Graph(GradMode mode = GradMode::enabled) : mode_(mode) {}

  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;
  Graph(Graph&&) = default;
  Graph& operator=(Graph&&) = default;

  GradMode mode() const noexcept { return mode_; }
  std::size_t size() const noexcept { return nodes_.size(); }

  NodeId input(Tensor value, bool requires_grad = false) {
    Node node;
    node.op = "input";
    node.value = std::move(value);
    node.requires_grad = requires_grad && mode_ == GradMode::enabled;
    return push(std::move(node));
  }

  /// Leaf bound to a parameter; backward adds into `p.grad`.
  NodeId parameter(Parameter& p) {
    Node node;
    node.op = "parameter";
    node.external = &p.value;
    node.param = &p;
    node.requires_grad = mode_ == GradMode::enabled;
    return push(std::move(node));
  }

  /// Leaf referencing a tensor that is never differentiated.
  NodeId constant(const Tensor& ref) {
    Node node;
    node.op = "constant";
    node.external = &ref;
    return push(std::move(node));
  }

  /// Appends an operation. `backward` is dropped when no input needs a gradient.
  NodeId record(std::string op, Tensor value, std::vector<NodeId> inputs, BackwardFn backward) {
    Node node;
    node.op = std::move(op);
    node.value = std::move(value);
    for (NodeId in : inputs) {
      if (in.index >= nodes_.size()) throw ArgumentError("node " + node.op + " consumes an unknown input");
      node.inputs.push_back(in.index);
      node.requires_grad = node.requires_grad || nodes_[in.index].requires_grad;
    }
    if (node.requires_grad) node.backward = std::move(backward);
    return push(std::move(node));
  }

  const Tensor& value(NodeId id) const {
    const Node& node = nodes_.at(id.index);
    return node.external ? *node.external : node.value;
  }
  const std::string& op(NodeId id) const { return nodes_.at(id.index).op; }
  bool requires_grad(NodeId id) const { return nodes_.at(id.index).requires_grad; }
  std::vector<NodeId> inputs_of(NodeId id) const {
    std::vector<NodeId> out;
    for (std::size_t i : nodes_.at(id.index).inputs) out.push_back(NodeId{i});
    return out;
  }

  /// Reverse pass from a scalar loss.
  Gradients backward(NodeId loss) {
    if (value(loss).size() != 1) {
      throw ShapeError("backward needs a scalar loss, got shape " + to_string(value(loss).shape()));
    }
    return backward(loss, Tensor(value(loss).shape(), 1.0));
  }

  /// Reverse pass seeded with an arbitrary output gradient.
  Gradients backward(NodeId output, const Tensor& seed) {
    if (mode_ != GradMode::enabled) throw ArgumentError("backward on a graph built without gradients");
    if (seed.shape() != value(output).shape()) {
      throw ShapeError("seed shape " + to_string(seed.shape()) + " does not match output " +
                       to_string(value(output).shape()));
    }
    Gradients result;
    result.grads_.resize(nodes_.size());
    if (!nodes_[output.index].requires_grad) return result;
    result.grads_[output.index] = seed;

    BackwardContext ctx;
    for (std::size_t i = output.index + 1; i-- > 0;) {
      Node& node = nodes_[i];
      Tensor& grad = result.grads_[i];
      if (grad.empty() || !node.requires_grad) continue;
      if (node.param != nullptr) {
        if (node.param->grad.shape() != node.param->value.shape()) node.param->zero_grad();
        node.param->grad += grad;
      }
      if (!node.backward) continue;
      ctx.grad_out_ = &grad;
      ctx.out_ = &value(NodeId{i});
      ctx.inputs_.clear();
      ctx.grads_.clear();
      for (std::size_t in : node.inputs) {
        ctx.inputs_.push_back(&value(NodeId{in}));
        if (nodes_[in].requires_grad) {
          Tensor& slot = result.grads_[in];
          if (slot.empty()) slot = Tensor(value(NodeId{in}).shape());
          ctx.grads_.push_back(&slot);
        } else {
          ctx.grads_.push_back(nullptr);
        }
      }
      node.backward(ctx);
    }
    return result;
  }

private:
  struct Node {
    std::string op;
    Tensor value;
    const Tensor* external = nullptr;
    Parameter* param = nullptr;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool requires_grad = false;
  };

  NodeId push(Node node) {
    nodes_.push_back(std::move(node));
    return NodeId{nodes_.size() - 1};
  }

  GradMode mode_;
  std::deque<Node> nodes_;  // stable addresses: value() references survive later records
};

}  // namespace affectkit
