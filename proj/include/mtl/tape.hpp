#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <variant>
#include <vector>

#include "mtl/tensor.hpp"

namespace mtl {

enum class Reduction { kMean, kSum };

// Image geometry for the patch-extraction ("conv-lite") path. Feature rows
// are stored channel-fastest (HWC), so a conv output feeds the next im2col
// without data movement.
struct ImageDims {
  std::size_t channels = 1;
  std::size_t height = 0;
  std::size_t width = 0;
};

class Gradients;

// Records primitive ops as they execute and replays them in reverse for
// gradients. Node ids are indices into the recording, so topological order
// is construction order. A tape is confined to one trial; build a fresh one
// per batch.
class Tape {
 public:
  using NodeId = std::uint32_t;

  // Inputs and parameters. Leaves own their values for the tape's lifetime.
  NodeId leaf(Tensor value);

  // out[i,j] = sum_k x[i,k] * w[k,j] + b[j]
  NodeId affine(NodeId x, NodeId w, NodeId b);

  // Elementwise max(0, x); the subgradient at exactly 0 is taken as 0.
  NodeId relu(NodeId x);

  // Pools contiguous blocks of `pool` features to their mean. Vectors are
  // pooled directly; matrices are pooled independently per row.
  NodeId avg_pool(NodeId x, std::size_t pool);

  // Extracts kernel*kernel*channels patches at the given stride (no padding)
  // from each row of x interpreted as an HWC image. Output has one row per
  // (example, patch position).
  NodeId im2col(NodeId x, ImageDims dims, std::size_t kernel, std::size_t stride);

  NodeId reshape(NodeId x, Shape shape);

  NodeId mse_loss(NodeId pred, Tensor target, Reduction reduction);

  // Mean over rows of -log softmax(logits/tau)[label], stabilized by
  // subtracting the row max before exponentiation.
  NodeId softmax_xent(NodeId logits, std::vector<int> labels, double tau);

  NodeId add(NodeId a, NodeId b);
  NodeId mul(NodeId a, NodeId b);
  NodeId exp(NodeId x);
  NodeId scale(NodeId x, double c);

  // sum_i ws[i] * xs[i] over scalar nodes.
  NodeId weighted_sum(std::span<const NodeId> xs, std::span<const double> ws);

  const Tensor& value(NodeId id) const { return nodes_[id].value; }
  std::size_t size() const { return nodes_.size(); }

  struct BackwardOptions {
    // Upstream gradient at the root. When absent the root must be scalar and
    // the seed is 1.
    std::optional<Tensor> seed;
    // Adjoints accumulate into the barrier node but do not propagate past
    // it. Used to take gradients with respect to an activation.
    std::optional<NodeId> barrier;
  };

  Gradients backward(NodeId root, BackwardOptions opts = {}) const;

 private:
  enum class Op {
    kLeaf,
    kAffine,
    kRelu,
    kAvgPool,
    kIm2col,
    kReshape,
    kMse,
    kXent,
    kAdd,
    kMul,
    kExp,
    kScale,
    kWeightedSum,
  };

  struct PoolPayload {
    std::size_t pool;
  };
  struct Im2colPayload {
    ImageDims dims;
    std::size_t kernel;
    std::size_t stride;
    std::size_t out_h;
    std::size_t out_w;
  };
  struct MsePayload {
    Tensor target;
    Reduction reduction;
  };
  struct XentPayload {
    std::vector<int> labels;
    double tau;
    Tensor probs;  // cached softmax rows for the backward rule
  };
  struct ScalePayload {
    double c;
  };
  struct WeightedSumPayload {
    std::vector<double> weights;
  };

  using Payload = std::variant<std::monostate, PoolPayload, Im2colPayload, MsePayload,
                               XentPayload, ScalePayload, WeightedSumPayload>;

  struct Node {
    Op op;
    std::vector<NodeId> inputs;
    Tensor value;
    Payload payload;
  };

  NodeId push(Op op, std::vector<NodeId> inputs, Tensor value, Payload payload = {});
  const Tensor& input_value(const Node& n, std::size_t i) const {
    return nodes_[n.inputs[i]].value;
  }
  void check_id(NodeId id) const;

  std::vector<Node> nodes_;

  friend class Gradients;
};

// Per-node adjoints produced by Tape::backward. Nodes the loss does not
// reach report zero gradients.
class Gradients {
 public:
  const Tensor& grad(Tape::NodeId id) const;
  bool reached(Tape::NodeId id) const { return touched_[id]; }

 private:
  friend class Tape;
  explicit Gradients(const Tape& tape);
  Tensor& accumulate(const Tape& tape, Tape::NodeId id);

  mutable std::vector<Tensor> adj_;
  std::vector<char> touched_;
  const Tape* tape_;
};

}  // namespace mtl
