#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mtl/tape.hpp"
#include "mtl/tensor.hpp"

namespace mtl {

enum class HeadKind { kRegression, kClassification };

struct HeadSpec {
  HeadKind kind = HeadKind::kRegression;
  std::size_t dim = 1;  // output dim (regression) or class count C
};

enum class AuxKind { kNone, kFc, kAvgPool, kBottleneck, kMirror };

struct AuxTowerSpec {
  AuxKind kind = AuxKind::kNone;
  std::size_t pool = 0;        // avgpool: p, must divide M
  std::size_t bottleneck = 0;  // bottleneck: b >= 1, intended b << min(M, C)
  double temperature = 1.0;    // softmax temperature for classification aux heads
};

// One shared-stack layer: plain dense, or "conv-lite" (patch extraction +
// affine over patches) for the image presets. ReLU follows every shared
// layer.
struct SharedLayerSpec {
  enum class Kind { kDense, kConv } kind = Kind::kDense;
  std::size_t width = 0;     // dense
  std::size_t channels = 0;  // conv output channels
  std::size_t kernel = 0;
  std::size_t stride = 1;
};

struct ArchitectureSpec {
  std::size_t input_dim = 0;             // flat inputs
  std::optional<ImageDims> input_image;  // set when conv layers are used
  std::vector<SharedLayerSpec> shared_layers;
  std::vector<std::vector<std::size_t>> tower_widths;  // hidden widths per task
  std::vector<HeadSpec> heads;                         // one per task
  std::vector<AuxTowerSpec> aux;                       // one per task

  std::size_t num_tasks() const { return heads.size(); }
  // M: width of the shared representation h.
  std::size_t shared_dim() const;
  void validate() const;
};

// Indices into Model::params. The three groups are disjoint and exhaustive.
struct ParamPartition {
  std::vector<std::size_t> shared;
  std::vector<std::vector<std::size_t>> task_main;
  std::vector<std::vector<std::size_t>> task_aux;
};

struct Model {
  ArchitectureSpec spec;
  std::vector<std::string> names;  // aligned with params
  std::vector<Tensor> params;
  ParamPartition partition;
};

// Glorot-uniform weights, zero biases. Each tensor draws from an rng stream
// derived from (seed, "init", tensor name), so initialization is independent
// of construction order.
Model build_model(const ArchitectureSpec& spec, std::uint64_t seed);

// Parameters added by task t's auxiliary tower (0 for kind none).
std::size_t aux_param_count(const ArchitectureSpec& spec, std::size_t task);

// Per-task training targets; exactly one member is used per head kind.
struct TaskTargets {
  Tensor regression;        // n x head.dim
  std::vector<int> classes;  // n class indices
};

struct Batch {
  Tensor inputs;
  std::vector<TaskTargets> targets;  // one per task
};

struct ForwardNodes {
  std::vector<Tape::NodeId> params;  // leaf per model parameter, aligned
  Tape::NodeId shared = 0;           // h(x; theta_sh), evaluated once
  std::size_t nodes_through_shared = 0;  // tape size right after h
  std::vector<Tape::NodeId> main;            // per-task predictions/logits
  std::vector<std::optional<Tape::NodeId>> aux;
};

// Records the whole forward pass on the tape. The shared stack is evaluated
// exactly once; every tower (main and aux) reads the same h node.
ForwardNodes forward_on_tape(const Model& model, Tape& tape, const Tensor& inputs,
                             bool with_aux);

struct LossNodes {
  ForwardNodes fwd;
  std::vector<Tape::NodeId> main_loss;
  std::vector<std::optional<Tape::NodeId>> aux_loss;
};

// Forward plus per-task losses: mean MSE for regression heads, softmax
// cross-entropy for classification (aux heads use their configured
// temperature, main heads tau=1).
LossNodes losses_on_tape(const Model& model, Tape& tape, const Batch& batch, bool with_aux);

struct TaskLoss {
  double main = 0.0;
  std::optional<double> aux;  // absent when the tower is absent or skipped
};

std::vector<TaskLoss> task_losses(const Model& model, const Batch& batch, bool with_aux);

// Main-head predictions only; auxiliary towers are never evaluated.
std::vector<Tensor> predict(const Model& model, const Tensor& inputs);

// Fraction of rows whose argmax logit (lowest index wins ties) mismatches
// the label.
double error_rate(const Tensor& logits, const std::vector<int>& labels);

}  // namespace mtl
