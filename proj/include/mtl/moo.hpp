#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "mtl/model.hpp"
#include "mtl/rng.hpp"
#include "mtl/tape.hpp"

namespace mtl {

// sum_t w_t * (main_t + gamma * aux_t); aux may be absent (gamma term
// dropped per task or entirely).
double composite_loss(std::span<const double> main,
                      const std::vector<std::optional<double>>* aux,
                      std::span<const double> w, double gamma);

// sum_t ( 0.5 * exp(-s_t) * L_t + 0.5 * s_t ), s_t = log sigma_t^2.
double uncertainty_loss(std::span<const double> losses, std::span<const double> s);

struct MinNormResult {
  std::vector<double> alpha;     // simplex weights
  std::vector<double> combined;  // sum_t alpha_t g_t
  double norm_sq = 0.0;
  std::size_t fw_iters = 0;
};

// Min-norm point of the gradient convex hull: Frank-Wolfe (<=250 iterations,
// stop on <1e-10 improvement) followed by an exact active-set polish
// (equality-constrained solve per support subset) so the simplex first-order
// certificate holds to ~1e-6 even on ill-conditioned 3+-task instances.
MinNormResult min_norm_point(const std::vector<std::vector<double>>& grads);

// alpha_1 = clip( ((g2-g1).g2) / ||g1-g2||^2, 0, 1 ); 0.5 when g1 == g2.
double min_norm_2task_closed_form(std::span<const double> g1, std::span<const double> g2);

// Gradient surgery: each task's gradient sheds its component along any
// conflicting (negative inner product) ORIGINAL other-task gradient, visiting
// the others in rng-shuffled order. Zero-norm conflicting partners are
// skipped.
std::vector<std::vector<double>> pcgrad(const std::vector<std::vector<double>>& grads,
                                        Rng& rng);

struct OptimizerConfig {
  enum class Kind { kSgd, kAdam } kind = Kind::kSgd;
  double lr = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// SGD or Adam over a fixed slot list; moments are allocated lazily. A slot
// whose gradient has stayed zero is left bit-identical (both rules preserve
// zero moments), which keeps no-aux trajectories exact.
class Optimizer {
 public:
  explicit Optimizer(OptimizerConfig cfg) : cfg_(cfg) {}

  void step(std::span<Tensor*> params, std::span<const Tensor> grads);
  const OptimizerConfig& config() const { return cfg_; }

 private:
  OptimizerConfig cfg_;
  std::vector<Tensor> m_, v_;
  std::uint64_t t_ = 0;
};

struct StrategyConfig {
  enum class Kind { kSingleTask, kLinear, kUncertainty, kMgdaUb, kPcgrad } kind = Kind::kLinear;
  double gamma = 0.0;
  OptimizerConfig optimizer;
};

const char* strategy_name(StrategyConfig::Kind kind);
StrategyConfig::Kind strategy_kind_from_name(std::string_view name);

// Per-trial mutable training state: optimizer moments, the uncertainty
// log-variances (updated by the same optimizer step), and the PCGrad
// shuffle stream.
struct TrainState {
  explicit TrainState(const StrategyConfig& strat, std::size_t num_tasks, const Rng& trial_rng);

  Optimizer opt;
  std::vector<Tensor> s;  // one scalar per task, uncertainty only
  Rng pcgrad_rng;
};

struct StepRecord {
  std::vector<double> main;                     // per-task main losses at this batch
  std::vector<std::optional<double>> aux;       // per-task aux losses (absent if not built)
  std::vector<double> alpha;                    // MGDA-UB weights (empty otherwise)
};

// One optimization step of the configured strategy. Self-auxiliary losses
// (gamma > 0) are folded into each task's loss before any strategy logic.
// Non-finite values propagate as NonFiniteError; the caller records a
// diverged trial.
StepRecord train_step(Model& model, const Batch& batch, const StrategyConfig& strat,
                      std::span<const double> w, TrainState& state);

}  // namespace mtl
