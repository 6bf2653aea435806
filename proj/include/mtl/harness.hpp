#pragma once

#include <cstdint>
#include <json.hpp>
#include <string>
#include <vector>

#include "mtl/datasets.hpp"
#include "mtl/model.hpp"
#include "mtl/moo.hpp"
#include "mtl/pareto.hpp"

namespace mtl {

// Where a trial's data comes from. "synthetic" generates the two-task
// regression benchmark from the trial seed; "multimnist"/"multifashion"
// composite pairs from user-supplied IDX files.
struct DatasetConfig {
  std::string kind = "synthetic";
  SyntheticSpec synthetic;           // seed is overwritten by the trial seed
  std::string images_path;           // image-pair kinds only
  std::string labels_path;
  std::size_t pairs_train = 2000;
  std::size_t pairs_test = 1000;

  bool is_images() const { return kind != "synthetic"; }
  void validate() const;
};

struct ExperimentConfig {
  DatasetConfig dataset;
  ArchitectureSpec architecture;
  StrategyConfig strategy;
  std::vector<double> weights;  // task weights; uniform when left empty
  std::size_t epochs = 1;
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;

  void validate() const;
  // Weights with the uniform default applied.
  std::vector<double> resolved_weights() const;
};

// FNV-1a over the canonical resolved JSON, seed excluded: two configs share
// a hash exactly when they describe the same experiment up to the seed.
std::string config_hash(const ExperimentConfig& cfg);

nlohmann::json experiment_to_json(const ExperimentConfig& cfg);
ExperimentConfig experiment_from_json(const nlohmann::json& j);

struct RunRecord {
  std::string config_hash;
  std::uint64_t seed = 0;
  std::string strategy;
  double gamma = 0.0;
  std::vector<double> w;
  std::vector<double> train_loss;   // per-task mean main loss over the final epoch
  std::vector<double> test_metric;  // per-task test MSE or error rate; +inf when diverged
  std::string status;               // "ok" | "diverged"
  std::uint64_t wall_ms = 0;

  bool operator==(const RunRecord&) const = default;
};

// Trains per the config and evaluates the main heads on the test split.
// Divergence is caught: the record keeps the last finite training losses,
// infinite test metrics, and status "diverged". `trained` (optional)
// receives the fitted model on an ok run.
RunRecord run_trial(const ExperimentConfig& cfg, Model* trained = nullptr);

struct SweepSpec {
  ExperimentConfig base;
  std::vector<std::vector<double>> weight_grid;  // defaults to the base weights
  std::vector<double> gammas;                    // defaults to the base gamma
  std::vector<std::uint64_t> seeds;              // defaults to the base seed
  std::vector<double> lrs;                       // defaults to the base lr
  std::vector<std::string> presets;              // defaults to the base architecture
  std::size_t parallelism = 1;

  std::size_t cartesian_size() const;
};

SweepSpec sweep_from_json(const nlohmann::json& j);

// Evenly spaced two-task simplex weights w1 in {1/(n+1), ..., n/(n+1)}.
std::vector<std::vector<double>> simplex_grid_2task(std::size_t n);

// Runs every cell (preset x gamma x lr x weights x seeds, in that nesting
// order) with up to `parallelism` trials in flight. Row order is always the
// cartesian order. Individual failures become "diverged" rows.
std::vector<RunRecord> run_sweep(const SweepSpec& spec);

std::string records_to_csv(const std::vector<RunRecord>& records);
std::vector<RunRecord> records_from_csv(const std::string& csv);

struct FrontierReport {
  std::vector<ParetoPoint> frontier;  // lexicographically sorted
  std::size_t n_ok = 0;
  double hypervolume = 0.0;           // two-task only, 0 otherwise
  std::vector<double> ref;            // componentwise max over ok rows, x1.1
  bool convex = true;
  std::size_t convexity_violations = 0;
  ParetoPoint middle;                 // frontier point nearest the normalized diagonal
};

struct ReportOptions {
  // Input metrics are accuracies (higher better): convert to error rates
  // before filtering so every objective is minimized.
  bool accuracies = false;
  // Which record columns become objectives ("test_metric_k" or
  // "train_loss_k"). Empty selects every test_metric column.
  std::vector<std::string> metric_columns;
};

// Frontier + summary over the ok rows of a sweep. Throws ConfigError when
// no row is usable.
FrontierReport report_frontier(const std::vector<RunRecord>& records,
                               const ReportOptions& opts = {});

std::string frontier_to_csv(const FrontierReport& report);
nlohmann::json report_summary_json(const FrontierReport& report);

struct GradcheckCell {
  std::string preset;
  std::string aux;
  std::string loss;
  double max_rel_err = 0.0;
};

struct GradcheckReport {
  std::vector<GradcheckCell> cells;
  double worst = 0.0;
  bool pass = true;  // every cell under the 1e-4 bar
};

// Finite-difference audit of every architecture preset x aux kind x loss
// form (linear, composite gamma=0.5, uncertainty), sampling a few entries
// per tensor. One cell per combination.
GradcheckReport cmd_gradcheck(std::size_t entries_per_param = 5);

}  // namespace mtl
