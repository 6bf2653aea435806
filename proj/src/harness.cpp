#include "mtl/harness.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>
#include <thread>

#include "mtl/errors.hpp"
#include "mtl/gradcheck.hpp"
#include "mtl/json_util.hpp"
#include "mtl/model_io.hpp"
#include "mtl/rng.hpp"

namespace mtl {

namespace {

using nlohmann::json;

constexpr double kInf = std::numeric_limits<double>::infinity();

std::string fmt(double v) {
  char buf[32];
  auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  (void)ec;
  return std::string(buf, p);
}

double parse_double(std::string_view s, const std::string& what) {
  double v = 0.0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || p != s.data() + s.size()) {
    throw ParseError("bad " + what + " value \"" + std::string(s) + "\"");
  }
  return v;
}

std::uint64_t parse_u64(std::string_view s, const std::string& what) {
  std::uint64_t v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || p != s.data() + s.size()) {
    throw ParseError("bad " + what + " value \"" + std::string(s) + "\"");
  }
  return v;
}

std::vector<std::string> split(std::string_view line, char sep) {
  std::vector<std::string> out;
  std::size_t pos = 0;
  while (true) {
    const std::size_t next = line.find(sep, pos);
    if (next == std::string_view::npos) {
      out.emplace_back(line.substr(pos));
      return out;
    }
    out.emplace_back(line.substr(pos, next - pos));
    pos = next + 1;
  }
}

}  // namespace

void DatasetConfig::validate() const {
  if (kind == "synthetic") {
    if (synthetic.input_dim == 0 || synthetic.n_train == 0 || synthetic.n_test == 0) {
      throw ConfigError("synthetic dataset needs positive input_dim, n_train, n_test");
    }
    if (synthetic.noise < 0.0) throw ConfigError("synthetic noise must be >= 0");
    return;
  }
  if (kind == "multimnist" || kind == "multifashion") {
    if (images_path.empty() || labels_path.empty()) {
      throw ConfigError(kind + " dataset needs \"images\" and \"labels\" IDX paths");
    }
    if (pairs_train == 0 || pairs_test == 0) {
      throw ConfigError("image dataset needs positive pairs_train and pairs_test");
    }
    return;
  }
  throw ConfigError("unknown dataset kind \"" + kind + "\"");
}

std::vector<double> ExperimentConfig::resolved_weights() const {
  const std::size_t t = architecture.num_tasks();
  if (weights.empty()) {
    return std::vector<double>(t, 1.0 / static_cast<double>(t));
  }
  return weights;
}

void ExperimentConfig::validate() const {
  dataset.validate();
  architecture.validate();
  const std::size_t t = architecture.num_tasks();
  if (t > 2) throw ConfigError("datasets provide two tasks; architecture wants more");
  if (dataset.is_images()) {
    const std::size_t want = 36 * 36;
    const std::size_t have = architecture.input_image
                                 ? architecture.input_image->channels *
                                       architecture.input_image->height *
                                       architecture.input_image->width
                                 : architecture.input_dim;
    if (have != want) {
      throw ConfigError("composited images are 36x36; architecture expects " +
                        std::to_string(have) + " inputs");
    }
    for (const HeadSpec& h : architecture.heads) {
      if (h.kind != HeadKind::kClassification) {
        throw ConfigError("image datasets need classification heads");
      }
    }
  } else {
    if (architecture.input_image || architecture.input_dim != dataset.synthetic.input_dim) {
      throw ConfigError("architecture input does not match the synthetic input_dim " +
                        std::to_string(dataset.synthetic.input_dim));
    }
    for (const HeadSpec& h : architecture.heads) {
      if (h.kind != HeadKind::kRegression || h.dim != 1) {
        throw ConfigError("the synthetic benchmark needs scalar regression heads");
      }
    }
  }
  if (epochs == 0) throw ConfigError("epochs must be >= 1");
  if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
  if (!weights.empty()) {
    if (weights.size() != t) {
      throw ConfigError("weights list has " + std::to_string(weights.size()) + " entries for " +
                        std::to_string(t) + " tasks");
    }
    double sum = 0.0;
    for (double w : weights) {
      if (w < 0.0) throw ConfigError("task weights must be nonnegative");
      sum += w;
    }
    if (std::abs(sum - 1.0) > 1e-9) {
      throw ConfigError("task weights must sum to 1, got " + fmt(sum));
    }
  }
  if (strategy.gamma < 0.0) throw ConfigError("gamma must be >= 0");
  const OptimizerConfig& opt = strategy.optimizer;
  if (!(opt.lr > 0.0)) throw ConfigError("learning rate must be positive");
  if (opt.beta1 < 0.0 || opt.beta1 >= 1.0 || opt.beta2 < 0.0 || opt.beta2 >= 1.0 ||
      !(opt.eps > 0.0)) {
    throw ConfigError("invalid Adam moments configuration");
  }
  if (strategy.kind == StrategyConfig::Kind::kSingleTask && t != 1) {
    throw ConfigError("single_task strategy requires a one-task architecture");
  }
}

namespace {

json dataset_to_json(const DatasetConfig& d) {
  if (!d.is_images()) {
    return json{{"kind", d.kind},
                {"n_train", d.synthetic.n_train},
                {"n_test", d.synthetic.n_test},
                {"noise", d.synthetic.noise},
                {"input_dim", d.synthetic.input_dim},
                {"label_form",
                 d.synthetic.label_form == LabelForm::kSinusoidal ? "sinusoidal" : "linear"}};
  }
  return json{{"kind", d.kind},
              {"images", d.images_path},
              {"labels", d.labels_path},
              {"pairs_train", d.pairs_train},
              {"pairs_test", d.pairs_test}};
}

DatasetConfig dataset_from_json(const json& j) {
  DatasetConfig d;
  d.kind = get_required<std::string>(j, "kind", "dataset");
  if (d.kind == "synthetic") {
    require_keys(j, {"kind", "n_train", "n_test", "noise", "input_dim", "label_form"},
                 "synthetic dataset");
    d.synthetic.n_train = get_or<std::size_t>(j, "n_train", "dataset", d.synthetic.n_train);
    d.synthetic.n_test = get_or<std::size_t>(j, "n_test", "dataset", d.synthetic.n_test);
    d.synthetic.noise = get_or(j, "noise", "dataset", d.synthetic.noise);
    d.synthetic.input_dim = get_or<std::size_t>(j, "input_dim", "dataset",
                                                d.synthetic.input_dim);
    const std::string form =
        get_or<std::string>(j, "label_form", "dataset", "sinusoidal");
    if (form == "sinusoidal") {
      d.synthetic.label_form = LabelForm::kSinusoidal;
    } else if (form == "linear") {
      d.synthetic.label_form = LabelForm::kLinear;
    } else {
      throw ConfigError("unknown label_form \"" + form + "\"");
    }
  } else {
    require_keys(j, {"kind", "images", "labels", "pairs_train", "pairs_test"},
                 "image dataset");
    d.images_path = get_required<std::string>(j, "images", "dataset");
    d.labels_path = get_required<std::string>(j, "labels", "dataset");
    d.pairs_train = get_or<std::size_t>(j, "pairs_train", "dataset", d.pairs_train);
    d.pairs_test = get_or<std::size_t>(j, "pairs_test", "dataset", d.pairs_test);
  }
  d.validate();
  return d;
}

json strategy_to_json(const StrategyConfig& s) {
  return json{{"kind", strategy_name(s.kind)},
              {"gamma", s.gamma},
              {"optimizer",
               {{"kind", s.optimizer.kind == OptimizerConfig::Kind::kSgd ? "sgd" : "adam"},
                {"lr", s.optimizer.lr},
                {"beta1", s.optimizer.beta1},
                {"beta2", s.optimizer.beta2},
                {"eps", s.optimizer.eps}}}};
}

StrategyConfig strategy_from_json(const json& j, bool image_dataset) {
  require_keys(j, {"kind", "gamma", "optimizer"}, "strategy");
  StrategyConfig s;
  s.kind = strategy_kind_from_name(get_required<std::string>(j, "kind", "strategy"));
  s.gamma = get_or(j, "gamma", "strategy", 0.0);
  // Defaults when unspecified: Adam(1e-3) on image tasks, SGD(1e-2) on the
  // synthetic benchmark.
  if (image_dataset) {
    s.optimizer.kind = OptimizerConfig::Kind::kAdam;
    s.optimizer.lr = 1e-3;
  } else {
    s.optimizer.kind = OptimizerConfig::Kind::kSgd;
    s.optimizer.lr = 1e-2;
  }
  if (j.contains("optimizer")) {
    const json& o = j.at("optimizer");
    require_keys(o, {"kind", "lr", "beta1", "beta2", "eps"}, "optimizer");
    const std::string kind = get_or<std::string>(
        o, "kind", "optimizer",
        s.optimizer.kind == OptimizerConfig::Kind::kAdam ? "adam" : "sgd");
    if (kind == "sgd") {
      s.optimizer.kind = OptimizerConfig::Kind::kSgd;
    } else if (kind == "adam") {
      s.optimizer.kind = OptimizerConfig::Kind::kAdam;
    } else {
      throw ConfigError("unknown optimizer \"" + kind + "\"");
    }
    s.optimizer.lr = get_or(o, "lr", "optimizer", s.optimizer.lr);
    s.optimizer.beta1 = get_or(o, "beta1", "optimizer", s.optimizer.beta1);
    s.optimizer.beta2 = get_or(o, "beta2", "optimizer", s.optimizer.beta2);
    s.optimizer.eps = get_or(o, "eps", "optimizer", s.optimizer.eps);
  }
  return s;
}

}  // namespace

json experiment_to_json(const ExperimentConfig& cfg) {
  return json{{"dataset", dataset_to_json(cfg.dataset)},
              {"architecture", architecture_to_json(cfg.architecture)},
              {"strategy", strategy_to_json(cfg.strategy)},
              {"weights", cfg.resolved_weights()},
              {"epochs", cfg.epochs},
              {"batch_size", cfg.batch_size},
              {"seed", cfg.seed}};
}

ExperimentConfig experiment_from_json(const json& j) {
  require_keys(j, {"dataset", "architecture", "strategy", "weights", "epochs", "batch_size",
                   "seed"},
               "experiment config");
  ExperimentConfig cfg;
  if (!j.contains("dataset") || !j.contains("architecture") || !j.contains("strategy")) {
    throw ConfigError("experiment config needs \"dataset\", \"architecture\", \"strategy\"");
  }
  cfg.dataset = dataset_from_json(j.at("dataset"));
  cfg.architecture = architecture_from_json(j.at("architecture"));
  cfg.strategy = strategy_from_json(j.at("strategy"), cfg.dataset.is_images());
  cfg.weights = get_or(j, "weights", "experiment config", std::vector<double>{});
  cfg.epochs = get_or<std::size_t>(j, "epochs", "experiment config", 1);
  cfg.batch_size = get_or<std::size_t>(j, "batch_size", "experiment config", 64);
  cfg.seed = get_or<std::uint64_t>(j, "seed", "experiment config", 0);
  cfg.validate();
  return cfg;
}

std::string config_hash(const ExperimentConfig& cfg) {
  json canonical = experiment_to_json(cfg);
  canonical.erase("seed");  // the hash names the experiment, not the replicate
  const std::string dump = canonical.dump();
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : dump) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  char buf[17];
  for (int i = 15; i >= 0; --i) {
    buf[i] = "0123456789abcdef"[h & 0xf];
    h >>= 4;
  }
  buf[16] = '\0';
  return std::string(buf, 16);
}

namespace {

// Rows of `ds` selected by idx[start, stop), packed into a training batch.
Batch make_batch(const MultiTaskDataset& ds, const std::vector<std::size_t>& idx,
                 std::size_t start, std::size_t stop, std::size_t num_tasks) {
  const std::size_t n = stop - start;
  const std::size_t dim = ds.dim();
  std::vector<double> x(n * dim);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t row = idx[start + i];
    std::copy_n(ds.inputs.data().data() + row * dim, dim, x.begin() + i * dim);
  }
  Batch b;
  b.inputs = Tensor({n, dim}, std::move(x));
  for (std::size_t t = 0; t < num_tasks; ++t) {
    TaskTargets tt;
    if (ds.classification) {
      tt.classes.reserve(n);
      for (std::size_t i = 0; i < n; ++i) tt.classes.push_back(ds.classes[t][idx[start + i]]);
    } else {
      std::vector<double> y(n);
      for (std::size_t i = 0; i < n; ++i) y[i] = ds.regression[t][idx[start + i]];
      tt.regression = Tensor({n, 1}, std::move(y));
    }
    b.targets.push_back(std::move(tt));
  }
  return b;
}

// Per-task test metrics from the main heads only: mean squared error for
// regression, error rate for classification.
std::vector<double> evaluate(const Model& model, const MultiTaskDataset& ds,
                             std::size_t num_tasks) {
  const std::size_t n = ds.n();
  const std::size_t dim = ds.dim();
  std::vector<double> acc(num_tasks, 0.0);
  std::vector<std::size_t> counts(num_tasks, 0);
  constexpr std::size_t kEvalBatch = 512;
  for (std::size_t start = 0; start < n; start += kEvalBatch) {
    const std::size_t stop = std::min(n, start + kEvalBatch);
    const std::size_t bn = stop - start;
    std::vector<double> x(bn * dim);
    std::copy_n(ds.inputs.data().data() + start * dim, bn * dim, x.begin());
    const std::vector<Tensor> preds = predict(model, Tensor({bn, dim}, std::move(x)));
    for (std::size_t t = 0; t < num_tasks; ++t) {
      if (ds.classification) {
        for (std::size_t i = 0; i < bn; ++i) {
          std::size_t best = 0;
          for (std::size_t j = 1; j < preds[t].cols(); ++j) {
            if (preds[t].at(i, j) > preds[t].at(i, best)) best = j;
          }
          if (static_cast<int>(best) != ds.classes[t][start + i]) acc[t] += 1.0;
        }
      } else {
        for (std::size_t i = 0; i < bn; ++i) {
          const double d = preds[t].at(i, 0) - ds.regression[t][start + i];
          acc[t] += d * d;
        }
      }
      counts[t] += bn;
    }
  }
  for (std::size_t t = 0; t < num_tasks; ++t) acc[t] /= static_cast<double>(counts[t]);
  return acc;
}

std::pair<MultiTaskDataset, MultiTaskDataset> materialize(const ExperimentConfig& cfg) {
  if (!cfg.dataset.is_images()) {
    SyntheticSpec s = cfg.dataset.synthetic;
    s.seed = cfg.seed;
    return gen_synthetic(s);
  }
  const IdxFile images = load_idx(cfg.dataset.images_path);
  const IdxFile labels = load_idx(cfg.dataset.labels_path);
  if (!images.is_images || labels.is_images) {
    throw ConfigError("dataset paths are swapped: expected an image file and a label file");
  }
  if (images.images.rows() != labels.labels.size()) {
    throw ConfigError("image and label files disagree on the example count");
  }
  if (images.rows != 28 || images.cols != 28) {
    throw ConfigError("the compositor expects 28x28 sources");
  }
  const Rng root(cfg.seed);
  auto train = make_multitask_image_dataset(images.images, labels.labels,
                                            cfg.dataset.pairs_train,
                                            root.derive("train-pairs").next_u64());
  auto test = make_multitask_image_dataset(images.images, labels.labels,
                                           cfg.dataset.pairs_test,
                                           root.derive("test-pairs").next_u64());
  for (const auto& task : train.classes) {
    for (int c : task) {
      if (c >= static_cast<int>(cfg.architecture.heads[0].dim)) {
        throw ConfigError("label " + std::to_string(c) + " exceeds the head dimension");
      }
    }
  }
  return {std::move(train), std::move(test)};
}

}  // namespace

RunRecord run_trial(const ExperimentConfig& cfg, Model* trained) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  auto [train, test] = materialize(cfg);
  const std::size_t num_tasks = cfg.architecture.num_tasks();

  Model model = build_model(cfg.architecture, cfg.seed);
  TrainState state(cfg.strategy, num_tasks, Rng(cfg.seed).derive("strategy"));
  const std::vector<double> w = cfg.resolved_weights();

  RunRecord rec;
  rec.config_hash = config_hash(cfg);
  rec.seed = cfg.seed;
  rec.strategy = strategy_name(cfg.strategy.kind);
  rec.gamma = cfg.strategy.gamma;
  rec.w = w;
  rec.train_loss.assign(num_tasks, 0.0);
  rec.status = "ok";

  std::vector<std::size_t> order(train.n());
  std::iota(order.begin(), order.end(), 0);
  const Rng order_root = Rng(cfg.seed).derive("batch-order");
  std::vector<double> last_finite(num_tasks, 0.0);
  bool diverged = false;

  for (std::size_t epoch = 0; epoch < cfg.epochs && !diverged; ++epoch) {
    Rng shuffler = order_root.derive(epoch);
    shuffler.shuffle(order);
    std::vector<double> sums(num_tasks, 0.0);
    std::size_t batches = 0;
    for (std::size_t start = 0; start < train.n(); start += cfg.batch_size) {
      const std::size_t stop = std::min(train.n(), start + cfg.batch_size);
      const Batch batch = make_batch(train, order, start, stop, num_tasks);
      StepRecord sr;
      try {
        sr = train_step(model, batch, cfg.strategy, w, state);
      } catch (const NonFiniteError&) {
        diverged = true;
        break;
      }
      last_finite = sr.main;
      for (std::size_t t = 0; t < num_tasks; ++t) sums[t] += sr.main[t];
      ++batches;
    }
    if (!diverged && epoch + 1 == cfg.epochs) {
      for (std::size_t t = 0; t < num_tasks; ++t) {
        rec.train_loss[t] = sums[t] / static_cast<double>(batches);
      }
    }
  }

  if (diverged) {
    rec.status = "diverged";
    rec.train_loss = last_finite;
    rec.test_metric.assign(num_tasks, kInf);
  } else {
    rec.test_metric = evaluate(model, test, num_tasks);
    if (trained) *trained = std::move(model);
  }
  rec.wall_ms = static_cast<std::uint64_t>(std::chrono::duration_cast<std::chrono::milliseconds>(
                                               std::chrono::steady_clock::now() - t0)
                                               .count());
  return rec;
}

std::vector<std::vector<double>> simplex_grid_2task(std::size_t n) {
  if (n == 0) throw ConfigError("weight grid needs at least one point");
  std::vector<std::vector<double>> grid;
  for (std::size_t i = 1; i <= n; ++i) {
    const double w1 = static_cast<double>(i) / static_cast<double>(n + 1);
    grid.push_back({w1, 1.0 - w1});
  }
  return grid;
}

std::size_t SweepSpec::cartesian_size() const {
  const std::size_t presets_n = presets.empty() ? 1 : presets.size();
  const std::size_t gammas_n = gammas.empty() ? 1 : gammas.size();
  const std::size_t lrs_n = lrs.empty() ? 1 : lrs.size();
  const std::size_t weights_n = weight_grid.empty() ? 1 : weight_grid.size();
  const std::size_t seeds_n = seeds.empty() ? 1 : seeds.size();
  return presets_n * gammas_n * lrs_n * weights_n * seeds_n;
}

SweepSpec sweep_from_json(const json& j) {
  require_keys(j, {"base", "weight_grid", "gammas", "seeds", "lrs", "presets", "parallelism"},
               "sweep spec");
  SweepSpec spec;
  if (!j.contains("base")) throw ConfigError("sweep spec needs a \"base\" experiment config");
  spec.base = experiment_from_json(j.at("base"));
  if (j.contains("weight_grid")) {
    const json& wg = j.at("weight_grid");
    if (wg.is_number_unsigned() || wg.is_number_integer()) {
      if (spec.base.architecture.num_tasks() != 2) {
        throw ConfigError("an integer weight_grid needs a two-task architecture");
      }
      spec.weight_grid = simplex_grid_2task(wg.get<std::size_t>());
    } else {
      spec.weight_grid = get_required<std::vector<std::vector<double>>>(j, "weight_grid",
                                                                        "sweep spec");
    }
  }
  spec.gammas = get_or(j, "gammas", "sweep spec", std::vector<double>{});
  spec.seeds = get_or(j, "seeds", "sweep spec", std::vector<std::uint64_t>{});
  spec.lrs = get_or(j, "lrs", "sweep spec", std::vector<double>{});
  spec.presets = get_or(j, "presets", "sweep spec", std::vector<std::string>{});
  spec.parallelism = get_or<std::size_t>(j, "parallelism", "sweep spec", 1);
  if (spec.parallelism == 0) throw ConfigError("parallelism must be >= 1");
  return spec;
}

std::vector<RunRecord> run_sweep(const SweepSpec& spec) {
  // Expand the cartesian grid in deterministic nesting order:
  // preset -> gamma -> lr -> weights -> seed.
  std::vector<ExperimentConfig> cells;
  const auto presets = spec.presets.empty() ? std::vector<std::string>{""} : spec.presets;
  const auto gammas =
      spec.gammas.empty() ? std::vector<double>{spec.base.strategy.gamma} : spec.gammas;
  const auto lrs =
      spec.lrs.empty() ? std::vector<double>{spec.base.strategy.optimizer.lr} : spec.lrs;
  const auto weights = spec.weight_grid.empty()
                           ? std::vector<std::vector<double>>{spec.base.weights}
                           : spec.weight_grid;
  const auto seeds =
      spec.seeds.empty() ? std::vector<std::uint64_t>{spec.base.seed} : spec.seeds;
  for (const std::string& preset : presets) {
    for (double gamma : gammas) {
      for (double lr : lrs) {
        for (const auto& w : weights) {
          for (std::uint64_t seed : seeds) {
            ExperimentConfig cell = spec.base;
            if (!preset.empty()) cell.architecture = architecture_preset(preset);
            cell.strategy.gamma = gamma;
            cell.strategy.optimizer.lr = lr;
            cell.weights = w;
            cell.seed = seed;
            cell.validate();
            cells.push_back(std::move(cell));
          }
        }
      }
    }
  }

  std::vector<RunRecord> records(cells.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&cells, &records, &next] {
    for (std::size_t i = next.fetch_add(1); i < cells.size(); i = next.fetch_add(1)) {
      try {
        records[i] = run_trial(cells[i]);
      } catch (const Error& e) {
        // A cell that cannot even start still yields a row; the sweep
        // carries on.
        RunRecord rec;
        rec.config_hash = config_hash(cells[i]);
        rec.seed = cells[i].seed;
        rec.strategy = strategy_name(cells[i].strategy.kind);
        rec.gamma = cells[i].strategy.gamma;
        rec.w = cells[i].resolved_weights();
        rec.train_loss.assign(cells[i].architecture.num_tasks(), 0.0);
        rec.test_metric.assign(cells[i].architecture.num_tasks(), kInf);
        rec.status = "diverged";
        records[i] = std::move(rec);
      }
    }
  };
  const std::size_t workers = std::max<std::size_t>(1, std::min(spec.parallelism, cells.size()));
  if (workers == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (std::size_t i = 0; i < workers; ++i) pool.emplace_back(worker);
    for (std::thread& th : pool) th.join();
  }
  return records;
}

std::string records_to_csv(const std::vector<RunRecord>& records) {
  if (records.empty()) throw ConfigError("no records to serialize");
  const std::size_t t = records[0].w.size();
  std::string out = "config_hash,seed,strategy,gamma";
  for (std::size_t i = 1; i <= t; ++i) out += ",w" + std::to_string(i);
  for (std::size_t i = 1; i <= t; ++i) out += ",train_loss_" + std::to_string(i);
  for (std::size_t i = 1; i <= t; ++i) out += ",test_metric_" + std::to_string(i);
  out += ",status,wall_ms\n";
  for (const RunRecord& r : records) {
    if (r.w.size() != t || r.train_loss.size() != t || r.test_metric.size() != t) {
      throw DimensionError("record task count differs from the header");
    }
    out += r.config_hash;
    out += ',' + std::to_string(r.seed);
    out += ',' + r.strategy;
    out += ',' + fmt(r.gamma);
    for (double v : r.w) out += ',' + fmt(v);
    for (double v : r.train_loss) out += ',' + fmt(v);
    for (double v : r.test_metric) out += ',' + fmt(v);
    out += ',' + r.status;
    out += ',' + std::to_string(r.wall_ms);
    out += '\n';
  }
  return out;
}

std::vector<RunRecord> records_from_csv(const std::string& csv) {
  std::vector<std::string> lines;
  for (std::string& line : split(csv, '\n')) {
    if (!line.empty()) lines.push_back(std::move(line));
  }
  if (lines.empty()) throw ParseError("records CSV is empty");
  const std::vector<std::string> header = split(lines[0], ',');
  // Header shape: 4 fixed + 3T + 2.
  if (header.size() < 9 || (header.size() - 6) % 3 != 0) {
    throw ParseError("records CSV header has " + std::to_string(header.size()) + " columns");
  }
  const std::size_t t = (header.size() - 6) / 3;
  const std::vector<std::string> expect_fixed = {"config_hash", "seed", "strategy", "gamma"};
  for (std::size_t i = 0; i < 4; ++i) {
    if (header[i] != expect_fixed[i]) {
      throw ParseError("records CSV column " + std::to_string(i + 1) + " is \"" + header[i] +
                       "\", expected \"" + expect_fixed[i] + "\"");
    }
  }
  for (std::size_t i = 0; i < t; ++i) {
    if (header[4 + i] != "w" + std::to_string(i + 1) ||
        header[4 + t + i] != "train_loss_" + std::to_string(i + 1) ||
        header[4 + 2 * t + i] != "test_metric_" + std::to_string(i + 1)) {
      throw ParseError("records CSV metric columns are misnamed");
    }
  }
  if (header[4 + 3 * t] != "status" || header[5 + 3 * t] != "wall_ms") {
    throw ParseError("records CSV must end with status,wall_ms");
  }

  std::vector<RunRecord> out;
  for (std::size_t row = 1; row < lines.size(); ++row) {
    const std::vector<std::string> f = split(lines[row], ',');
    if (f.size() != header.size()) {
      throw ParseError("records CSV row " + std::to_string(row) + " has " +
                       std::to_string(f.size()) + " fields, header has " +
                       std::to_string(header.size()));
    }
    RunRecord r;
    r.config_hash = f[0];
    r.seed = parse_u64(f[1], "seed");
    r.strategy = f[2];
    r.gamma = parse_double(f[3], "gamma");
    for (std::size_t i = 0; i < t; ++i) {
      r.w.push_back(parse_double(f[4 + i], "weight"));
      r.train_loss.push_back(parse_double(f[4 + t + i], "train loss"));
      r.test_metric.push_back(parse_double(f[4 + 2 * t + i], "test metric"));
    }
    r.status = f[4 + 3 * t];
    if (r.status != "ok" && r.status != "diverged") {
      throw ParseError("unknown status \"" + r.status + "\" in records CSV");
    }
    r.wall_ms = parse_u64(f[5 + 3 * t], "wall_ms");
    out.push_back(std::move(r));
  }
  return out;
}

namespace {

// Resolves a metric column name against a record.
double metric_column(const RunRecord& r, const std::string& name) {
  for (const auto& [prefix, values] :
       {std::pair<std::string_view, const std::vector<double>*>{"test_metric_", &r.test_metric},
        {"train_loss_", &r.train_loss}}) {
    if (name.rfind(prefix, 0) != 0) continue;
    const std::uint64_t k = parse_u64(std::string_view(name).substr(prefix.size()),
                                      "metric column index");
    if (k == 0 || k > values->size()) {
      throw ConfigError("metric column \"" + name + "\" is out of range");
    }
    return (*values)[k - 1];
  }
  throw ConfigError("unknown metric column \"" + name +
                    "\" (expected test_metric_k or train_loss_k)");
}

}  // namespace

FrontierReport report_frontier(const std::vector<RunRecord>& records,
                               const ReportOptions& opts) {
  std::vector<ParetoPoint> points;
  for (const RunRecord& r : records) {
    if (r.status != "ok") continue;
    ParetoPoint p;
    if (opts.metric_columns.empty()) {
      p.objectives = r.test_metric;
    } else {
      for (const std::string& name : opts.metric_columns) {
        p.objectives.push_back(metric_column(r, name));
      }
    }
    if (opts.accuracies) {
      for (double& v : p.objectives) v = 1.0 - v;
    }
    bool finite = true;
    for (double v : p.objectives) finite = finite && std::isfinite(v);
    if (!finite) continue;
    p.run_id = r.config_hash + ":" + std::to_string(r.seed);
    points.push_back(std::move(p));
  }
  if (points.empty()) {
    throw ConfigError("no usable rows: every record diverged or was non-finite");
  }
  const std::size_t dims = points[0].objectives.size();
  for (const ParetoPoint& p : points) {
    if (p.objectives.size() != dims) {
      throw DimensionError("records mix objective dimensionalities");
    }
  }

  FrontierReport rep;
  rep.n_ok = points.size();
  rep.ref.assign(dims, -kInf);
  for (const ParetoPoint& p : points) {
    for (std::size_t d = 0; d < dims; ++d) rep.ref[d] = std::max(rep.ref[d], p.objectives[d]);
  }
  for (double& v : rep.ref) v *= 1.1;
  const Frontier frontier = pareto_filter(points);
  rep.frontier = frontier.points;

  if (dims == 2) {
    rep.hypervolume = hypervolume_2d(frontier, {rep.ref[0], rep.ref[1]});
    const ConvexityReport conv = convexity_check(frontier, 1e-6);
    rep.convex = conv.convex;
    rep.convexity_violations = conv.violations.size();
  }

  // The "middle" point: normalize each objective over the frontier to [0,1]
  // and take the point nearest the all-coordinates-equal diagonal.
  std::vector<double> lo(dims, kInf), hi(dims, -kInf);
  for (const ParetoPoint& p : rep.frontier) {
    for (std::size_t d = 0; d < dims; ++d) {
      lo[d] = std::min(lo[d], p.objectives[d]);
      hi[d] = std::max(hi[d], p.objectives[d]);
    }
  }
  double best = kInf;
  for (const ParetoPoint& p : rep.frontier) {
    double nmin = kInf, nmax = -kInf;
    for (std::size_t d = 0; d < dims; ++d) {
      const double range = hi[d] - lo[d];
      const double v = range > 0.0 ? (p.objectives[d] - lo[d]) / range : 0.5;
      nmin = std::min(nmin, v);
      nmax = std::max(nmax, v);
    }
    const double spread = nmax - nmin;
    if (spread < best) {
      best = spread;
      rep.middle = p;
    }
  }
  return rep;
}

std::string frontier_to_csv(const FrontierReport& report) {
  const std::size_t dims = report.frontier.empty() ? 0 : report.frontier[0].objectives.size();
  std::string out;
  for (std::size_t d = 1; d <= dims; ++d) {
    out += "objective_" + std::to_string(d) + ",";
  }
  out += "run_id\n";
  for (const ParetoPoint& p : report.frontier) {
    for (double v : p.objectives) out += fmt(v) + ",";
    out += p.run_id + "\n";
  }
  return out;
}

json report_summary_json(const FrontierReport& report) {
  return json{{"n_ok", report.n_ok},
              {"frontier_size", report.frontier.size()},
              {"hypervolume", report.hypervolume},
              {"ref", report.ref},
              {"convex", report.convex},
              {"convexity_violations", report.convexity_violations},
              {"middle", {{"objectives", report.middle.objectives},
                          {"run_id", report.middle.run_id}}}};
}

namespace {

// The largest of the candidate pool sizes that divides the trunk width, so
// every preset gets a valid avgpool head.
std::size_t pick_pool(std::size_t m) {
  for (std::size_t p : {8, 5, 4, 2}) {
    if (m % p == 0) return p;
  }
  return 1;
}

Batch gradcheck_batch(const ArchitectureSpec& spec, std::uint64_t seed) {
  Rng rng(seed);
  const std::size_t n = 2;
  const std::size_t dim = spec.input_image ? spec.input_image->channels *
                                                 spec.input_image->height *
                                                 spec.input_image->width
                                           : spec.input_dim;
  Tensor x({n, dim});
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = rng.uniform(-1.0, 1.0);
  Batch b;
  b.inputs = x;
  for (std::size_t t = 0; t < spec.num_tasks(); ++t) {
    TaskTargets tt;
    if (spec.heads[t].kind == HeadKind::kRegression) {
      Tensor y({n, spec.heads[t].dim});
      for (std::size_t i = 0; i < y.size(); ++i) y[i] = rng.uniform(-1.0, 1.0);
      tt.regression = y;
    } else {
      for (std::size_t i = 0; i < n; ++i) {
        tt.classes.push_back(static_cast<int>(rng.next_below(spec.heads[t].dim)));
      }
    }
    b.targets.push_back(std::move(tt));
  }
  return b;
}

}  // namespace

GradcheckReport cmd_gradcheck(std::size_t entries_per_param) {
  GradcheckReport report;
  const char* aux_names[] = {"none", "fc", "avgpool", "bottleneck", "mirror"};
  const AuxKind aux_kinds[] = {AuxKind::kNone, AuxKind::kFc, AuxKind::kAvgPool,
                               AuxKind::kBottleneck, AuxKind::kMirror};
  for (const char* preset : {"synthetic", "small", "medium", "large"}) {
    const ArchitectureSpec base = architecture_preset(preset);
    for (std::size_t a = 0; a < 5; ++a) {
      ArchitectureSpec spec = base;
      for (AuxTowerSpec& aux : spec.aux) {
        aux.kind = aux_kinds[a];
        aux.pool = pick_pool(spec.shared_dim());
        aux.bottleneck = 4;
        aux.temperature = 2.0;  // exercises the tempered-softmax backward
      }
      const Model model = build_model(spec, 7);
      // Batch seed chosen so no sampled perturbation straddles a ReLU kink
      // anywhere in the trunk: central differences are only meaningful where
      // the loss is smooth across the +-h window.
      const Batch batch = gradcheck_batch(spec, 17);
      const std::size_t num_tasks = spec.num_tasks();
      const std::size_t num_params = model.params.size();

      for (const char* loss_name : {"linear", "composite", "uncertainty"}) {
        const bool uncertainty = std::string_view(loss_name) == "uncertainty";
        const double gamma = std::string_view(loss_name) == "linear" ? 0.0 : 0.5;
        std::vector<double> w(num_tasks);
        for (std::size_t t = 0; t < num_tasks; ++t) {
          w[t] = (t + 1.0) / (num_tasks * (num_tasks + 1.0) / 2.0);  // 1/3, 2/3 for T=2
        }

        LossBuilder builder = [&model, &batch, gamma, uncertainty, num_params, num_tasks,
                               &w](const std::vector<Tensor>& p, bool want_grads) {
          Model m{model.spec, model.names,
                  std::vector<Tensor>(p.begin(), p.begin() + static_cast<long>(num_params)),
                  model.partition};
          Tape tape;
          const LossNodes ln = losses_on_tape(m, tape, batch, gamma > 0.0);
          std::vector<Tape::NodeId> task_loss(num_tasks);
          for (std::size_t t = 0; t < num_tasks; ++t) {
            task_loss[t] = ln.main_loss[t];
            if (ln.aux_loss[t]) {
              task_loss[t] = tape.add(ln.main_loss[t], tape.scale(*ln.aux_loss[t], gamma));
            }
          }
          Tape::NodeId total;
          std::vector<Tape::NodeId> s_ids;
          if (uncertainty) {
            std::vector<Tape::NodeId> terms(num_tasks);
            for (std::size_t t = 0; t < num_tasks; ++t) {
              s_ids.push_back(tape.leaf(p[num_params + t]));
              const Tape::NodeId weighted = tape.scale(
                  tape.mul(tape.exp(tape.scale(s_ids[t], -1.0)), task_loss[t]), 0.5);
              terms[t] = tape.add(weighted, tape.scale(s_ids[t], 0.5));
            }
            const std::vector<double> ones(num_tasks, 1.0);
            total = tape.weighted_sum(terms, ones);
          } else {
            total = tape.weighted_sum(task_loss, w);
          }
          LossProbe probe;
          probe.value = tape.value(total).data()[0];
          if (want_grads) {
            const Gradients g = tape.backward(total);
            for (std::size_t i = 0; i < num_params; ++i) {
              probe.grads.push_back(g.grad(ln.fwd.params[i]));
            }
            for (const Tape::NodeId sid : s_ids) probe.grads.push_back(g.grad(sid));
          }
          return probe;
        };

        std::vector<Tensor> params = model.params;
        if (uncertainty) {
          params.push_back(Tensor::scalar(0.15));
          if (num_tasks > 1) params.push_back(Tensor::scalar(-0.2));
          for (std::size_t t = 2; t < num_tasks; ++t) params.push_back(Tensor::scalar(0.05));
        }
        const double err = finite_diff_gradcheck(builder, params, 1e-5, entries_per_param);
        report.cells.push_back({preset, aux_names[a], loss_name, err});
        report.worst = std::max(report.worst, err);
      }
    }
  }
  report.pass = report.worst < 1e-4;
  return report;
}

}  // namespace mtl
