#include <algorithm>
#include <cmath>
#include <doctest.h>
#include <vector>

#include "mtl/errors.hpp"
#include "mtl/model.hpp"
#include "mtl/moo.hpp"
#include "mtl/rng.hpp"

using namespace mtl;

namespace {

ArchitectureSpec two_task_spec(AuxKind aux_kind) {
  ArchitectureSpec spec;
  spec.input_dim = 5;
  spec.shared_layers = {{SharedLayerSpec::Kind::kDense, 10, 0, 0, 1},
                        {SharedLayerSpec::Kind::kDense, 8, 0, 0, 1}};
  spec.tower_widths = {{6}, {6}};
  spec.heads = {{HeadKind::kRegression, 1}, {HeadKind::kRegression, 1}};
  AuxTowerSpec a;
  a.kind = aux_kind;
  if (aux_kind == AuxKind::kAvgPool) a.pool = 2;
  if (aux_kind == AuxKind::kBottleneck) a.bottleneck = 2;
  spec.aux = {a, a};
  return spec;
}

Batch regression_batch(const ArchitectureSpec& spec, std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  Tensor x({n, spec.input_dim});
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = rng.uniform(-1.0, 1.0);
  Batch b;
  b.inputs = x;
  for (std::size_t t = 0; t < spec.num_tasks(); ++t) {
    TaskTargets tt;
    Tensor y({n, 1});
    for (std::size_t i = 0; i < n; ++i) y[i] = rng.uniform(-1.0, 1.0);
    tt.regression = y;
    b.targets.push_back(tt);
  }
  return b;
}

double norm_sq_at(const std::vector<std::vector<double>>& grads,
                  const std::vector<double>& alpha) {
  std::vector<double> combined(grads[0].size(), 0.0);
  for (std::size_t t = 0; t < grads.size(); ++t) {
    for (std::size_t k = 0; k < combined.size(); ++k) combined[k] += alpha[t] * grads[t][k];
  }
  double s = 0.0;
  for (double v : combined) s += v * v;
  return s;
}

void check_simplex_and_certificate(const std::vector<std::vector<double>>& grads,
                                   const MinNormResult& res) {
  double sum = 0.0;
  for (double a : res.alpha) {
    CHECK(a >= 0.0);
    sum += a;
  }
  CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));

  // First-order optimality over the simplex: no vertex improves on the
  // returned combination by more than the certificate tolerance.
  for (const auto& g : grads) {
    double along = 0.0;
    for (std::size_t k = 0; k < g.size(); ++k) along += g[k] * res.combined[k];
    CHECK(along >= res.norm_sq - 1e-6);
  }
}

}  // namespace

TEST_CASE("composite loss folds weighted mains and optional aux terms") {
  const std::vector<double> main = {2.0, 3.0};
  const std::vector<double> w = {0.25, 0.75};
  CHECK(composite_loss(main, nullptr, w, 0.5) == doctest::Approx(0.25 * 2 + 0.75 * 3));

  std::vector<std::optional<double>> aux = {4.0, std::nullopt};
  CHECK(composite_loss(main, &aux, w, 0.5) ==
        doctest::Approx(0.25 * (2 + 0.5 * 4) + 0.75 * 3));
  CHECK(composite_loss(main, &aux, w, 0.0) == doctest::Approx(0.25 * 2 + 0.75 * 3));

  CHECK_THROWS_AS(composite_loss(main, nullptr, {w.data(), 1}, 0.0), DimensionError);
}

TEST_CASE("uncertainty loss matches the closed form") {
  // s = log(sigma^2); at s = 0 each task contributes L/2.
  const std::vector<double> losses = {2.0, 4.0};
  const std::vector<double> s0 = {0.0, 0.0};
  CHECK(uncertainty_loss(losses, s0) == doctest::Approx(3.0));

  const std::vector<double> s = {0.0, std::log(2.0)};
  CHECK(uncertainty_loss(losses, s) ==
        doctest::Approx(0.5 * 2.0 + 0.5 * 0.5 * 4.0 + 0.5 * std::log(2.0)));
  CHECK_THROWS_AS(uncertainty_loss(losses, {s.data(), 1}), DimensionError);
}

TEST_CASE("two-task min-norm closed form") {
  const std::vector<double> g1 = {1.0, 0.0};
  const std::vector<double> g2 = {0.0, 1.0};
  CHECK(min_norm_2task_closed_form(g1, g2) == doctest::Approx(0.5));
  CHECK(min_norm_2task_closed_form(g1, g1) == 0.5);  // identical gradients

  // Aligned but different lengths: the shorter gradient wins outright.
  const std::vector<double> g_short = {1.0, 0.0};
  const std::vector<double> g_long = {3.0, 0.0};
  CHECK(min_norm_2task_closed_form(g_short, g_long) == 1.0);
  CHECK(min_norm_2task_closed_form(g_long, g_short) == 0.0);

  // Grid oracle on random pairs.
  Rng rng(77);
  for (int rep = 0; rep < 50; ++rep) {
    std::vector<double> a(6), b(6);
    for (double& v : a) v = rng.normal();
    for (double& v : b) v = rng.normal();
    const double alpha = min_norm_2task_closed_form(a, b);
    const double best = norm_sq_at({a, b}, {alpha, 1.0 - alpha});
    for (double guess = 0.0; guess <= 1.0; guess += 1.0 / 512) {
      CHECK(best <= norm_sq_at({a, b}, {guess, 1.0 - guess}) + 1e-9);
    }
  }
}

TEST_CASE("min_norm_point solves textbook instances") {
  SUBCASE("single gradient") {
    const MinNormResult res = min_norm_point({{3.0, 4.0}});
    CHECK(res.alpha == std::vector<double>{1.0});
    CHECK(res.norm_sq == doctest::Approx(25.0));
  }
  SUBCASE("opposed pair spans the origin") {
    const MinNormResult res = min_norm_point({{2.0, 0.0}, {-2.0, 0.0}});
    CHECK(res.alpha[0] == doctest::Approx(0.5).epsilon(1e-9));
    CHECK(res.norm_sq == doctest::Approx(0.0).epsilon(1e-12));
  }
  SUBCASE("three unit vectors at 120 degrees surround the origin") {
    const double c = std::cos(2.0 * std::acos(-1.0) / 3.0);
    const double s = std::sin(2.0 * std::acos(-1.0) / 3.0);
    const MinNormResult res = min_norm_point({{1.0, 0.0}, {c, s}, {c, -s}});
    CHECK(res.norm_sq == doctest::Approx(0.0).epsilon(1e-10));
    for (double a : res.alpha) CHECK(a == doctest::Approx(1.0 / 3.0).epsilon(1e-6));
  }
  SUBCASE("orthogonal pair") {
    const MinNormResult res = min_norm_point({{1.0, 0.0}, {0.0, 1.0}});
    CHECK(res.alpha[0] == doctest::Approx(0.5).epsilon(1e-9));
    CHECK(res.norm_sq == doctest::Approx(0.5).epsilon(1e-9));
  }
  SUBCASE("matches the two-task closed form") {
    Rng rng(5);
    for (int rep = 0; rep < 40; ++rep) {
      std::vector<double> a(4), b(4);
      for (double& v : a) v = rng.normal();
      for (double& v : b) v = rng.normal();
      const double alpha = min_norm_2task_closed_form(a, b);
      const MinNormResult res = min_norm_point({a, b});
      CHECK(res.alpha[0] == doctest::Approx(alpha).epsilon(1e-6));
    }
  }
}

TEST_CASE("min_norm_point certificate holds on adversarial ensembles") {
  Rng rng(2024);
  int near_degenerate = 0;
  for (int rep = 0; rep < 300; ++rep) {
    const std::size_t t_count = 2 + rng.next_below(4);   // 2..5 tasks
    const std::size_t dim = 2 + rng.next_below(14);      // 2..15 dims
    std::vector<std::vector<double>> grads(t_count, std::vector<double>(dim));
    const int flavor = static_cast<int>(rng.next_below(4));
    if (flavor == 0) {
      for (auto& g : grads) {
        for (double& v : g) v = rng.normal();
      }
    } else if (flavor == 1) {
      // Near-parallel cluster: the regime where raw Frank-Wolfe stalls.
      std::vector<double> base(dim);
      for (double& v : base) v = 5.0 * rng.normal();
      for (auto& g : grads) {
        for (std::size_t k = 0; k < dim; ++k) g[k] = base[k] + 1e-3 * rng.normal();
      }
      ++near_degenerate;
    } else if (flavor == 2) {
      // Duplicates and rescalings of one direction.
      std::vector<double> base(dim);
      for (double& v : base) v = rng.normal();
      for (auto& g : grads) {
        const double scale = 0.5 + rng.next_double();
        for (std::size_t k = 0; k < dim; ++k) g[k] = scale * base[k];
      }
    } else {
      // Opposed pairs plus noise; the hull usually contains the origin.
      for (auto& g : grads) {
        for (double& v : g) v = rng.normal();
      }
      if (t_count >= 2) {
        for (std::size_t k = 0; k < dim; ++k) grads[1][k] = -grads[0][k];
      }
    }
    CAPTURE(rep);
    CAPTURE(flavor);
    const MinNormResult res = min_norm_point(grads);
    check_simplex_and_certificate(grads, res);
    CHECK(res.fw_iters <= 250);
  }
  CHECK(near_degenerate > 20);  // the adversarial regime actually ran

  // A barycentric sweep cannot beat the returned point (3-task exactness).
  std::vector<std::vector<double>> tri = {{2.0, 1.0, 0.0}, {-1.0, 2.0, 0.5}, {0.3, -1.5, 2.0}};
  const MinNormResult res = min_norm_point(tri);
  const int steps = 60;
  for (int i = 0; i <= steps; ++i) {
    for (int j = 0; i + j <= steps; ++j) {
      const double a = static_cast<double>(i) / steps;
      const double b = static_cast<double>(j) / steps;
      CHECK(res.norm_sq <= norm_sq_at(tri, {a, b, 1.0 - a - b}) + 1e-9);
    }
  }

  CHECK_THROWS_AS(min_norm_point({}), DimensionError);
  CHECK_THROWS_AS(min_norm_point({{1.0, 2.0}, {1.0}}), DimensionError);
}

TEST_CASE("min_norm_point handles all-zero gradients") {
  const MinNormResult res = min_norm_point({{0.0, 0.0}, {0.0, 0.0}, {0.0, 0.0}});
  CHECK(res.norm_sq == 0.0);
  double sum = 0.0;
  for (double a : res.alpha) {
    CHECK(a >= 0.0);
    sum += a;
  }
  CHECK(sum == doctest::Approx(1.0));
}

TEST_CASE("pcgrad reproduces the worked two-task example") {
  Rng rng(1);
  const std::vector<std::vector<double>> grads = {{1.0, 0.0}, {-1.0, 1.0}};
  const auto out = pcgrad(grads, rng);
  // g1 . g2 = -1 < 0, so g1 sheds its component along g2 (norm^2 = 2):
  // (1,0) - (-1/2)(-1,1) = (0.5, 0.5). Symmetrically g2 becomes (0,1).
  CHECK(out[0][0] == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(out[0][1] == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(out[1][0] == doctest::Approx(0.0).epsilon(1e-15));
  CHECK(out[1][1] == doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("pcgrad leaves agreeing gradients untouched and skips zero partners") {
  Rng rng(2);
  const std::vector<std::vector<double>> agree = {{1.0, 1.0}, {2.0, 0.5}};
  CHECK(pcgrad(agree, rng) == agree);  // bitwise: no projection applied

  const std::vector<std::vector<double>> with_zero = {{1.0, -1.0}, {0.0, 0.0}};
  CHECK(pcgrad(with_zero, rng) == with_zero);
}

TEST_CASE("pcgrad removes pairwise conflict for two tasks") {
  Rng rng(3);
  for (int rep = 0; rep < 60; ++rep) {
    std::vector<double> a(5), b(5);
    for (double& v : a) v = rng.normal();
    for (double& v : b) v = rng.normal();
    const auto out = pcgrad({a, b}, rng);
    double d01 = 0.0, d10 = 0.0;
    for (std::size_t k = 0; k < 5; ++k) {
      d01 += out[0][k] * b[k];
      d10 += out[1][k] * a[k];
    }
    // After surgery each task is non-conflicting with the other ORIGINAL
    // gradient (exact for two tasks).
    CHECK(d01 >= -1e-9);
    CHECK(d10 >= -1e-9);
  }
}

TEST_CASE("pcgrad visits partners in an rng-driven order") {
  // With three tasks the projection order matters; two different stream
  // states must be able to disagree while a replayed stream agrees.
  const std::vector<std::vector<double>> grads = {
      {1.0, 0.0, 0.0}, {-1.0, 0.4, 0.0}, {-0.8, -1.0, 0.3}};
  Rng a(11), b(11), c(12);
  const auto out_a = pcgrad(grads, a);
  const auto out_b = pcgrad(grads, b);
  CHECK(out_a == out_b);
  bool seen_difference = false;
  for (int rep = 0; rep < 20 && !seen_difference; ++rep) {
    const auto out_c = pcgrad(grads, c);
    seen_difference = out_c != out_a;
  }
  CHECK(seen_difference);
}

TEST_CASE("sgd applies p -= lr * g exactly") {
  OptimizerConfig cfg;
  cfg.kind = OptimizerConfig::Kind::kSgd;
  cfg.lr = 0.1;
  Optimizer opt(cfg);
  Tensor p({2, 2}, {1.0, 2.0, 3.0, 4.0});
  const Tensor g({2, 2}, {0.5, -1.0, 0.0, 2.0});
  Tensor* slot = &p;
  opt.step({&slot, 1}, {&g, 1});
  CHECK(p.data()[0] == 1.0 - 0.1 * 0.5);
  CHECK(p.data()[1] == 2.0 + 0.1);
  CHECK(p.data()[2] == 3.0);
  CHECK(p.data()[3] == 4.0 - 0.2);
}

TEST_CASE("adam matches an independent reference trajectory") {
  OptimizerConfig cfg;
  cfg.kind = OptimizerConfig::Kind::kAdam;
  cfg.lr = 0.01;
  Optimizer opt(cfg);
  Tensor p({3}, {0.5, -0.25, 2.0});
  Tensor* slot = &p;

  // Reference loop maintained separately from the implementation.
  std::vector<double> ref = {0.5, -0.25, 2.0};
  std::vector<double> m(3, 0.0), v(3, 0.0);
  Rng rng(9);
  for (int step = 1; step <= 25; ++step) {
    Tensor g({3});
    for (std::size_t k = 0; k < 3; ++k) g[k] = rng.normal();
    opt.step({&slot, 1}, {&g, 1});
    for (std::size_t k = 0; k < 3; ++k) {
      m[k] = 0.9 * m[k] + 0.1 * g[k];
      v[k] = 0.999 * v[k] + 0.001 * g[k] * g[k];
      const double mhat = m[k] / (1.0 - std::pow(0.9, step));
      const double vhat = v[k] / (1.0 - std::pow(0.999, step));
      ref[k] -= 0.01 * mhat / (std::sqrt(vhat) + 1e-8);
      CHECK(p.data()[k] == doctest::Approx(ref[k]).epsilon(1e-12));
    }
  }
}

TEST_CASE("optimizers leave zero-gradient slots bit-identical") {
  for (auto kind : {OptimizerConfig::Kind::kSgd, OptimizerConfig::Kind::kAdam}) {
    OptimizerConfig cfg;
    cfg.kind = kind;
    cfg.lr = 0.05;
    Optimizer opt(cfg);
    Tensor live({2}, {1.0, -1.0});
    Tensor frozen({2}, {0.123456789, 3.0});
    const Tensor frozen_copy = frozen;
    Tensor* slots[2] = {&live, &frozen};
    const Tensor g_live({2}, {0.3, 0.7});
    const Tensor g_zero = Tensor::zeros({2});
    for (int step = 0; step < 10; ++step) {
      const Tensor gs[2] = {g_live, g_zero};
      opt.step({slots, 2}, {gs, 2});
    }
    CHECK(std::equal(frozen.data().begin(), frozen.data().end(), frozen_copy.data().begin()));
    CHECK_FALSE(std::equal(live.data().begin(), live.data().end(), frozen.data().begin()));
  }
}

TEST_CASE("optimizer rejects mismatched slots") {
  OptimizerConfig cfg;
  cfg.kind = OptimizerConfig::Kind::kAdam;
  Optimizer opt(cfg);
  Tensor p({2}, {1.0, 2.0});
  Tensor* slot = &p;
  const Tensor bad_shape({3}, {0.0, 0.0, 0.0});
  CHECK_THROWS_AS(opt.step({&slot, 1}, {&bad_shape, 1}), DimensionError);
  const Tensor ok({2}, {0.0, 0.0});
  opt.step({&slot, 1}, {&ok, 1});
  Tensor q({2}, {0.0, 0.0});
  Tensor* slots2[2] = {&p, &q};
  const Tensor gs[2] = {ok, ok};
  CHECK_THROWS_AS(opt.step({slots2, 2}, {gs, 2}), DimensionError);
}

TEST_CASE("strategy names round-trip") {
  for (auto kind : {StrategyConfig::Kind::kSingleTask, StrategyConfig::Kind::kLinear,
                    StrategyConfig::Kind::kUncertainty, StrategyConfig::Kind::kMgdaUb,
                    StrategyConfig::Kind::kPcgrad}) {
    CHECK(strategy_kind_from_name(strategy_name(kind)) == kind);
  }
  CHECK_THROWS_AS(strategy_kind_from_name("adamw"), ConfigError);
}

TEST_CASE("gamma = 0 training is bit-identical to a model without aux towers") {
  // Same seed, same batches; the aux towers exist but must not perturb a
  // single shared or task weight, and must not move themselves.
  for (auto opt_kind : {OptimizerConfig::Kind::kSgd, OptimizerConfig::Kind::kAdam}) {
    CAPTURE(static_cast<int>(opt_kind));
    Model with_aux = build_model(two_task_spec(AuxKind::kBottleneck), 42);
    Model without = build_model(two_task_spec(AuxKind::kNone), 42);
    const std::vector<Tensor> aux_at_init = [&] {
      std::vector<Tensor> copy;
      for (std::size_t t = 0; t < 2; ++t) {
        for (std::size_t idx : with_aux.partition.task_aux[t]) {
          copy.push_back(with_aux.params[idx]);
        }
      }
      return copy;
    }();

    StrategyConfig strat;
    strat.kind = StrategyConfig::Kind::kLinear;
    strat.gamma = 0.0;
    strat.optimizer.kind = opt_kind;
    strat.optimizer.lr = opt_kind == OptimizerConfig::Kind::kSgd ? 0.05 : 0.005;
    TrainState state_a(strat, 2, Rng(1));
    TrainState state_b(strat, 2, Rng(1));
    const std::vector<double> w = {0.6, 0.4};
    for (int step = 0; step < 12; ++step) {
      const Batch batch = regression_batch(with_aux.spec, 6, 100 + step);
      const StepRecord ra = train_step(with_aux, batch, strat, w, state_a);
      const StepRecord rb = train_step(without, batch, strat, w, state_b);
      CHECK(ra.main == rb.main);
      for (const auto& a : ra.aux) CHECK_FALSE(a.has_value());
    }

    for (std::size_t idx : with_aux.partition.shared) {
      const Tensor& a = with_aux.params[idx];
      const std::size_t j = idx;  // same construction order for shared slots
      CHECK(std::equal(a.data().begin(), a.data().end(), without.params[j].data().begin()));
    }
    // Task towers: match by name because aux tensors interleave the index
    // space on the aux-bearing model.
    for (std::size_t t = 0; t < 2; ++t) {
      for (std::size_t idx : with_aux.partition.task_main[t]) {
        const auto it = std::find(without.names.begin(), without.names.end(),
                                  with_aux.names[idx]);
        REQUIRE(it != without.names.end());
        const std::size_t j = static_cast<std::size_t>(it - without.names.begin());
        CHECK(std::equal(with_aux.params[idx].data().begin(),
                         with_aux.params[idx].data().end(),
                         without.params[j].data().begin()));
      }
    }
    // Aux parameters never moved.
    std::size_t k = 0;
    for (std::size_t t = 0; t < 2; ++t) {
      for (std::size_t idx : with_aux.partition.task_aux[t]) {
        CHECK(std::equal(with_aux.params[idx].data().begin(),
                         with_aux.params[idx].data().end(),
                         aux_at_init[k].data().begin()));
        ++k;
      }
    }
  }
}

TEST_CASE("single-task strategy equals linear with unit weight") {
  ArchitectureSpec spec = two_task_spec(AuxKind::kFc);
  spec.tower_widths = {{6}};
  spec.heads = {{HeadKind::kRegression, 1}};
  spec.aux = {spec.aux[0]};

  Model a = build_model(spec, 9);
  Model b = build_model(spec, 9);
  StrategyConfig single, linear;
  single.kind = StrategyConfig::Kind::kSingleTask;
  single.gamma = 0.5;
  single.optimizer.lr = 0.05;
  linear = single;
  linear.kind = StrategyConfig::Kind::kLinear;
  TrainState sa(single, 1, Rng(4));
  TrainState sb(linear, 1, Rng(4));
  const std::vector<double> unit = {1.0};
  for (int step = 0; step < 8; ++step) {
    const Batch batch = regression_batch(spec, 5, 300 + step);
    train_step(a, batch, single, {}, sa);  // single_task ignores weights
    train_step(b, batch, linear, unit, sb);
  }
  for (std::size_t i = 0; i < a.params.size(); ++i) {
    CHECK(std::equal(a.params[i].data().begin(), a.params[i].data().end(),
                     b.params[i].data().begin()));
  }

  Model two = build_model(two_task_spec(AuxKind::kNone), 9);
  TrainState st(single, 2, Rng(4));
  const Batch batch = regression_batch(two.spec, 5, 1);
  CHECK_THROWS_AS(train_step(two, batch, single, {}, st), ConfigError);
}

TEST_CASE("uncertainty weighting starts as half-weight linear and trains s") {
  // At s = 0 the model gradient is 0.5 * sum_t dL_t, identical to linear
  // with w = (0.5, 0.5); and after one SGD step s_t = lr * (L_t - 1) / 2.
  const ArchitectureSpec spec = two_task_spec(AuxKind::kNone);
  Model a = build_model(spec, 20);
  Model b = build_model(spec, 20);
  StrategyConfig unc, lin;
  unc.kind = StrategyConfig::Kind::kUncertainty;
  unc.optimizer.lr = 0.05;
  lin = unc;
  lin.kind = StrategyConfig::Kind::kLinear;
  TrainState su(unc, 2, Rng(8));
  TrainState sl(lin, 2, Rng(8));
  const Batch batch = regression_batch(spec, 6, 77);

  const StepRecord ru = train_step(a, batch, unc, {}, su);
  const std::vector<double> half = {0.5, 0.5};
  train_step(b, batch, lin, half, sl);
  for (std::size_t i = 0; i < a.params.size(); ++i) {
    CHECK(std::equal(a.params[i].data().begin(), a.params[i].data().end(),
                     b.params[i].data().begin()));
  }
  REQUIRE(su.s.size() == 2);
  for (std::size_t t = 0; t < 2; ++t) {
    const double expect = 0.05 * (ru.main[t] - 1.0) / 2.0;
    CHECK(su.s[t].data()[0] == doctest::Approx(expect).epsilon(1e-12));
  }

  // Over many steps the log-variances separate losses of different scales:
  // feed task 1 targets far from reach so its loss stays large.
  Model c = build_model(spec, 21);
  TrainState sc(unc, 2, Rng(9));
  for (int step = 0; step < 60; ++step) {
    Batch big = regression_batch(spec, 6, 500 + step);
    for (std::size_t i = 0; i < 6; ++i) big.targets[1].regression[i] += 25.0;
    train_step(c, big, unc, {}, sc);
  }
  CHECK(sc.s[1].data()[0] > sc.s[0].data()[0]);
}

TEST_CASE("mgda-ub records simplex weights and matches linear for one task") {
  ArchitectureSpec spec = two_task_spec(AuxKind::kFc);
  spec.tower_widths = {{6}};
  spec.heads = {{HeadKind::kRegression, 1}};
  spec.aux = {spec.aux[0]};
  Model a = build_model(spec, 33);
  Model b = build_model(spec, 33);

  StrategyConfig mgda, lin;
  mgda.kind = StrategyConfig::Kind::kMgdaUb;
  mgda.gamma = 0.25;
  mgda.optimizer.lr = 0.02;
  lin = mgda;
  lin.kind = StrategyConfig::Kind::kLinear;
  TrainState sm(mgda, 1, Rng(2));
  TrainState sl(lin, 1, Rng(2));
  const std::vector<double> unit = {1.0};
  for (int step = 0; step < 6; ++step) {
    const Batch batch = regression_batch(spec, 5, 900 + step);
    const StepRecord rec = train_step(a, batch, mgda, {}, sm);
    train_step(b, batch, lin, unit, sl);
    REQUIRE(rec.alpha.size() == 1);
    CHECK(rec.alpha[0] == doctest::Approx(1.0));
  }
  // For a single task the min-norm combination is the task gradient itself,
  // so the update must agree with plain descent (two-stage chain rule only
  // reorders float accumulation).
  for (std::size_t i = 0; i < a.params.size(); ++i) {
    for (std::size_t k = 0; k < a.params[i].size(); ++k) {
      CHECK(a.params[i].data()[k] ==
            doctest::Approx(b.params[i].data()[k]).epsilon(1e-9));
    }
  }
}

TEST_CASE("mgda-ub two-task weights satisfy the min-norm certificate") {
  const ArchitectureSpec spec = two_task_spec(AuxKind::kAvgPool);
  Model m = build_model(spec, 50);
  StrategyConfig mgda;
  mgda.kind = StrategyConfig::Kind::kMgdaUb;
  mgda.gamma = 1.0;
  mgda.optimizer.lr = 0.01;
  TrainState state(mgda, 2, Rng(3));
  for (int step = 0; step < 10; ++step) {
    const Batch batch = regression_batch(spec, 8, 40 + step);
    const StepRecord rec = train_step(m, batch, mgda, {}, state);
    REQUIRE(rec.alpha.size() == 2);
    CHECK(rec.alpha[0] >= 0.0);
    CHECK(rec.alpha[1] >= 0.0);
    CHECK(rec.alpha[0] + rec.alpha[1] == doctest::Approx(1.0).epsilon(1e-12));
    for (std::size_t t = 0; t < 2; ++t) CHECK(rec.aux[t].has_value());
  }
}

TEST_CASE("pcgrad equals summed linear descent when tasks agree") {
  // Two identical tasks produce identical gradients, so no projection fires
  // and the update equals linear with w = (1, 1) up to accumulation order.
  const ArchitectureSpec spec = two_task_spec(AuxKind::kNone);
  Model a = build_model(spec, 60);
  // Clone task 0's tower into task 1 so both tasks compute the same loss on
  // duplicated targets; their shared gradients then agree exactly and no
  // projection can fire.
  for (std::size_t k = 0; k < a.partition.task_main[0].size(); ++k) {
    a.params[a.partition.task_main[1][k]] = a.params[a.partition.task_main[0][k]];
  }
  Model b = a;
  StrategyConfig pc, lin;
  pc.kind = StrategyConfig::Kind::kPcgrad;
  pc.optimizer.lr = 0.03;
  lin = pc;
  lin.kind = StrategyConfig::Kind::kLinear;
  TrainState sp(pc, 2, Rng(6));
  TrainState sl(lin, 2, Rng(6));
  const std::vector<double> ones = {1.0, 1.0};
  for (int step = 0; step < 5; ++step) {
    Batch batch = regression_batch(spec, 6, 700 + step);
    batch.targets[1] = batch.targets[0];  // duplicate task
    train_step(a, batch, pc, {}, sp);
    train_step(b, batch, lin, ones, sl);
  }
  // No surgery fires, so pcgrad sums raw gradients; the only daylight from
  // linear w = (1,1) is float accumulation order.
  for (std::size_t i = 0; i < a.params.size(); ++i) {
    for (std::size_t k = 0; k < a.params[i].size(); ++k) {
      CHECK(a.params[i].data()[k] ==
            doctest::Approx(b.params[i].data()[k]).epsilon(1e-9));
    }
  }
}

TEST_CASE("every strategy makes progress on a fixed batch") {
  for (auto kind : {StrategyConfig::Kind::kLinear, StrategyConfig::Kind::kUncertainty,
                    StrategyConfig::Kind::kMgdaUb, StrategyConfig::Kind::kPcgrad}) {
    CAPTURE(strategy_name(kind));
    const ArchitectureSpec spec = two_task_spec(AuxKind::kBottleneck);
    Model m = build_model(spec, 70);
    StrategyConfig strat;
    strat.kind = kind;
    strat.gamma = 0.5;
    strat.optimizer.lr = kind == StrategyConfig::Kind::kUncertainty ? 0.01 : 0.02;
    TrainState state(strat, 2, Rng(5));
    const Batch batch = regression_batch(spec, 10, 888);
    const std::vector<double> w = {0.5, 0.5};

    const std::vector<TaskLoss> before = task_losses(m, batch, false);
    for (int step = 0; step < 40; ++step) train_step(m, batch, strat, w, state);
    const std::vector<TaskLoss> after = task_losses(m, batch, false);
    CHECK(after[0].main + after[1].main < before[0].main + before[1].main);
  }
}

TEST_CASE("train_step reports pre-step batch losses") {
  const ArchitectureSpec spec = two_task_spec(AuxKind::kFc);
  Model m = build_model(spec, 80);
  const Batch batch = regression_batch(spec, 7, 123);
  const std::vector<TaskLoss> expect = task_losses(m, batch, true);
  StrategyConfig strat;
  strat.kind = StrategyConfig::Kind::kLinear;
  strat.gamma = 2.0;
  strat.optimizer.lr = 0.01;
  TrainState state(strat, 2, Rng(7));
  const std::vector<double> w = {0.5, 0.5};
  const StepRecord rec = train_step(m, batch, strat, w, state);
  for (std::size_t t = 0; t < 2; ++t) {
    CHECK(rec.main[t] == expect[t].main);
    REQUIRE(rec.aux[t].has_value());
    CHECK(*rec.aux[t] == *expect[t].aux);
  }
}

TEST_CASE("divergence surfaces as NonFiniteError") {
  const ArchitectureSpec spec = two_task_spec(AuxKind::kNone);
  Model m = build_model(spec, 90);
  StrategyConfig strat;
  strat.kind = StrategyConfig::Kind::kLinear;
  strat.optimizer.lr = 1e8;  // guaranteed blow-up
  TrainState state(strat, 2, Rng(10));
  const Batch batch = regression_batch(spec, 6, 55);
  const std::vector<double> w = {0.5, 0.5};
  bool blew_up = false;
  for (int step = 0; step < 50 && !blew_up; ++step) {
    try {
      train_step(m, batch, strat, w, state);
    } catch (const NonFiniteError&) {
      blew_up = true;
    }
  }
  CHECK(blew_up);
}
