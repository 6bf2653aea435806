#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <doctest.h>
#include <filesystem>
#include <fstream>
#include <set>
#include <vector>

#include "mtl/errors.hpp"
#include "mtl/model.hpp"
#include "mtl/model_io.hpp"
#include "mtl/rng.hpp"

using namespace mtl;

namespace {

// Two regression tasks over a small dense trunk; the workhorse fixture.
ArchitectureSpec tiny_spec(AuxKind aux_kind) {
  ArchitectureSpec spec;
  spec.input_dim = 6;
  spec.shared_layers = {{SharedLayerSpec::Kind::kDense, 12, 0, 0, 1},
                        {SharedLayerSpec::Kind::kDense, 8, 0, 0, 1}};
  spec.tower_widths = {{5}, {4}};
  spec.heads = {{HeadKind::kRegression, 1}, {HeadKind::kRegression, 1}};
  AuxTowerSpec a;
  a.kind = aux_kind;
  if (aux_kind == AuxKind::kAvgPool) a.pool = 4;
  if (aux_kind == AuxKind::kBottleneck) a.bottleneck = 2;
  spec.aux = {a, a};
  return spec;
}

Batch random_batch(const ArchitectureSpec& spec, std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  Tensor x({n, spec.input_dim});
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
    b.targets.push_back(tt);
  }
  return b;
}

std::size_t total_params(const Model& m, const std::vector<std::size_t>& idx) {
  std::size_t n = 0;
  for (std::size_t i : idx) n += m.params[i].size();
  return n;
}

std::string temp_path(const std::string& tag) {
  static int counter = 0;
  return (std::filesystem::temp_directory_path() /
          ("mtl_model_" + tag + "_" + std::to_string(counter++)))
      .string();
}

}  // namespace

TEST_CASE("auxiliary head parameter counts follow the closed forms") {
  // M and C swept over the regimes used in the efficiency comparison; the
  // bottleneck must stay under the fc head whenever b << min(M, C).
  for (std::size_t m : {64u, 128u}) {
    for (std::size_t c : {10u, 100u}) {
      for (std::size_t b : {4u, 8u}) {
        ArchitectureSpec spec;
        spec.input_dim = 16;
        spec.shared_layers = {{SharedLayerSpec::Kind::kDense, m, 0, 0, 1}};
        spec.tower_widths = {{32, 24}};
        spec.heads = {{HeadKind::kClassification, c}};
        AuxTowerSpec a;
        a.kind = AuxKind::kBottleneck;
        a.bottleneck = b;
        spec.aux = {a};
        CAPTURE(m);
        CAPTURE(c);
        CAPTURE(b);
        CHECK(aux_param_count(spec, 0) == (m + 1) * b + (b + 1) * c);

        spec.aux[0].kind = AuxKind::kFc;
        CHECK(aux_param_count(spec, 0) == (m + 1) * c);
        CHECK((m + 1) * b + (b + 1) * c < (m + 1) * c);

        spec.aux[0].kind = AuxKind::kAvgPool;
        spec.aux[0].pool = 4;
        CHECK(aux_param_count(spec, 0) == (m / 4 + 1) * c);

        spec.aux[0].kind = AuxKind::kMirror;
        CHECK(aux_param_count(spec, 0) ==
              (m + 1) * 32 + 33 * 24 + 25 * c);

        spec.aux[0].kind = AuxKind::kNone;
        CHECK(aux_param_count(spec, 0) == 0);

        // The built model carries exactly the predicted tensors.
        spec.aux[0].kind = AuxKind::kBottleneck;
        const Model model = build_model(spec, 1);
        CHECK(total_params(model, model.partition.task_aux[0]) == (m + 1) * b + (b + 1) * c);
      }
    }
  }
}

TEST_CASE("built parameter groups are disjoint, exhaustive, and named") {
  const Model m = build_model(tiny_spec(AuxKind::kBottleneck), 3);
  std::set<std::size_t> seen;
  auto absorb = [&seen, &m](const std::vector<std::size_t>& group) {
    for (std::size_t i : group) {
      CHECK(i < m.params.size());
      CHECK(seen.insert(i).second);  // no index appears twice
    }
  };
  absorb(m.partition.shared);
  for (const auto& g : m.partition.task_main) absorb(g);
  for (const auto& g : m.partition.task_aux) absorb(g);
  CHECK(seen.size() == m.params.size());
  CHECK(m.names.size() == m.params.size());

  // shared.0.w is 6x12, shared biases start zero.
  REQUIRE(m.names[0] == "shared.0.w");
  CHECK(m.params[0].shape() == Shape{6, 12});
  REQUIRE(m.names[1] == "shared.0.b");
  for (double v : m.params[1].data()) CHECK(v == 0.0);

  // Glorot bound on the first weight matrix: sqrt(6/(6+12)).
  const double lim = std::sqrt(6.0 / 18.0);
  for (double v : m.params[0].data()) {
    CHECK(v >= -lim);
    CHECK(v <= lim);
  }
}

TEST_CASE("builder is seed-deterministic") {
  const ArchitectureSpec spec = tiny_spec(AuxKind::kFc);
  const Model a = build_model(spec, 7);
  const Model b = build_model(spec, 7);
  const Model c = build_model(spec, 8);
  REQUIRE(a.params.size() == b.params.size());
  for (std::size_t i = 0; i < a.params.size(); ++i) {
    CHECK(std::equal(a.params[i].data().begin(), a.params[i].data().end(),
                     b.params[i].data().begin()));
  }
  bool any_diff = false;
  for (std::size_t i = 0; i < a.params.size() && !any_diff; ++i) {
    any_diff = !std::equal(a.params[i].data().begin(), a.params[i].data().end(),
                           c.params[i].data().begin());
  }
  CHECK(any_diff);
}

TEST_CASE("architecture validation rejects nonsense") {
  ArchitectureSpec spec = tiny_spec(AuxKind::kNone);
  spec.heads.clear();
  spec.aux.clear();
  spec.tower_widths.clear();
  CHECK_THROWS_AS(spec.validate(), ConfigError);

  spec = tiny_spec(AuxKind::kAvgPool);
  spec.aux[0].pool = 3;  // does not divide M = 8
  CHECK_THROWS_AS(spec.validate(), ConfigError);

  spec = tiny_spec(AuxKind::kBottleneck);
  spec.aux[1].bottleneck = 0;
  CHECK_THROWS_AS(spec.validate(), ConfigError);

  spec = tiny_spec(AuxKind::kNone);
  spec.input_dim = 0;
  CHECK_THROWS_AS(spec.validate(), ConfigError);

  spec = tiny_spec(AuxKind::kNone);
  spec.aux[0].temperature = 0.0;
  CHECK_THROWS_AS(spec.validate(), ConfigError);

  spec = tiny_spec(AuxKind::kNone);
  spec.tower_widths.pop_back();
  CHECK_THROWS_AS(spec.validate(), ConfigError);
}

TEST_CASE("shared_dim tracks the trunk, dense and conv") {
  CHECK(tiny_spec(AuxKind::kNone).shared_dim() == 8);

  ArchitectureSpec conv;
  conv.input_image = ImageDims{1, 36, 36};
  SharedLayerSpec c1;
  c1.kind = SharedLayerSpec::Kind::kConv;
  c1.channels = 6;
  c1.kernel = 5;
  c1.stride = 2;
  conv.shared_layers = {c1};
  conv.tower_widths = {{}};
  conv.heads = {{HeadKind::kClassification, 10}};
  conv.aux = {{}};
  // (36-5)/2+1 = 16 per side, 6 channels.
  CHECK(conv.shared_dim() == 6 * 16 * 16);
  conv.validate();
}

TEST_CASE("the shared trunk is evaluated once per batch") {
  const Model m = build_model(tiny_spec(AuxKind::kMirror), 5);
  const Batch batch = random_batch(m.spec, 4, 11);

  Tape bare, with;
  const ForwardNodes f0 = forward_on_tape(m, bare, batch.inputs, false);
  const ForwardNodes f1 = forward_on_tape(m, with, batch.inputs, true);

  // Same trunk prefix on both tapes; towers only append nodes after h.
  CHECK(f0.nodes_through_shared == f1.nodes_through_shared);
  CHECK(f0.shared == f1.shared);
  CHECK(std::equal(bare.value(f0.shared).data().begin(), bare.value(f0.shared).data().end(),
                   with.value(f1.shared).data().begin()));
  for (std::size_t t = 0; t < 2; ++t) {
    CHECK(f1.main[t] >= f1.nodes_through_shared);
    REQUIRE(f1.aux[t].has_value());
    CHECK(*f1.aux[t] >= f1.nodes_through_shared);
    CHECK_FALSE(f0.aux[t].has_value());
  }

  // Trunk cost: input leaf + param leaves + 2 nodes per dense layer.
  CHECK(f0.nodes_through_shared == 1 + m.params.size() + 2 * 2);
}

TEST_CASE("task losses match a hand loop and predict matches forward") {
  const Model m = build_model(tiny_spec(AuxKind::kFc), 13);
  const Batch batch = random_batch(m.spec, 8, 21);

  const std::vector<TaskLoss> losses = task_losses(m, batch, true);
  const std::vector<Tensor> preds = predict(m, batch.inputs);
  REQUIRE(losses.size() == 2);
  REQUIRE(preds.size() == 2);

  for (std::size_t t = 0; t < 2; ++t) {
    double mse = 0.0;
    for (std::size_t i = 0; i < 8; ++i) {
      const double d = preds[t].at(i, 0) - batch.targets[t].regression.at(i, 0);
      mse += d * d;
    }
    mse /= 8.0;
    CHECK(losses[t].main == doctest::Approx(mse).epsilon(1e-12));
    CHECK(losses[t].aux.has_value());
  }

  const std::vector<TaskLoss> no_aux = task_losses(m, batch, false);
  for (const TaskLoss& tl : no_aux) CHECK_FALSE(tl.aux.has_value());
  CHECK(no_aux[0].main == losses[0].main);  // aux towers never perturb main

  // Perfect predictions drive the loss to zero.
  Batch perfect = batch;
  for (std::size_t t = 0; t < 2; ++t) perfect.targets[t].regression = preds[t];
  const std::vector<TaskLoss> zero = task_losses(m, perfect, false);
  CHECK(zero[0].main == doctest::Approx(0.0).epsilon(1e-15));
  CHECK(zero[1].main == doctest::Approx(0.0).epsilon(1e-15));
}

TEST_CASE("zero-initialized classifier scores ln(C) cross-entropy") {
  ArchitectureSpec spec = tiny_spec(AuxKind::kFc);
  spec.heads = {{HeadKind::kClassification, 10}, {HeadKind::kClassification, 7}};
  Model m = build_model(spec, 1);
  for (Tensor& p : m.params) p = Tensor::zeros(p.shape());
  const Batch batch = random_batch(spec, 16, 2);
  const std::vector<TaskLoss> losses = task_losses(m, batch, true);
  CHECK(losses[0].main == doctest::Approx(std::log(10.0)).epsilon(1e-12));
  CHECK(losses[1].main == doctest::Approx(std::log(7.0)).epsilon(1e-12));
  CHECK(*losses[0].aux == doctest::Approx(std::log(10.0)).epsilon(1e-12));
}

TEST_CASE("parameter partition isolates auxiliary towers from main outputs") {
  for (AuxKind kind : {AuxKind::kFc, AuxKind::kAvgPool, AuxKind::kBottleneck, AuxKind::kMirror}) {
    CAPTURE(static_cast<int>(kind));
    Model m = build_model(tiny_spec(kind), 17);
    const Batch batch = random_batch(m.spec, 5, 3);
    const std::vector<Tensor> before = predict(m, batch.inputs);
    const std::vector<TaskLoss> before_losses = task_losses(m, batch, true);

    // Kick every aux parameter of task 0 hard.
    REQUIRE_FALSE(m.partition.task_aux[0].empty());
    for (std::size_t idx : m.partition.task_aux[0]) {
      for (double& v : m.params[idx].data()) v += 7.5;
    }
    const std::vector<Tensor> after = predict(m, batch.inputs);
    for (std::size_t t = 0; t < 2; ++t) {
      CHECK(std::equal(before[t].data().begin(), before[t].data().end(),
                       after[t].data().begin()));
    }
    const std::vector<TaskLoss> after_losses = task_losses(m, batch, true);
    CHECK(after_losses[0].main == before_losses[0].main);
    CHECK(*after_losses[0].aux != *before_losses[0].aux);
    CHECK(*after_losses[1].aux == *before_losses[1].aux);  // other task untouched

    // A shared parameter moves every task.
    m.params[m.partition.shared[0]].data()[0] += 0.5;
    const std::vector<Tensor> shifted = predict(m, batch.inputs);
    for (std::size_t t = 0; t < 2; ++t) {
      CHECK_FALSE(std::equal(before[t].data().begin(), before[t].data().end(),
                             shifted[t].data().begin()));
    }
  }
}

TEST_CASE("gradients respect the partition") {
  const Model m = build_model(tiny_spec(AuxKind::kBottleneck), 23);
  const Batch batch = random_batch(m.spec, 6, 4);
  Tape tape;
  const LossNodes ln = losses_on_tape(m, tape, batch, true);

  // d(main_0)/d(aux params) = 0 and d(aux_0)/d(theta_1) = 0, etc.
  const Gradients g_main0 = tape.backward(ln.main_loss[0]);
  for (std::size_t t = 0; t < 2; ++t) {
    for (std::size_t idx : m.partition.task_aux[t]) {
      CHECK_FALSE(g_main0.reached(ln.fwd.params[idx]));
    }
  }
  for (std::size_t idx : m.partition.task_main[1]) {
    CHECK_FALSE(g_main0.reached(ln.fwd.params[idx]));
  }
  bool shared_touched = false;
  for (std::size_t idx : m.partition.shared) {
    shared_touched = shared_touched || g_main0.reached(ln.fwd.params[idx]);
  }
  CHECK(shared_touched);

  REQUIRE(ln.aux_loss[0].has_value());
  const Gradients g_aux0 = tape.backward(*ln.aux_loss[0]);
  for (std::size_t idx : m.partition.task_main[0]) {
    CHECK_FALSE(g_aux0.reached(ln.fwd.params[idx]));
  }
  for (std::size_t idx : m.partition.task_aux[1]) {
    CHECK_FALSE(g_aux0.reached(ln.fwd.params[idx]));
  }
  for (std::size_t idx : m.partition.task_aux[0]) {
    CHECK(g_aux0.reached(ln.fwd.params[idx]));
  }
}

TEST_CASE("checkpoints survive a round trip and reject mismatches") {
  const Model m = build_model(tiny_spec(AuxKind::kMirror), 31);
  const std::string path = temp_path("ckpt");
  save_model(path, m);

  const Model back = load_model(path);
  REQUIRE(back.params.size() == m.params.size());
  CHECK(back.names == m.names);
  for (std::size_t i = 0; i < m.params.size(); ++i) {
    CHECK(back.params[i].shape() == m.params[i].shape());
    CHECK(std::equal(back.params[i].data().begin(), back.params[i].data().end(),
                     m.params[i].data().begin()));
  }

  // Predictions agree bit-for-bit after the round trip.
  const Batch batch = random_batch(m.spec, 3, 6);
  const std::vector<Tensor> a = predict(m, batch.inputs);
  const std::vector<Tensor> b = predict(back, batch.inputs);
  for (std::size_t t = 0; t < 2; ++t) {
    CHECK(std::equal(a[t].data().begin(), a[t].data().end(), b[t].data().begin()));
  }

  SUBCASE("missing file") { CHECK_THROWS_AS(load_model(path + ".gone"), ParseError); }
  SUBCASE("bad magic") {
    std::fstream f(path, std::ios::binary | std::ios::in | std::ios::out);
    f.seekp(0);
    f.write("WRONGMAG", 8);
    f.close();
    CHECK_THROWS_AS(load_model(path), ParseError);
  }
  SUBCASE("truncated weights") {
    const auto size = std::filesystem::file_size(path);
    std::filesystem::resize_file(path, size - 9);
    CHECK_THROWS_AS(load_model(path), ParseError);
  }
  SUBCASE("sidecar names a different architecture") {
    const Model other = build_model(tiny_spec(AuxKind::kFc), 31);
    std::ofstream side(path + ".json", std::ios::trunc);
    side << architecture_to_json(other.spec).dump() << '\n';
    side.close();
    CHECK_THROWS_AS(load_model(path), ParseError);
  }
  std::remove(path.c_str());
  std::remove((path + ".json").c_str());
}

TEST_CASE("architecture JSON round-trips and rejects unknown keys") {
  for (const char* name : {"synthetic", "small", "medium", "large"}) {
    CAPTURE(name);
    const ArchitectureSpec spec = architecture_preset(name);
    const ArchitectureSpec back = architecture_from_json(architecture_to_json(spec));
    CHECK(back.input_dim == spec.input_dim);
    CHECK(back.input_image.has_value() == spec.input_image.has_value());
    CHECK(back.shared_layers.size() == spec.shared_layers.size());
    CHECK(back.tower_widths == spec.tower_widths);
    CHECK(back.num_tasks() == spec.num_tasks());
    CHECK(back.shared_dim() == spec.shared_dim());
    for (std::size_t t = 0; t < spec.num_tasks(); ++t) {
      CHECK(back.aux[t].kind == spec.aux[t].kind);
      CHECK(back.heads[t].kind == spec.heads[t].kind);
      CHECK(back.heads[t].dim == spec.heads[t].dim);
    }
  }
  CHECK_THROWS_AS(architecture_preset("gigantic"), ConfigError);

  nlohmann::json j{{"preset", "synthetic"}};
  const ArchitectureSpec preset = architecture_from_json(j);
  CHECK(preset.input_dim == 200);
  CHECK(preset.shared_dim() == 125);
  CHECK(preset.tower_widths[0] == std::vector<std::size_t>(5, 100));

  j["aux"] = nlohmann::json::array(
      {{{"kind", "bottleneck"}, {"b", 8}}, {{"kind", "none"}}});
  const ArchitectureSpec overridden = architecture_from_json(j);
  CHECK(overridden.aux[0].kind == AuxKind::kBottleneck);
  CHECK(overridden.aux[0].bottleneck == 8);
  CHECK(overridden.aux[1].kind == AuxKind::kNone);

  j["mystery"] = 1;
  CHECK_THROWS_AS(architecture_from_json(j), ConfigError);

  nlohmann::json bad = architecture_to_json(architecture_preset("small"));
  bad["aux"][0]["stride"] = 2;
  CHECK_THROWS_AS(architecture_from_json(bad), ConfigError);

  nlohmann::json missing = architecture_to_json(architecture_preset("small"));
  missing.erase("heads");
  CHECK_THROWS_AS(architecture_from_json(missing), ConfigError);
}

TEST_CASE("error_rate counts argmax mismatches with low-index ties") {
  const Tensor logits({4, 3}, {
      0.1, 0.9, 0.0,   // argmax 1
      2.0, 2.0, 1.0,   // tie -> 0
      0.0, 0.0, 5.0,   // argmax 2
      1.0, 0.0, 0.0,   // argmax 0
  });
  CHECK(error_rate(logits, {1, 0, 2, 0}) == 0.0);
  CHECK(error_rate(logits, {1, 1, 2, 0}) == doctest::Approx(0.25));
  CHECK(error_rate(logits, {0, 1, 1, 1}) == 1.0);
  CHECK_THROWS_AS(error_rate(logits, {0, 1}), DimensionError);
}

TEST_CASE("mirror towers cost no more than twice the plain forward") {
  // Coarse guard against the aux path re-running the trunk: with mirror
  // towers on both tasks the whole forward does at most ~2x the tower work,
  // and far less than 2x once the trunk dominates.
  ArchitectureSpec spec;
  spec.input_dim = 64;
  spec.shared_layers = {{SharedLayerSpec::Kind::kDense, 512, 0, 0, 1},
                        {SharedLayerSpec::Kind::kDense, 256, 0, 0, 1}};
  spec.tower_widths = {{16}, {16}};
  spec.heads = {{HeadKind::kRegression, 1}, {HeadKind::kRegression, 1}};
  AuxTowerSpec mirror;
  mirror.kind = AuxKind::kMirror;
  spec.aux = {mirror, mirror};
  const Model m = build_model(spec, 2);
  Tensor x({64, 64});
  Rng rng(5);
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = rng.uniform(-1.0, 1.0);

  auto time_forward = [&m, &x](bool with_aux) {
    // Warm up, then time the median of 5.
    std::vector<double> samples;
    for (int rep = 0; rep < 6; ++rep) {
      const auto start = std::chrono::steady_clock::now();
      Tape tape;
      forward_on_tape(m, tape, x, with_aux);
      const auto stop = std::chrono::steady_clock::now();
      if (rep > 0) {
        samples.push_back(std::chrono::duration<double>(stop - start).count());
      }
    }
    std::sort(samples.begin(), samples.end());
    return samples[samples.size() / 2];
  };

  const double bare = time_forward(false);
  const double with_aux = time_forward(true);
  CHECK(with_aux < 2.0 * bare + 1e-3);  // +1ms slack for scheduler noise
}
