#include "mtl/moo.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "mtl/errors.hpp"

namespace mtl {
namespace {

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

// Solves A x = rhs in place by Gaussian elimination with partial pivoting.
// Returns false when a pivot vanishes (singular system).
bool solve_dense(std::vector<std::vector<double>>& a, std::vector<double>& rhs) {
  const std::size_t n = a.size();
  for (std::size_t col = 0; col < n; ++col) {
    std::size_t piv = col;
    for (std::size_t r = col + 1; r < n; ++r) {
      if (std::abs(a[r][col]) > std::abs(a[piv][col])) piv = r;
    }
    if (std::abs(a[piv][col]) < 1e-300) return false;
    std::swap(a[piv], a[col]);
    std::swap(rhs[piv], rhs[col]);
    for (std::size_t r = col + 1; r < n; ++r) {
      const double f = a[r][col] / a[col][col];
      if (f == 0.0) continue;
      for (std::size_t c = col; c < n; ++c) a[r][c] -= f * a[col][c];
      rhs[r] -= f * rhs[col];
    }
  }
  for (std::size_t i = n; i-- > 0;) {
    double s = rhs[i];
    for (std::size_t c = i + 1; c < n; ++c) s -= a[i][c] * rhs[c];
    rhs[i] = s / a[i][i];
  }
  return true;
}

double quad_form(const std::vector<std::vector<double>>& gram, std::span<const double> alpha) {
  double f = 0.0;
  for (std::size_t i = 0; i < alpha.size(); ++i) {
    for (std::size_t j = 0; j < alpha.size(); ++j) f += alpha[i] * gram[i][j] * alpha[j];
  }
  return f;
}

// Minimum of ||sum alpha_t g_t||^2 over the affine hull of the subset: the
// stationarity system [2 G_S, 1; 1^T, 0]. Feasible (nonnegative) solutions
// are exact face minimizers.
bool face_min(const std::vector<std::vector<double>>& gram, const std::vector<std::size_t>& subset,
              std::vector<double>& alpha_out) {
  const std::size_t m = subset.size();
  std::vector<std::vector<double>> a(m + 1, std::vector<double>(m + 1, 0.0));
  std::vector<double> rhs(m + 1, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < m; ++j) a[i][j] = 2.0 * gram[subset[i]][subset[j]];
    a[i][m] = 1.0;
    a[m][i] = 1.0;
  }
  rhs[m] = 1.0;
  if (!solve_dense(a, rhs)) return false;
  for (std::size_t i = 0; i < m; ++i) {
    if (rhs[i] < -1e-12) return false;
  }
  alpha_out.assign(gram.size(), 0.0);
  double total = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    const double v = std::max(rhs[i], 0.0);
    alpha_out[subset[i]] = v;
    total += v;
  }
  if (total <= 0.0) return false;
  for (double& v : alpha_out) v /= total;
  return true;
}

}  // namespace

double composite_loss(std::span<const double> main,
                      const std::vector<std::optional<double>>* aux,
                      std::span<const double> w, double gamma) {
  if (w.size() != main.size()) throw DimensionError("composite_loss: weight count mismatch");
  if (aux && aux->size() != main.size()) {
    throw DimensionError("composite_loss: aux count mismatch");
  }
  double total = 0.0;
  for (std::size_t t = 0; t < main.size(); ++t) {
    double task = main[t];
    if (aux && (*aux)[t]) task += gamma * *(*aux)[t];
    total += w[t] * task;
  }
  return total;
}

double uncertainty_loss(std::span<const double> losses, std::span<const double> s) {
  if (losses.size() != s.size()) throw DimensionError("uncertainty_loss: size mismatch");
  double total = 0.0;
  for (std::size_t t = 0; t < losses.size(); ++t) {
    total += 0.5 * std::exp(-s[t]) * losses[t] + 0.5 * s[t];
  }
  return total;
}

MinNormResult min_norm_point(const std::vector<std::vector<double>>& grads) {
  const std::size_t t_count = grads.size();
  if (t_count == 0) throw DimensionError("min_norm_point: no gradients");
  const std::size_t dim = grads[0].size();
  for (const auto& g : grads) {
    if (g.size() != dim) throw DimensionError("min_norm_point: ragged gradient list");
  }

  MinNormResult res;
  res.alpha.assign(t_count, 1.0 / static_cast<double>(t_count));
  if (t_count > 1) {
    std::vector<std::vector<double>> gram(t_count, std::vector<double>(t_count, 0.0));
    for (std::size_t i = 0; i < t_count; ++i) {
      for (std::size_t j = i; j < t_count; ++j) {
        gram[i][j] = gram[j][i] = dot(grads[i], grads[j]);
      }
    }

    // Frank-Wolfe with the closed-form line search
    //   gamma* = clip( ((gbar - g_t*) . gbar) / ||gbar - g_t*||^2, 0, 1 ),
    // expressed through the Gram matrix.
    std::vector<double>& alpha = res.alpha;
    std::vector<double> g_alpha(t_count);
    double f = quad_form(gram, alpha);
    for (std::size_t iter = 0; iter < 250; ++iter) {
      for (std::size_t t = 0; t < t_count; ++t) {
        g_alpha[t] = 0.0;
        for (std::size_t j = 0; j < t_count; ++j) g_alpha[t] += gram[t][j] * alpha[j];
      }
      const std::size_t best =
          static_cast<std::size_t>(std::min_element(g_alpha.begin(), g_alpha.end()) -
                                   g_alpha.begin());
      const double num = f - g_alpha[best];
      const double den = f - 2.0 * g_alpha[best] + gram[best][best];
      const double step = den > 0.0 ? std::clamp(num / den, 0.0, 1.0) : 0.0;
      res.fw_iters = iter + 1;
      if (step == 0.0) break;
      for (std::size_t t = 0; t < t_count; ++t) alpha[t] *= 1.0 - step;
      alpha[best] += step;
      const double f_new = quad_form(gram, alpha);
      const double improvement = f - f_new;
      f = f_new;
      if (improvement < 1e-10) break;
    }

    // Polish: the optimum sits in the relative interior of some face of the
    // simplex, where stationarity is a linear system. Enumerating faces (the
    // task count is small) recovers it to machine precision, which Frank-
    // Wolfe alone does not reliably reach on near-degenerate triples.
    if (t_count <= 16) {
      std::vector<double> cand;
      std::vector<std::size_t> subset;
      for (std::uint32_t mask = 1; mask < (1u << t_count); ++mask) {
        subset.clear();
        for (std::size_t t = 0; t < t_count; ++t) {
          if (mask & (1u << t)) subset.push_back(t);
        }
        if (!face_min(gram, subset, cand)) continue;
        const double f_cand = quad_form(gram, cand);
        if (f_cand < f) {
          f = f_cand;
          alpha = cand;
        }
      }
    }
  }

  res.combined.assign(dim, 0.0);
  for (std::size_t t = 0; t < t_count; ++t) {
    for (std::size_t k = 0; k < dim; ++k) res.combined[k] += res.alpha[t] * grads[t][k];
  }
  res.norm_sq = dot(res.combined, res.combined);
  return res;
}

double min_norm_2task_closed_form(std::span<const double> g1, std::span<const double> g2) {
  if (g1.size() != g2.size()) throw DimensionError("min_norm_2task: size mismatch");
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < g1.size(); ++i) {
    const double d = g2[i] - g1[i];
    num += d * g2[i];
    den += d * d;
  }
  if (den == 0.0) return 0.5;
  return std::clamp(num / den, 0.0, 1.0);
}

std::vector<std::vector<double>> pcgrad(const std::vector<std::vector<double>>& grads,
                                        Rng& rng) {
  const std::size_t t_count = grads.size();
  const std::size_t dim = t_count == 0 ? 0 : grads[0].size();
  for (const auto& g : grads) {
    if (g.size() != dim) throw DimensionError("pcgrad: ragged gradient list");
  }
  std::vector<double> norm_sq(t_count);
  for (std::size_t t = 0; t < t_count; ++t) norm_sq[t] = dot(grads[t], grads[t]);

  std::vector<std::vector<double>> out = grads;
  std::vector<std::size_t> order;
  for (std::size_t i = 0; i < t_count; ++i) {
    order.clear();
    for (std::size_t j = 0; j < t_count; ++j) {
      if (j != i) order.push_back(j);
    }
    rng.shuffle(order);
    for (std::size_t j : order) {
      if (norm_sq[j] == 0.0) continue;
      const double d = dot(out[i], grads[j]);  // projections use original g_j
      if (d >= 0.0) continue;
      const double c = d / norm_sq[j];
      for (std::size_t k = 0; k < dim; ++k) out[i][k] -= c * grads[j][k];
    }
  }
  return out;
}

void Optimizer::step(std::span<Tensor*> params, std::span<const Tensor> grads) {
  if (params.size() != grads.size()) throw DimensionError("optimizer: slot/grad count mismatch");
  if (m_.empty() && cfg_.kind == OptimizerConfig::Kind::kAdam) {
    m_.reserve(params.size());
    v_.reserve(params.size());
    for (const Tensor* p : params) {
      m_.push_back(Tensor::zeros(p->shape()));
      v_.push_back(Tensor::zeros(p->shape()));
    }
  }
  if (cfg_.kind == OptimizerConfig::Kind::kAdam && m_.size() != params.size()) {
    throw DimensionError("optimizer: slot count changed between steps");
  }
  ++t_;
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    const Tensor& g = grads[i];
    if (!p.same_shape(g)) {
      throw DimensionError("optimizer: grad shape mismatch at slot " + std::to_string(i));
    }
    std::vector<double> next(p.data().begin(), p.data().end());
    if (cfg_.kind == OptimizerConfig::Kind::kSgd) {
      for (std::size_t k = 0; k < next.size(); ++k) next[k] -= cfg_.lr * g.data()[k];
    } else {
      auto mv = m_[i].data();
      auto vv = v_[i].data();
      const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
      const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
      for (std::size_t k = 0; k < next.size(); ++k) {
        const double gk = g.data()[k];
        mv[k] = cfg_.beta1 * mv[k] + (1.0 - cfg_.beta1) * gk;
        vv[k] = cfg_.beta2 * vv[k] + (1.0 - cfg_.beta2) * gk * gk;
        const double mhat = mv[k] / bc1;
        const double vhat = vv[k] / bc2;
        next[k] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
      }
    }
    p = Tensor(p.shape(), std::move(next));  // re-validates finiteness
  }
}

const char* strategy_name(StrategyConfig::Kind kind) {
  switch (kind) {
    case StrategyConfig::Kind::kSingleTask: return "single_task";
    case StrategyConfig::Kind::kLinear: return "linear";
    case StrategyConfig::Kind::kUncertainty: return "uncertainty";
    case StrategyConfig::Kind::kMgdaUb: return "mgda_ub";
    case StrategyConfig::Kind::kPcgrad: return "pcgrad";
  }
  return "?";
}

StrategyConfig::Kind strategy_kind_from_name(std::string_view name) {
  if (name == "single_task") return StrategyConfig::Kind::kSingleTask;
  if (name == "linear") return StrategyConfig::Kind::kLinear;
  if (name == "uncertainty") return StrategyConfig::Kind::kUncertainty;
  if (name == "mgda_ub") return StrategyConfig::Kind::kMgdaUb;
  if (name == "pcgrad") return StrategyConfig::Kind::kPcgrad;
  throw ConfigError("unknown strategy: " + std::string(name));
}

TrainState::TrainState(const StrategyConfig& strat, std::size_t num_tasks, const Rng& trial_rng)
    : opt(strat.optimizer), pcgrad_rng(trial_rng.derive("pcgrad")) {
  if (strat.kind == StrategyConfig::Kind::kUncertainty) {
    s.assign(num_tasks, Tensor::scalar(0.0));
  }
}

namespace {

std::vector<double> flatten_grad(const Gradients& g, Tape::NodeId id) {
  auto d = g.grad(id).data();
  return {d.begin(), d.end()};
}

// Concatenated gradient over the listed parameter slots.
std::vector<double> gather_slots(const Gradients& g, const ForwardNodes& fwd,
                                 const std::vector<std::size_t>& slots) {
  std::vector<double> out;
  for (std::size_t idx : slots) {
    auto d = g.grad(fwd.params[idx]).data();
    out.insert(out.end(), d.begin(), d.end());
  }
  return out;
}

void scatter_slots(const std::vector<double>& flat, const Model& model,
                   const std::vector<std::size_t>& slots, std::vector<Tensor>& grads_out) {
  std::size_t pos = 0;
  for (std::size_t idx : slots) {
    const Shape& shape = model.params[idx].shape();
    const std::size_t n = model.params[idx].size();
    grads_out[idx] = Tensor(shape, std::vector<double>(flat.begin() + pos,
                                                       flat.begin() + pos + n));
    pos += n;
  }
}

}  // namespace

StepRecord train_step(Model& model, const Batch& batch, const StrategyConfig& strat,
                      std::span<const double> w, TrainState& state) {
  const std::size_t t_count = model.spec.num_tasks();
  if (strat.kind == StrategyConfig::Kind::kSingleTask && t_count != 1) {
    throw ConfigError("single_task strategy requires a one-task model");
  }
  const bool uses_w = strat.kind == StrategyConfig::Kind::kLinear;
  if (uses_w && w.size() != t_count) {
    throw DimensionError("train_step: weight count mismatch");
  }

  const bool with_aux = strat.gamma > 0.0;
  Tape tape;
  LossNodes ln = losses_on_tape(model, tape, batch, with_aux);

  // Fold the self-auxiliary term into each task's loss before any strategy
  // logic sees it.
  std::vector<Tape::NodeId> task_loss(t_count);
  StepRecord rec;
  rec.main.resize(t_count);
  rec.aux.resize(t_count);
  for (std::size_t t = 0; t < t_count; ++t) {
    rec.main[t] = tape.value(ln.main_loss[t]).data()[0];
    task_loss[t] = ln.main_loss[t];
    if (ln.aux_loss[t]) {
      rec.aux[t] = tape.value(*ln.aux_loss[t]).data()[0];
      task_loss[t] = tape.add(ln.main_loss[t], tape.scale(*ln.aux_loss[t], strat.gamma));
    }
  }

  std::vector<Tensor*> slots;
  slots.reserve(model.params.size() + state.s.size());
  for (Tensor& p : model.params) slots.push_back(&p);
  std::vector<Tensor> slot_grads(model.params.size());

  auto grads_from = [&](const Gradients& g) {
    for (std::size_t i = 0; i < model.params.size(); ++i) {
      slot_grads[i] = g.grad(ln.fwd.params[i]);
    }
  };

  switch (strat.kind) {
    case StrategyConfig::Kind::kSingleTask:
    case StrategyConfig::Kind::kLinear: {
      std::vector<double> ws(w.begin(), w.end());
      if (strat.kind == StrategyConfig::Kind::kSingleTask) ws.assign(1, 1.0);
      const Tape::NodeId total = tape.weighted_sum(task_loss, ws);
      grads_from(tape.backward(total));
      break;
    }
    case StrategyConfig::Kind::kUncertainty: {
      // sum_t ( 0.5 * exp(-s_t) * L_t + 0.5 * s_t ), built on the tape so the
      // same optimizer step trains s alongside the model parameters.
      std::vector<Tape::NodeId> s_ids(t_count), terms(t_count);
      for (std::size_t t = 0; t < t_count; ++t) {
        s_ids[t] = tape.leaf(state.s[t]);
        const Tape::NodeId weighted =
            tape.scale(tape.mul(tape.exp(tape.scale(s_ids[t], -1.0)), task_loss[t]), 0.5);
        terms[t] = tape.add(weighted, tape.scale(s_ids[t], 0.5));
      }
      const std::vector<double> ones(t_count, 1.0);
      const Tape::NodeId total = tape.weighted_sum(terms, ones);
      const Gradients g = tape.backward(total);
      grads_from(g);
      for (std::size_t t = 0; t < t_count; ++t) {
        slots.push_back(&state.s[t]);
        slot_grads.push_back(g.grad(s_ids[t]));
      }
      break;
    }
    case StrategyConfig::Kind::kMgdaUb: {
      // Per-task gradients with respect to the shared representation h; the
      // barrier keeps each backward pass from descending into the shared
      // stack.
      const Tape::NodeId h = ln.fwd.shared;
      Tape::BackwardOptions to_h;
      to_h.barrier = h;
      std::vector<std::vector<double>> h_grads(t_count);
      for (std::size_t t = 0; t < t_count; ++t) {
        const Gradients g = tape.backward(task_loss[t], to_h);
        h_grads[t] = flatten_grad(g, h);
        // Tower parameters (main and aux) take their own task's gradient.
        for (std::size_t idx : model.partition.task_main[t]) {
          slot_grads[idx] = g.grad(ln.fwd.params[idx]);
        }
        for (std::size_t idx : model.partition.task_aux[t]) {
          slot_grads[idx] = g.grad(ln.fwd.params[idx]);
        }
      }
      MinNormResult mn = min_norm_point(h_grads);
      rec.alpha = mn.alpha;
      // Shared parameters descend along d/dtheta_sh of h seeded with the
      // min-norm combination.
      Tape::BackwardOptions seeded;
      seeded.seed = Tensor(tape.value(h).shape(), std::move(mn.combined));
      const Gradients g_sh = tape.backward(h, seeded);
      for (std::size_t idx : model.partition.shared) {
        slot_grads[idx] = g_sh.grad(ln.fwd.params[idx]);
      }
      break;
    }
    case StrategyConfig::Kind::kPcgrad: {
      std::vector<std::vector<double>> shared_grads(t_count);
      for (std::size_t t = 0; t < t_count; ++t) {
        const Gradients g = tape.backward(task_loss[t]);
        shared_grads[t] = gather_slots(g, ln.fwd, model.partition.shared);
        for (std::size_t idx : model.partition.task_main[t]) {
          slot_grads[idx] = g.grad(ln.fwd.params[idx]);
        }
        for (std::size_t idx : model.partition.task_aux[t]) {
          slot_grads[idx] = g.grad(ln.fwd.params[idx]);
        }
      }
      const std::vector<std::vector<double>> projected = pcgrad(shared_grads, state.pcgrad_rng);
      std::vector<double> combined(shared_grads.empty() ? 0 : shared_grads[0].size(), 0.0);
      for (const auto& g : projected) {
        for (std::size_t k = 0; k < combined.size(); ++k) combined[k] += g[k];
      }
      scatter_slots(combined, model, model.partition.shared, slot_grads);
      break;
    }
  }

  // Aux slots never touched this step (gamma == 0) still need zero tensors
  // for the optimizer call.
  for (std::size_t i = 0; i < model.params.size(); ++i) {
    if (slot_grads[i].size() == 0) slot_grads[i] = Tensor::zeros(model.params[i].shape());
  }

  state.opt.step(slots, slot_grads);
  return rec;
}

}  // namespace mtl
