#include "mtl/model.hpp"

#include <cmath>
#include <string>

#include "mtl/errors.hpp"
#include "mtl/rng.hpp"

namespace mtl {

namespace {

// Shape of the representation flowing through the shared stack.
struct Flow {
  std::size_t dim = 0;
  std::optional<ImageDims> image;
};

Flow input_flow(const ArchitectureSpec& spec) {
  if (spec.input_image) {
    const ImageDims& d = *spec.input_image;
    return {d.channels * d.height * d.width, d};
  }
  return {spec.input_dim, std::nullopt};
}

Flow advance(const Flow& in, const SharedLayerSpec& layer) {
  if (layer.kind == SharedLayerSpec::Kind::kDense) {
    if (layer.width == 0) throw ConfigError("dense shared layer needs a positive width");
    return {layer.width, std::nullopt};
  }
  if (!in.image) throw ConfigError("conv layer applied to a non-image representation");
  const ImageDims& d = *in.image;
  if (layer.channels == 0 || layer.kernel == 0 || layer.stride == 0 ||
      layer.kernel > d.height || layer.kernel > d.width) {
    throw ConfigError("conv layer (channels " + std::to_string(layer.channels) +
                      ", kernel " + std::to_string(layer.kernel) + ", stride " +
                      std::to_string(layer.stride) + ") invalid for " +
                      std::to_string(d.height) + "x" + std::to_string(d.width) + " input");
  }
  ImageDims out{layer.channels, (d.height - layer.kernel) / layer.stride + 1,
                (d.width - layer.kernel) / layer.stride + 1};
  return {out.channels * out.height * out.width, out};
}

Tensor glorot(Rng stream, std::size_t fan_in, std::size_t fan_out) {
  const double lim = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Tensor w({fan_in, fan_out});
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = stream.uniform(-lim, lim);
  return w;
}

// Adds one affine layer's weight and bias to the model.
void add_affine(Model& m, std::vector<std::size_t>& group, const Rng& init,
                const std::string& name, std::size_t fan_in, std::size_t fan_out) {
  group.push_back(m.params.size());
  m.names.push_back(name + ".w");
  m.params.push_back(glorot(init.derive(name + ".w"), fan_in, fan_out));
  group.push_back(m.params.size());
  m.names.push_back(name + ".b");
  m.params.push_back(Tensor({fan_out}));
}

}  // namespace

std::size_t ArchitectureSpec::shared_dim() const {
  Flow flow = input_flow(*this);
  for (const SharedLayerSpec& layer : shared_layers) flow = advance(flow, layer);
  return flow.dim;
}

void ArchitectureSpec::validate() const {
  const std::size_t t = num_tasks();
  if (t == 0) throw ConfigError("architecture needs at least one task head");
  if (tower_widths.size() != t || aux.size() != t) {
    throw ConfigError("architecture lists " + std::to_string(t) + " heads, " +
                      std::to_string(tower_widths.size()) + " towers, " +
                      std::to_string(aux.size()) + " aux specs");
  }
  if (input_image) {
    const ImageDims& d = *input_image;
    if (d.channels == 0 || d.height == 0 || d.width == 0) {
      throw ConfigError("image input with a zero extent");
    }
  } else if (input_dim == 0) {
    throw ConfigError("input_dim must be positive");
  }
  const std::size_t m = shared_dim();  // also validates conv geometry
  if (m == 0) throw ConfigError("shared stack produces an empty representation");
  for (std::size_t i = 0; i < t; ++i) {
    if (heads[i].dim == 0) throw ConfigError("task head needs a positive dim");
    for (std::size_t w : tower_widths[i]) {
      if (w == 0) throw ConfigError("tower widths must be positive");
    }
    const AuxTowerSpec& a = aux[i];
    if (a.temperature <= 0.0) throw ConfigError("aux temperature must be positive");
    switch (a.kind) {
      case AuxKind::kAvgPool:
        if (a.pool == 0 || m % a.pool != 0) {
          throw ConfigError("avgpool aux pool " + std::to_string(a.pool) +
                            " does not divide shared dim " + std::to_string(m));
        }
        break;
      case AuxKind::kBottleneck:
        if (a.bottleneck == 0) throw ConfigError("bottleneck aux needs b >= 1");
        break;
      default:
        break;
    }
  }
}

std::size_t aux_param_count(const ArchitectureSpec& spec, std::size_t task) {
  const std::size_t m = spec.shared_dim();
  const std::size_t c = spec.heads[task].dim;
  const AuxTowerSpec& a = spec.aux[task];
  switch (a.kind) {
    case AuxKind::kNone:
      return 0;
    case AuxKind::kFc:
      return (m + 1) * c;
    case AuxKind::kAvgPool:
      return (m / a.pool + 1) * c;
    case AuxKind::kBottleneck:
      return (m + 1) * a.bottleneck + (a.bottleneck + 1) * c;
    case AuxKind::kMirror: {
      std::size_t count = 0, in = m;
      for (std::size_t w : spec.tower_widths[task]) {
        count += (in + 1) * w;
        in = w;
      }
      return count + (in + 1) * c;
    }
  }
  return 0;
}

Model build_model(const ArchitectureSpec& spec, std::uint64_t seed) {
  spec.validate();
  Model m;
  m.spec = spec;
  const Rng init = Rng(seed).derive("init");
  const std::size_t t = spec.num_tasks();
  m.partition.task_main.resize(t);
  m.partition.task_aux.resize(t);

  Flow flow = input_flow(spec);
  for (std::size_t i = 0; i < spec.shared_layers.size(); ++i) {
    const SharedLayerSpec& layer = spec.shared_layers[i];
    const std::string name = "shared." + std::to_string(i);
    if (layer.kind == SharedLayerSpec::Kind::kDense) {
      add_affine(m, m.partition.shared, init, name, flow.dim, layer.width);
    } else {
      if (!flow.image) throw ConfigError("conv layer applied to a non-image representation");
      add_affine(m, m.partition.shared, init, name,
                 layer.kernel * layer.kernel * flow.image->channels, layer.channels);
    }
    flow = advance(flow, layer);
  }
  const std::size_t shared_m = flow.dim;

  for (std::size_t task = 0; task < t; ++task) {
    const std::string prefix = "task" + std::to_string(task);
    std::size_t in = shared_m;
    for (std::size_t i = 0; i < spec.tower_widths[task].size(); ++i) {
      add_affine(m, m.partition.task_main[task], init, prefix + "." + std::to_string(i), in,
                 spec.tower_widths[task][i]);
      in = spec.tower_widths[task][i];
    }
    add_affine(m, m.partition.task_main[task], init, prefix + ".head", in,
               spec.heads[task].dim);

    const AuxTowerSpec& a = spec.aux[task];
    const std::string aux_prefix = "aux" + std::to_string(task);
    switch (a.kind) {
      case AuxKind::kNone:
        break;
      case AuxKind::kFc:
        add_affine(m, m.partition.task_aux[task], init, aux_prefix + ".head", shared_m,
                   spec.heads[task].dim);
        break;
      case AuxKind::kAvgPool:
        add_affine(m, m.partition.task_aux[task], init, aux_prefix + ".head",
                   shared_m / a.pool, spec.heads[task].dim);
        break;
      case AuxKind::kBottleneck:
        add_affine(m, m.partition.task_aux[task], init, aux_prefix + ".neck", shared_m,
                   a.bottleneck);
        add_affine(m, m.partition.task_aux[task], init, aux_prefix + ".head", a.bottleneck,
                   spec.heads[task].dim);
        break;
      case AuxKind::kMirror: {
        std::size_t ain = shared_m;
        for (std::size_t i = 0; i < spec.tower_widths[task].size(); ++i) {
          add_affine(m, m.partition.task_aux[task], init, aux_prefix + "." + std::to_string(i),
                     ain, spec.tower_widths[task][i]);
          ain = spec.tower_widths[task][i];
        }
        add_affine(m, m.partition.task_aux[task], init, aux_prefix + ".head", ain,
                   spec.heads[task].dim);
        break;
      }
    }
  }
  return m;
}

namespace {

// Dense ReLU stack + linear head over existing parameter leaf nodes.
Tape::NodeId run_tower(Tape& tape, Tape::NodeId input, std::span<const Tape::NodeId> ids) {
  Tape::NodeId x = input;
  for (std::size_t i = 0; i + 2 < ids.size(); i += 2) {
    x = tape.relu(tape.affine(x, ids[i], ids[i + 1]));
  }
  return tape.affine(x, ids[ids.size() - 2], ids[ids.size() - 1]);
}

}  // namespace

ForwardNodes forward_on_tape(const Model& model, Tape& tape, const Tensor& inputs,
                             bool with_aux) {
  const ArchitectureSpec& spec = model.spec;
  Flow flow = input_flow(spec);
  if (inputs.ndim() != 2 || inputs.cols() != flow.dim) {
    throw DimensionError("batch " + shape_str(inputs.shape()) + " does not match input dim " +
                         std::to_string(flow.dim));
  }
  ForwardNodes out;
  Tape::NodeId x = tape.leaf(inputs);
  out.params.reserve(model.params.size());
  for (const Tensor& p : model.params) out.params.push_back(tape.leaf(p));

  for (std::size_t i = 0; i < spec.shared_layers.size(); ++i) {
    const SharedLayerSpec& layer = spec.shared_layers[i];
    const Tape::NodeId w = out.params[model.partition.shared[2 * i]];
    const Tape::NodeId b = out.params[model.partition.shared[2 * i + 1]];
    if (layer.kind == SharedLayerSpec::Kind::kDense) {
      x = tape.relu(tape.affine(x, w, b));
    } else {
      const Flow next = advance(flow, layer);
      const std::size_t n = tape.value(x).rows();
      Tape::NodeId cols = tape.im2col(x, *flow.image, layer.kernel, layer.stride);
      Tape::NodeId conv = tape.affine(cols, w, b);
      x = tape.relu(tape.reshape(conv, {n, next.dim}));
    }
    flow = advance(flow, layer);
  }
  out.shared = x;
  out.nodes_through_shared = tape.size();

  const std::size_t t = spec.num_tasks();
  std::vector<Tape::NodeId> ids;
  for (std::size_t task = 0; task < t; ++task) {
    ids.clear();
    for (std::size_t idx : model.partition.task_main[task]) ids.push_back(out.params[idx]);
    out.main.push_back(run_tower(tape, out.shared, ids));

    if (!with_aux || spec.aux[task].kind == AuxKind::kNone) {
      out.aux.emplace_back();
      continue;
    }
    ids.clear();
    for (std::size_t idx : model.partition.task_aux[task]) ids.push_back(out.params[idx]);
    const AuxTowerSpec& a = spec.aux[task];
    switch (a.kind) {
      case AuxKind::kFc:
        out.aux.emplace_back(tape.affine(out.shared, ids[0], ids[1]));
        break;
      case AuxKind::kAvgPool: {
        Tape::NodeId pooled = tape.avg_pool(out.shared, a.pool);
        out.aux.emplace_back(tape.affine(pooled, ids[0], ids[1]));
        break;
      }
      case AuxKind::kBottleneck: {
        Tape::NodeId neck = tape.relu(tape.affine(out.shared, ids[0], ids[1]));
        out.aux.emplace_back(tape.affine(neck, ids[2], ids[3]));
        break;
      }
      case AuxKind::kMirror:
        out.aux.emplace_back(run_tower(tape, out.shared, ids));
        break;
      case AuxKind::kNone:
        break;
    }
  }
  return out;
}

LossNodes losses_on_tape(const Model& model, Tape& tape, const Batch& batch, bool with_aux) {
  const std::size_t t = model.spec.num_tasks();
  if (batch.targets.size() != t) {
    throw DimensionError("batch carries " + std::to_string(batch.targets.size()) +
                         " target sets for " + std::to_string(t) + " tasks");
  }
  LossNodes out;
  out.fwd = forward_on_tape(model, tape, batch.inputs, with_aux);
  const std::size_t n = batch.inputs.rows();
  for (std::size_t task = 0; task < t; ++task) {
    const HeadSpec& head = model.spec.heads[task];
    const TaskTargets& target = batch.targets[task];
    if (head.kind == HeadKind::kRegression) {
      if (target.regression.size() == 0) {
        throw ConfigError("task " + std::to_string(task) + " is missing regression targets");
      }
      if (target.regression.ndim() != 2 || target.regression.rows() != n ||
          target.regression.cols() != head.dim) {
        throw DimensionError("task " + std::to_string(task) + " targets " +
                             shape_str(target.regression.shape()) + " do not match " +
                             std::to_string(n) + "x" + std::to_string(head.dim));
      }
      out.main_loss.push_back(
          tape.mse_loss(out.fwd.main[task], target.regression, Reduction::kMean));
      if (out.fwd.aux[task]) {
        out.aux_loss.emplace_back(
            tape.mse_loss(*out.fwd.aux[task], target.regression, Reduction::kMean));
      } else {
        out.aux_loss.emplace_back();
      }
    } else {
      if (target.classes.size() != n) {
        throw ConfigError("task " + std::to_string(task) + " has " +
                          std::to_string(target.classes.size()) + " class labels for " +
                          std::to_string(n) + " examples");
      }
      out.main_loss.push_back(tape.softmax_xent(out.fwd.main[task], target.classes, 1.0));
      if (out.fwd.aux[task]) {
        out.aux_loss.emplace_back(tape.softmax_xent(*out.fwd.aux[task], target.classes,
                                                    model.spec.aux[task].temperature));
      } else {
        out.aux_loss.emplace_back();
      }
    }
  }
  return out;
}

std::vector<TaskLoss> task_losses(const Model& model, const Batch& batch, bool with_aux) {
  Tape tape;
  LossNodes nodes = losses_on_tape(model, tape, batch, with_aux);
  std::vector<TaskLoss> out;
  for (std::size_t task = 0; task < model.spec.num_tasks(); ++task) {
    TaskLoss tl;
    tl.main = tape.value(nodes.main_loss[task]).scalar_value();
    if (nodes.aux_loss[task]) {
      tl.aux = tape.value(*nodes.aux_loss[task]).scalar_value();
    }
    out.push_back(tl);
  }
  return out;
}

std::vector<Tensor> predict(const Model& model, const Tensor& inputs) {
  Tape tape;
  ForwardNodes fwd = forward_on_tape(model, tape, inputs, /*with_aux=*/false);
  std::vector<Tensor> out;
  out.reserve(fwd.main.size());
  for (Tape::NodeId id : fwd.main) out.push_back(tape.value(id));
  return out;
}

double error_rate(const Tensor& logits, const std::vector<int>& labels) {
  const std::size_t n = logits.rows();
  if (labels.size() != n) {
    throw DimensionError("error_rate got " + std::to_string(labels.size()) +
                         " labels for " + std::to_string(n) + " rows");
  }
  std::size_t wrong = 0;
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < logits.cols(); ++j) {
      if (logits.at(i, j) > logits.at(i, best)) best = j;
    }
    if (static_cast<int>(best) != labels[i]) ++wrong;
  }
  return static_cast<double>(wrong) / static_cast<double>(n);
}

}  // namespace mtl
