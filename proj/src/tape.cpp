#include "mtl/tape.hpp"

#include <Eigen/Core>

#include <cmath>
#include <string>
#include <utility>

#include "mtl/errors.hpp"

namespace mtl {

namespace {

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EVec = Eigen::VectorXd;
using MatMap = Eigen::Map<EMat>;
using ConstMatMap = Eigen::Map<const EMat>;

ConstMatMap as_matrix(const Tensor& t) {
  return ConstMatMap(t.data().data(), static_cast<Eigen::Index>(t.rows()),
                     static_cast<Eigen::Index>(t.cols()));
}

MatMap as_matrix(Tensor& t) {
  return MatMap(t.data().data(), static_cast<Eigen::Index>(t.rows()),
                static_cast<Eigen::Index>(t.cols()));
}

std::size_t feature_extent(const Tensor& t) {
  if (t.ndim() == 1) return t.shape()[0];
  if (t.ndim() == 2) return t.shape()[1];
  throw DimensionError("expected a vector or matrix, got shape " + shape_str(t.shape()));
}

}  // namespace

Tape::NodeId Tape::push(Op op, std::vector<NodeId> inputs, Tensor value, Payload payload) {
  for (NodeId in : inputs) check_id(in);
  nodes_.push_back(Node{op, std::move(inputs), std::move(value), std::move(payload)});
  return static_cast<NodeId>(nodes_.size() - 1);
}

void Tape::check_id(NodeId id) const {
  if (id >= nodes_.size()) {
    throw Error("tape node " + std::to_string(id) + " out of range");
  }
}

Tape::NodeId Tape::leaf(Tensor value) { return push(Op::kLeaf, {}, std::move(value)); }

Tape::NodeId Tape::affine(NodeId x, NodeId w, NodeId b) {
  const Tensor& xv = value(x);
  const Tensor& wv = value(w);
  const Tensor& bv = value(b);
  if (xv.ndim() != 2 || wv.ndim() != 2 || bv.ndim() != 1 || xv.cols() != wv.rows() ||
      bv.shape()[0] != wv.cols()) {
    throw DimensionError("affine shapes do not conform: input " + shape_str(xv.shape()) +
                         ", weight " + shape_str(wv.shape()) + ", bias " +
                         shape_str(bv.shape()));
  }
  std::vector<double> out(xv.rows() * wv.cols());
  MatMap o(out.data(), static_cast<Eigen::Index>(xv.rows()),
           static_cast<Eigen::Index>(wv.cols()));
  o.noalias() = as_matrix(xv) * as_matrix(wv);
  o.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bv.data().data(),
                                                      static_cast<Eigen::Index>(bv.size()));
  return push(Op::kAffine, {x, w, b}, Tensor({xv.rows(), wv.cols()}, std::move(out)));
}

Tape::NodeId Tape::relu(NodeId x) {
  const Tensor& xv = value(x);
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] > 0.0 ? xv[i] : 0.0;
  return push(Op::kRelu, {x}, Tensor(xv.shape(), std::move(out)));
}

Tape::NodeId Tape::avg_pool(NodeId x, std::size_t pool) {
  const Tensor& xv = value(x);
  const std::size_t m = feature_extent(xv);
  if (pool == 0 || m % pool != 0) {
    throw ConfigError("avg_pool size " + std::to_string(pool) +
                      " does not divide feature extent " + std::to_string(m));
  }
  const std::size_t rows = xv.ndim() == 2 ? xv.shape()[0] : 1;
  const std::size_t mo = m / pool;
  std::vector<double> out(rows * mo);
  const double inv = 1.0 / static_cast<double>(pool);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < mo; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < pool; ++k) s += xv[r * m + j * pool + k];
      out[r * mo + j] = s * inv;
    }
  }
  Shape shape = xv.ndim() == 2 ? Shape{rows, mo} : Shape{mo};
  return push(Op::kAvgPool, {x}, Tensor(std::move(shape), std::move(out)),
              PoolPayload{pool});
}

Tape::NodeId Tape::im2col(NodeId x, ImageDims dims, std::size_t kernel, std::size_t stride) {
  const Tensor& xv = value(x);
  const std::size_t pixels = dims.channels * dims.height * dims.width;
  if (xv.ndim() != 2 || xv.cols() != pixels) {
    throw DimensionError("im2col input " + shape_str(xv.shape()) + " does not match " +
                         std::to_string(dims.channels) + "x" + std::to_string(dims.height) +
                         "x" + std::to_string(dims.width) + " images");
  }
  if (kernel == 0 || stride == 0 || kernel > dims.height || kernel > dims.width) {
    throw ConfigError("im2col kernel " + std::to_string(kernel) + " stride " +
                      std::to_string(stride) + " invalid for " + std::to_string(dims.height) +
                      "x" + std::to_string(dims.width) + " images");
  }
  const std::size_t out_h = (dims.height - kernel) / stride + 1;
  const std::size_t out_w = (dims.width - kernel) / stride + 1;
  const std::size_t n = xv.rows();
  const std::size_t patch = kernel * kernel * dims.channels;
  std::vector<double> out(n * out_h * out_w * patch);
  std::size_t row = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double* src = xv.data().data() + i * pixels;
    for (std::size_t oh = 0; oh < out_h; ++oh) {
      for (std::size_t ow = 0; ow < out_w; ++ow) {
        double* dst = out.data() + row * patch;
        for (std::size_t kh = 0; kh < kernel; ++kh) {
          const std::size_t ih = oh * stride + kh;
          const double* line = src + (ih * dims.width + ow * stride) * dims.channels;
          for (std::size_t kw = 0; kw < kernel * dims.channels; ++kw) {
            dst[kh * kernel * dims.channels + kw] = line[kw];
          }
        }
        ++row;
      }
    }
  }
  return push(Op::kIm2col, {x}, Tensor({n * out_h * out_w, patch}, std::move(out)),
              Im2colPayload{dims, kernel, stride, out_h, out_w});
}

Tape::NodeId Tape::reshape(NodeId x, Shape shape) {
  Tensor v = value(x).reshaped(std::move(shape));
  return push(Op::kReshape, {x}, std::move(v));
}

Tape::NodeId Tape::mse_loss(NodeId pred, Tensor target, Reduction reduction) {
  const Tensor& pv = value(pred);
  if (!pv.same_shape(target)) {
    throw DimensionError("mse shapes differ: pred " + shape_str(pv.shape()) + ", target " +
                         shape_str(target.shape()));
  }
  double s = 0.0;
  for (std::size_t i = 0; i < pv.size(); ++i) {
    const double d = pv[i] - target[i];
    s += d * d;
  }
  if (reduction == Reduction::kMean) s /= static_cast<double>(pv.size());
  return push(Op::kMse, {pred}, Tensor::scalar(s), MsePayload{std::move(target), reduction});
}

Tape::NodeId Tape::softmax_xent(NodeId logits, std::vector<int> labels, double tau) {
  if (!(tau > 0.0)) {
    throw ConfigError("softmax temperature must be positive, got " + std::to_string(tau));
  }
  const Tensor& lv = value(logits);
  const std::size_t n = lv.rows();
  const std::size_t c = lv.cols();
  if (labels.size() != n) {
    throw DimensionError("got " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(n) + " rows of logits");
  }
  Tensor probs({n, c});
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const int label = labels[i];
    if (label < 0 || static_cast<std::size_t>(label) >= c) {
      throw ConfigError("class label " + std::to_string(label) + " outside [0, " +
                        std::to_string(c) + ")");
    }
    double m = -HUGE_VAL;
    for (std::size_t j = 0; j < c; ++j) m = std::max(m, lv.at(i, j) / tau);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(lv.at(i, j) / tau - m);
    const double log_z = std::log(z);
    for (std::size_t j = 0; j < c; ++j) {
      probs.at(i, j) = std::exp(lv.at(i, j) / tau - m - log_z);
    }
    total += m + log_z - lv.at(i, static_cast<std::size_t>(label)) / tau;
  }
  total /= static_cast<double>(n);
  return push(Op::kXent, {logits}, Tensor::scalar(total),
              XentPayload{std::move(labels), tau, std::move(probs)});
}

Tape::NodeId Tape::add(NodeId a, NodeId b) {
  const Tensor& av = value(a);
  const Tensor& bv = value(b);
  if (!av.same_shape(bv)) {
    throw DimensionError("add shapes differ: " + shape_str(av.shape()) + " vs " +
                         shape_str(bv.shape()));
  }
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  return push(Op::kAdd, {a, b}, Tensor(av.shape(), std::move(out)));
}

Tape::NodeId Tape::mul(NodeId a, NodeId b) {
  const Tensor& av = value(a);
  const Tensor& bv = value(b);
  if (!av.same_shape(bv)) {
    throw DimensionError("mul shapes differ: " + shape_str(av.shape()) + " vs " +
                         shape_str(bv.shape()));
  }
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return push(Op::kMul, {a, b}, Tensor(av.shape(), std::move(out)));
}

Tape::NodeId Tape::exp(NodeId x) {
  const Tensor& xv = value(x);
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(xv[i]);
  return push(Op::kExp, {x}, Tensor(xv.shape(), std::move(out)));
}

Tape::NodeId Tape::scale(NodeId x, double c) {
  const Tensor& xv = value(x);
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = c * xv[i];
  return push(Op::kScale, {x}, Tensor(xv.shape(), std::move(out)), ScalePayload{c});
}

Tape::NodeId Tape::weighted_sum(std::span<const NodeId> xs, std::span<const double> ws) {
  if (xs.empty() || xs.size() != ws.size()) {
    throw DimensionError("weighted_sum needs matching nonempty nodes and weights");
  }
  double s = 0.0;
  std::vector<NodeId> inputs(xs.begin(), xs.end());
  for (std::size_t i = 0; i < xs.size(); ++i) {
    s += ws[i] * value(xs[i]).scalar_value();
  }
  return push(Op::kWeightedSum, std::move(inputs), Tensor::scalar(s),
              WeightedSumPayload{std::vector<double>(ws.begin(), ws.end())});
}

Gradients::Gradients(const Tape& tape)
    : adj_(tape.nodes_.size()), touched_(tape.nodes_.size(), 0), tape_(&tape) {}

Tensor& Gradients::accumulate(const Tape& tape, Tape::NodeId id) {
  if (!touched_[id]) {
    adj_[id] = Tensor(tape.nodes_[id].value.shape());
    touched_[id] = 1;
  }
  return adj_[id];
}

const Tensor& Gradients::grad(Tape::NodeId id) const {
  if (id >= adj_.size()) throw Error("gradient queried for unknown node");
  if (!touched_[id] && adj_[id].size() == 0) {
    adj_[id] = Tensor(tape_->nodes_[id].value.shape());
  }
  return adj_[id];
}

Gradients Tape::backward(NodeId root, BackwardOptions opts) const {
  check_id(root);
  Gradients grads(*this);
  if (opts.seed.has_value()) {
    if (!opts.seed->same_shape(nodes_[root].value)) {
      throw DimensionError("backward seed shape " + shape_str(opts.seed->shape()) +
                           " does not match root shape " +
                           shape_str(nodes_[root].value.shape()));
    }
    grads.accumulate(*this, root) = std::move(*opts.seed);
  } else {
    if (!nodes_[root].value.is_scalar()) {
      throw DimensionError("backward root must be a scalar node, got shape " +
                           shape_str(nodes_[root].value.shape()));
    }
    grads.accumulate(*this, root)[0] = 1.0;
  }

  for (NodeId id = root + 1; id-- > 0;) {
    if (!grads.touched_[id]) continue;
    if (opts.barrier && *opts.barrier == id && id != root) continue;
    const Node& node = nodes_[id];
    const Tensor& g = grads.adj_[id];
    switch (node.op) {
      case Op::kLeaf:
        break;
      case Op::kAffine: {
        const Tensor& xv = input_value(node, 0);
        const Tensor& wv = input_value(node, 1);
        Tensor& dx = grads.accumulate(*this, node.inputs[0]);
        Tensor& dw = grads.accumulate(*this, node.inputs[1]);
        Tensor& db = grads.accumulate(*this, node.inputs[2]);
        as_matrix(dx).noalias() += as_matrix(g) * as_matrix(wv).transpose();
        as_matrix(dw).noalias() += as_matrix(xv).transpose() * as_matrix(g);
        Eigen::Map<Eigen::RowVectorXd>(db.data().data(),
                                       static_cast<Eigen::Index>(db.size())) +=
            as_matrix(g).colwise().sum();
        break;
      }
      case Op::kRelu: {
        const Tensor& xv = input_value(node, 0);
        Tensor& dx = grads.accumulate(*this, node.inputs[0]);
        for (std::size_t i = 0; i < dx.size(); ++i) {
          if (xv[i] > 0.0) dx[i] += g[i];
        }
        break;
      }
      case Op::kAvgPool: {
        const auto& p = std::get<PoolPayload>(node.payload);
        Tensor& dx = grads.accumulate(*this, node.inputs[0]);
        const std::size_t m = feature_extent(input_value(node, 0));
        const std::size_t mo = m / p.pool;
        const std::size_t rows = dx.size() / m;
        const double inv = 1.0 / static_cast<double>(p.pool);
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t j = 0; j < mo; ++j) {
            const double gj = g[r * mo + j] * inv;
            for (std::size_t k = 0; k < p.pool; ++k) dx[r * m + j * p.pool + k] += gj;
          }
        }
        break;
      }
      case Op::kIm2col: {
        const auto& p = std::get<Im2colPayload>(node.payload);
        Tensor& dx = grads.accumulate(*this, node.inputs[0]);
        const std::size_t pixels = p.dims.channels * p.dims.height * p.dims.width;
        const std::size_t patch = p.kernel * p.kernel * p.dims.channels;
        const std::size_t n = dx.size() / pixels;
        std::size_t row = 0;
        for (std::size_t i = 0; i < n; ++i) {
          double* dst = dx.data().data() + i * pixels;
          for (std::size_t oh = 0; oh < p.out_h; ++oh) {
            for (std::size_t ow = 0; ow < p.out_w; ++ow) {
              const double* src = g.data().data() + row * patch;
              for (std::size_t kh = 0; kh < p.kernel; ++kh) {
                const std::size_t ih = oh * p.stride + kh;
                double* line =
                    dst + (ih * p.dims.width + ow * p.stride) * p.dims.channels;
                for (std::size_t kw = 0; kw < p.kernel * p.dims.channels; ++kw) {
                  line[kw] += src[kh * p.kernel * p.dims.channels + kw];
                }
              }
              ++row;
            }
          }
        }
        break;
      }
      case Op::kReshape: {
        Tensor& dx = grads.accumulate(*this, node.inputs[0]);
        for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += g[i];
        break;
      }
      case Op::kMse: {
        const auto& p = std::get<MsePayload>(node.payload);
        const Tensor& pv = input_value(node, 0);
        Tensor& dp = grads.accumulate(*this, node.inputs[0]);
        const double gs = g[0] * (p.reduction == Reduction::kMean
                                      ? 2.0 / static_cast<double>(pv.size())
                                      : 2.0);
        for (std::size_t i = 0; i < dp.size(); ++i) dp[i] += gs * (pv[i] - p.target[i]);
        break;
      }
      case Op::kXent: {
        const auto& p = std::get<XentPayload>(node.payload);
        Tensor& dl = grads.accumulate(*this, node.inputs[0]);
        const std::size_t n = p.probs.rows();
        const std::size_t c = p.probs.cols();
        const double gs = g[0] / (static_cast<double>(n) * p.tau);
        for (std::size_t i = 0; i < n; ++i) {
          for (std::size_t j = 0; j < c; ++j) {
            const double onehot = static_cast<std::size_t>(p.labels[i]) == j ? 1.0 : 0.0;
            dl.at(i, j) += gs * (p.probs.at(i, j) - onehot);
          }
        }
        break;
      }
      case Op::kAdd: {
        Tensor& da = grads.accumulate(*this, node.inputs[0]);
        Tensor& db = grads.accumulate(*this, node.inputs[1]);
        for (std::size_t i = 0; i < g.size(); ++i) {
          da[i] += g[i];
          db[i] += g[i];
        }
        break;
      }
      case Op::kMul: {
        const Tensor& av = input_value(node, 0);
        const Tensor& bv = input_value(node, 1);
        Tensor& da = grads.accumulate(*this, node.inputs[0]);
        Tensor& db = grads.accumulate(*this, node.inputs[1]);
        for (std::size_t i = 0; i < g.size(); ++i) {
          da[i] += g[i] * bv[i];
          db[i] += g[i] * av[i];
        }
        break;
      }
      case Op::kExp: {
        Tensor& dx = grads.accumulate(*this, node.inputs[0]);
        for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * node.value[i];
        break;
      }
      case Op::kScale: {
        const auto& p = std::get<ScalePayload>(node.payload);
        Tensor& dx = grads.accumulate(*this, node.inputs[0]);
        for (std::size_t i = 0; i < g.size(); ++i) dx[i] += p.c * g[i];
        break;
      }
      case Op::kWeightedSum: {
        const auto& p = std::get<WeightedSumPayload>(node.payload);
        for (std::size_t i = 0; i < node.inputs.size(); ++i) {
          grads.accumulate(*this, node.inputs[i])[0] += p.weights[i] * g[0];
        }
        break;
      }
    }
  }
  return grads;
}

}  // namespace mtl
