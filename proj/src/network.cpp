#include "fairquant/network.hpp"

#include <cmath>
#include <sstream>

namespace fairquant {

namespace {

void check_labels_and_weights(const Network& net, const Matrix& batch, const IntVector& labels,
                              const Vector& class_weights) {
  if (labels.size() != batch.rows()) {
    throw InputError("labels/batch row count mismatch: " + std::to_string(labels.size()) + " vs " +
                     std::to_string(batch.rows()));
  }
  const int classes = net.output_dim();
  for (Eigen::Index i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= classes) {
      throw InputError("label out of range at row " + std::to_string(i) + ": " +
                       std::to_string(labels[i]) + " (classes: " + std::to_string(classes) + ")");
    }
  }
  if (class_weights.size() != 0) {
    if (class_weights.size() != classes) {
      throw InputError("class_weights length " + std::to_string(class_weights.size()) +
                       " does not match class count " + std::to_string(classes));
    }
    for (Eigen::Index g = 0; g < class_weights.size(); ++g) {
      if (class_weights[g] < 0.0) throw InputError("class_weights must be non-negative");
    }
  }
}

double weight_for(const Vector& class_weights, int label) {
  return class_weights.size() == 0 ? 1.0 : class_weights[label];
}

struct ForwardCache {
  std::vector<Matrix> activations;  // a_0 = input, a_l = act(z_l)
  std::vector<Matrix> pre;          // z_l
};

ForwardCache forward_cached(const Network& net, const Matrix& batch) {
  const auto& layers = net.layers();
  if (layers.empty()) throw ShapeError("forward: network has no layers");
  if (batch.cols() != layers.front().inputs()) {
    throw ShapeError("forward: batch width " + std::to_string(batch.cols()) +
                     " does not match layer 0 input size " +
                     std::to_string(layers.front().inputs()));
  }
  ForwardCache cache;
  cache.activations.reserve(layers.size() + 1);
  cache.pre.reserve(layers.size());
  cache.activations.push_back(batch);
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const DenseLayer& layer = layers[l];
    Matrix z = cache.activations.back() * layer.weights.transpose();
    z.rowwise() += layer.bias.transpose();
    cache.pre.push_back(z);
    if (layer.activation == Activation::Relu) {
      cache.activations.push_back(z.cwiseMax(0.0));
    } else {
      cache.activations.push_back(std::move(z));
    }
  }
  return cache;
}

}  // namespace

std::string activation_name(Activation a) {
  return a == Activation::Relu ? "relu" : "identity";
}

Activation activation_from_name(const std::string& name) {
  if (name == "relu") return Activation::Relu;
  if (name == "identity") return Activation::Identity;
  throw ParseError("unknown activation: " + name);
}

Network::Network(std::vector<DenseLayer> layers) : layers_(std::move(layers)) {
  if (layers_.empty()) throw ShapeError("network must have at least one layer");
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const DenseLayer& layer = layers_[l];
    if (layer.weights.rows() == 0 || layer.weights.cols() == 0) {
      throw ShapeError("layer " + std::to_string(l) + " has an empty weight matrix");
    }
    if (layer.bias.size() != layer.outputs()) {
      throw ShapeError("layer " + std::to_string(l) + " bias size " +
                       std::to_string(layer.bias.size()) + " does not match output size " +
                       std::to_string(layer.outputs()));
    }
    if (l > 0 && layers_[l - 1].outputs() != layer.inputs()) {
      throw ShapeError("layer " + std::to_string(l) + " input size " +
                       std::to_string(layer.inputs()) + " does not match layer " +
                       std::to_string(l - 1) + " output size " +
                       std::to_string(layers_[l - 1].outputs()));
    }
  }
  if (layers_.back().activation != Activation::Identity) {
    throw InputError("last layer must use the identity activation (logits are pre-softmax)");
  }
}

Network Network::dense(const std::vector<int>& widths, Rng& rng) {
  if (widths.size() < 2) throw InputError("Network::dense needs at least input and output widths");
  std::vector<DenseLayer> layers;
  layers.reserve(widths.size() - 1);
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    const int fan_in = widths[l];
    const int fan_out = widths[l + 1];
    if (fan_in <= 0 || fan_out <= 0) throw InputError("layer widths must be positive");
    DenseLayer layer;
    layer.weights.resize(fan_out, fan_in);
    const double limit = std::sqrt(6.0 / (fan_in + fan_out));
    for (Eigen::Index i = 0; i < layer.weights.rows(); ++i) {
      for (Eigen::Index j = 0; j < layer.weights.cols(); ++j) {
        layer.weights(i, j) = rng.uniform(-limit, limit);
      }
    }
    layer.bias = Vector::Zero(fan_out);
    layer.activation = (l + 2 == widths.size()) ? Activation::Identity : Activation::Relu;
    layers.push_back(std::move(layer));
  }
  return Network(std::move(layers));
}

int Network::input_dim() const {
  if (layers_.empty()) throw ShapeError("empty network");
  return static_cast<int>(layers_.front().inputs());
}

int Network::output_dim() const {
  if (layers_.empty()) throw ShapeError("empty network");
  return static_cast<int>(layers_.back().outputs());
}

std::size_t Network::param_count() const {
  std::size_t k = 0;
  for (const DenseLayer& layer : layers_) {
    k += static_cast<std::size_t>(layer.weights.size()) + static_cast<std::size_t>(layer.bias.size());
  }
  return k;
}

ParamLayout ParamLayout::of(const Network& net) {
  ParamLayout layout;
  std::size_t offset = 0;
  int index = 0;
  for (const DenseLayer& layer : net.layers()) {
    const std::size_t wcount = static_cast<std::size_t>(layer.weights.size());
    layout.entries.push_back({offset, wcount, layer.weights.rows(), layer.weights.cols(), index, false});
    offset += wcount;
    const std::size_t bcount = static_cast<std::size_t>(layer.bias.size());
    layout.entries.push_back({offset, bcount, layer.bias.size(), 1, index, true});
    offset += bcount;
    ++index;
  }
  layout.total = offset;
  return layout;
}

FlatParams flatten(const Network& net) {
  FlatParams flat;
  flat.layout = ParamLayout::of(net);
  flat.values.resize(static_cast<Eigen::Index>(flat.layout.total));
  Eigen::Index pos = 0;
  for (const DenseLayer& layer : net.layers()) {
    // Row-major matrices: data() already walks rows first.
    flat.values.segment(pos, layer.weights.size()) =
        Eigen::Map<const Vector>(layer.weights.data(), layer.weights.size());
    pos += layer.weights.size();
    flat.values.segment(pos, layer.bias.size()) = layer.bias;
    pos += layer.bias.size();
  }
  return flat;
}

Network unflatten(const FlatParams& params, const Network& reference) {
  if (params.layout != ParamLayout::of(reference)) {
    throw ShapeError("unflatten: layout does not match the reference network");
  }
  Network net = reference;
  assign_from_flat(net, params.values);
  return net;
}

void assign_from_flat(Network& net, const Vector& values) {
  Eigen::Index pos = 0;
  for (DenseLayer& layer : net.layers()) {
    if (pos + layer.weights.size() + layer.bias.size() > values.size()) {
      throw ShapeError("assign_from_flat: vector too short for network");
    }
    Eigen::Map<Vector>(layer.weights.data(), layer.weights.size()) =
        values.segment(pos, layer.weights.size());
    pos += layer.weights.size();
    layer.bias = values.segment(pos, layer.bias.size());
    pos += layer.bias.size();
  }
  if (pos != values.size()) throw ShapeError("assign_from_flat: vector longer than network");
}

Matrix forward(const Network& net, const Matrix& batch) {
  return forward_cached(net, batch).activations.back();
}

Matrix softmax(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double shift = logits.row(i).maxCoeff();
    Eigen::RowVectorXd e = (logits.row(i).array() - shift).exp();
    out.row(i) = e / e.sum();
  }
  return out;
}

Matrix log_softmax(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double shift = logits.row(i).maxCoeff();
    Eigen::RowVectorXd centered = logits.row(i).array() - shift;
    const double lse = std::log(centered.array().exp().sum());
    out.row(i) = centered.array() - lse;
  }
  return out;
}

double cross_entropy_loss(const Network& net, const Matrix& batch, const IntVector& labels,
                          const Vector& class_weights) {
  check_labels_and_weights(net, batch, labels, class_weights);
  const Matrix logp = log_softmax(forward(net, batch));
  double total = 0.0;
  for (Eigen::Index i = 0; i < labels.size(); ++i) {
    total += weight_for(class_weights, labels[i]) * logp(i, labels[i]);
  }
  return -total / static_cast<double>(labels.size());
}

FlatParams gradient(const Network& net, const Matrix& batch, const IntVector& labels,
                    const Vector& class_weights) {
  check_labels_and_weights(net, batch, labels, class_weights);
  const ForwardCache cache = forward_cached(net, batch);
  const auto& layers = net.layers();
  const double inv_m = 1.0 / static_cast<double>(batch.rows());

  // dL/dlogits for weighted softmax cross-entropy: a_y/M * (p - onehot(y)).
  Matrix delta = softmax(cache.pre.back());
  for (Eigen::Index i = 0; i < labels.size(); ++i) {
    delta(i, labels[i]) -= 1.0;
    delta.row(i) *= weight_for(class_weights, labels[i]) * inv_m;
  }

  std::vector<Matrix> weight_grads(layers.size());
  std::vector<Vector> bias_grads(layers.size());
  for (std::size_t l = layers.size(); l-- > 0;) {
    weight_grads[l] = delta.transpose() * cache.activations[l];
    bias_grads[l] = delta.colwise().sum().transpose();
    if (l > 0) {
      Matrix upstream = delta * layers[l].weights;
      // Relu subgradient at 0 is 0.
      delta = upstream.cwiseProduct(
          (cache.pre[l - 1].array() > 0.0).cast<double>().matrix());
    }
  }

  FlatParams flat;
  flat.layout = ParamLayout::of(net);
  flat.values.resize(static_cast<Eigen::Index>(flat.layout.total));
  Eigen::Index pos = 0;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    flat.values.segment(pos, weight_grads[l].size()) =
        Eigen::Map<const Vector>(weight_grads[l].data(), weight_grads[l].size());
    pos += weight_grads[l].size();
    flat.values.segment(pos, bias_grads[l].size()) = bias_grads[l];
    pos += bias_grads[l].size();
  }
  return flat;
}

Vector hvp_central_diff(const std::function<Vector(const Vector&)>& grad_fn, const Vector& theta,
                        const Vector& v) {
  const double vnorm = v.norm();
  if (vnorm == 0.0) throw InputError("hvp: direction vector must be nonzero");
  const double eps = 1e-4 * (1.0 + theta.lpNorm<Eigen::Infinity>());
  const Vector vhat = v / vnorm;
  const Vector gplus = grad_fn(theta + eps * vhat);
  const Vector gminus = grad_fn(theta - eps * vhat);
  return (gplus - gminus) * (vnorm / (2.0 * eps));
}

FlatParams hvp(const Network& net, const Matrix& batch, const IntVector& labels,
               const Vector& class_weights, const FlatParams& v) {
  const FlatParams theta = flatten(net);
  if (v.values.size() != theta.values.size()) {
    throw InputError("hvp: direction length " + std::to_string(v.values.size()) +
                     " does not match parameter count " + std::to_string(theta.values.size()));
  }
  Network work = net;
  const auto grad_fn = [&](const Vector& point) {
    assign_from_flat(work, point);
    return gradient(work, batch, labels, class_weights).values;
  };
  FlatParams out;
  out.layout = theta.layout;
  out.values = hvp_central_diff(grad_fn, theta.values, v.values);
  return out;
}

FlatParams hvp_exact(const Network& net, const Matrix& batch, const IntVector& labels,
                     const Vector& class_weights, const FlatParams& v) {
  check_labels_and_weights(net, batch, labels, class_weights);
  const ParamLayout layout = ParamLayout::of(net);
  if (v.values.size() != static_cast<Eigen::Index>(layout.total)) {
    throw InputError("hvp_exact: direction length does not match parameter count");
  }
  if (v.values.norm() == 0.0) throw InputError("hvp_exact: direction vector must be nonzero");
  const auto& layers = net.layers();
  const std::size_t depth = layers.size();

  // Per-layer views into the direction vector.
  std::vector<Eigen::Map<const Matrix>> dir_w;
  std::vector<Eigen::Map<const Vector>> dir_b;
  dir_w.reserve(depth);
  dir_b.reserve(depth);
  for (std::size_t l = 0; l < depth; ++l) {
    const ParamLayout::Entry& we = layout.entries[2 * l];
    const ParamLayout::Entry& be = layout.entries[2 * l + 1];
    dir_w.emplace_back(v.values.data() + we.offset, we.rows, we.cols);
    dir_b.emplace_back(v.values.data() + be.offset, be.rows);
  }

  const ForwardCache cache = forward_cached(net, batch);
  const double inv_m = 1.0 / static_cast<double>(batch.rows());

  // Tangent forward pass: R[a_0] = 0.
  std::vector<Matrix> r_act(depth + 1);
  r_act[0] = Matrix::Zero(batch.rows(), batch.cols());
  Matrix r_pre_last;
  for (std::size_t l = 0; l < depth; ++l) {
    Matrix r_pre = r_act[l] * layers[l].weights.transpose() +
                   cache.activations[l] * dir_w[l].transpose();
    r_pre.rowwise() += dir_b[l].transpose();
    if (layers[l].activation == Activation::Relu) {
      r_act[l + 1] =
          r_pre.cwiseProduct((cache.pre[l].array() > 0.0).cast<double>().matrix());
    } else {
      r_act[l + 1] = r_pre;
    }
    if (l + 1 == depth) r_pre_last = std::move(r_pre);
  }

  // delta = dL/dz_L and its tangent through the softmax Jacobian.
  const Matrix probs = softmax(cache.pre.back());
  Matrix delta = probs;
  Matrix r_delta(probs.rows(), probs.cols());
  for (Eigen::Index i = 0; i < labels.size(); ++i) {
    const double w = weight_for(class_weights, labels[i]) * inv_m;
    delta(i, labels[i]) -= 1.0;
    delta.row(i) *= w;
    const double dot = probs.row(i).dot(r_pre_last.row(i));
    r_delta.row(i) =
        w * (probs.row(i).cwiseProduct(r_pre_last.row(i)) - dot * probs.row(i));
  }

  FlatParams out;
  out.layout = layout;
  out.values.resize(static_cast<Eigen::Index>(layout.total));
  for (std::size_t l = depth; l-- > 0;) {
    const ParamLayout::Entry& we = layout.entries[2 * l];
    const ParamLayout::Entry& be = layout.entries[2 * l + 1];
    const Matrix hw =
        r_delta.transpose() * cache.activations[l] + delta.transpose() * r_act[l];
    Eigen::Map<Matrix>(out.values.data() + we.offset, we.rows, we.cols) = hw;
    Eigen::Map<Vector>(out.values.data() + be.offset, be.rows) =
        r_delta.colwise().sum().transpose();
    if (l > 0) {
      const Matrix mask = (cache.pre[l - 1].array() > 0.0).cast<double>().matrix();
      const Matrix r_upstream = r_delta * layers[l].weights + delta * dir_w[l];
      r_delta = r_upstream.cwiseProduct(mask);
      delta = Matrix(delta * layers[l].weights).cwiseProduct(mask);
    }
  }
  return out;
}

}  // namespace fairquant
