#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "fairquant/types.hpp"

namespace fairquant {

enum class Activation { Relu, Identity };

std::string activation_name(Activation a);
Activation activation_from_name(const std::string& name);

struct DenseLayer {
  Matrix weights;  // out x in
  Vector bias;     // out
  Activation activation = Activation::Relu;

  Eigen::Index inputs() const { return weights.cols(); }
  Eigen::Index outputs() const { return weights.rows(); }
};

/// Ordered dense layers; logits are the last layer's pre-softmax output.
/// Adjacent layers must compose and the last activation must be identity.
class Network {
 public:
  Network() = default;
  explicit Network(std::vector<DenseLayer> layers);

  /// Glorot-uniform initialized net over the given widths
  /// (input, hidden..., output); hidden layers relu, last identity,
  /// biases zero. Weight draws are row-major per layer.
  static Network dense(const std::vector<int>& widths, Rng& rng);

  const std::vector<DenseLayer>& layers() const { return layers_; }
  std::vector<DenseLayer>& layers() { return layers_; }

  int input_dim() const;
  int output_dim() const;
  std::size_t param_count() const;  // K: every weight and bias element

 private:
  std::vector<DenseLayer> layers_;
};

/// Flattened-parameter layout: per tensor (offset, count, shape) records,
/// ordered layer by layer as weights then bias.
struct ParamLayout {
  struct Entry {
    std::size_t offset = 0;
    std::size_t count = 0;
    Eigen::Index rows = 0;
    Eigen::Index cols = 0;  // 1 for bias
    int layer = 0;
    bool is_bias = false;
    bool operator==(const Entry&) const = default;
  };
  std::vector<Entry> entries;
  std::size_t total = 0;

  static ParamLayout of(const Network& net);
  bool operator==(const ParamLayout&) const = default;
};

struct FlatParams {
  Vector values;
  ParamLayout layout;
};

FlatParams flatten(const Network& net);

/// Rebuilds a network with the reference's shapes and activations from a
/// flat vector. flatten / unflatten round-trips exactly.
Network unflatten(const FlatParams& params, const Network& reference);

/// In-place variant for hot paths; `values` must match the net's layout size.
void assign_from_flat(Network& net, const Vector& values);

/// Logits for a batch of rows; purely functional.
Matrix forward(const Network& net, const Matrix& batch);

/// Row-wise softmax with max-subtraction.
Matrix softmax(const Matrix& logits);
Matrix log_softmax(const Matrix& logits);

/// Mean (optionally class-weighted) cross-entropy over the batch.
/// Empty `class_weights` means uniform weight 1 for every class.
double cross_entropy_loss(const Network& net, const Matrix& batch, const IntVector& labels,
                          const Vector& class_weights = Vector());

/// Exact reverse-mode gradient of the weighted cross-entropy.
FlatParams gradient(const Network& net, const Matrix& batch, const IntVector& labels,
                    const Vector& class_weights = Vector());

/// H.v for the weighted cross-entropy by central differences of gradients:
/// (g(theta + eps*vhat) - g(theta - eps*vhat)) / (2 eps) * ||v||,
/// eps = 1e-4 * (1 + ||theta||_inf).
FlatParams hvp(const Network& net, const Matrix& batch, const IntVector& labels,
               const Vector& class_weights, const FlatParams& v);

/// Exact H.v via forward-over-reverse (Pearlmutter) with the relu second
/// derivative taken as zero almost everywhere. Unlike the finite-difference
/// route this never straddles relu kinks, which matters when the evaluation
/// point is a quantized (generic) weight vector rather than a trained one.
FlatParams hvp_exact(const Network& net, const Matrix& batch, const IntVector& labels,
                     const Vector& class_weights, const FlatParams& v);

/// Generic central-difference H.v over any gradient callback. Exposed so
/// curvature diagnostics and quadratic-surrogate tests share one HVP rule.
Vector hvp_central_diff(const std::function<Vector(const Vector&)>& grad_fn, const Vector& theta,
                        const Vector& v);

}  // namespace fairquant
