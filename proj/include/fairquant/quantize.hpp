#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "fairquant/network.hpp"
#include "fairquant/types.hpp"

namespace fairquant {

enum class PrecisionKind { Float32Passthrough, Float16Grid, Integer };

/// Weight precision: full passthrough, the binary16 value grid, or a
/// symmetric integer grid with q in [2, 8] bits.
struct PrecisionSpec {
  PrecisionKind kind = PrecisionKind::Float32Passthrough;
  int bits = 32;

  static PrecisionSpec fp32() { return {PrecisionKind::Float32Passthrough, 32}; }
  static PrecisionSpec fp16() { return {PrecisionKind::Float16Grid, 16}; }
  static PrecisionSpec integer(int bits);
  static PrecisionSpec parse(const std::string& name);  // "fp32", "fp16", "int2".."int8"

  std::string name() const;
  /// Largest magnitude code of the symmetric range, 2^(q-1) - 1.
  int max_code() const;

  bool operator==(const PrecisionSpec&) const = default;
};

/// Per-layer precision assignment; layers without an override use the default.
struct MixedPrecisionMap {
  PrecisionSpec default_spec;
  std::map<int, PrecisionSpec> overrides;

  static MixedPrecisionMap uniform(const PrecisionSpec& spec) { return {spec, {}}; }
  /// First and last layers at `edge`, everything else at `inner`.
  static MixedPrecisionMap first_last(const PrecisionSpec& inner, const PrecisionSpec& edge,
                                      int num_layers);

  PrecisionSpec layer_spec(int layer) const;
  void validate(int num_layers) const;
};

/// One quantized weight tensor. `codes` carry integer grid codes, binary16
/// bit patterns, or raw f64 bit patterns depending on the spec, so every
/// precision round-trips losslessly through the same container.
struct QuantizedTensor {
  PrecisionSpec spec;
  double scale = 1.0;
  Eigen::Index rows = 0;
  Eigen::Index cols = 0;
  std::vector<std::int64_t> codes;
};

/// Quantized network: per-layer weight codes plus untouched biases and the
/// source layout needed to reassemble the original parameter vector.
struct QuantizedModel {
  std::vector<QuantizedTensor> weights;
  std::vector<Vector> biases;
  std::vector<Activation> activations;
  MixedPrecisionMap spec;

  int num_layers() const { return static_cast<int>(weights.size()); }
  Network to_network() const;
};

struct WeightChangeStats {
  double abs_diff = 0.0;           // sum_k |dequantized_k - original_k|
  double sparsity_original = 0.0;  // fraction of exact zeros over all K params
  double sparsity_quantized = 0.0;
};

/// Ties-to-even rounding that does not depend on the ambient fenv mode.
double round_half_even(double x);

/// Nearest binary16 value (round-to-nearest-even); overflow clamps to
/// +-65504 instead of +-inf.
std::uint16_t double_to_half_bits(double x);
double half_bits_to_double(std::uint16_t bits);
double round_to_half_grid(double x);

/// Symmetric min-max scale: max|w| mapped onto the top code. All-zero
/// tensors get scale 1 so every code is 0.
double compute_scale(const Matrix& weights, const PrecisionSpec& spec);

QuantizedModel quantize(const Network& net, const PrecisionSpec& spec);
QuantizedModel quantize(const Network& net, const MixedPrecisionMap& map);

/// Scales codes back into the original parameter layout (biases untouched).
FlatParams dequantize(const QuantizedModel& qm);

/// quantize-then-dequantize of one weight tensor with a dynamic per-call
/// scale; the QAT forward surrogate.
Matrix fake_quant_forward(const Matrix& weights, const PrecisionSpec& spec);

/// Clipped straight-through estimator: upstream gradient passes where
/// |w/scale| <= max_code + 0.5, zero outside.
Matrix fake_quant_backward(const Matrix& upstream, const Matrix& weights,
                           const PrecisionSpec& spec);

WeightChangeStats weight_change_stats(const FlatParams& original, const QuantizedModel& qm);

}  // namespace fairquant
