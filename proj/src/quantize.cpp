#include "fairquant/quantize.hpp"

#include <bit>
#include <cmath>
#include <limits>

namespace fairquant {

namespace {

// Binary16 boundaries.
constexpr double kHalfMax = 65504.0;
constexpr double kHalfOverflow = 65520.0;  // values at or beyond round to inf

std::int64_t integer_code(double w, double scale, int max_code) {
  const double scaled = round_half_even(w / scale);
  const double top = static_cast<double>(max_code);
  return static_cast<std::int64_t>(std::min(top, std::max(-top, scaled)));
}

QuantizedTensor quantize_tensor(const Matrix& weights, const PrecisionSpec& spec) {
  QuantizedTensor out;
  out.spec = spec;
  out.rows = weights.rows();
  out.cols = weights.cols();
  out.codes.resize(static_cast<std::size_t>(weights.size()));
  switch (spec.kind) {
    case PrecisionKind::Float32Passthrough: {
      const double* data = weights.data();
      for (std::size_t k = 0; k < out.codes.size(); ++k) {
        out.codes[k] = static_cast<std::int64_t>(std::bit_cast<std::uint64_t>(data[k]));
      }
      break;
    }
    case PrecisionKind::Float16Grid: {
      const double* data = weights.data();
      for (std::size_t k = 0; k < out.codes.size(); ++k) {
        out.codes[k] = double_to_half_bits(data[k]);
      }
      break;
    }
    case PrecisionKind::Integer: {
      out.scale = compute_scale(weights, spec);
      const int max_code = spec.max_code();
      const double* data = weights.data();
      for (std::size_t k = 0; k < out.codes.size(); ++k) {
        out.codes[k] = integer_code(data[k], out.scale, max_code);
      }
      break;
    }
  }
  return out;
}

Matrix dequantize_tensor(const QuantizedTensor& qt) {
  Matrix out(qt.rows, qt.cols);
  double* data = out.data();
  switch (qt.spec.kind) {
    case PrecisionKind::Float32Passthrough:
      for (std::size_t k = 0; k < qt.codes.size(); ++k) {
        data[k] = std::bit_cast<double>(static_cast<std::uint64_t>(qt.codes[k]));
      }
      break;
    case PrecisionKind::Float16Grid:
      for (std::size_t k = 0; k < qt.codes.size(); ++k) {
        data[k] = half_bits_to_double(static_cast<std::uint16_t>(qt.codes[k]));
      }
      break;
    case PrecisionKind::Integer:
      for (std::size_t k = 0; k < qt.codes.size(); ++k) {
        data[k] = qt.scale * static_cast<double>(qt.codes[k]);
      }
      break;
  }
  return out;
}

}  // namespace

PrecisionSpec PrecisionSpec::integer(int bits) {
  if (bits < 2 || bits > 8) {
    throw InputError("integer precision must use 2..8 bits, got " + std::to_string(bits));
  }
  return {PrecisionKind::Integer, bits};
}

PrecisionSpec PrecisionSpec::parse(const std::string& name) {
  if (name == "fp32") return fp32();
  if (name == "fp16") return fp16();
  if (name.rfind("int", 0) == 0 && name.size() == 4 && name[3] >= '2' && name[3] <= '8') {
    return integer(name[3] - '0');
  }
  throw ParseError("unknown precision: " + name + " (expected fp32, fp16, or int2..int8)");
}

std::string PrecisionSpec::name() const {
  switch (kind) {
    case PrecisionKind::Float32Passthrough:
      return "fp32";
    case PrecisionKind::Float16Grid:
      return "fp16";
    case PrecisionKind::Integer:
      return "int" + std::to_string(bits);
  }
  return "fp32";
}

int PrecisionSpec::max_code() const {
  if (kind != PrecisionKind::Integer) {
    throw InputError("max_code is only defined for integer precisions");
  }
  return (1 << (bits - 1)) - 1;
}

MixedPrecisionMap MixedPrecisionMap::first_last(const PrecisionSpec& inner,
                                                const PrecisionSpec& edge, int num_layers) {
  if (num_layers < 1) throw InputError("first_last: need at least one layer");
  MixedPrecisionMap map{inner, {}};
  map.overrides[0] = edge;
  map.overrides[num_layers - 1] = edge;
  return map;
}

PrecisionSpec MixedPrecisionMap::layer_spec(int layer) const {
  const auto it = overrides.find(layer);
  return it == overrides.end() ? default_spec : it->second;
}

void MixedPrecisionMap::validate(int num_layers) const {
  for (const auto& [layer, spec] : overrides) {
    (void)spec;
    if (layer < 0 || layer >= num_layers) {
      throw InputError("precision override for invalid layer index " + std::to_string(layer));
    }
  }
}

double round_half_even(double x) {
  const double f = std::floor(x);
  const double diff = x - f;
  if (diff > 0.5) return f + 1.0;
  if (diff < 0.5) return f;
  return std::fmod(f, 2.0) == 0.0 ? f : f + 1.0;
}

std::uint16_t double_to_half_bits(double x) {
  const std::uint16_t sign = std::signbit(x) ? 0x8000 : 0;
  const double a = std::fabs(x);
  if (std::isnan(a)) return static_cast<std::uint16_t>(sign | 0x7e00);
  if (a >= kHalfOverflow) return static_cast<std::uint16_t>(sign | 0x7bff);  // clamp, not inf
  if (a < std::ldexp(1.0, -14)) {
    // Subnormal grid: quantum 2^-24.
    const double q = round_half_even(std::ldexp(a, 24));
    if (q >= 1024.0) return static_cast<std::uint16_t>(sign | 0x0400);
    return static_cast<std::uint16_t>(sign | static_cast<std::uint16_t>(q));
  }
  int e = 0;
  const double m = std::frexp(a, &e);  // a = m * 2^e, m in [0.5, 1)
  int expo = e - 1;
  double frac = round_half_even((m * 2.0 - 1.0) * 1024.0);
  if (frac >= 1024.0) {
    frac = 0.0;
    ++expo;
  }
  if (expo > 15) return static_cast<std::uint16_t>(sign | 0x7bff);
  return static_cast<std::uint16_t>(sign | ((expo + 15) << 10) | static_cast<int>(frac));
}

double half_bits_to_double(std::uint16_t bits) {
  const double sign = (bits & 0x8000) ? -1.0 : 1.0;
  const int expo = (bits >> 10) & 0x1f;
  const int frac = bits & 0x3ff;
  if (expo == 0) return sign * std::ldexp(static_cast<double>(frac), -24);
  if (expo == 31) {
    return frac != 0 ? std::numeric_limits<double>::quiet_NaN()
                     : sign * std::numeric_limits<double>::infinity();
  }
  return sign * std::ldexp(1.0 + static_cast<double>(frac) / 1024.0, expo - 15);
}

double round_to_half_grid(double x) { return half_bits_to_double(double_to_half_bits(x)); }

double compute_scale(const Matrix& weights, const PrecisionSpec& spec) {
  if (weights.size() == 0) throw InputError("compute_scale: empty weight tensor");
  if (spec.kind != PrecisionKind::Integer) {
    throw InputError("compute_scale: only integer precisions carry a scale");
  }
  const double max_abs = weights.cwiseAbs().maxCoeff();
  if (max_abs == 0.0) return 1.0;
  return max_abs / static_cast<double>(spec.max_code());
}

QuantizedModel quantize(const Network& net, const PrecisionSpec& spec) {
  return quantize(net, MixedPrecisionMap::uniform(spec));
}

QuantizedModel quantize(const Network& net, const MixedPrecisionMap& map) {
  map.validate(static_cast<int>(net.layers().size()));
  QuantizedModel qm;
  qm.spec = map;
  int index = 0;
  for (const DenseLayer& layer : net.layers()) {
    qm.weights.push_back(quantize_tensor(layer.weights, map.layer_spec(index)));
    qm.biases.push_back(layer.bias);
    qm.activations.push_back(layer.activation);
    ++index;
  }
  return qm;
}

Network QuantizedModel::to_network() const {
  std::vector<DenseLayer> layers;
  layers.reserve(weights.size());
  for (std::size_t l = 0; l < weights.size(); ++l) {
    layers.push_back({dequantize_tensor(weights[l]), biases[l], activations[l]});
  }
  return Network(std::move(layers));
}

FlatParams dequantize(const QuantizedModel& qm) { return flatten(qm.to_network()); }

Matrix fake_quant_forward(const Matrix& weights, const PrecisionSpec& spec) {
  switch (spec.kind) {
    case PrecisionKind::Float32Passthrough:
      return weights;
    case PrecisionKind::Float16Grid:
      return weights.unaryExpr([](double w) { return round_to_half_grid(w); });
    case PrecisionKind::Integer: {
      const double scale = compute_scale(weights, spec);
      const int max_code = spec.max_code();
      return weights.unaryExpr([scale, max_code](double w) {
        return scale * static_cast<double>(integer_code(w, scale, max_code));
      });
    }
  }
  return weights;
}

Matrix fake_quant_backward(const Matrix& upstream, const Matrix& weights,
                           const PrecisionSpec& spec) {
  if (upstream.rows() != weights.rows() || upstream.cols() != weights.cols()) {
    throw ShapeError("fake_quant_backward: gradient/weight shape mismatch");
  }
  switch (spec.kind) {
    case PrecisionKind::Float32Passthrough:
      return upstream;
    case PrecisionKind::Float16Grid:
      return upstream.cwiseProduct(
          (weights.cwiseAbs().array() <= kHalfMax).cast<double>().matrix());
    case PrecisionKind::Integer: {
      const double scale = compute_scale(weights, spec);
      const double bound = (static_cast<double>(spec.max_code()) + 0.5) * scale;
      return upstream.cwiseProduct((weights.cwiseAbs().array() <= bound).cast<double>().matrix());
    }
  }
  return upstream;
}

WeightChangeStats weight_change_stats(const FlatParams& original, const QuantizedModel& qm) {
  const FlatParams deq = dequantize(qm);
  if (original.layout != deq.layout) {
    throw InputError("weight_change_stats: parameter layouts do not match");
  }
  WeightChangeStats stats;
  stats.abs_diff = (deq.values - original.values).lpNorm<1>();
  const double k = static_cast<double>(original.values.size());
  stats.sparsity_original =
      static_cast<double>((original.values.array() == 0.0).count()) / k;
  stats.sparsity_quantized = static_cast<double>((deq.values.array() == 0.0).count()) / k;
  return stats;
}

}  // namespace fairquant
