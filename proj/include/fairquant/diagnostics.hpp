#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "fairquant/dataset.hpp"
#include "fairquant/network.hpp"
#include "fairquant/quantize.hpp"

namespace fairquant {

struct PowerIterationConfig {
  int max_iters = 500;
  double tol = 1e-6;  // stop when residual <= tol * |lambda|
  std::uint64_t seed = 0;
};

struct PowerIterationResult {
  double lambda = 0.0;    // Rayleigh quotient v'Hv at termination (sign kept)
  double residual = 0.0;  // ||Hv - lambda v|| for the reported (lambda, v)
  int iterations = 0;
  bool degenerate = false;  // H v vanished on three consecutive iterations
  Vector eigenvector;
};

/// Power iteration over an arbitrary symmetric operator. The start vector is
/// a seeded random unit vector; a vanishing product redraws the direction and
/// three consecutive vanishes report lambda = 0 with the degenerate flag.
PowerIterationResult power_iteration(const std::function<Vector(const Vector&)>& op,
                                     Eigen::Index dim, const PowerIterationConfig& cfg);

/// l2 norm of the full-group cross-entropy gradient at the given parameters;
/// groups without test rows are absent. The model is never mutated.
std::vector<std::optional<double>> group_gradient_norm(const Network& model,
                                                       const GroupedDataset& test);

/// Dominant Hessian eigenvalue of the group loss via power iteration on the
/// central-difference HVP operator.
PowerIterationResult lambda_max(const Network& model, const GroupedDataset& test, int group,
                                const PowerIterationConfig& cfg);

struct GroupDiagnostics {
  bool present = false;
  long sample_count = 0;
  double gradient_norm = 0.0;
  double lambda_max = 0.0;
  double residual = 0.0;
  int iterations = 0;
  bool degenerate = false;
};

struct DiagnosticsReport {
  std::vector<GroupDiagnostics> groups;
  std::vector<std::string> group_names;
  std::vector<double> group_size_fraction;  // normalized test-set sizes
  std::string precision = "fp32";
  std::uint64_t seed = 0;
  bool failed = false;  // set by sweeps when this cell threw
  std::string error;
};

/// Both diagnostics for every group of the test split.
DiagnosticsReport diagnose_model(const Network& model, const GroupedDataset& test,
                                 const PowerIterationConfig& cfg, const std::string& precision);

/// One report per precision: the original model first (fp32), then each
/// quantized model. Failed cells are flagged and the sweep continues.
std::vector<DiagnosticsReport> diagnostics_sweep(const Network& original,
                                                 const std::vector<QuantizedModel>& quantized,
                                                 const GroupedDataset& test,
                                                 const PowerIterationConfig& cfg);

}  // namespace fairquant
