#include "fairquant/diagnostics.hpp"

#include <cmath>

namespace fairquant {

namespace {

constexpr double kNullProductNorm = 1e-12;

Vector random_unit(Eigen::Index dim, Rng& rng) {
  Vector v(dim);
  do {
    for (Eigen::Index i = 0; i < dim; ++i) v[i] = rng.normal();
  } while (v.norm() == 0.0);
  return v / v.norm();
}

struct GroupBatch {
  Matrix features;
  IntVector labels;
};

GroupBatch group_batch(const GroupedDataset& test, int group) {
  const std::vector<int> rows = test.group_rows(group);
  GroupBatch batch;
  batch.features.resize(static_cast<Eigen::Index>(rows.size()), test.dim());
  batch.labels.resize(static_cast<Eigen::Index>(rows.size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    batch.features.row(static_cast<Eigen::Index>(i)) = test.features.row(rows[i]);
    batch.labels[static_cast<Eigen::Index>(i)] = test.labels[rows[i]];
  }
  return batch;
}

}  // namespace

PowerIterationResult power_iteration(const std::function<Vector(const Vector&)>& op,
                                     Eigen::Index dim, const PowerIterationConfig& cfg) {
  if (cfg.max_iters < 1) throw InputError("power_iteration: max_iters must be >= 1");
  if (dim < 1) throw InputError("power_iteration: dimension must be >= 1");
  Rng rng(cfg.seed);
  Vector v = random_unit(dim, rng);

  PowerIterationResult result;
  int null_streak = 0;
  for (int iter = 1; iter <= cfg.max_iters; ++iter) {
    const Vector w = op(v);
    const double wnorm = w.norm();
    if (wnorm <= kNullProductNorm) {
      if (++null_streak >= 3) {
        result.lambda = 0.0;
        result.residual = 0.0;
        result.iterations = iter;
        result.degenerate = true;
        result.eigenvector = v;
        return result;
      }
      v = random_unit(dim, rng);  // escape a null direction
      continue;
    }
    null_streak = 0;
    result.lambda = v.dot(w);  // Rayleigh quotient: v stays unit length
    result.residual = (w - result.lambda * v).norm();
    result.iterations = iter;
    result.eigenvector = v;
    if (result.residual <= cfg.tol * std::max(std::abs(result.lambda), 1e-30)) {
      return result;
    }
    v = w / wnorm;
  }
  return result;
}

std::vector<std::optional<double>> group_gradient_norm(const Network& model,
                                                       const GroupedDataset& test) {
  test.validate();
  std::vector<std::optional<double>> out(static_cast<std::size_t>(test.num_groups()),
                                         std::nullopt);
  for (int g = 0; g < test.num_groups(); ++g) {
    const GroupBatch batch = group_batch(test, g);
    if (batch.labels.size() == 0) continue;
    out[static_cast<std::size_t>(g)] =
        gradient(model, batch.features, batch.labels).values.norm();
  }
  return out;
}

PowerIterationResult lambda_max(const Network& model, const GroupedDataset& test, int group,
                                const PowerIterationConfig& cfg) {
  test.validate();
  if (group < 0 || group >= test.num_groups()) {
    throw InputError("lambda_max: group id out of range");
  }
  const GroupBatch batch = group_batch(test, group);
  if (batch.labels.size() == 0) throw InputError("lambda_max: group has no test samples");

  // Exact Hessian action: the finite-difference route straddles relu kinks
  // at generic (e.g. freshly quantized) weight vectors and spikes.
  const ParamLayout layout = ParamLayout::of(model);
  const auto hvp_op = [&](const Vector& v) {
    return hvp_exact(model, batch.features, batch.labels, Vector(), {v, layout}).values;
  };
  return power_iteration(hvp_op, static_cast<Eigen::Index>(layout.total), cfg);
}

DiagnosticsReport diagnose_model(const Network& model, const GroupedDataset& test,
                                 const PowerIterationConfig& cfg, const std::string& precision) {
  DiagnosticsReport report;
  report.group_names = test.group_names;
  report.precision = precision;
  report.seed = cfg.seed;

  const std::vector<long> counts = test.group_counts();
  const double total = static_cast<double>(test.size());
  const auto norms = group_gradient_norm(model, test);
  report.groups.resize(static_cast<std::size_t>(test.num_groups()));
  report.group_size_fraction.resize(report.groups.size());
  for (int g = 0; g < test.num_groups(); ++g) {
    const auto gi = static_cast<std::size_t>(g);
    report.group_size_fraction[gi] = static_cast<double>(counts[gi]) / total;
    GroupDiagnostics& slot = report.groups[gi];
    slot.sample_count = counts[gi];
    if (!norms[gi].has_value()) continue;
    slot.present = true;
    slot.gradient_norm = *norms[gi];
    const PowerIterationResult eig = lambda_max(model, test, g, cfg);
    slot.lambda_max = eig.lambda;
    slot.residual = eig.residual;
    slot.iterations = eig.iterations;
    slot.degenerate = eig.degenerate;
  }
  return report;
}

std::vector<DiagnosticsReport> diagnostics_sweep(const Network& original,
                                                 const std::vector<QuantizedModel>& quantized,
                                                 const GroupedDataset& test,
                                                 const PowerIterationConfig& cfg) {
  std::vector<DiagnosticsReport> reports;
  reports.reserve(quantized.size() + 1);

  const auto run_cell = [&](const Network& model, const std::string& precision) {
    try {
      reports.push_back(diagnose_model(model, test, cfg, precision));
    } catch (const std::exception& err) {
      DiagnosticsReport failed;
      failed.group_names = test.group_names;
      failed.precision = precision;
      failed.seed = cfg.seed;
      failed.failed = true;
      failed.error = err.what();
      reports.push_back(std::move(failed));
    }
  };

  run_cell(original, "fp32");
  for (const QuantizedModel& qm : quantized) {
    run_cell(qm.to_network(), qm.spec.default_spec.name());
  }
  return reports;
}

}  // namespace fairquant
