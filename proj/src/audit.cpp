#include "fairquant/audit.hpp"

#include <algorithm>
#include <cmath>

namespace fairquant {

namespace {

int argmax_row(const Matrix& m, Eigen::Index row) {
  Eigen::Index best = 0;
  m.row(row).maxCoeff(&best);
  return static_cast<int>(best);
}

double population_variance(const Eigen::RowVectorXd& v) {
  const double mean = v.mean();
  return (v.array() - mean).square().sum() / static_cast<double>(v.size());
}

void check_same_architecture(const Network& a, const Network& b) {
  const auto& la = a.layers();
  const auto& lb = b.layers();
  if (la.size() != lb.size()) throw ShapeError("audit: models have different layer counts");
  for (std::size_t l = 0; l < la.size(); ++l) {
    if (la[l].inputs() != lb[l].inputs() || la[l].outputs() != lb[l].outputs()) {
      throw ShapeError("audit: models differ in layer " + std::to_string(l) + " shape");
    }
  }
}

}  // namespace

GroupAccuracyLoss group_accuracy_and_loss(const Network& model, const GroupedDataset& test) {
  test.validate();
  const Matrix logits = forward(model, test.features);
  const Matrix logp = log_softmax(logits);
  const int g_count = test.num_groups();

  GroupAccuracyLoss out;
  out.accuracy.assign(static_cast<std::size_t>(g_count), std::nullopt);
  out.loss.assign(static_cast<std::size_t>(g_count), std::nullopt);

  std::vector<long> counts(static_cast<std::size_t>(g_count), 0);
  std::vector<long> hits(static_cast<std::size_t>(g_count), 0);
  std::vector<double> loss_sum(static_cast<std::size_t>(g_count), 0.0);
  long total_hits = 0;
  for (Eigen::Index i = 0; i < test.size(); ++i) {
    const auto g = static_cast<std::size_t>(test.groups[i]);
    counts[g]++;
    const bool hit = argmax_row(logits, i) == test.labels[i];
    hits[g] += hit;
    total_hits += hit;
    loss_sum[g] -= logp(i, test.labels[i]);
  }
  for (int g = 0; g < g_count; ++g) {
    const auto gi = static_cast<std::size_t>(g);
    if (counts[gi] == 0) continue;
    out.accuracy[gi] = static_cast<double>(hits[gi]) / static_cast<double>(counts[gi]);
    out.loss[gi] = loss_sum[gi] / static_cast<double>(counts[gi]);
  }
  out.overall_accuracy = static_cast<double>(total_hits) / static_cast<double>(test.size());
  return out;
}

std::optional<double> fvo(const std::vector<double>& group_accuracies) {
  if (group_accuracies.size() < 2) return std::nullopt;
  const auto [lo, hi] = std::minmax_element(group_accuracies.begin(), group_accuracies.end());
  return *hi - *lo;
}

std::optional<double> fvo(const std::vector<std::optional<double>>& group_accuracies) {
  std::vector<double> present;
  for (const auto& a : group_accuracies) {
    if (a.has_value()) present.push_back(*a);
  }
  return fvo(present);
}

GroupDrift logit_drift(const Network& reference, const Network& candidate,
                       const GroupedDataset& test) {
  check_same_architecture(reference, candidate);
  test.validate();
  const Matrix ref_logits = forward(reference, test.features);
  const Matrix cand_logits = forward(candidate, test.features);
  const int g_count = test.num_groups();

  GroupDrift out;
  out.avg_cosine_distance.assign(static_cast<std::size_t>(g_count), std::nullopt);
  out.cd_excluded.assign(static_cast<std::size_t>(g_count), 0);
  out.avg_l1.assign(static_cast<std::size_t>(g_count), std::nullopt);
  out.avg_l2.assign(static_cast<std::size_t>(g_count), std::nullopt);

  std::vector<long> counts(static_cast<std::size_t>(g_count), 0);
  std::vector<long> cd_counts(static_cast<std::size_t>(g_count), 0);
  std::vector<double> cd_sum(static_cast<std::size_t>(g_count), 0.0);
  std::vector<double> l1_sum(static_cast<std::size_t>(g_count), 0.0);
  std::vector<double> l2_sum(static_cast<std::size_t>(g_count), 0.0);

  for (Eigen::Index i = 0; i < test.size(); ++i) {
    const auto g = static_cast<std::size_t>(test.groups[i]);
    counts[g]++;
    const Eigen::RowVectorXd a = cand_logits.row(i);
    const Eigen::RowVectorXd b = ref_logits.row(i);
    l1_sum[g] += (a - b).lpNorm<1>();
    l2_sum[g] += (a - b).norm();
    // One sqrt of the squared-norm product keeps CD(A, A) exactly 0 and
    // CD(A, -A) exactly 2.
    const double sq_a = a.dot(a);
    const double sq_b = b.dot(b);
    if (sq_a == 0.0 || sq_b == 0.0) {
      out.cd_excluded[g]++;
      continue;
    }
    cd_sum[g] += 1.0 - a.dot(b) / std::sqrt(sq_a * sq_b);
    cd_counts[g]++;
  }
  for (std::size_t g = 0; g < static_cast<std::size_t>(g_count); ++g) {
    if (counts[g] == 0) continue;
    out.avg_l1[g] = l1_sum[g] / static_cast<double>(counts[g]);
    out.avg_l2[g] = l2_sum[g] / static_cast<double>(counts[g]);
    if (cd_counts[g] > 0) out.avg_cosine_distance[g] = cd_sum[g] / static_cast<double>(cd_counts[g]);
  }
  return out;
}

GroupVariances logit_and_softmax_variance(const Network& model, const GroupedDataset& test) {
  test.validate();
  const Matrix logits = forward(model, test.features);
  const Matrix probs = softmax(logits);
  const int g_count = test.num_groups();

  GroupVariances out;
  out.mean_logit_variance.assign(static_cast<std::size_t>(g_count), std::nullopt);
  out.mean_softmax_variance.assign(static_cast<std::size_t>(g_count), std::nullopt);
  std::vector<long> counts(static_cast<std::size_t>(g_count), 0);
  std::vector<double> logit_sum(static_cast<std::size_t>(g_count), 0.0);
  std::vector<double> softmax_sum(static_cast<std::size_t>(g_count), 0.0);
  for (Eigen::Index i = 0; i < test.size(); ++i) {
    const auto g = static_cast<std::size_t>(test.groups[i]);
    counts[g]++;
    logit_sum[g] += population_variance(logits.row(i));
    softmax_sum[g] += population_variance(probs.row(i));
  }
  for (std::size_t g = 0; g < static_cast<std::size_t>(g_count); ++g) {
    if (counts[g] == 0) continue;
    out.mean_logit_variance[g] = logit_sum[g] / static_cast<double>(counts[g]);
    out.mean_softmax_variance[g] = softmax_sum[g] / static_cast<double>(counts[g]);
  }
  return out;
}

GroupConfidence dtdb_and_confidence(const Network& model, const GroupedDataset& test,
                                    DtdbMode mode) {
  test.validate();
  const Matrix probs = softmax(forward(model, test.features));
  const int g_count = test.num_groups();

  GroupConfidence out;
  out.dtdb_counts.assign(static_cast<std::size_t>(g_count), std::vector<long>(kDtdbBins, 0));
  out.avg_prediction_probability.assign(static_cast<std::size_t>(g_count), std::nullopt);
  std::vector<long> counts(static_cast<std::size_t>(g_count), 0);
  std::vector<double> max_sum(static_cast<std::size_t>(g_count), 0.0);
  for (Eigen::Index i = 0; i < test.size(); ++i) {
    const auto g = static_cast<std::size_t>(test.groups[i]);
    counts[g]++;
    const double max_prob = probs.row(i).maxCoeff();
    max_sum[g] += max_prob;
    const double dtdb = mode == DtdbMode::TrueClass ? probs(i, test.labels[i]) : max_prob;
    const int bin = std::min(kDtdbBins - 1, static_cast<int>(dtdb * kDtdbBins));
    out.dtdb_counts[g][static_cast<std::size_t>(bin)]++;
  }
  for (std::size_t g = 0; g < static_cast<std::size_t>(g_count); ++g) {
    if (counts[g] == 0) continue;
    out.avg_prediction_probability[g] = max_sum[g] / static_cast<double>(counts[g]);
  }
  return out;
}

AuditReport audit_model(const Network& reference, const Network& candidate,
                        const GroupedDataset& test, const AuditOptions& options) {
  const GroupAccuracyLoss acc = group_accuracy_and_loss(candidate, test);
  const GroupDrift drift = logit_drift(reference, candidate, test);
  const GroupVariances variances = logit_and_softmax_variance(candidate, test);
  const GroupConfidence confidence = dtdb_and_confidence(candidate, test, options.dtdb);
  const std::vector<long> counts = test.group_counts();

  AuditReport report;
  report.group_names = test.group_names;
  report.overall_accuracy = acc.overall_accuracy;
  report.fvo = fvo(acc.accuracy);
  report.groups.resize(static_cast<std::size_t>(test.num_groups()));
  for (std::size_t g = 0; g < report.groups.size(); ++g) {
    GroupAudit& slot = report.groups[g];
    slot.sample_count = counts[g];
    slot.present = acc.accuracy[g].has_value();
    if (!slot.present) continue;
    slot.accuracy = *acc.accuracy[g];
    slot.loss = *acc.loss[g];
    slot.cd_defined = drift.avg_cosine_distance[g].has_value();
    slot.avg_cosine_distance = drift.avg_cosine_distance[g].value_or(0.0);
    slot.cd_excluded = drift.cd_excluded[g];
    slot.avg_l1 = *drift.avg_l1[g];
    slot.avg_l2 = *drift.avg_l2[g];
    slot.mean_logit_variance = *variances.mean_logit_variance[g];
    slot.mean_softmax_variance = *variances.mean_softmax_variance[g];
    slot.avg_prediction_probability = *confidence.avg_prediction_probability[g];
    slot.dtdb_counts = confidence.dtdb_counts[g];
  }
  return report;
}

SelectionResult select_best(const std::vector<AuditReport>& candidates) {
  if (candidates.empty()) throw InputError("select_best: no candidates");
  for (const AuditReport& report : candidates) {
    if (!report.fvo.has_value()) {
      throw InputError("select_best: every candidate needs a defined fvo");
    }
  }
  const int n = static_cast<int>(candidates.size());
  SelectionResult result;
  for (int i = 0; i < n; ++i) {
    bool dominated = false;
    for (int j = 0; j < n && !dominated; ++j) {
      if (i == j) continue;
      const bool at_least = candidates[j].overall_accuracy >= candidates[i].overall_accuracy &&
                            *candidates[j].fvo <= *candidates[i].fvo;
      const bool strictly = candidates[j].overall_accuracy > candidates[i].overall_accuracy ||
                            *candidates[j].fvo < *candidates[i].fvo;
      dominated = at_least && strictly;
    }
    if (!dominated) result.frontier.push_back(i);
  }
  result.selected = result.frontier.front();
  for (int idx : result.frontier) {
    const AuditReport& best = candidates[static_cast<std::size_t>(result.selected)];
    const AuditReport& cur = candidates[static_cast<std::size_t>(idx)];
    if (*cur.fvo < *best.fvo ||
        (*cur.fvo == *best.fvo && cur.overall_accuracy > best.overall_accuracy)) {
      result.selected = idx;
    }
  }
  return result;
}

}  // namespace fairquant
