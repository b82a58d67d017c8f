#pragma once

#include <optional>
#include <string>
#include <vector>

#include "fairquant/dataset.hpp"
#include "fairquant/network.hpp"

namespace fairquant {

/// Which softmax entry counts as the distance to the decision boundary:
/// the true-class probability (default; low values sit near or across the
/// boundary) or the winning probability.
enum class DtdbMode { TrueClass, MaxProbability };

struct AuditOptions {
  DtdbMode dtdb = DtdbMode::TrueClass;
};

inline constexpr int kDtdbBins = 20;

/// Per-group slice of an audit. Groups with no test rows stay absent
/// (present = false) instead of reporting 0/0 artifacts.
struct GroupAudit {
  bool present = false;
  long sample_count = 0;
  double accuracy = 0.0;
  double loss = 0.0;
  // Logit drift of the audited model against the reference model.
  bool cd_defined = false;  // false when every sample had a null logit vector
  double avg_cosine_distance = 0.0;
  long cd_excluded = 0;  // samples skipped because either logit vector was null
  double avg_l1 = 0.0;
  double avg_l2 = 0.0;
  double mean_logit_variance = 0.0;
  double mean_softmax_variance = 0.0;
  double avg_prediction_probability = 0.0;
  std::vector<long> dtdb_counts;  // kDtdbBins uniform bins over [0, 1]
};

struct AuditReport {
  std::vector<GroupAudit> groups;
  std::vector<std::string> group_names;
  double overall_accuracy = 0.0;
  std::optional<double> fvo;  // empty when fewer than two groups are present
  // Metadata
  std::string precision = "fp32";
  std::uint64_t seed = 0;
  std::string dataset_id;
};

struct GroupAccuracyLoss {
  std::vector<std::optional<double>> accuracy;  // per group; absent if empty
  std::vector<std::optional<double>> loss;
  double overall_accuracy = 0.0;
};

/// Arg-max accuracy and plain cross-entropy per group, plus overall accuracy.
GroupAccuracyLoss group_accuracy_and_loss(const Network& model, const GroupedDataset& test);

/// Largest pairwise accuracy gap; empty when fewer than two values.
std::optional<double> fvo(const std::vector<double>& group_accuracies);
std::optional<double> fvo(const std::vector<std::optional<double>>& group_accuracies);

struct GroupDrift {
  std::vector<std::optional<double>> avg_cosine_distance;
  std::vector<long> cd_excluded;
  std::vector<std::optional<double>> avg_l1;
  std::vector<std::optional<double>> avg_l2;
};

/// Per-group mean cosine / L1 / L2 distance between the two models' logits.
/// Samples where either logit vector is exactly null are excluded from the
/// cosine mean and counted.
GroupDrift logit_drift(const Network& reference, const Network& candidate,
                       const GroupedDataset& test);

struct GroupVariances {
  std::vector<std::optional<double>> mean_logit_variance;
  std::vector<std::optional<double>> mean_softmax_variance;
};

/// Population variance across each sample's class dimension, averaged per group.
GroupVariances logit_and_softmax_variance(const Network& model, const GroupedDataset& test);

struct GroupConfidence {
  std::vector<std::vector<long>> dtdb_counts;             // [group][bin]
  std::vector<std::optional<double>> avg_prediction_probability;
};

GroupConfidence dtdb_and_confidence(const Network& model, const GroupedDataset& test,
                                    DtdbMode mode = DtdbMode::TrueClass);

/// Full audit of `candidate` on the test split, with drift measured against
/// `reference`. Auditing a model against itself yields zero drift.
AuditReport audit_model(const Network& reference, const Network& candidate,
                        const GroupedDataset& test, const AuditOptions& options = {});

/// Best-model rule over (overall accuracy up, fvo down): the Pareto frontier,
/// plus a deterministic pick (lowest fvo, ties to higher accuracy, then input
/// order).
struct SelectionResult {
  std::vector<int> frontier;  // indices into the candidate list, input order
  int selected = 0;
};

SelectionResult select_best(const std::vector<AuditReport>& candidates);

}  // namespace fairquant
