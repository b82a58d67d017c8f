#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "fairquant/types.hpp"

namespace fairquant {

enum class Split { Train, Test };

/// Feature rows with class labels and group ids. Groups default to classes
/// (the common conflation for group-fairness benchmarks) but stay a separate
/// field so attribute-based grouping remains expressible.
struct GroupedDataset {
  Matrix features;  // M x d
  IntVector labels;
  IntVector groups;
  std::vector<std::string> group_names;
  Split split = Split::Train;

  Eigen::Index size() const { return features.rows(); }
  Eigen::Index dim() const { return features.cols(); }
  int num_groups() const { return static_cast<int>(group_names.size()); }
  int num_classes() const;

  /// Row indices of group g, in dataset order.
  std::vector<int> group_rows(int g) const;
  std::vector<long> group_counts() const;

  /// Materialized row subset; keeps names and split tag.
  GroupedDataset take_rows(const std::vector<int>& rows) const;

  void validate() const;
};

/// Gaussian mixture generator. Each group draws `sizes[g]` samples around
/// `centers[g]` with deviation `spreads[g] * difficulty[g]`; the difficulty
/// multiplier (>= 1) widens a group into its neighbours, which is the knob
/// that makes a group's examples hard.
struct SyntheticSpec {
  int groups = 0;
  int dim = 0;
  std::vector<int> sizes;
  std::vector<Vector> centers;
  std::vector<double> spreads;
  std::vector<double> difficulty;
  std::vector<std::string> group_names;  // optional; defaults to g0..g{G-1}
  std::uint64_t seed = 0;

  void validate() const;
};

enum class SamplerMode { None, Undersample, Oversample, UO };
enum class TargetRule { MinGroup, MaxGroup, Explicit };

struct SamplerConfig {
  SamplerMode mode = SamplerMode::None;
  TargetRule target = TargetRule::MinGroup;
  std::vector<int> explicit_counts;
  std::uint64_t seed = 0;
};

std::string sampler_mode_name(SamplerMode mode);
SamplerMode sampler_mode_from_name(const std::string& name);

/// 80/20 stratified train/test pair, deterministic in the spec seed.
std::pair<GroupedDataset, GroupedDataset> generate_synthetic(const SyntheticSpec& spec);

/// Under/over-sampling on a train split. Undersampling draws without
/// replacement down to the target; oversampling replicates every row
/// floor(target/n) times and fills the remainder without replacement, so
/// each original row appears at least floor(target/n) times. UO balances
/// to the median group size. Resampling a test split is a usage error.
GroupedDataset resample(const GroupedDataset& ds, const SamplerConfig& cfg);

struct CsvSchema {
  std::string label_column = "label";
  std::string group_column = "group";
};

/// Strict CSV reader: numeric features, integer labels/groups, no NaN;
/// parse errors carry row and column positions.
GroupedDataset load_csv(const std::string& path, const CsvSchema& schema = {},
                        Split split = Split::Train);
void save_csv(const GroupedDataset& ds, const std::string& path);

}  // namespace fairquant
