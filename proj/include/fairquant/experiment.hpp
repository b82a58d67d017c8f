#pragma once

#include <cstdint>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "fairquant/audit.hpp"
#include "fairquant/dataset.hpp"
#include "fairquant/diagnostics.hpp"
#include "fairquant/quantize.hpp"
#include "fairquant/train.hpp"

namespace fairquant {

inline constexpr const char* kToolVersion = "0.1.0";

// Exit-code contract shared by every subcommand.
inline constexpr int kExitOk = 0;
inline constexpr int kExitPartialFailure = 1;
inline constexpr int kExitUsage = 2;

struct DiagnosticsConfig {
  int max_iters = 300;
  double tol = 1e-4;
};

/// One experiment description: dataset source, architecture, training and
/// QAT settings, the precision sweep, and the seed list. Loaded from JSON;
/// command-line flags override individual fields.
struct ExperimentConfig {
  std::string name = "experiment";

  std::optional<SyntheticSpec> synthetic;  // seed field is ignored; per-run seeds apply
  std::optional<std::string> train_csv;
  std::optional<std::string> test_csv;

  std::vector<int> hidden;  // hidden layer widths

  TrainConfig train;
  std::vector<PrecisionSpec> precisions;
  SamplerConfig sampler;

  TrainConfig qat_train;
  double qat_dampening = 0.01;
  double qat_dampening_start = 0.7;
  int qat_edge_bits = 8;

  PrecisionSpec mitigation_precision = PrecisionSpec::integer(4);
  Vector mitigation_class_weights;  // the WCR vector; empty means uniform

  DiagnosticsConfig diagnostics;

  std::string out_dir = "out";
  std::vector<std::uint64_t> seeds;

  static ExperimentConfig from_json_text(const std::string& text);
  static ExperimentConfig load(const std::string& path);
  std::string to_canonical_json() const;
  std::uint64_t config_hash() const { return fnv1a64(to_canonical_json()); }

  void validate() const;
};

/// Artifact ledger for one command run. Timestamps are the one intentionally
/// non-reproducible field; everything else in an output directory is
/// byte-stable for a fixed config and seed.
struct RunManifest {
  std::string command;
  std::string tool_version = kToolVersion;
  std::string config_hash_hex;
  std::vector<std::string> artifacts;  // paths relative to the output dir
  std::string started_at;
  std::string finished_at;

  void add(std::string relative_path) { artifacts.push_back(std::move(relative_path)); }
  /// Verifies every artifact exists under `dir`, then writes manifest.json.
  void finalize(const std::string& dir);
};

std::string iso8601_utc_now();

/// Per-seed data materialization: synthetic specs are regenerated with the
/// run seed, CSV datasets are loaded as-is.
std::pair<GroupedDataset, GroupedDataset> dataset_for_seed(const ExperimentConfig& config,
                                                           std::uint64_t seed);

/// Fresh network for a run seed: input width from the dataset, hidden widths
/// from the config, output width = class count over both splits.
Network network_for_seed(const ExperimentConfig& config, const GroupedDataset& train,
                         const GroupedDataset& test, std::uint64_t seed);

// Subcommand drivers. Each returns an exit code and logs progress to `log`.
int run_gen_data(const ExperimentConfig& config, std::ostream& log);
int run_train(const ExperimentConfig& config, std::ostream& log);
int run_quantize(const ExperimentConfig& config, const std::string& checkpoint_path,
                 std::ostream& log);
int run_audit(const ExperimentConfig& config, const std::string& checkpoint_path,
              const std::string& qmodel_path, std::ostream& log);
int run_diagnose(const ExperimentConfig& config, const std::string& checkpoint_path,
                 const std::string& qmodel_path, std::ostream& log);
int run_sweep(const ExperimentConfig& config, std::ostream& log);
int run_mitigate(const ExperimentConfig& config, std::ostream& log);

/// Cell parallelism: depth = min(#seeds, hardware), capped by the
/// FAIRQUANT_THREADS environment variable when set.
int effective_thread_count(std::size_t cells);

}  // namespace fairquant
