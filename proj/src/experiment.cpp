#include "fairquant/experiment.hpp"

#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <sstream>
#include <thread>

#include "fairquant/serialize.hpp"

namespace fairquant {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Fixed per-role seed streams so one experiment seed drives every stage
// without collisions.
constexpr const char* kRoleDataset = "dataset";
constexpr const char* kRoleInit = "init";
constexpr const char* kRoleTrain = "train";
constexpr const char* kRoleTrainFair = "train-fair";
constexpr const char* kRoleSampler = "sampler";
constexpr const char* kRoleSamplerQat = "sampler-qat";
constexpr const char* kRoleQat = "qat";
constexpr const char* kRoleQatFair = "qat-fair";
constexpr const char* kRolePower = "power-iteration";

[[noreturn]] void config_error(const std::string& message) {
  throw UsageError("config: " + message);
}

void expect_keys(const json& object, const std::vector<std::string>& allowed,
                 const std::string& where) {
  for (const auto& [key, value] : object.items()) {
    (void)value;
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
      config_error("unknown key '" + key + "' in " + where);
    }
  }
}

Vector json_to_vector(const json& arr, const std::string& where) {
  if (!arr.is_array()) config_error(where + " must be an array of numbers");
  Vector out(static_cast<Eigen::Index>(arr.size()));
  Eigen::Index i = 0;
  for (const json& v : arr) {
    if (!v.is_number()) config_error(where + " must contain only numbers");
    out[i++] = v.get<double>();
  }
  return out;
}

json vector_to_json(const Vector& v) {
  json arr = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) arr.push_back(v[i]);
  return arr;
}

TrainConfig train_config_from_json(const json& object, const std::string& where) {
  expect_keys(object,
              {"epochs", "batch_size", "learning_rate", "momentum", "class_weights", "shuffle"},
              where);
  TrainConfig cfg;
  cfg.epochs = object.value("epochs", 1);
  cfg.batch_size = object.value("batch_size", 32);
  cfg.learning_rate = object.value("learning_rate", 0.01);
  cfg.momentum = object.value("momentum", 0.9);
  cfg.shuffle = object.value("shuffle", true);
  if (object.contains("class_weights")) {
    cfg.class_weights = json_to_vector(object["class_weights"], where + ".class_weights");
  }
  return cfg;
}

json train_config_to_json(const TrainConfig& cfg) {
  json object;
  object["epochs"] = cfg.epochs;
  object["batch_size"] = cfg.batch_size;
  object["learning_rate"] = cfg.learning_rate;
  object["momentum"] = cfg.momentum;
  object["shuffle"] = cfg.shuffle;
  if (cfg.class_weights.size() != 0) object["class_weights"] = vector_to_json(cfg.class_weights);
  return object;
}

std::string seed_dir(std::uint64_t seed) { return "seed_" + std::to_string(seed); }

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw ParseError("cannot create directory " + dir.string() + ": " + ec.message());
}

struct SeedPaths {
  fs::path root;  // <out>/<command>/seed_<s>
  std::string rel;

  SeedPaths(const fs::path& out, const std::string& command, std::uint64_t seed)
      : root(out / command / seed_dir(seed)), rel(seed_dir(seed)) {
    ensure_dir(root);
  }
  std::string file(const std::string& name) const { return (root / name).string(); }
  std::string rel_file(const std::string& name) const { return rel + "/" + name; }
};

std::string default_checkpoint_path(const ExperimentConfig& config, std::uint64_t seed) {
  return (fs::path(config.out_dir) / "train" / seed_dir(seed) / "checkpoint.json").string();
}

PowerIterationConfig power_config(const ExperimentConfig& config, std::uint64_t seed) {
  PowerIterationConfig cfg;
  cfg.max_iters = config.diagnostics.max_iters;
  cfg.tol = config.diagnostics.tol;
  cfg.seed = derive_seed(seed, kRolePower);
  return cfg;
}

std::string dataset_id(const ExperimentConfig& config, std::uint64_t seed) {
  return config.name + ":seed=" + std::to_string(seed) + ":test";
}

QatConfig qat_config(const ExperimentConfig& config, const PrecisionSpec& target, int num_layers,
                     std::uint64_t seed_role, const Vector& class_weights) {
  QatConfig qat;
  qat.base = config.qat_train;
  qat.base.seed = seed_role;
  qat.base.class_weights = class_weights;
  qat.precision_map =
      MixedPrecisionMap::first_last(target, PrecisionSpec::integer(config.qat_edge_bits),
                                    num_layers);
  qat.dampening_coefficient = config.qat_dampening;
  qat.dampening_start_fraction = config.qat_dampening_start;
  return qat;
}

struct SeedOutcome {
  bool failed = false;
  std::string error;
  std::string log;
  std::vector<std::string> artifacts;
};

template <typename Fn>
void parallel_over_seeds(std::size_t count, Fn&& body) {
  const int threads = effective_thread_count(count);
  if (threads <= 1) {
    for (std::size_t i = 0; i < count; ++i) body(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(threads));
  for (int t = 0; t < threads; ++t) {
    pool.emplace_back([&]() {
      for (std::size_t i = next.fetch_add(1); i < count; i = next.fetch_add(1)) body(i);
    });
  }
  for (std::thread& worker : pool) worker.join();
}

struct Welford {
  std::vector<double> values;
  void add(double v) { values.push_back(v); }
  bool empty() const { return values.empty(); }
  double mean() const {
    double sum = 0.0;
    for (double v : values) sum += v;
    return sum / static_cast<double>(values.size());
  }
  double sd() const {
    if (values.size() < 2) return 0.0;
    const double m = mean();
    double sq = 0.0;
    for (double v : values) sq += (v - m) * (v - m);
    return std::sqrt(sq / static_cast<double>(values.size() - 1));
  }
};

}  // namespace

int effective_thread_count(std::size_t cells) {
  unsigned hw = std::thread::hardware_concurrency();
  if (hw == 0) hw = 1;
  std::size_t threads = std::min<std::size_t>(cells, hw);
  if (const char* env = std::getenv("FAIRQUANT_THREADS")) {
    char* end = nullptr;
    const long cap = std::strtol(env, &end, 10);
    if (end == env || cap < 1) throw UsageError("FAIRQUANT_THREADS must be a positive integer");
    threads = std::min<std::size_t>(threads, static_cast<std::size_t>(cap));
  }
  return static_cast<int>(std::max<std::size_t>(1, threads));
}

std::string iso8601_utc_now() {
  const std::time_t now = std::time(nullptr);
  std::tm tm_utc{};
  gmtime_r(&now, &tm_utc);
  char buffer[32];
  std::strftime(buffer, sizeof(buffer), "%Y-%m-%dT%H:%M:%SZ", &tm_utc);
  return buffer;
}

void RunManifest::finalize(const std::string& dir) {
  for (const std::string& rel : artifacts) {
    if (!fs::exists(fs::path(dir) / rel)) {
      throw ParseError("manifest: artifact missing on disk: " + rel);
    }
  }
  json doc;
  doc["format"] = "fairquant.manifest";
  doc["format_version"] = 1;
  doc["command"] = command;
  doc["tool_version"] = tool_version;
  doc["config_hash"] = config_hash_hex;
  doc["artifacts"] = artifacts;
  doc["started_at"] = started_at;
  doc["finished_at"] = finished_at;
  write_text_file((fs::path(dir) / "manifest.json").string(), doc.dump(2) + "\n");
}

ExperimentConfig ExperimentConfig::from_json_text(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::exception& err) {
    config_error(std::string("invalid JSON: ") + err.what());
  }
  if (!doc.is_object()) config_error("top level must be an object");
  expect_keys(doc,
              {"name", "dataset", "network", "train", "precisions", "sampler", "qat",
               "mitigation", "diagnostics", "out_dir", "seeds"},
              "the top level");

  ExperimentConfig config;
  config.name = doc.value("name", std::string("experiment"));

  if (!doc.contains("dataset")) config_error("missing 'dataset' section");
  const json& dataset = doc["dataset"];
  expect_keys(dataset, {"synthetic", "train_csv", "test_csv"}, "dataset");
  if (dataset.contains("synthetic")) {
    const json& synth = dataset["synthetic"];
    expect_keys(synth, {"groups", "dim", "sizes", "centers", "spreads", "difficulty",
                        "group_names"},
                "dataset.synthetic");
    SyntheticSpec spec;
    spec.groups = synth.value("groups", 0);
    spec.dim = synth.value("dim", 0);
    spec.sizes = synth.value("sizes", std::vector<int>{});
    spec.spreads = synth.value("spreads", std::vector<double>{});
    spec.difficulty = synth.value("difficulty", std::vector<double>{});
    spec.group_names = synth.value("group_names", std::vector<std::string>{});
    if (synth.contains("centers")) {
      for (const json& center : synth["centers"]) {
        spec.centers.push_back(json_to_vector(center, "dataset.synthetic.centers[]"));
      }
    }
    config.synthetic = std::move(spec);
  }
  if (dataset.contains("train_csv")) config.train_csv = dataset["train_csv"].get<std::string>();
  if (dataset.contains("test_csv")) config.test_csv = dataset["test_csv"].get<std::string>();

  if (doc.contains("network")) {
    expect_keys(doc["network"], {"hidden"}, "network");
    config.hidden = doc["network"].value("hidden", std::vector<int>{});
  }
  if (doc.contains("train")) config.train = train_config_from_json(doc["train"], "train");
  if (doc.contains("precisions")) {
    for (const json& p : doc["precisions"]) {
      config.precisions.push_back(PrecisionSpec::parse(p.get<std::string>()));
    }
  }
  if (doc.contains("sampler")) {
    const json& sampler = doc["sampler"];
    expect_keys(sampler, {"mode", "target", "explicit_counts"}, "sampler");
    config.sampler.mode = sampler_mode_from_name(sampler.value("mode", std::string("none")));
    const std::string target = sampler.value("target", std::string(""));
    if (target == "min_group") {
      config.sampler.target = TargetRule::MinGroup;
    } else if (target == "max_group") {
      config.sampler.target = TargetRule::MaxGroup;
    } else if (!target.empty()) {
      config_error("sampler.target must be min_group or max_group");
    }
    if (sampler.contains("explicit_counts")) {
      config.sampler.target = TargetRule::Explicit;
      config.sampler.explicit_counts = sampler["explicit_counts"].get<std::vector<int>>();
    }
  }
  if (doc.contains("qat")) {
    const json& qat = doc["qat"];
    expect_keys(qat,
                {"epochs", "batch_size", "learning_rate", "momentum", "shuffle",
                 "dampening_coefficient", "dampening_start_fraction", "edge_bits"},
                "qat");
    json base = qat;
    base.erase("dampening_coefficient");
    base.erase("dampening_start_fraction");
    base.erase("edge_bits");
    config.qat_train = train_config_from_json(base, "qat");
    config.qat_dampening = qat.value("dampening_coefficient", 0.01);
    config.qat_dampening_start = qat.value("dampening_start_fraction", 0.7);
    config.qat_edge_bits = qat.value("edge_bits", 8);
  } else {
    config.qat_train = config.train;
  }
  if (doc.contains("mitigation")) {
    const json& mitigation = doc["mitigation"];
    expect_keys(mitigation, {"precision", "class_weights"}, "mitigation");
    if (mitigation.contains("precision")) {
      config.mitigation_precision =
          PrecisionSpec::parse(mitigation["precision"].get<std::string>());
    }
    if (mitigation.contains("class_weights")) {
      config.mitigation_class_weights =
          json_to_vector(mitigation["class_weights"], "mitigation.class_weights");
    }
  }
  if (doc.contains("diagnostics")) {
    const json& diag = doc["diagnostics"];
    expect_keys(diag, {"max_iters", "tol"}, "diagnostics");
    config.diagnostics.max_iters = diag.value("max_iters", 300);
    config.diagnostics.tol = diag.value("tol", 1e-4);
  }
  config.out_dir = doc.value("out_dir", std::string("out"));
  config.seeds = doc.value("seeds", std::vector<std::uint64_t>{});

  config.validate();
  return config;
}

ExperimentConfig ExperimentConfig::load(const std::string& path) {
  std::string text;
  try {
    text = read_text_file(path);
  } catch (const ParseError& err) {
    throw UsageError(err.what());
  }
  return from_json_text(text);
}

std::string ExperimentConfig::to_canonical_json() const {
  json doc;
  doc["name"] = name;
  json dataset;
  if (synthetic.has_value()) {
    json synth;
    synth["groups"] = synthetic->groups;
    synth["dim"] = synthetic->dim;
    synth["sizes"] = synthetic->sizes;
    json centers = json::array();
    for (const Vector& c : synthetic->centers) centers.push_back(vector_to_json(c));
    synth["centers"] = std::move(centers);
    synth["spreads"] = synthetic->spreads;
    synth["difficulty"] = synthetic->difficulty;
    if (!synthetic->group_names.empty()) synth["group_names"] = synthetic->group_names;
    dataset["synthetic"] = std::move(synth);
  }
  if (train_csv.has_value()) dataset["train_csv"] = *train_csv;
  if (test_csv.has_value()) dataset["test_csv"] = *test_csv;
  doc["dataset"] = std::move(dataset);
  doc["network"]["hidden"] = hidden;
  doc["train"] = train_config_to_json(train);
  json precision_names = json::array();
  for (const PrecisionSpec& p : precisions) precision_names.push_back(p.name());
  doc["precisions"] = std::move(precision_names);
  json sampler_doc;
  sampler_doc["mode"] = sampler_mode_name(sampler.mode);
  switch (sampler.target) {
    case TargetRule::MinGroup:
      sampler_doc["target"] = "min_group";
      break;
    case TargetRule::MaxGroup:
      sampler_doc["target"] = "max_group";
      break;
    case TargetRule::Explicit:
      sampler_doc["explicit_counts"] = sampler.explicit_counts;
      break;
  }
  doc["sampler"] = std::move(sampler_doc);
  doc["qat"] = train_config_to_json(qat_train);
  doc["qat"]["dampening_coefficient"] = qat_dampening;
  doc["qat"]["dampening_start_fraction"] = qat_dampening_start;
  doc["qat"]["edge_bits"] = qat_edge_bits;
  doc["mitigation"]["precision"] = mitigation_precision.name();
  if (mitigation_class_weights.size() != 0) {
    doc["mitigation"]["class_weights"] = vector_to_json(mitigation_class_weights);
  }
  doc["diagnostics"]["max_iters"] = diagnostics.max_iters;
  doc["diagnostics"]["tol"] = diagnostics.tol;
  doc["out_dir"] = out_dir;
  doc["seeds"] = seeds;
  return doc.dump(2) + "\n";
}

void ExperimentConfig::validate() const {
  if (!synthetic.has_value() && !(train_csv.has_value() && test_csv.has_value())) {
    config_error("dataset must provide either a synthetic spec or both train_csv and test_csv");
  }
  if (synthetic.has_value() && (train_csv.has_value() || test_csv.has_value())) {
    config_error("dataset must not mix synthetic and csv sources");
  }
  if (synthetic.has_value()) {
    try {
      synthetic->validate();
    } catch (const InputError& err) {
      config_error(err.what());
    }
  }
  for (int width : hidden) {
    if (width < 1) config_error("network.hidden widths must be positive");
  }
  if (precisions.empty()) config_error("precisions must be non-empty");
  for (std::size_t i = 0; i < precisions.size(); ++i) {
    for (std::size_t j = i + 1; j < precisions.size(); ++j) {
      if (precisions[i] == precisions[j]) config_error("precisions must be deduplicated");
    }
  }
  if (seeds.empty()) config_error("seeds must be non-empty");
  if (qat_edge_bits < 2 || qat_edge_bits > 8) config_error("qat.edge_bits must lie in [2, 8]");
  if (diagnostics.max_iters < 1) config_error("diagnostics.max_iters must be >= 1");
  if (!(diagnostics.tol > 0.0)) config_error("diagnostics.tol must be positive");
}

std::pair<GroupedDataset, GroupedDataset> dataset_for_seed(const ExperimentConfig& config,
                                                           std::uint64_t seed) {
  if (config.synthetic.has_value()) {
    SyntheticSpec spec = *config.synthetic;
    spec.seed = derive_seed(seed, kRoleDataset);
    return generate_synthetic(spec);
  }
  GroupedDataset train = load_csv(*config.train_csv, {}, Split::Train);
  GroupedDataset test = load_csv(*config.test_csv, {}, Split::Test);
  return {std::move(train), std::move(test)};
}

Network network_for_seed(const ExperimentConfig& config, const GroupedDataset& train,
                         const GroupedDataset& test, std::uint64_t seed) {
  const int classes = std::max(train.num_classes(), test.num_classes());
  std::vector<int> widths;
  widths.push_back(static_cast<int>(train.dim()));
  widths.insert(widths.end(), config.hidden.begin(), config.hidden.end());
  widths.push_back(classes);
  Rng rng(derive_seed(seed, kRoleInit));
  return Network::dense(widths, rng);
}

int run_gen_data(const ExperimentConfig& config, std::ostream& log) {
  if (!config.synthetic.has_value()) {
    throw UsageError("gen-data requires a synthetic dataset spec");
  }
  RunManifest manifest;
  manifest.command = "gen-data";
  manifest.config_hash_hex = std::to_string(config.config_hash());
  manifest.started_at = iso8601_utc_now();
  const fs::path out(config.out_dir);
  for (const std::uint64_t seed : config.seeds) {
    const SeedPaths paths(out, "data", seed);
    const auto [train, test] = dataset_for_seed(config, seed);
    save_csv(train, paths.file("train.csv"));
    save_csv(test, paths.file("test.csv"));
    manifest.add(paths.rel_file("train.csv"));
    manifest.add(paths.rel_file("test.csv"));
    log << "gen-data seed " << seed << ": train " << train.size() << " rows, test "
        << test.size() << " rows\n";
  }
  manifest.finished_at = iso8601_utc_now();
  manifest.finalize((out / "data").string());
  return kExitOk;
}

namespace {

// Shared by cmd_train and the sweep/mitigate base phase.
struct TrainedBase {
  Network model;
  TrainTrace trace;
  GroupedDataset train;
  GroupedDataset test;
  std::vector<long> train_counts;
};

TrainedBase train_base(const ExperimentConfig& config, std::uint64_t seed, bool apply_sampler,
                       const Vector& class_weights) {
  auto [train, test] = dataset_for_seed(config, seed);
  if (apply_sampler && config.sampler.mode != SamplerMode::None) {
    SamplerConfig sampler = config.sampler;
    sampler.seed = derive_seed(seed, kRoleSampler);
    train = resample(train, sampler);
  }
  const Network net = network_for_seed(config, train, test, seed);
  TrainConfig cfg = config.train;
  cfg.seed = derive_seed(seed, kRoleTrain);
  cfg.class_weights = class_weights;
  auto [model, trace] = train_erm(net, train, cfg);
  return {std::move(model), std::move(trace), std::move(train), std::move(test),
          {}};
}

}  // namespace

int run_train(const ExperimentConfig& config, std::ostream& log) {
  RunManifest manifest;
  manifest.command = "train";
  manifest.config_hash_hex = std::to_string(config.config_hash());
  manifest.started_at = iso8601_utc_now();
  const fs::path out(config.out_dir);

  for (const std::uint64_t seed : config.seeds) {
    const SeedPaths paths(out, "train", seed);
    TrainedBase base = train_base(config, seed, /*apply_sampler=*/true, config.train.class_weights);
    save_checkpoint(base.model, paths.file("checkpoint.json"));
    write_text_file(paths.file("trace.csv"), trace_to_csv(base.trace, base.train.group_names));

    json summary;
    summary["format"] = "fairquant.train_summary";
    summary["format_version"] = 1;
    summary["seed"] = seed;
    summary["sampler_mode"] = sampler_mode_name(config.sampler.mode);
    summary["train_group_counts"] = base.train.group_counts();
    summary["final_group_train_accuracy"] = base.trace.group_accuracy.back();
    write_text_file(paths.file("train_summary.json"), summary.dump(2) + "\n");

    manifest.add(paths.rel_file("checkpoint.json"));
    manifest.add(paths.rel_file("trace.csv"));
    manifest.add(paths.rel_file("train_summary.json"));

    log << "train seed " << seed << ": final per-group train accuracy";
    for (std::size_t g = 0; g < base.trace.group_accuracy.back().size(); ++g) {
      log << ' ' << base.train.group_names[g] << '='
          << format_double(base.trace.group_accuracy.back()[g]);
    }
    log << "\n";
  }
  manifest.finished_at = iso8601_utc_now();
  manifest.finalize((out / "train").string());
  return kExitOk;
}

int run_quantize(const ExperimentConfig& config, const std::string& checkpoint_path,
                 std::ostream& log) {
  if (!checkpoint_path.empty() && config.seeds.size() != 1) {
    throw UsageError("an explicit --checkpoint needs exactly one seed");
  }
  RunManifest manifest;
  manifest.command = "quantize";
  manifest.config_hash_hex = std::to_string(config.config_hash());
  manifest.started_at = iso8601_utc_now();
  const fs::path out(config.out_dir);

  for (const std::uint64_t seed : config.seeds) {
    const std::string source =
        checkpoint_path.empty() ? default_checkpoint_path(config, seed) : checkpoint_path;
    const Network model = load_checkpoint(source);
    const SeedPaths paths(out, "quantize", seed);
    for (const PrecisionSpec& precision : config.precisions) {
      const QuantizedModel qm = quantize(model, precision);
      const std::string name = "qm_" + precision.name() + ".json";
      save_quantized(qm, paths.file(name));
      manifest.add(paths.rel_file(name));
    }
    log << "quantize seed " << seed << ": " << config.precisions.size() << " precisions from "
        << source << "\n";
  }
  manifest.finished_at = iso8601_utc_now();
  manifest.finalize((out / "quantize").string());
  return kExitOk;
}

namespace {

void write_audit_files(const AuditReport& report, const SeedPaths& paths,
                       const std::string& precision, RunManifest& manifest) {
  const std::string stem = "audit_" + precision;
  write_text_file(paths.file(stem + ".json"), audit_report_to_json(report));
  write_text_file(paths.file(stem + ".csv"), audit_report_to_csv(report));
  write_text_file(paths.file("dtdb_" + precision + ".csv"), dtdb_histogram_csv(report));
  manifest.add(paths.rel_file(stem + ".json"));
  manifest.add(paths.rel_file(stem + ".csv"));
  manifest.add(paths.rel_file("dtdb_" + precision + ".csv"));
}

void write_diag_files(const DiagnosticsReport& report, const SeedPaths& paths,
                      const std::string& precision, RunManifest& manifest) {
  const std::string stem = "diag_" + precision;
  write_text_file(paths.file(stem + ".json"), diagnostics_report_to_json(report));
  std::ostringstream csv;
  csv << "precision,group,metric,value\n";
  diagnostics_report_csv_rows(report, csv);
  write_text_file(paths.file(stem + ".csv"), csv.str());
  manifest.add(paths.rel_file(stem + ".json"));
  manifest.add(paths.rel_file(stem + ".csv"));
}

}  // namespace

int run_audit(const ExperimentConfig& config, const std::string& checkpoint_path,
              const std::string& qmodel_path, std::ostream& log) {
  if ((!checkpoint_path.empty() || !qmodel_path.empty()) && config.seeds.size() != 1) {
    throw UsageError("explicit --checkpoint/--qmodel paths need exactly one seed");
  }
  RunManifest manifest;
  manifest.command = "audit";
  manifest.config_hash_hex = std::to_string(config.config_hash());
  manifest.started_at = iso8601_utc_now();
  const fs::path out(config.out_dir);

  for (const std::uint64_t seed : config.seeds) {
    const std::string source =
        checkpoint_path.empty() ? default_checkpoint_path(config, seed) : checkpoint_path;
    const Network reference = load_checkpoint(source);
    Network candidate = reference;
    std::string precision = "fp32";
    if (!qmodel_path.empty()) {
      const QuantizedModel qm = load_quantized(qmodel_path);
      candidate = qm.to_network();
      precision = qm.spec.default_spec.name();
    }
    const auto [train, test] = dataset_for_seed(config, seed);
    (void)train;
    AuditReport report = audit_model(reference, candidate, test);
    report.precision = precision;
    report.seed = seed;
    report.dataset_id = dataset_id(config, seed);

    const SeedPaths paths(out, "audit", seed);
    write_audit_files(report, paths, precision, manifest);
    log << "audit seed " << seed << " (" << precision
        << "): overall_accuracy=" << format_double(report.overall_accuracy);
    if (report.fvo.has_value()) log << " fvo=" << format_double(*report.fvo);
    log << "\n";
  }
  manifest.finished_at = iso8601_utc_now();
  manifest.finalize((out / "audit").string());
  return kExitOk;
}

int run_diagnose(const ExperimentConfig& config, const std::string& checkpoint_path,
                 const std::string& qmodel_path, std::ostream& log) {
  if ((!checkpoint_path.empty() || !qmodel_path.empty()) && config.seeds.size() != 1) {
    throw UsageError("explicit --checkpoint/--qmodel paths need exactly one seed");
  }
  RunManifest manifest;
  manifest.command = "diagnose";
  manifest.config_hash_hex = std::to_string(config.config_hash());
  manifest.started_at = iso8601_utc_now();
  const fs::path out(config.out_dir);

  for (const std::uint64_t seed : config.seeds) {
    const std::string source =
        checkpoint_path.empty() ? default_checkpoint_path(config, seed) : checkpoint_path;
    Network model = load_checkpoint(source);
    std::string precision = "fp32";
    if (!qmodel_path.empty()) {
      const QuantizedModel qm = load_quantized(qmodel_path);
      model = qm.to_network();
      precision = qm.spec.default_spec.name();
    }
    const auto [train, test] = dataset_for_seed(config, seed);
    (void)train;
    DiagnosticsReport report = diagnose_model(model, test, power_config(config, seed), precision);
    report.seed = seed;

    const SeedPaths paths(out, "diagnose", seed);
    write_diag_files(report, paths, precision, manifest);
    log << "diagnose seed " << seed << " (" << precision << ")\n";
  }
  manifest.finished_at = iso8601_utc_now();
  manifest.finalize((out / "diagnose").string());
  return kExitOk;
}

namespace {

struct SweepCell {
  bool failed = false;
  std::string error;
  AuditReport audit;
  DiagnosticsReport diag;
  WeightChangeStats stats;
};

struct SweepSeedResult : SeedOutcome {
  std::vector<SweepCell> cells;
};

const std::vector<std::string> kGroupMetricNames = {
    "accuracy",      "loss",          "avg_cosine_distance",       "avg_l1",
    "avg_l2",        "mean_logit_variance", "mean_softmax_variance",
    "avg_prediction_probability", "gradient_norm", "lambda_max"};

std::optional<double> group_metric(const SweepCell& cell, std::size_t g,
                                   const std::string& metric) {
  const GroupAudit& a = cell.audit.groups[g];
  const GroupDiagnostics& d = cell.diag.groups[g];
  if (metric == "accuracy") return a.present ? std::optional(a.accuracy) : std::nullopt;
  if (metric == "loss") return a.present ? std::optional(a.loss) : std::nullopt;
  if (metric == "avg_cosine_distance") {
    return a.present && a.cd_defined ? std::optional(a.avg_cosine_distance) : std::nullopt;
  }
  if (metric == "avg_l1") return a.present ? std::optional(a.avg_l1) : std::nullopt;
  if (metric == "avg_l2") return a.present ? std::optional(a.avg_l2) : std::nullopt;
  if (metric == "mean_logit_variance") {
    return a.present ? std::optional(a.mean_logit_variance) : std::nullopt;
  }
  if (metric == "mean_softmax_variance") {
    return a.present ? std::optional(a.mean_softmax_variance) : std::nullopt;
  }
  if (metric == "avg_prediction_probability") {
    return a.present ? std::optional(a.avg_prediction_probability) : std::nullopt;
  }
  if (metric == "gradient_norm") return d.present ? std::optional(d.gradient_norm) : std::nullopt;
  if (metric == "lambda_max") return d.present ? std::optional(d.lambda_max) : std::nullopt;
  return std::nullopt;
}

const std::vector<std::string> kOverallMetricNames = {
    "overall_accuracy", "fvo", "abs_weight_diff", "sparsity_original", "sparsity_quantized"};

std::optional<double> overall_metric(const SweepCell& cell, const std::string& metric) {
  if (metric == "overall_accuracy") return cell.audit.overall_accuracy;
  if (metric == "fvo") return cell.audit.fvo;
  if (metric == "abs_weight_diff") return cell.stats.abs_diff;
  if (metric == "sparsity_original") return cell.stats.sparsity_original;
  if (metric == "sparsity_quantized") return cell.stats.sparsity_quantized;
  return std::nullopt;
}

}  // namespace

int run_sweep(const ExperimentConfig& config, std::ostream& log) {
  RunManifest manifest;
  manifest.command = "sweep";
  manifest.config_hash_hex = std::to_string(config.config_hash());
  manifest.started_at = iso8601_utc_now();
  const fs::path out(config.out_dir);
  ensure_dir(out / "sweep");

  std::vector<SweepSeedResult> results(config.seeds.size());
  std::vector<std::string> group_names;

  parallel_over_seeds(config.seeds.size(), [&](std::size_t index) {
    const std::uint64_t seed = config.seeds[index];
    SweepSeedResult& result = results[index];
    std::ostringstream cell_log;
    try {
      const SeedPaths paths(out, "sweep", seed);
      TrainedBase base = train_base(config, seed, /*apply_sampler=*/false, Vector());
      save_checkpoint(base.model, paths.file("checkpoint.json"));
      write_text_file(paths.file("trace.csv"), trace_to_csv(base.trace, base.train.group_names));
      result.artifacts.push_back(paths.rel_file("checkpoint.json"));
      result.artifacts.push_back(paths.rel_file("trace.csv"));
      const FlatParams original = flatten(base.model);

      for (const PrecisionSpec& precision : config.precisions) {
        SweepCell cell;
        try {
          const QuantizedModel qm = quantize(base.model, precision);
          const std::string qm_name = "qm_" + precision.name() + ".json";
          save_quantized(qm, paths.file(qm_name));
          result.artifacts.push_back(paths.rel_file(qm_name));

          const Network candidate = qm.to_network();
          cell.audit = audit_model(base.model, candidate, base.test);
          cell.audit.precision = precision.name();
          cell.audit.seed = seed;
          cell.audit.dataset_id = dataset_id(config, seed);
          cell.diag = diagnose_model(candidate, base.test, power_config(config, seed),
                                     precision.name());
          cell.diag.seed = seed;
          cell.stats = weight_change_stats(original, qm);

          RunManifest scratch;  // collects names; merged below in seed order
          write_audit_files(cell.audit, paths, precision.name(), scratch);
          write_diag_files(cell.diag, paths, precision.name(), scratch);
          json stats_doc;
          stats_doc["format"] = "fairquant.weight_stats";
          stats_doc["format_version"] = 1;
          stats_doc["precision"] = precision.name();
          stats_doc["abs_diff"] = cell.stats.abs_diff;
          stats_doc["sparsity_original"] = cell.stats.sparsity_original;
          stats_doc["sparsity_quantized"] = cell.stats.sparsity_quantized;
          const std::string stats_name = "weight_stats_" + precision.name() + ".json";
          write_text_file(paths.file(stats_name), stats_doc.dump(2) + "\n");
          scratch.artifacts.push_back(paths.rel_file(stats_name));
          for (std::string& artifact : scratch.artifacts) {
            result.artifacts.push_back(std::move(artifact));
          }
          cell_log << "sweep seed " << seed << ' ' << precision.name()
                   << ": oa=" << format_double(cell.audit.overall_accuracy);
          if (cell.audit.fvo.has_value()) {
            cell_log << " fvo=" << format_double(*cell.audit.fvo);
          }
          cell_log << "\n";
        } catch (const std::exception& err) {
          cell.failed = true;
          cell.error = err.what();
          cell_log << "sweep seed " << seed << ' ' << precision.name() << ": FAILED: "
                   << cell.error << "\n";
        }
        result.cells.push_back(std::move(cell));
      }
    } catch (const std::exception& err) {
      result.failed = true;
      result.error = err.what();
      cell_log << "sweep seed " << seed << ": FAILED: " << result.error << "\n";
    }
    result.log = cell_log.str();
  });

  bool any_failed = false;
  for (std::size_t index = 0; index < results.size(); ++index) {
    log << results[index].log;
    any_failed = any_failed || results[index].failed;
    for (const SweepCell& cell : results[index].cells) any_failed = any_failed || cell.failed;
    for (const std::string& artifact : results[index].artifacts) manifest.add(artifact);
    if (!results[index].failed && group_names.empty() && !results[index].cells.empty()) {
      group_names = results[index].cells.front().audit.group_names;
    }
  }

  // Aggregate CSV: precision x group x metric with mean and sample sd.
  std::ostringstream agg;
  agg << "precision,group,metric,mean,sd\n";
  for (std::size_t p = 0; p < config.precisions.size(); ++p) {
    const std::string precision = config.precisions[p].name();
    for (const std::string& metric : kOverallMetricNames) {
      Welford stat;
      for (const SweepSeedResult& result : results) {
        if (result.failed || result.cells[p].failed) continue;
        const auto value = overall_metric(result.cells[p], metric);
        if (value.has_value()) stat.add(*value);
      }
      if (stat.empty()) continue;
      agg << precision << ",overall," << metric << ',' << format_double(stat.mean()) << ','
          << format_double(stat.sd()) << "\n";
    }
    for (std::size_t g = 0; g < group_names.size(); ++g) {
      for (const std::string& metric : kGroupMetricNames) {
        Welford stat;
        for (const SweepSeedResult& result : results) {
          if (result.failed || result.cells[p].failed) continue;
          const auto value = group_metric(result.cells[p], g, metric);
          if (value.has_value()) stat.add(*value);
        }
        if (stat.empty()) continue;
        agg << precision << ',' << group_names[g] << ',' << metric << ','
            << format_double(stat.mean()) << ',' << format_double(stat.sd()) << "\n";
      }
    }
  }
  write_text_file((out / "sweep" / "aggregate.csv").string(), agg.str());
  manifest.add("aggregate.csv");

  manifest.finished_at = iso8601_utc_now();
  manifest.finalize((out / "sweep").string());
  return any_failed ? kExitPartialFailure : kExitOk;
}

namespace {

const std::vector<std::string> kArmNames = {"ptq", "uo_wcr_ptq", "mpqat", "fair_qat"};

struct MitigateSeedResult : SeedOutcome {
  std::vector<AuditReport> arms;  // order matches kArmNames
  SelectionResult selection;
};

}  // namespace

int run_mitigate(const ExperimentConfig& config, std::ostream& log) {
  RunManifest manifest;
  manifest.command = "mitigate";
  manifest.config_hash_hex = std::to_string(config.config_hash());
  manifest.started_at = iso8601_utc_now();
  const fs::path out(config.out_dir);
  ensure_dir(out / "mitigate");
  const PrecisionSpec target = config.mitigation_precision;

  std::vector<MitigateSeedResult> results(config.seeds.size());
  parallel_over_seeds(config.seeds.size(), [&](std::size_t index) {
    const std::uint64_t seed = config.seeds[index];
    MitigateSeedResult& result = results[index];
    std::ostringstream seed_log;
    try {
      const SeedPaths paths(out, "mitigate", seed);
      auto [train, test] = dataset_for_seed(config, seed);
      const Network init = network_for_seed(config, train, test, seed);
      const int num_layers = static_cast<int>(init.layers().size());

      SamplerConfig uo;
      uo.mode = SamplerMode::UO;
      uo.seed = derive_seed(seed, kRoleSampler);

      // Dense baseline and the fairer (u_o + weighted loss) base model.
      TrainConfig base_cfg = config.train;
      base_cfg.seed = derive_seed(seed, kRoleTrain);
      base_cfg.class_weights = Vector();
      auto [theta_o, trace_o] = train_erm(init, train, base_cfg);

      TrainConfig fair_cfg = config.train;
      fair_cfg.seed = derive_seed(seed, kRoleTrainFair);
      fair_cfg.class_weights = config.mitigation_class_weights;
      const GroupedDataset balanced = resample(train, uo);
      auto [theta_f, trace_f] = train_erm(init, balanced, fair_cfg);

      // Arm 1: plain post-training quantization of the dense baseline.
      const QuantizedModel ptq = quantize(theta_o, target);
      // Arm 2: post-training quantization of the fairer base model.
      const QuantizedModel uo_wcr = quantize(theta_f, target);
      // Arm 3: mixed-precision QAT fine-tuning of the dense baseline.
      auto [mpqat, trace_mp] = train_qat(
          theta_o, train,
          qat_config(config, target, num_layers, derive_seed(seed, kRoleQat), Vector()));
      // Arm 4: the full pipeline on top of the fairer base model.
      SamplerConfig uo_qat = uo;
      uo_qat.seed = derive_seed(seed, kRoleSamplerQat);
      auto [fair, trace_fair] = fair_qat_pipeline(
          theta_f, train,
          qat_config(config, target, num_layers, derive_seed(seed, kRoleQatFair),
                     config.mitigation_class_weights),
          uo_qat);

      const std::vector<const Network*> references = {&theta_o, &theta_f, &theta_o, &theta_f};
      const std::vector<const QuantizedModel*> models = {&ptq, &uo_wcr, &mpqat, &fair};
      for (std::size_t arm = 0; arm < kArmNames.size(); ++arm) {
        AuditReport report = audit_model(*references[arm], models[arm]->to_network(), test);
        report.precision = target.name();
        report.seed = seed;
        report.dataset_id = dataset_id(config, seed);
        const std::string qm_name = "qm_" + kArmNames[arm] + ".json";
        save_quantized(*models[arm], paths.file(qm_name));
        result.artifacts.push_back(paths.rel_file(qm_name));
        RunManifest scratch;
        write_audit_files(report, paths, kArmNames[arm], scratch);
        for (std::string& artifact : scratch.artifacts) {
          result.artifacts.push_back(std::move(artifact));
        }
        seed_log << "mitigate seed " << seed << ' ' << kArmNames[arm]
                 << ": oa=" << format_double(report.overall_accuracy)
                 << " fvo=" << format_double(report.fvo.value_or(0.0)) << "\n";
        result.arms.push_back(std::move(report));
      }
      result.selection = select_best(result.arms);
      seed_log << "mitigate seed " << seed << ": selected "
               << kArmNames[static_cast<std::size_t>(result.selection.selected)] << "\n";
    } catch (const std::exception& err) {
      result.failed = true;
      result.error = err.what();
      seed_log << "mitigate seed " << seed << ": FAILED: " << result.error << "\n";
    }
    result.log = seed_log.str();
  });

  bool any_failed = false;
  for (const MitigateSeedResult& result : results) {
    log << result.log;
    any_failed = any_failed || result.failed;
  }

  // Scatter CSV: one (oa, fvo) point per arm per seed.
  std::ostringstream scatter;
  scatter << "arm,seed,overall_accuracy,fvo\n";
  for (std::size_t index = 0; index < results.size(); ++index) {
    if (results[index].failed) continue;
    for (std::size_t arm = 0; arm < kArmNames.size(); ++arm) {
      const AuditReport& report = results[index].arms[arm];
      scatter << kArmNames[arm] << ',' << config.seeds[index] << ','
              << format_double(report.overall_accuracy) << ','
              << format_double(report.fvo.value_or(0.0)) << "\n";
    }
  }
  write_text_file((out / "mitigate" / "scatter.csv").string(), scatter.str());

  // Summary CSV over seeds.
  std::ostringstream summary;
  summary << "arm,mean_overall_accuracy,sd_overall_accuracy,mean_fvo,sd_fvo\n";
  std::vector<AuditReport> aggregate_points;
  for (std::size_t arm = 0; arm < kArmNames.size(); ++arm) {
    Welford oa;
    Welford fv;
    for (const MitigateSeedResult& result : results) {
      if (result.failed) continue;
      oa.add(result.arms[arm].overall_accuracy);
      fv.add(result.arms[arm].fvo.value_or(0.0));
    }
    if (oa.empty()) continue;
    summary << kArmNames[arm] << ',' << format_double(oa.mean()) << ',' << format_double(oa.sd())
            << ',' << format_double(fv.mean()) << ',' << format_double(fv.sd()) << "\n";
    AuditReport point;
    point.overall_accuracy = oa.mean();
    point.fvo = fv.mean();
    point.precision = target.name();
    aggregate_points.push_back(std::move(point));
  }
  write_text_file((out / "mitigate" / "summary.csv").string(), summary.str());

  // Selection JSON: per-seed frontiers plus the aggregate pick.
  json selection_doc;
  selection_doc["format"] = "fairquant.selection";
  selection_doc["format_version"] = 1;
  selection_doc["precision"] = target.name();
  json per_seed = json::array();
  for (std::size_t index = 0; index < results.size(); ++index) {
    const MitigateSeedResult& result = results[index];
    json entry;
    entry["seed"] = config.seeds[index];
    if (result.failed) {
      entry["failed"] = true;
      entry["error"] = result.error;
      per_seed.push_back(std::move(entry));
      continue;
    }
    json arms = json::array();
    for (std::size_t arm = 0; arm < kArmNames.size(); ++arm) {
      json point;
      point["name"] = kArmNames[arm];
      point["overall_accuracy"] = result.arms[arm].overall_accuracy;
      point["fvo"] = result.arms[arm].fvo.value_or(0.0);
      arms.push_back(std::move(point));
    }
    entry["arms"] = std::move(arms);
    json frontier = json::array();
    for (const int idx : result.selection.frontier) {
      frontier.push_back(kArmNames[static_cast<std::size_t>(idx)]);
    }
    entry["frontier"] = std::move(frontier);
    entry["selected"] = kArmNames[static_cast<std::size_t>(result.selection.selected)];
    per_seed.push_back(std::move(entry));
  }
  selection_doc["per_seed"] = std::move(per_seed);
  if (aggregate_points.size() == kArmNames.size()) {
    const SelectionResult agg_sel = select_best(aggregate_points);
    json frontier = json::array();
    for (const int idx : agg_sel.frontier) {
      frontier.push_back(kArmNames[static_cast<std::size_t>(idx)]);
    }
    selection_doc["aggregate"]["frontier"] = std::move(frontier);
    selection_doc["aggregate"]["selected"] =
        kArmNames[static_cast<std::size_t>(agg_sel.selected)];
  }
  write_text_file((out / "mitigate" / "selection.json").string(), selection_doc.dump(2) + "\n");

  for (std::size_t index = 0; index < results.size(); ++index) {
    for (const std::string& artifact : results[index].artifacts) manifest.add(artifact);
  }
  manifest.add("scatter.csv");
  manifest.add("summary.csv");
  manifest.add("selection.json");
  manifest.finished_at = iso8601_utc_now();
  manifest.finalize((out / "mitigate").string());
  return any_failed ? kExitPartialFailure : kExitOk;
}

}  // namespace fairquant
