// Acceptance suite: runs every acceptance criterion end to end and prints
// one PASS/FAIL line per criterion. Returns the number of failures.

#include <json.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <vector>

#include "fairquant/experiment.hpp"
#include "fairquant/serialize.hpp"

using namespace fairquant;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

#ifndef FAIRQUANT_CONFIG_DIR
#define FAIRQUANT_CONFIG_DIR "configs"
#endif

int g_failures = 0;

void report(bool pass, const std::string& name, const std::string& detail) {
  std::printf("%s  %s%s%s\n", pass ? "PASS" : "FAIL", name.c_str(),
              detail.empty() ? "" : " — ", detail.c_str());
  if (!pass) ++g_failures;
}

double seconds_since(const std::chrono::steady_clock::time_point& start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

struct RandomProblem {
  Network net;
  Matrix batch;
  IntVector labels;
};

RandomProblem random_problem(std::uint64_t seed) {
  Rng rng(seed);
  const int d = 2 + static_cast<int>(rng.uniform_int(4));
  const int h = 2 + static_cast<int>(rng.uniform_int(8));
  const int c = 2 + static_cast<int>(rng.uniform_int(3));
  RandomProblem p{Network::dense({d, h, c}, rng), Matrix(6, d), IntVector(6)};
  for (Eigen::Index i = 0; i < p.batch.rows(); ++i) {
    for (Eigen::Index j = 0; j < p.batch.cols(); ++j) p.batch(i, j) = rng.normal();
    p.labels[i] = static_cast<int>(rng.uniform_int(c));
  }
  return p;
}

// ---- criterion 1: numerical correctness ----------------------------------

void criterion_1a() {
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const RandomProblem p = random_problem(1000 + seed);
    const Vector analytic = gradient(p.net, p.batch, p.labels).values;
    Vector fd(analytic.size());
    Network work = p.net;
    Vector theta = flatten(p.net).values;
    for (Eigen::Index k = 0; k < theta.size(); ++k) {
      Vector point = theta;
      point[k] += 1e-5;
      assign_from_flat(work, point);
      const double up = cross_entropy_loss(work, p.batch, p.labels);
      point[k] -= 2e-5;
      assign_from_flat(work, point);
      const double down = cross_entropy_loss(work, p.batch, p.labels);
      fd[k] = (up - down) / 2e-5;
    }
    for (Eigen::Index k = 0; k < theta.size(); ++k) {
      const double denom = std::max({1e-6, std::abs(analytic[k]), std::abs(fd[k])});
      worst = std::max(worst, std::abs(analytic[k] - fd[k]) / denom);
    }
  }
  char detail[96];
  std::snprintf(detail, sizeof(detail), "max relative coordinate error %.3g (tolerance 1e-4)",
                worst);
  report(worst <= 1e-4, "criterion 1a: gradient vs central finite differences", detail);
}

void criterion_1b() {
  // Linearity and symmetry of the HVP on random nets.
  double worst_linearity = 0.0;
  double worst_symmetry = 0.0;
  Rng rng(77);
  for (int trial = 0; trial < 25; ++trial) {
    const RandomProblem p = random_problem(2000 + static_cast<std::uint64_t>(trial));
    const FlatParams theta = flatten(p.net);
    FlatParams u{Vector(theta.values.size()), theta.layout};
    FlatParams v{Vector(theta.values.size()), theta.layout};
    for (Eigen::Index i = 0; i < u.values.size(); ++i) {
      u.values[i] = rng.normal();
      v.values[i] = rng.normal();
    }
    u.values.normalize();
    v.values.normalize();
    const Vector hv = hvp(p.net, p.batch, p.labels, Vector(), v).values;
    FlatParams v2{Vector(2.0 * v.values), theta.layout};
    const Vector hv2 = hvp(p.net, p.batch, p.labels, Vector(), v2).values;
    worst_linearity = std::max(
        worst_linearity, (hv2 - 2.0 * hv).lpNorm<Eigen::Infinity>() /
                             std::max(1.0, hv.lpNorm<Eigen::Infinity>()));
    const Vector hu = hvp(p.net, p.batch, p.labels, Vector(), u).values;
    worst_symmetry = std::max(worst_symmetry, std::abs(u.values.dot(hv) - v.values.dot(hu)));
  }
  char detail[96];
  std::snprintf(detail, sizeof(detail), "linearity %.3g, symmetry %.3g (tolerance 1e-6)",
                worst_linearity, worst_symmetry);
  report(worst_linearity <= 1e-6 && worst_symmetry <= 1e-6,
         "criterion 1b.1: HVP linearity and symmetry", detail);

  // Power iteration vs the dense eigendecomposition oracle.
  double worst_rel = 0.0;
  Rng mats(91);
  for (int trial = 0; trial < 50; ++trial) {
    const Eigen::Index n = 4 + static_cast<Eigen::Index>(mats.uniform_int(47));
    Eigen::MatrixXd a(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index j = 0; j <= i; ++j) a(i, j) = a(j, i) = mats.normal();
    }
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(a);
    const Vector eigs = solver.eigenvalues();
    const double oracle = std::abs(eigs[0]) > std::abs(eigs[n - 1]) ? eigs[0] : eigs[n - 1];

    const auto grad_fn = [&a](const Vector& t) { return Vector(a * t); };
    const auto op = [&](const Vector& v) {
      return hvp_central_diff(grad_fn, Vector::Zero(n), v);
    };
    PowerIterationConfig cfg;
    cfg.seed = 3000 + static_cast<std::uint64_t>(trial);
    cfg.max_iters = 5000;
    cfg.tol = 1e-6;
    const PowerIterationResult r = power_iteration(op, n, cfg);
    worst_rel = std::max(worst_rel, std::abs(r.lambda - oracle) / std::abs(oracle));
  }
  char detail2[96];
  std::snprintf(detail2, sizeof(detail2),
                "max relative eigenvalue error %.3g over 50 systems (tolerance 1e-2)", worst_rel);
  report(worst_rel <= 1e-2, "criterion 1b.2: lambda_max vs dense eigendecomposition", detail2);
}

void criterion_1c() {
  bool bound_ok = true;
  bool monotone_ok = true;
  Rng rng(55);
  for (int trial = 0; trial < 100; ++trial) {
    Matrix w(6, 8);
    const double scale_factor = std::exp(rng.uniform(-3.0, 3.0));
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = scale_factor * rng.normal();
    DenseLayer layer{w, Vector::Zero(6), Activation::Identity};
    const Network net({layer});
    double prev_sparsity = 1.0 + 1e-9;
    for (int bits : {2, 3, 4, 8}) {
      const QuantizedModel qm = quantize(net, PrecisionSpec::integer(bits));
      const Matrix deq = qm.to_network().layers()[0].weights;
      if ((deq - w).cwiseAbs().maxCoeff() > qm.weights[0].scale / 2.0) bound_ok = false;
      const double sparsity = weight_change_stats(flatten(net), qm).sparsity_quantized;
      if (sparsity > prev_sparsity) monotone_ok = false;
      prev_sparsity = sparsity;
    }
  }
  report(bound_ok, "criterion 1c.1: quantize round-trip bound |deq - w| <= scale/2",
         "exact, 100 random tensors x {8,4,3,2} bits");
  report(monotone_ok, "criterion 1c.2: sparsity non-increasing in bit width",
         "same 100 tensors");
}

void criterion_1d() {
  double worst_row = 0.0;
  Rng rng(66);
  for (int trial = 0; trial < 100; ++trial) {
    Matrix z(4, 6);
    for (Eigen::Index i = 0; i < z.size(); ++i) z.data()[i] = rng.uniform(-40.0, 40.0);
    const Matrix p = softmax(z);
    for (Eigen::Index i = 0; i < p.rows(); ++i) {
      worst_row = std::max(worst_row, std::abs(p.row(i).sum() - 1.0));
    }
  }
  char detail[96];
  std::snprintf(detail, sizeof(detail), "max |row sum - 1| = %.3g (tolerance 1e-12)", worst_row);
  report(worst_row <= 1e-12, "criterion 1d.1: softmax normalization", detail);

  bool fvo_ok = true;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 2 + rng.uniform_int(6);
    std::vector<double> accs(n);
    for (double& a : accs) a = rng.uniform();
    const double base = *fvo(accs);
    std::vector<double> shuffled = accs;
    rng.shuffle(shuffled);
    if (*fvo(shuffled) != base) fvo_ok = false;
    const double a = rng.uniform();
    const double b = rng.uniform();
    if (std::abs(*fvo(std::vector<double>{a, b}) - std::abs(a - b)) > 1e-15) fvo_ok = false;
  }
  report(fvo_ok, "criterion 1d.2: FVO permutation invariance and two-group closed form",
         "100 random vectors");
}

// ---- criteria 2-5: benchmark trend reproduction ---------------------------

struct BenchmarkRun {
  std::vector<std::uint64_t> seeds;
  // [seed index][precision name] -> parsed report documents
  std::vector<std::map<std::string, json>> audits;
  std::vector<std::map<std::string, json>> diags;
  std::vector<std::map<std::string, json>> stats;
  json selection;
  double sweep_seconds = 0.0;
  double mitigate_seconds = 0.0;
  int minority = 4;
};

BenchmarkRun run_benchmark(const fs::path& dir) {
  ExperimentConfig config =
      ExperimentConfig::load(std::string(FAIRQUANT_CONFIG_DIR) + "/benchmark.json");
  config.out_dir = dir.string();

  BenchmarkRun run;
  run.seeds = config.seeds;

  std::ostringstream log;
  auto start = std::chrono::steady_clock::now();
  if (run_sweep(config, log) != kExitOk) {
    throw std::runtime_error("benchmark sweep failed:\n" + log.str());
  }
  run.sweep_seconds = seconds_since(start);

  start = std::chrono::steady_clock::now();
  if (run_mitigate(config, log) != kExitOk) {
    throw std::runtime_error("benchmark mitigation failed:\n" + log.str());
  }
  run.mitigate_seconds = seconds_since(start);

  for (const std::uint64_t seed : run.seeds) {
    std::map<std::string, json> audits;
    std::map<std::string, json> diags;
    std::map<std::string, json> stats;
    for (const PrecisionSpec& p : config.precisions) {
      const std::string base =
          (dir / "sweep" / ("seed_" + std::to_string(seed))).string() + "/";
      audits[p.name()] = json::parse(read_text_file(base + "audit_" + p.name() + ".json"));
      diags[p.name()] = json::parse(read_text_file(base + "diag_" + p.name() + ".json"));
      stats[p.name()] =
          json::parse(read_text_file(base + "weight_stats_" + p.name() + ".json"));
    }
    run.audits.push_back(std::move(audits));
    run.diags.push_back(std::move(diags));
    run.stats.push_back(std::move(stats));
  }
  run.selection = json::parse(read_text_file((dir / "mitigate" / "selection.json").string()));
  return run;
}

double minority_value(const json& audit, int minority, const char* key) {
  return audit["groups"][minority][key].get<double>();
}

void criterion_2(const BenchmarkRun& run) {
  const std::vector<std::string> ladder = {"fp32", "int8", "int4", "int2"};
  int monotone_seeds = 0;
  int fvo_seeds = 0;
  for (std::size_t s = 0; s < run.seeds.size(); ++s) {
    std::vector<double> accs;
    for (const std::string& p : ladder) {
      accs.push_back(minority_value(run.audits[s].at(p), run.minority, "accuracy"));
    }
    int inversions = 0;
    for (std::size_t i = 0; i + 1 < accs.size(); ++i) {
      if (accs[i + 1] > accs[i] + 1e-12) ++inversions;
    }
    monotone_seeds += inversions <= 1;
    fvo_seeds += run.audits[s].at("int2")["fvo"].get<double>() >
                 run.audits[s].at("fp32")["fvo"].get<double>();
  }
  char detail[128];
  std::snprintf(detail, sizeof(detail),
                "minority accuracy non-increasing (<=1 inversion) in %d/5 seeds (need >=4)",
                monotone_seeds);
  report(monotone_seeds >= 4, "criterion 2.1: minority PTQ accuracy decay fp32->int2", detail);
  std::snprintf(detail, sizeof(detail), "FVO(int2) > FVO(fp32) in %d/5 seeds (need >=4)",
                fvo_seeds);
  report(fvo_seeds >= 4, "criterion 2.2: quantization widens the accuracy gap", detail);
}

void criterion_3(const BenchmarkRun& run) {
  // Deterministic, exact: abs weight diff strictly increases as precision
  // drops; sparsity strictly increases across the integer grids (the float
  // grids have no zero bin, so their sparsity ties fp32 instead).
  bool abs_ok = true;
  bool sparsity_ok = true;
  for (std::size_t s = 0; s < run.seeds.size(); ++s) {
    double prev = -1.0;
    for (const std::string& p : {std::string("fp32"), std::string("fp16"), std::string("int8"),
                                 std::string("int4"), std::string("int2")}) {
      const double diff = run.stats[s].at(p)["abs_diff"].get<double>();
      if (!(diff > prev)) abs_ok = false;
      prev = diff;
    }
    double prev_sparsity = -1.0;
    for (const std::string& p :
         {std::string("int8"), std::string("int4"), std::string("int2")}) {
      const double sparsity = run.stats[s].at(p)["sparsity_quantized"].get<double>();
      if (!(sparsity > prev_sparsity)) sparsity_ok = false;
      prev_sparsity = sparsity;
    }
  }
  report(abs_ok, "criterion 3.1: abs weight diff strictly increases as bits decrease",
         "exact, every seed, fp32 -> fp16 -> int8 -> int4 -> int2");
  report(sparsity_ok, "criterion 3.2: sparsity strictly increases across integer widths",
         "exact, every seed, int8 -> int4 -> int2");

  int lvar_seeds = 0;
  int svar_seeds = 0;
  for (std::size_t s = 0; s < run.seeds.size(); ++s) {
    lvar_seeds += minority_value(run.audits[s].at("int2"), run.minority, "mean_logit_variance") <
                  minority_value(run.audits[s].at("fp32"), run.minority, "mean_logit_variance");
    svar_seeds +=
        minority_value(run.audits[s].at("int2"), run.minority, "mean_softmax_variance") <
        minority_value(run.audits[s].at("fp32"), run.minority, "mean_softmax_variance");
  }
  char detail[128];
  std::snprintf(detail, sizeof(detail),
                "logit variance lower in %d/5, softmax variance lower in %d/5 (need >=4)",
                lvar_seeds, svar_seeds);
  report(lvar_seeds >= 4 && svar_seeds >= 4,
         "criterion 3.3: minority variance collapse at int2", detail);
}

void criterion_4(const BenchmarkRun& run) {
  int grad_seeds = 0;
  int lam_seeds = 0;
  int ladder_seeds = 0;
  for (std::size_t s = 0; s < run.seeds.size(); ++s) {
    const json& groups4 = run.diags[s].at("int4")["groups"];
    bool grad_largest = true;
    bool lam_largest = true;
    const double minority_grad = groups4[run.minority]["gradient_norm"].get<double>();
    const double minority_lam = groups4[run.minority]["lambda_max"].get<double>();
    for (int g = 0; g < static_cast<int>(groups4.size()); ++g) {
      if (g == run.minority) continue;
      grad_largest = grad_largest && minority_grad > groups4[g]["gradient_norm"].get<double>();
      lam_largest = lam_largest && minority_lam > groups4[g]["lambda_max"].get<double>();
    }
    grad_seeds += grad_largest;
    lam_seeds += lam_largest;

    const double lam2 =
        run.diags[s].at("int2")["groups"][run.minority]["lambda_max"].get<double>();
    const double lam8 =
        run.diags[s].at("int8")["groups"][run.minority]["lambda_max"].get<double>();
    ladder_seeds += lam2 > 0.0 && lam8 > 0.0 && std::log(lam2) >= std::log(lam8);
  }
  char detail[128];
  std::snprintf(detail, sizeof(detail), "largest gradient norm in %d/5 seeds (need >=4)",
                grad_seeds);
  report(grad_seeds >= 4, "criterion 4.1: minority has the largest int4 gradient norm", detail);
  std::snprintf(detail, sizeof(detail), "largest lambda_max in %d/5 seeds (need >=4)", lam_seeds);
  report(lam_seeds >= 4, "criterion 4.2: minority has the largest int4 lambda_max", detail);
  std::snprintf(detail, sizeof(detail), "log lambda_max(int2) >= log lambda_max(int8) in %d/5",
                ladder_seeds);
  report(ladder_seeds >= 4, "criterion 4.3: minority curvature grows from int8 to int2", detail);
}

void criterion_5(const BenchmarkRun& run) {
  int fvo_wins = 0;
  int on_frontier = 0;
  int usable = 0;
  for (const json& entry : run.selection["per_seed"]) {
    if (entry.contains("failed") && entry["failed"].get<bool>()) continue;
    ++usable;
    double fair_fvo = 0.0;
    double ptq_fvo = 0.0;
    for (const json& arm : entry["arms"]) {
      if (arm["name"] == "fair_qat") fair_fvo = arm["fvo"].get<double>();
      if (arm["name"] == "ptq") ptq_fvo = arm["fvo"].get<double>();
    }
    fvo_wins += fair_fvo < ptq_fvo;
    for (const json& name : entry["frontier"]) {
      if (name == "fair_qat") ++on_frontier;
    }
  }
  char detail[160];
  std::snprintf(detail, sizeof(detail), "FVO(fair qat) < FVO(ptq) in %d/%d seeds (need >=4)",
                fvo_wins, usable);
  report(fvo_wins >= 4, "criterion 5.1: fair QAT beats PTQ on fairness at int4", detail);
  std::snprintf(detail, sizeof(detail),
                "fair qat on the (OA up, FVO down) frontier in %d/%d seeds (need >=4)",
                on_frontier, usable);
  report(on_frontier >= 4, "criterion 5.2: fair QAT sits on the Pareto frontier", detail);
  std::snprintf(detail, sizeof(detail), "mitigation experiment took %.1f s (budget 1200 s)",
                run.mitigate_seconds);
  report(run.mitigate_seconds < 1200.0, "criterion 5.3: mitigation runtime budget", detail);
}

// ---- criterion 6: determinism ---------------------------------------------

bool trees_identical(const fs::path& a, const fs::path& b, std::string& first_diff) {
  std::size_t checked = 0;
  for (const auto& entry : fs::recursive_directory_iterator(a)) {
    if (!entry.is_regular_file()) continue;
    const std::string rel = fs::relative(entry.path(), a).string();
    if (rel.find("manifest.json") != std::string::npos) continue;  // carries timestamps
    ++checked;
    if (!fs::exists(b / rel)) {
      first_diff = rel + " missing in rerun";
      return false;
    }
    if (read_text_file((a / rel).string()) != read_text_file((b / rel).string())) {
      first_diff = rel + " differs";
      return false;
    }
  }
  if (checked == 0) {
    first_diff = "no files produced";
    return false;
  }
  return true;
}

void criterion_6(const fs::path& scratch) {
  ExperimentConfig config =
      ExperimentConfig::load(std::string(FAIRQUANT_CONFIG_DIR) + "/smoke.json");
  std::ostringstream log;
  bool ok = true;
  std::string detail = "gen-data, train, sweep, and mitigate reruns byte-identical";
  for (const std::string& command : {std::string("a"), std::string("b")}) {
    config.out_dir = (scratch / command).string();
    if (run_gen_data(config, log) != kExitOk || run_train(config, log) != kExitOk ||
        run_sweep(config, log) != kExitOk || run_mitigate(config, log) != kExitOk) {
      ok = false;
      detail = "a command failed during the determinism rerun";
    }
  }
  std::string diff;
  if (ok && !trees_identical(scratch / "a", scratch / "b", diff)) {
    ok = false;
    detail = "difference: " + diff;
  }
  report(ok, "criterion 6: reruns with identical config and seed are byte-identical", detail);
}

}  // namespace

int main() {
  const fs::path scratch = fs::temp_directory_path() / "fairquant_acceptance";
  fs::remove_all(scratch);
  fs::create_directories(scratch);

  const auto c1_start = std::chrono::steady_clock::now();
  criterion_1a();
  criterion_1b();
  criterion_1c();
  criterion_1d();
  const double c1_seconds = seconds_since(c1_start);
  {
    char detail[96];
    std::snprintf(detail, sizeof(detail), "numerical suite took %.1f s (budget 60 s)",
                  c1_seconds);
    report(c1_seconds < 60.0, "criterion 1 runtime", detail);
  }

  try {
    const BenchmarkRun run = run_benchmark(scratch / "benchmark");
    {
      char detail[96];
      std::snprintf(detail, sizeof(detail), "sweep took %.1f s (budget 5 min/seed x 5 seeds)",
                    run.sweep_seconds);
      report(run.sweep_seconds < 1500.0, "criterion 2 runtime", detail);
    }
    criterion_2(run);
    criterion_3(run);
    criterion_4(run);
    criterion_5(run);
  } catch (const std::exception& err) {
    report(false, "criteria 2-5: benchmark execution", err.what());
  }

  try {
    criterion_6(scratch / "determinism");
  } catch (const std::exception& err) {
    report(false, "criterion 6: determinism", err.what());
  }

  fs::remove_all(scratch);
  std::printf("%d criterion failure(s)\n", g_failures);
  return g_failures;
}
