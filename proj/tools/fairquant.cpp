// fairquant: train small grouped classifiers, quantize their weights, and
// measure how quantization shifts accuracy, logits, losses, gradients, and
// curvature across groups — plus the sampling/weighting/QAT mitigations.

#include <CLI11.hpp>

#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "fairquant/experiment.hpp"

namespace {

using fairquant::ExperimentConfig;

struct CommonFlags {
  std::string config_path;
  std::string out_dir;
  std::string sampler_mode;
  std::string class_weights;
  std::string precisions;
  std::vector<std::uint64_t> seeds;
};

void add_common_flags(CLI::App* cmd, CommonFlags& flags) {
  cmd->add_option("--config", flags.config_path, "experiment config JSON")->required();
  cmd->add_option("--seed", flags.seeds, "override the config seed list");
  cmd->add_option("--out", flags.out_dir, "override the output directory");
  cmd->add_option("--sampler", flags.sampler_mode,
                  "override the sampler mode (none|undersample|oversample|u_o)");
  cmd->add_option("--class-weights", flags.class_weights,
                  "comma-separated per-class loss weights");
  cmd->add_option("--precisions", flags.precisions,
                  "comma-separated precision list (fp32,fp16,int8..int2)");
}

fairquant::Vector parse_weights(const std::string& text) {
  std::vector<double> values;
  std::stringstream ss(text);
  std::string cell;
  while (std::getline(ss, cell, ',')) {
    try {
      std::size_t used = 0;
      values.push_back(std::stod(cell, &used));
      if (used != cell.size()) throw std::invalid_argument(cell);
    } catch (const std::exception&) {
      throw fairquant::UsageError("--class-weights: not a number: '" + cell + "'");
    }
  }
  if (values.empty()) throw fairquant::UsageError("--class-weights: empty list");
  fairquant::Vector out(static_cast<Eigen::Index>(values.size()));
  for (std::size_t i = 0; i < values.size(); ++i) out[static_cast<Eigen::Index>(i)] = values[i];
  return out;
}

ExperimentConfig load_with_overrides(const CommonFlags& flags) {
  ExperimentConfig config = ExperimentConfig::load(flags.config_path);
  if (!flags.seeds.empty()) config.seeds = flags.seeds;
  if (!flags.out_dir.empty()) config.out_dir = flags.out_dir;
  if (!flags.sampler_mode.empty()) {
    config.sampler.mode = fairquant::sampler_mode_from_name(flags.sampler_mode);
  }
  if (!flags.class_weights.empty()) {
    const fairquant::Vector weights = parse_weights(flags.class_weights);
    config.train.class_weights = weights;
    config.mitigation_class_weights = weights;
  }
  if (!flags.precisions.empty()) {
    std::vector<fairquant::PrecisionSpec> specs;
    std::stringstream ss(flags.precisions);
    std::string name;
    while (std::getline(ss, name, ',')) specs.push_back(fairquant::PrecisionSpec::parse(name));
    config.precisions = specs;
  }
  config.validate();
  return config;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"quantization fairness laboratory"};
  app.require_subcommand(1);

  CommonFlags flags;
  std::string checkpoint_path;
  std::string qmodel_path;

  CLI::App* gen_data = app.add_subcommand("gen-data", "write the synthetic dataset as CSV");
  add_common_flags(gen_data, flags);

  CLI::App* train = app.add_subcommand("train", "train a base model");
  add_common_flags(train, flags);

  CLI::App* quantize = app.add_subcommand("quantize", "post-training quantize a checkpoint");
  add_common_flags(quantize, flags);
  quantize->add_option("--checkpoint", checkpoint_path, "checkpoint to quantize");

  CLI::App* audit = app.add_subcommand("audit", "fairness audit of a model on the test split");
  add_common_flags(audit, flags);
  audit->add_option("--checkpoint", checkpoint_path, "reference checkpoint");
  audit->add_option("--qmodel", qmodel_path, "quantized model to audit (default: the checkpoint)");

  CLI::App* diagnose =
      app.add_subcommand("diagnose", "per-group gradient norms and Hessian eigenvalues");
  add_common_flags(diagnose, flags);
  diagnose->add_option("--checkpoint", checkpoint_path, "checkpoint to diagnose");
  diagnose->add_option("--qmodel", qmodel_path, "quantized model to diagnose instead");

  CLI::App* sweep =
      app.add_subcommand("sweep", "train, quantize, audit, and diagnose per precision");
  add_common_flags(sweep, flags);

  CLI::App* mitigate =
      app.add_subcommand("mitigate", "compare PTQ, U-O+WCR, MPQAT, and Fair QAT arms");
  add_common_flags(mitigate, flags);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& help) {
    return app.exit(help);
  } catch (const CLI::ParseError& err) {
    std::cerr << err.what() << "\n";
    return fairquant::kExitUsage;
  }

  try {
    const ExperimentConfig config = load_with_overrides(flags);
    if (gen_data->parsed()) return fairquant::run_gen_data(config, std::cout);
    if (train->parsed()) return fairquant::run_train(config, std::cout);
    if (quantize->parsed()) return fairquant::run_quantize(config, checkpoint_path, std::cout);
    if (audit->parsed()) {
      return fairquant::run_audit(config, checkpoint_path, qmodel_path, std::cout);
    }
    if (diagnose->parsed()) {
      return fairquant::run_diagnose(config, checkpoint_path, qmodel_path, std::cout);
    }
    if (sweep->parsed()) return fairquant::run_sweep(config, std::cout);
    if (mitigate->parsed()) return fairquant::run_mitigate(config, std::cout);
    std::cerr << "no subcommand\n";
    return fairquant::kExitUsage;
  } catch (const fairquant::UsageError& err) {
    std::cerr << "error: " << err.what() << "\n";
    return fairquant::kExitUsage;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return fairquant::kExitPartialFailure;
  }
}
