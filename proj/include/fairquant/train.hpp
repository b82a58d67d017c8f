#pragma once

#include <utility>
#include <vector>

#include "fairquant/dataset.hpp"
#include "fairquant/network.hpp"
#include "fairquant/quantize.hpp"

namespace fairquant {

struct TrainConfig {
  int epochs = 1;
  int batch_size = 32;
  double learning_rate = 0.01;
  double momentum = 0.9;
  Vector class_weights;  // empty means uniform
  std::uint64_t seed = 0;
  bool shuffle = true;

  void validate(int num_classes) const;
};

struct QatConfig {
  TrainConfig base;
  MixedPrecisionMap precision_map;
  double dampening_coefficient = 0.01;
  // Fraction of the epochs after which the grid-attraction term activates.
  double dampening_start_fraction = 0.7;

  void validate(int num_classes, int num_layers) const;
};

/// Per-epoch training record. `qat_grid_gap` is the squared distance of the
/// latent weights to their quantization grid; empty for plain training runs.
struct TrainTrace {
  std::vector<double> overall_loss;
  std::vector<std::vector<double>> group_loss;      // [epoch][group]
  std::vector<std::vector<double>> group_accuracy;  // [epoch][group]
  std::vector<double> qat_grid_gap;

  std::size_t epochs() const { return overall_loss.size(); }
};

/// Mini-batch SGD with momentum on the (optionally class-weighted)
/// cross-entropy. Deterministic in the config seed; throws TrainingError
/// naming the epoch if the loss diverges.
std::pair<Network, TrainTrace> train_erm(const Network& net, const GroupedDataset& train,
                                         const TrainConfig& cfg);

/// Quantization-aware training: latent full-precision weights, fake-quant
/// forward per the precision map, clipped straight-through backward, and a
/// late quadratic pull of the latent weights onto their grid. Returns the
/// quantized latent weights.
std::pair<QuantizedModel, TrainTrace> train_qat(const Network& net, const GroupedDataset& train,
                                                const QatConfig& cfg);

/// Mitigation pipeline: balance the train split (u_o sampler), then QAT with
/// the (weighted) loss and precision map carried by the config.
std::pair<QuantizedModel, TrainTrace> fair_qat_pipeline(const Network& net,
                                                        const GroupedDataset& raw_train,
                                                        const QatConfig& cfg,
                                                        const SamplerConfig& sampler);

}  // namespace fairquant
