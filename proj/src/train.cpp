#include "fairquant/train.hpp"

#include <cmath>
#include <numeric>

namespace fairquant {

namespace {

struct EpochEval {
  double overall_loss = 0.0;  // the training objective (class-weighted)
  std::vector<double> group_loss;
  std::vector<double> group_accuracy;
};

EpochEval evaluate_epoch(const Network& model, const GroupedDataset& train,
                         const Vector& class_weights) {
  const Matrix logits = forward(model, train.features);
  const Matrix logp = log_softmax(logits);
  const int g_count = train.num_groups();

  EpochEval eval;
  eval.group_loss.assign(static_cast<std::size_t>(g_count), 0.0);
  eval.group_accuracy.assign(static_cast<std::size_t>(g_count), 0.0);
  std::vector<long> counts(static_cast<std::size_t>(g_count), 0);
  double weighted_sum = 0.0;
  for (Eigen::Index i = 0; i < train.size(); ++i) {
    const auto g = static_cast<std::size_t>(train.groups[i]);
    const double nll = -logp(i, train.labels[i]);
    const double w = class_weights.size() == 0 ? 1.0 : class_weights[train.labels[i]];
    weighted_sum += w * nll;
    eval.group_loss[g] += nll;
    Eigen::Index best = 0;
    logits.row(i).maxCoeff(&best);
    eval.group_accuracy[g] += (static_cast<int>(best) == train.labels[i]);
    counts[g]++;
  }
  eval.overall_loss = weighted_sum / static_cast<double>(train.size());
  for (std::size_t g = 0; g < counts.size(); ++g) {
    if (counts[g] == 0) continue;
    eval.group_loss[g] /= static_cast<double>(counts[g]);
    eval.group_accuracy[g] /= static_cast<double>(counts[g]);
  }
  return eval;
}

std::vector<int> epoch_order(Eigen::Index m, bool shuffle, Rng& rng) {
  std::vector<int> order(static_cast<std::size_t>(m));
  std::iota(order.begin(), order.end(), 0);
  if (shuffle) rng.shuffle(order);
  return order;
}

struct MiniBatch {
  Matrix features;
  IntVector labels;
};

MiniBatch gather(const GroupedDataset& train, const std::vector<int>& order, std::size_t begin,
                 std::size_t end) {
  MiniBatch batch;
  batch.features.resize(static_cast<Eigen::Index>(end - begin), train.dim());
  batch.labels.resize(static_cast<Eigen::Index>(end - begin));
  for (std::size_t i = begin; i < end; ++i) {
    batch.features.row(static_cast<Eigen::Index>(i - begin)) = train.features.row(order[i]);
    batch.labels[static_cast<Eigen::Index>(i - begin)] = train.labels[order[i]];
  }
  return batch;
}

void check_finite_epoch(double loss, int epoch) {
  if (!std::isfinite(loss)) {
    throw TrainingError("training diverged: loss is not finite at epoch " +
                        std::to_string(epoch));
  }
}

}  // namespace

void TrainConfig::validate(int num_classes) const {
  if (epochs < 1) throw InputError("train config: epochs must be >= 1");
  if (batch_size < 1) throw InputError("train config: batch_size must be >= 1");
  // learning_rate 0 is allowed as an explicit no-op run.
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
    throw InputError("train config: learning_rate must be finite and non-negative");
  }
  if (!(momentum >= 0.0 && momentum < 1.0)) {
    throw InputError("train config: momentum must lie in [0, 1)");
  }
  if (class_weights.size() != 0) {
    if (class_weights.size() != num_classes) {
      throw InputError("train config: class_weights must name every class");
    }
    double total = 0.0;
    for (Eigen::Index g = 0; g < class_weights.size(); ++g) {
      if (class_weights[g] < 0.0) throw InputError("train config: class_weights must be >= 0");
      total += class_weights[g];
    }
    if (total <= 0.0) throw InputError("train config: at least one class weight must be > 0");
  }
}

void QatConfig::validate(int num_classes, int num_layers) const {
  base.validate(num_classes);
  precision_map.validate(num_layers);
  if (!(dampening_coefficient >= 0.0) || !std::isfinite(dampening_coefficient)) {
    throw InputError("qat config: dampening_coefficient must be finite and >= 0");
  }
  if (!(dampening_start_fraction >= 0.0 && dampening_start_fraction <= 1.0)) {
    throw InputError("qat config: dampening_start_fraction must lie in [0, 1]");
  }
}

std::pair<Network, TrainTrace> train_erm(const Network& net, const GroupedDataset& train,
                                         const TrainConfig& cfg) {
  train.validate();
  cfg.validate(net.output_dim());
  if (train.dim() != net.input_dim()) {
    throw ShapeError("train_erm: dataset width does not match the network input size");
  }

  Network model = net;
  Vector theta = flatten(model).values;
  Vector velocity = Vector::Zero(theta.size());
  Rng rng(cfg.seed);
  TrainTrace trace;

  const auto m = static_cast<std::size_t>(train.size());
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const std::vector<int> order = epoch_order(train.size(), cfg.shuffle, rng);
    for (std::size_t begin = 0; begin < m; begin += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(m, begin + static_cast<std::size_t>(cfg.batch_size));
      const MiniBatch batch = gather(train, order, begin, end);
      const Vector grad_values =
          gradient(model, batch.features, batch.labels, cfg.class_weights).values;
      velocity = cfg.momentum * velocity + grad_values;
      theta -= cfg.learning_rate * velocity;
      assign_from_flat(model, theta);
    }
    const EpochEval eval = evaluate_epoch(model, train, cfg.class_weights);
    check_finite_epoch(eval.overall_loss, epoch);
    trace.overall_loss.push_back(eval.overall_loss);
    trace.group_loss.push_back(eval.group_loss);
    trace.group_accuracy.push_back(eval.group_accuracy);
  }
  return {std::move(model), std::move(trace)};
}

std::pair<QuantizedModel, TrainTrace> train_qat(const Network& net, const GroupedDataset& train,
                                                const QatConfig& cfg) {
  train.validate();
  cfg.validate(net.output_dim(), static_cast<int>(net.layers().size()));
  if (train.dim() != net.input_dim()) {
    throw ShapeError("train_qat: dataset width does not match the network input size");
  }

  Network latent = net;
  Network quant_view = net;  // latent weights snapped onto the grid
  const ParamLayout layout = ParamLayout::of(net);
  Vector theta = flatten(latent).values;
  Vector velocity = Vector::Zero(theta.size());
  Rng rng(cfg.base.seed);
  TrainTrace trace;

  const int num_layers = static_cast<int>(net.layers().size());
  const auto refresh_quant_view = [&]() {
    for (int l = 0; l < num_layers; ++l) {
      const auto li = static_cast<std::size_t>(l);
      quant_view.layers()[li].weights =
          fake_quant_forward(latent.layers()[li].weights, cfg.precision_map.layer_spec(l));
      quant_view.layers()[li].bias = latent.layers()[li].bias;
    }
  };

  const auto m = static_cast<std::size_t>(train.size());
  for (int epoch = 0; epoch < cfg.base.epochs; ++epoch) {
    const bool dampening_active =
        static_cast<double>(epoch) >=
        cfg.dampening_start_fraction * static_cast<double>(cfg.base.epochs);
    const std::vector<int> order = epoch_order(train.size(), cfg.base.shuffle, rng);
    for (std::size_t begin = 0; begin < m; begin += static_cast<std::size_t>(cfg.base.batch_size)) {
      const std::size_t end = std::min(m, begin + static_cast<std::size_t>(cfg.base.batch_size));
      const MiniBatch batch = gather(train, order, begin, end);

      refresh_quant_view();
      Vector grad_values =
          gradient(quant_view, batch.features, batch.labels, cfg.base.class_weights).values;

      // Straight-through map back to the latent weights, plus the late
      // grid-attraction pull 2*lambda*(w - w_hat).
      for (int l = 0; l < num_layers; ++l) {
        const auto li = static_cast<std::size_t>(l);
        const ParamLayout::Entry& entry = layout.entries[2 * li];
        const Matrix& w_latent = latent.layers()[li].weights;
        const Matrix& w_quant = quant_view.layers()[li].weights;
        Eigen::Map<Matrix> block(grad_values.data() + entry.offset, entry.rows, entry.cols);
        block = fake_quant_backward(Matrix(block), w_latent, cfg.precision_map.layer_spec(l));
        if (dampening_active && cfg.dampening_coefficient > 0.0) {
          block += 2.0 * cfg.dampening_coefficient * (w_latent - w_quant);
        }
      }

      velocity = cfg.base.momentum * velocity + grad_values;
      theta -= cfg.base.learning_rate * velocity;
      assign_from_flat(latent, theta);
    }

    refresh_quant_view();
    double grid_gap = 0.0;
    for (int l = 0; l < num_layers; ++l) {
      const auto li = static_cast<std::size_t>(l);
      grid_gap +=
          (quant_view.layers()[li].weights - latent.layers()[li].weights).squaredNorm();
    }
    EpochEval eval = evaluate_epoch(quant_view, train, cfg.base.class_weights);
    if (dampening_active) eval.overall_loss += cfg.dampening_coefficient * grid_gap;
    check_finite_epoch(eval.overall_loss, epoch);
    trace.overall_loss.push_back(eval.overall_loss);
    trace.group_loss.push_back(eval.group_loss);
    trace.group_accuracy.push_back(eval.group_accuracy);
    trace.qat_grid_gap.push_back(grid_gap);
  }

  return {quantize(latent, cfg.precision_map), std::move(trace)};
}

std::pair<QuantizedModel, TrainTrace> fair_qat_pipeline(const Network& net,
                                                        const GroupedDataset& raw_train,
                                                        const QatConfig& cfg,
                                                        const SamplerConfig& sampler) {
  if (sampler.mode != SamplerMode::UO) {
    throw InputError("fair_qat_pipeline: the sampler must run in u_o mode");
  }
  const GroupedDataset balanced = resample(raw_train, sampler);
  return train_qat(net, balanced, cfg);
}

}  // namespace fairquant
