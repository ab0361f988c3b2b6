#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "fedavg/data.hpp"
#include "fedavg/params.hpp"

namespace fedavg {

enum class Activation : std::uint8_t { relu = 0 };

/// Fully connected binary classifier: input -> hidden layers (ReLU) -> one
/// sigmoid unit. No hidden layers gives logistic regression.
///
/// Parameters are laid out as "w0","b0","w1","b1",... with each weight matrix
/// stored row-major as [fan_out][fan_in].
struct ModelSpec {
  std::size_t input_dim = 1;
  std::vector<std::size_t> hidden_dims;
  Activation activation = Activation::relu;

  void validate() const;
  std::size_t parameter_count() const;

  friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

// Recovers the spec from layer names and sizes; StructuralError if the layout
// is not one init_params could have produced.
ModelSpec infer_spec(const ParameterSet& params);

enum class CheckpointPolicy : std::uint8_t { best_validation = 0, final_epoch = 1 };

struct TrainConfig {
  double learning_rate = 1e-3;
  std::uint32_t epochs = 1;
  std::uint32_t batch_size = 32;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_epsilon = 1e-8;
  std::uint64_t seed = 0;
  CheckpointPolicy checkpoint = CheckpointPolicy::best_validation;

  void validate() const;

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

struct OptimizerState {
  ParameterSet first_moment;
  ParameterSet second_moment;
  std::uint64_t step_count = 0;

  static OptimizerState fresh(const ParameterSet& like);
};

struct EpochCheckpoint {
  ParameterSet params;
  std::uint32_t epoch_index = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
};

struct TrainResult {
  EpochCheckpoint best;
  std::vector<EpochCheckpoint> history;
};

// Predicted probabilities are clamped to [kProbabilityClamp, 1 - kProbabilityClamp].
inline constexpr double kProbabilityClamp = 1e-12;

// Glorot-uniform weights in [-s, s], s = sqrt(6 / (fan_in + fan_out)); zero biases.
ParameterSet init_params(const ModelSpec& spec, std::uint64_t seed);

double forward(const ParameterSet& params, std::span<const double> features);

double bce_loss(double p, int label);

// Unweighted mean BCE over the examples; 0 for an empty span.
double mean_bce(const ParameterSet& params, std::span<const LabeledExample> examples);

// Gradient of the mean BCE over a non-empty batch.
ParameterSet gradient(const ParameterSet& params, std::span<const LabeledExample> batch);

std::pair<ParameterSet, OptimizerState> adam_step(const ParameterSet& params, const ParameterSet& grads,
                                                  const OptimizerState& state, const TrainConfig& cfg);

/// Mini-batch Adam for cfg.epochs epochs, starting from fresh optimizer state.
/// The training split is reshuffled every epoch from a stream keyed by
/// (cfg.seed, epoch); the final partial batch is kept. After each epoch the
/// full-split train and validation losses are recorded. `best` is the lowest
/// validation loss (earliest on ties), or the last epoch under
/// CheckpointPolicy::final_epoch.
TrainResult train_local(const ParameterSet& params, const ClientDataset& data, const TrainConfig& cfg);

}  // namespace fedavg
