#include "fedavg/nn.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "fedavg/error.hpp"
#include "fedavg/rng.hpp"

namespace fedavg {

void ModelSpec::validate() const {
  if (input_dim < 1) throw UsageError("model input_dim must be at least 1");
  for (std::size_t h : hidden_dims) {
    if (h == 0) throw UsageError("hidden layer width must be positive");
  }
}

std::size_t ModelSpec::parameter_count() const {
  std::size_t fan_in = input_dim;
  std::size_t count = 0;
  for (std::size_t h : hidden_dims) {
    count += fan_in * h + h;
    fan_in = h;
  }
  return count + fan_in + 1;
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw UsageError("learning_rate must be positive");
  if (epochs == 0) throw UsageError("epochs must be positive");
  if (batch_size == 0) throw UsageError("batch_size must be positive");
  if (!(adam_beta1 > 0.0 && adam_beta1 < 1.0)) throw UsageError("adam_beta1 must lie in (0, 1)");
  if (!(adam_beta2 > 0.0 && adam_beta2 < 1.0)) throw UsageError("adam_beta2 must lie in (0, 1)");
  if (!(adam_epsilon > 0.0) || !std::isfinite(adam_epsilon)) throw UsageError("adam_epsilon must be positive");
}

namespace {

std::string weight_name(std::size_t k) { return "w" + std::to_string(k); }
std::string bias_name(std::size_t k) { return "b" + std::to_string(k); }

std::vector<std::size_t> layer_dims(const ModelSpec& spec) {
  std::vector<std::size_t> dims;
  dims.push_back(spec.input_dim);
  dims.insert(dims.end(), spec.hidden_dims.begin(), spec.hidden_dims.end());
  dims.push_back(1);
  return dims;
}

double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

double clamp_probability(double p) {
  return std::clamp(p, kProbabilityClamp, 1.0 - kProbabilityClamp);
}

// Read-only view of a parameter set as a stack of dense layers, plus scratch
// space for one forward/backward pass.
class Network {
 public:
  explicit Network(const ParameterSet& params) : spec_(infer_spec(params)), dims_(layer_dims(spec_)) {
    const std::size_t depth = dims_.size() - 1;
    weights_.reserve(depth);
    biases_.reserve(depth);
    for (std::size_t k = 0; k < depth; ++k) {
      weights_.push_back(params.layer(2 * k).values.data());
      biases_.push_back(params.layer(2 * k + 1).values.data());
    }
    pre_.resize(depth);
    act_.resize(depth + 1);
    for (std::size_t k = 0; k < depth; ++k) {
      pre_[k].resize(dims_[k + 1]);
      act_[k + 1].resize(dims_[k + 1]);
    }
  }

  const ModelSpec& spec() const { return spec_; }
  std::size_t depth() const { return weights_.size(); }

  // Returns the raw (unclamped) sigmoid output; keeps activations for backward().
  double run(std::span<const double> x) {
    if (x.size() != spec_.input_dim) {
      throw StructuralError("feature vector has " + std::to_string(x.size()) + " entries, model expects " +
                            std::to_string(spec_.input_dim));
    }
    act_[0].assign(x.begin(), x.end());
    const std::size_t depth = this->depth();
    for (std::size_t k = 0; k < depth; ++k) {
      const std::size_t fan_in = dims_[k];
      const std::size_t fan_out = dims_[k + 1];
      const double* w = weights_[k];
      const auto& in = act_[k];
      for (std::size_t j = 0; j < fan_out; ++j) {
        double z = biases_[k][j];
        const double* row = w + j * fan_in;
        for (std::size_t i = 0; i < fan_in; ++i) z += row[i] * in[i];
        pre_[k][j] = z;
        act_[k + 1][j] = (k + 1 == depth) ? z : std::max(z, 0.0);
      }
    }
    return sigmoid(pre_[depth - 1][0]);
  }

  // Accumulates d(loss)/d(params) for the example last passed to run(), given
  // d(loss)/d(output pre-activation).
  void backward(double output_delta, std::vector<std::vector<double>>& grads) {
    const std::size_t depth = this->depth();
    delta_.assign(1, output_delta);
    for (std::size_t k = depth; k-- > 0;) {
      const std::size_t fan_in = dims_[k];
      const std::size_t fan_out = dims_[k + 1];
      auto& gw = grads[2 * k];
      auto& gb = grads[2 * k + 1];
      const auto& in = act_[k];
      for (std::size_t j = 0; j < fan_out; ++j) {
        const double d = delta_[j];
        double* grow = gw.data() + j * fan_in;
        for (std::size_t i = 0; i < fan_in; ++i) grow[i] += d * in[i];
        gb[j] += d;
      }
      if (k == 0) break;
      next_delta_.assign(fan_in, 0.0);
      const double* w = weights_[k];
      for (std::size_t j = 0; j < fan_out; ++j) {
        const double d = delta_[j];
        const double* row = w + j * fan_in;
        for (std::size_t i = 0; i < fan_in; ++i) next_delta_[i] += row[i] * d;
      }
      for (std::size_t i = 0; i < fan_in; ++i) {
        if (!(pre_[k - 1][i] > 0.0)) next_delta_[i] = 0.0;
      }
      delta_.swap(next_delta_);
    }
  }

 private:
  ModelSpec spec_;
  std::vector<std::size_t> dims_;
  std::vector<const double*> weights_;
  std::vector<const double*> biases_;
  std::vector<std::vector<double>> pre_;
  std::vector<std::vector<double>> act_;
  std::vector<double> delta_;
  std::vector<double> next_delta_;
};

std::vector<std::vector<double>> zero_buffers(const ParameterSet& like) {
  std::vector<std::vector<double>> out;
  out.reserve(like.layer_count());
  for (const auto& layer : like.layers()) out.emplace_back(layer.values.size(), 0.0);
  return out;
}

ParameterSet rebuild(const ParameterSet& like, std::vector<std::vector<double>> values) {
  std::vector<Layer> layers;
  layers.reserve(values.size());
  for (std::size_t l = 0; l < values.size(); ++l) layers.push_back({like.layer(l).name, std::move(values[l])});
  return ParameterSet(std::move(layers));
}

template <typename IndexRange>
ParameterSet batch_gradient(const ParameterSet& params, std::span<const LabeledExample> examples,
                            const IndexRange& indices, std::size_t count) {
  Network net(params);
  auto grads = zero_buffers(params);
  for (std::size_t idx : indices) {
    const auto& ex = examples[idx];
    const double p = net.run(ex.features);
    net.backward(p - static_cast<double>(ex.label), grads);
  }
  const double inv = 1.0 / static_cast<double>(count);
  for (auto& g : grads) {
    for (auto& v : g) v *= inv;
  }
  return rebuild(params, std::move(grads));
}

}  // namespace

ModelSpec infer_spec(const ParameterSet& params) {
  const std::size_t n = params.layer_count();
  if (n == 0 || n % 2 != 0) {
    throw StructuralError("model parameters must come in weight/bias pairs, found " + std::to_string(n) + " layers");
  }
  const std::size_t depth = n / 2;
  ModelSpec spec;
  std::size_t fan_in = 0;
  for (std::size_t k = 0; k < depth; ++k) {
    const auto& w = params.layer(2 * k);
    const auto& b = params.layer(2 * k + 1);
    if (w.name != weight_name(k) || b.name != bias_name(k)) {
      throw StructuralError("unexpected layer names '" + w.name + "', '" + b.name + "' at depth " +
                            std::to_string(k));
    }
    const std::size_t fan_out = b.values.size();
    if (fan_out == 0) throw StructuralError("layer '" + b.name + "' is empty");
    if (w.values.size() % fan_out != 0) {
      throw StructuralError("layer '" + w.name + "' size is not a multiple of its bias length");
    }
    const std::size_t this_in = w.values.size() / fan_out;
    if (this_in == 0) throw StructuralError("layer '" + w.name + "' is empty");
    if (k == 0) {
      spec.input_dim = this_in;
    } else {
      if (this_in != fan_in) {
        throw StructuralError("layer '" + w.name + "' expects " + std::to_string(this_in) + " inputs, previous layer has " +
                              std::to_string(fan_in) + " units");
      }
      spec.hidden_dims.push_back(fan_in);
    }
    fan_in = fan_out;
  }
  if (fan_in != 1) throw StructuralError("output layer must have exactly one unit");
  return spec;
}

OptimizerState OptimizerState::fresh(const ParameterSet& like) {
  return {zeros_like(like), zeros_like(like), 0};
}

ParameterSet init_params(const ModelSpec& spec, std::uint64_t seed) {
  spec.validate();
  const auto dims = layer_dims(spec);
  std::vector<Layer> layers;
  for (std::size_t k = 0; k + 1 < dims.size(); ++k) {
    const std::size_t fan_in = dims[k];
    const std::size_t fan_out = dims[k + 1];
    const double s = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    CounterRng rng(derive_seed(seed, k));
    std::vector<double> w(fan_in * fan_out);
    for (auto& v : w) v = rng.uniform(-s, s);
    layers.push_back({weight_name(k), std::move(w)});
    layers.push_back({bias_name(k), std::vector<double>(fan_out, 0.0)});
  }
  return ParameterSet(std::move(layers));
}

double forward(const ParameterSet& params, std::span<const double> features) {
  Network net(params);
  return clamp_probability(net.run(features));
}

double bce_loss(double p, int label) {
  const double q = clamp_probability(p);
  return label == 1 ? -std::log(q) : -std::log1p(-q);
}

double mean_bce(const ParameterSet& params, std::span<const LabeledExample> examples) {
  if (examples.empty()) return 0.0;
  Network net(params);
  double sum = 0.0;
  for (const auto& ex : examples) sum += bce_loss(net.run(ex.features), ex.label);
  return sum / static_cast<double>(examples.size());
}

ParameterSet gradient(const ParameterSet& params, std::span<const LabeledExample> batch) {
  if (batch.empty()) throw UsageError("gradient of an empty batch");
  std::vector<std::size_t> all(batch.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  return batch_gradient(params, batch, all, batch.size());
}

std::pair<ParameterSet, OptimizerState> adam_step(const ParameterSet& params, const ParameterSet& grads,
                                                  const OptimizerState& state, const TrainConfig& cfg) {
  require_shape_compatible(params, grads);
  require_shape_compatible(params, state.first_moment);
  require_shape_compatible(params, state.second_moment);

  const std::uint64_t t = state.step_count + 1;
  const double b1 = cfg.adam_beta1;
  const double b2 = cfg.adam_beta2;
  const double correction1 = 1.0 - std::pow(b1, static_cast<double>(t));
  const double correction2 = 1.0 - std::pow(b2, static_cast<double>(t));

  std::vector<Layer> p = params.layers();
  std::vector<Layer> m = state.first_moment.layers();
  std::vector<Layer> v = state.second_moment.layers();
  for (std::size_t l = 0; l < p.size(); ++l) {
    const auto& g = grads.layer(l).values;
    auto& pl = p[l].values;
    auto& ml = m[l].values;
    auto& vl = v[l].values;
    for (std::size_t i = 0; i < pl.size(); ++i) {
      ml[i] = b1 * ml[i] + (1.0 - b1) * g[i];
      vl[i] = b2 * vl[i] + (1.0 - b2) * g[i] * g[i];
      const double m_hat = ml[i] / correction1;
      const double v_hat = vl[i] / correction2;
      const double update = cfg.learning_rate * m_hat / (std::sqrt(v_hat) + cfg.adam_epsilon);
      if (update != 0.0) pl[i] -= update;
    }
  }
  return {ParameterSet(std::move(p)), OptimizerState{ParameterSet(std::move(m)), ParameterSet(std::move(v)), t}};
}

TrainResult train_local(const ParameterSet& params, const ClientDataset& data, const TrainConfig& cfg) {
  cfg.validate();
  if (data.train.empty()) throw UsageError("client '" + data.client_id + "' has an empty training split");
  if (data.val.empty()) throw UsageError("client '" + data.client_id + "' has an empty validation split");
  params.validate();
  const ModelSpec spec = infer_spec(params);
  if (data.feature_dim() != spec.input_dim) {
    throw StructuralError("client '" + data.client_id + "' features have dimension " +
                          std::to_string(data.feature_dim()) + ", model expects " + std::to_string(spec.input_dim));
  }

  ParameterSet current = params;
  OptimizerState state = OptimizerState::fresh(params);
  const std::span<const LabeledExample> train(data.train);
  std::vector<std::size_t> order(train.size());

  TrainResult result;
  result.history.reserve(cfg.epochs);
  for (std::uint32_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    CounterRng rng(derive_seed(cfg.seed, epoch));
    shuffle(std::span<std::size_t>(order), rng);
    for (std::size_t begin = 0; begin < order.size(); begin += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), begin + cfg.batch_size);
      const std::span<const std::size_t> batch(order.data() + begin, end - begin);
      const auto grads = batch_gradient(current, train, batch, batch.size());
      auto [next, next_state] = adam_step(current, grads, state, cfg);
      current = std::move(next);
      state = std::move(next_state);
    }
    EpochCheckpoint cp;
    cp.params = current;
    cp.epoch_index = epoch;
    cp.train_loss = mean_bce(current, data.train);
    cp.val_loss = mean_bce(current, data.val);
    result.history.push_back(std::move(cp));
  }

  std::size_t chosen = result.history.size() - 1;
  if (cfg.checkpoint == CheckpointPolicy::best_validation) {
    chosen = 0;
    for (std::size_t e = 1; e < result.history.size(); ++e) {
      if (result.history[e].val_loss < result.history[chosen].val_loss) chosen = e;
    }
  }
  result.best = result.history[chosen];
  return result;
}

}  // namespace fedavg
