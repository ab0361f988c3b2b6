#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "fedavg/data.hpp"
#include "fedavg/fed.hpp"
#include "fedavg/nn.hpp"

namespace fedsupport {

// Small synthetic client: two Gaussian blobs in `dim` dimensions.
inline fedavg::ClientDataset toy_client(const std::string& id, std::uint64_t seed, std::size_t n_train = 60,
                                        std::size_t dim = 3) {
  fedavg::PartitionSpec spec;
  spec.feature_dim = dim;
  spec.seed = seed;
  spec.clients.push_back({id, n_train + 20, (n_train + 20) / 2, {n_train, 10, 10}, {}, 1.0, 0.0});
  return fedavg::generate_synthetic(spec).front();
}

inline fedavg::FederationConfig toy_config(std::vector<std::string> ids, std::uint32_t rounds,
                                           std::uint32_t local_epochs, std::size_t dim = 3) {
  fedavg::FederationConfig cfg;
  cfg.num_rounds = rounds;
  cfg.local_epochs = local_epochs;
  cfg.model = {dim, {4}};
  cfg.train.batch_size = 16;
  cfg.expected_clients = std::move(ids);
  cfg.seed = 77;
  return cfg;
}

// What one client would reach training alone from the initial global model,
// round after round, with the per-round seeds the protocol uses.
inline fedavg::ParameterSet chained_local(const fedavg::FederationConfig& cfg, const fedavg::ClientRole& role) {
  auto p = fedavg::initial_global_params(cfg);
  for (std::uint32_t r = 0; r < cfg.num_rounds; ++r) {
    fedavg::TrainConfig tc = role.train;
    tc.epochs = cfg.local_epochs;
    tc.seed = fedavg::round_seed(role.train.seed, r);
    p = fedavg::train_local(p, role.dataset, tc).best.params;
  }
  return p;
}

// K <= 5 updates over <= 3 layers of <= 64 elements, distinct ids, one round.
inline std::vector<fedavg::ModelUpdate> random_updates(std::mt19937_64& gen) {
  const std::size_t k = 1 + gen() % 5;
  const std::size_t n_layers = 1 + gen() % 3;
  std::vector<std::size_t> sizes(n_layers);
  for (auto& s : sizes) s = 1 + gen() % 64;
  const std::uint32_t round = static_cast<std::uint32_t>(gen() % 10);
  std::uniform_real_distribution<double> v(-10.0, 10.0);
  std::vector<fedavg::ModelUpdate> out(k);
  for (std::size_t i = 0; i < k; ++i) {
    out[i].client_id = "c" + std::to_string(gen() % 1000) + "_" + std::to_string(i);
    out[i].round_index = round;
    out[i].num_train_samples = 1 + gen() % 3000;
    std::vector<fedavg::Layer> layers;
    for (std::size_t l = 0; l < n_layers; ++l) {
      fedavg::Layer layer{"l" + std::to_string(l), std::vector<double>(sizes[l])};
      for (auto& x : layer.values) x = v(gen);
      layers.push_back(std::move(layer));
    }
    out[i].params = fedavg::ParameterSet(std::move(layers));
  }
  return out;
}

}  // namespace fedsupport
