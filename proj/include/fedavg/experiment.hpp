#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "fedavg/data.hpp"
#include "fedavg/fed.hpp"
#include "fedavg/metrics.hpp"
#include "fedavg/nn.hpp"

namespace fedavg {

/// Everything needed to reproduce a run. Defaults mirror the reference study:
/// three clients with its data sizes, 20 epochs for the per-client and pooled
/// baselines, 5 federated rounds of 4 local epochs, Adam at 1e-3.
struct ExperimentConfig {
  std::uint64_t seed = 1;
  std::vector<std::size_t> hidden_dims = {32};

  // Synthetic corpus; its seed follows `seed` unless data.seed is given.
  PartitionSpec synthetic = PartitionSpec::reference_default();
  std::optional<std::uint64_t> data_seed;
  // When set, clients are read from <dir>/<id>_{train,val,test}.csv instead.
  std::optional<std::filesystem::path> csv_dir;
  std::vector<std::string> csv_clients;

  TrainConfig train;  // epochs and seed are filled per model
  std::uint32_t baseline_epochs = 20;
  CheckpointPolicy baseline_checkpoint = CheckpointPolicy::best_validation;

  std::uint32_t rounds = 5;
  std::uint32_t local_epochs = 4;
  AveragingMode averaging = AveragingMode::uniform;
  std::chrono::milliseconds round_timeout{60'000};  // socket deployments only

  std::filesystem::path out_dir = "results";

  std::vector<std::string> client_ids() const;
  PartitionSpec resolved_partition() const;
  void validate() const;
};

// Throws ConfigError naming the offending field.
ExperimentConfig parse_config(const std::string& json_text);
ExperimentConfig load_config(const std::filesystem::path& path);
// Canonical JSON for the manifest; parse_config(config_to_json(c)) == c.
std::string config_to_json(const ExperimentConfig& cfg);
std::string config_hash(const ExperimentConfig& cfg);

std::vector<ClientDataset> load_datasets(const ExperimentConfig& cfg);
ClientDataset load_client_dataset(const ExperimentConfig& cfg, const std::string& client_id);

FederationConfig federation_config(const ExperimentConfig& cfg, std::size_t input_dim);

// "client1" -> "Client1"
std::string display_name(const std::string& client_id);

struct BaselineRun {
  std::string name;
  TrainResult result;
};

struct RoundMetrics {
  std::uint32_t round_index = 0;
  std::string test_set;
  Evaluation eval;
};

struct ExperimentResult {
  std::vector<BaselineRun> baselines;  // per-client models, then Combined
  FederationResult federation;
  std::vector<RoundMetrics> round_metrics;
  std::vector<NamedModel> models;  // Client1.., FL, Combined
  std::vector<NamedTestSet> test_sets;
  MetricsReport report;
};

// Trains the five models and evaluates them; no file output.
ExperimentResult run_experiment(const ExperimentConfig& cfg);

// Writes tables, histories, model files and manifest.json into `dir`.
void write_experiment_outputs(const ExperimentConfig& cfg, const ExperimentResult& result,
                              const std::filesystem::path& dir);

// Nine (or 3 x clients) CSV files: <id>_{train,val,test}.csv.
void write_client_csvs(std::span<const ClientDataset> datasets, const std::filesystem::path& dir);

/// Server process of a socket deployment. Writes FL.fmdl, fl_updates.csv and,
/// when test data is available from the config, FL metric tables. If
/// `ready_file` is given, the bound port is written there once listening.
FederationResult serve(const ExperimentConfig& cfg, const SocketAddress& listen,
                       const std::filesystem::path& out_dir,
                       const std::optional<std::filesystem::path>& ready_file = std::nullopt);

// Client process of a socket deployment; returns the number of rounds served.
std::uint32_t serve_client(const ExperimentConfig& cfg, const SocketAddress& server, const std::string& client_id);

// One-model report for the federated model on every client's test split.
MetricsReport fl_report(const ParameterSet& fl_params, std::span<const NamedTestSet> test_sets);

std::vector<NamedTestSet> test_sets_of(std::span<const ClientDataset> datasets);

}  // namespace fedavg
