// Command-line front end: experiment, gen-data, serve, client, evaluate.

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"

#include "fedavg/codec.hpp"
#include "fedavg/error.hpp"
#include "fedavg/experiment.hpp"
#include "fedavg/metrics.hpp"

namespace {

enum ExitCode { kOk = 0, kFailure = 1, kConfigError = 2, kProtocolError = 3, kDataError = 4 };

struct CommonOptions {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::string> data_dir;
  std::optional<std::uint32_t> rounds;
  std::optional<std::uint32_t> local_epochs;
  std::optional<std::uint32_t> epochs;
  std::optional<std::string> averaging;
  std::optional<std::uint64_t> timeout_ms;
};

void add_common(CLI::App* cmd, CommonOptions& o) {
  cmd->add_option("--config", o.config, "JSON experiment config")->check(CLI::ExistingFile);
  cmd->add_option("--seed", o.seed, "Base seed");
  cmd->add_option("--out", o.out, "Output directory");
  cmd->add_option("--data-dir", o.data_dir, "Read <id>_{train,val,test}.csv from this directory");
  cmd->add_option("--rounds", o.rounds, "Federated rounds");
  cmd->add_option("--local-epochs", o.local_epochs, "Local epochs per round");
  cmd->add_option("--epochs", o.epochs, "Epochs for the individual and combined baselines");
  cmd->add_option("--averaging", o.averaging, "uniform | sample_weighted");
  cmd->add_option("--timeout-ms", o.timeout_ms, "Round timeout for socket deployments");
}

// Flags override the config file.
fedavg::ExperimentConfig resolve(const CommonOptions& o) {
  fedavg::ExperimentConfig cfg = o.config.empty() ? fedavg::ExperimentConfig{} : fedavg::load_config(o.config);
  if (o.seed) cfg.seed = *o.seed;
  if (o.out) cfg.out_dir = *o.out;
  if (o.data_dir) {
    if (!cfg.csv_dir) cfg.csv_clients = cfg.client_ids();
    cfg.csv_dir = *o.data_dir;
  }
  if (o.rounds) cfg.rounds = *o.rounds;
  if (o.local_epochs) cfg.local_epochs = *o.local_epochs;
  if (o.epochs) cfg.baseline_epochs = *o.epochs;
  if (o.averaging) {
    if (*o.averaging == "uniform") cfg.averaging = fedavg::AveragingMode::uniform;
    else if (*o.averaging == "sample_weighted") cfg.averaging = fedavg::AveragingMode::sample_weighted;
    else throw fedavg::ConfigError("--averaging: expected uniform or sample_weighted");
  }
  if (o.timeout_ms) cfg.round_timeout = std::chrono::milliseconds(*o.timeout_ms);
  cfg.validate();
  return cfg;
}

int cmd_experiment(const CommonOptions& o) {
  const auto cfg = resolve(o);
  const auto result = fedavg::run_experiment(cfg);
  fedavg::write_experiment_outputs(cfg, result, cfg.out_dir);
  std::cout << "averaging: " << fedavg::to_string(cfg.averaging) << "\n\nAUROC\n"
            << fedavg::to_markdown(result.report, fedavg::Metric::auroc) << "\nAUPRC\n"
            << fedavg::to_markdown(result.report, fedavg::Metric::auprc) << "\nresults written to "
            << cfg.out_dir.string() << "\n";
  return kOk;
}

int cmd_gen_data(const CommonOptions& o, std::optional<std::size_t> clients) {
  auto cfg = resolve(o);
  if (cfg.csv_dir) throw fedavg::ConfigError("gen-data produces synthetic data; --data-dir does not apply");
  if (clients) {
    if (*clients == 0 || *clients > cfg.synthetic.clients.size()) {
      throw fedavg::ConfigError("--clients: must be between 1 and " + std::to_string(cfg.synthetic.clients.size()));
    }
    cfg.synthetic.clients.resize(*clients);
  }
  const auto datasets = fedavg::load_datasets(cfg);
  fedavg::write_client_csvs(datasets, cfg.out_dir);
  for (const auto& ds : datasets) {
    std::cout << ds.client_id << ": train " << ds.train.size() << ", val " << ds.val.size() << ", test "
              << ds.test.size() << "\n";
  }
  return kOk;
}

int cmd_serve(const CommonOptions& o, const std::string& listen, const std::optional<std::string>& ready_file) {
  const auto cfg = resolve(o);
  const auto addr = fedavg::parse_address(listen);
  std::optional<std::filesystem::path> ready;
  if (ready_file) ready = *ready_file;
  const auto result = fedavg::serve(cfg, addr, cfg.out_dir, ready);
  std::cout << "federation finished after " << result.history.size() << " rounds; model written to "
            << (cfg.out_dir / "FL.fmdl").string() << "\n";
  return kOk;
}

int cmd_client(const CommonOptions& o, const std::string& connect, const std::string& client_id) {
  const auto cfg = resolve(o);
  const auto rounds = fedavg::serve_client(cfg, fedavg::parse_address(connect), client_id);
  std::cout << client_id << ": completed " << rounds << " rounds\n";
  return kOk;
}

int cmd_evaluate(const std::string& model_path, const std::string& test_path) {
  const auto model = fedavg::load_model(model_path);
  const auto test = fedavg::load_csv(test_path);
  const auto ev = fedavg::evaluate(model.params, test);
  std::cout << "AUROC: " << fedavg::format_percent(ev.auroc) << "\n"
            << "AUPRC: " << fedavg::format_percent(ev.auprc) << "\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated averaging experiments on non-IID clients"};
  app.require_subcommand(1);

  CommonOptions exp_opts, gen_opts, serve_opts, client_opts;
  auto* experiment = app.add_subcommand("experiment", "Train the per-client, combined and federated models and compare them");
  add_common(experiment, exp_opts);

  auto* gen = app.add_subcommand("gen-data", "Write the synthetic client corpus as CSV");
  add_common(gen, gen_opts);
  std::optional<std::size_t> gen_clients;
  gen->add_option("--clients", gen_clients, "Number of clients to emit");

  auto* serve = app.add_subcommand("serve", "Run the aggregation server over TCP");
  add_common(serve, serve_opts);
  std::string listen = "127.0.0.1:7070";
  std::optional<std::string> ready_file;
  serve->add_option("--listen", listen, "HOST:PORT to listen on (port 0 picks one)");
  serve->add_option("--ready-file", ready_file, "Write the bound port here once listening");

  auto* client = app.add_subcommand("client", "Run one federated client over TCP");
  add_common(client, client_opts);
  std::string connect;
  std::string client_id;
  client->add_option("--connect", connect, "Server HOST:PORT")->required();
  client->add_option("--client-id", client_id, "This client's id")->required();

  auto* evaluate = app.add_subcommand("evaluate", "Print AUROC/AUPRC of a saved model on a test CSV");
  std::string model_path;
  std::string test_path;
  evaluate->add_option("model", model_path, "Model file (.fmdl)")->required()->check(CLI::ExistingFile);
  evaluate->add_option("test", test_path, "Test CSV")->required()->check(CLI::ExistingFile);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfigError;
  }

  try {
    if (*experiment) return cmd_experiment(exp_opts);
    if (*gen) return cmd_gen_data(gen_opts, gen_clients);
    if (*serve) return cmd_serve(serve_opts, listen, ready_file);
    if (*client) return cmd_client(client_opts, connect, client_id);
    if (*evaluate) return cmd_evaluate(model_path, test_path);
  } catch (const fedavg::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const fedavg::ProtocolError& e) {
    std::cerr << "protocol error: " << e.what() << "\n";
    return kProtocolError;
  } catch (const fedavg::TransportError& e) {
    std::cerr << "connection error: " << e.what() << "\n";
    return kProtocolError;
  } catch (const fedavg::UndefinedMetricError& e) {
    std::cerr << "undefined metric: " << e.what() << "\n";
    return kDataError;
  } catch (const fedavg::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kDataError;
  } catch (const fedavg::UsageError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailure;
  }
  return kFailure;
}
