#include "fedavg/experiment.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include "json.hpp"

#include "fedavg/codec.hpp"
#include "fedavg/error.hpp"
#include "fedavg/rng.hpp"

namespace fedavg {

using nlohmann::json;

std::vector<std::string> ExperimentConfig::client_ids() const {
  if (csv_dir) return csv_clients;
  std::vector<std::string> ids;
  for (const auto& c : synthetic.clients) ids.push_back(c.client_id);
  return ids;
}

PartitionSpec ExperimentConfig::resolved_partition() const {
  PartitionSpec spec = synthetic;
  spec.seed = data_seed.value_or(seed);
  return spec;
}

void ExperimentConfig::validate() const {
  try {
    if (csv_dir) {
      if (csv_clients.empty()) throw ConfigError("data.clients: list the client ids found in data.csv_dir");
    } else {
      resolved_partition().validate();
    }
    ModelSpec{1, hidden_dims}.validate();
    TrainConfig t = train;
    t.epochs = std::max<std::uint32_t>(1, baseline_epochs);
    t.validate();
  } catch (const UsageError& e) {
    throw ConfigError(e.what());
  }
  if (baseline_epochs == 0) throw ConfigError("training.baseline_epochs: must be positive");
  if (rounds == 0) throw ConfigError("federation.rounds: must be positive");
  if (local_epochs == 0) throw ConfigError("federation.local_epochs: must be positive");
  if (round_timeout.count() <= 0) throw ConfigError("federation.round_timeout_ms: must be positive");
  const auto ids = client_ids();
  if (std::set<std::string>(ids.begin(), ids.end()).size() != ids.size()) {
    throw ConfigError("data.clients: client ids must be unique");
  }
}

// ---------------------------------------------------------------------------
// Config (de)serialization

namespace {

void check_keys(const json& obj, const std::string& path, std::initializer_list<const char*> allowed) {
  if (!obj.is_object()) throw ConfigError((path.empty() ? "config" : path) + ": expected an object");
  for (const auto& [key, value] : obj.items()) {
    if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; })) {
      throw ConfigError((path.empty() ? "" : path + ".") + key + ": unknown field");
    }
  }
}

std::string field(const std::string& path, const char* key) { return path.empty() ? key : path + "." + key; }

template <typename T>
void read_uint(const json& obj, const std::string& path, const char* key, T& out) {
  if (!obj.contains(key)) return;
  const auto& v = obj.at(key);
  if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<std::int64_t>() >= 0)) {
    throw ConfigError(field(path, key) + ": expected a non-negative integer");
  }
  const auto raw = v.get<std::uint64_t>();
  if (raw > std::numeric_limits<T>::max()) throw ConfigError(field(path, key) + ": value too large");
  out = static_cast<T>(raw);
}

void read_real(const json& obj, const std::string& path, const char* key, double& out) {
  if (!obj.contains(key)) return;
  const auto& v = obj.at(key);
  if (!v.is_number()) throw ConfigError(field(path, key) + ": expected a number");
  out = v.get<double>();
}

void read_string(const json& obj, const std::string& path, const char* key, std::string& out) {
  if (!obj.contains(key)) return;
  const auto& v = obj.at(key);
  if (!v.is_string()) throw ConfigError(field(path, key) + ": expected a string");
  out = v.get<std::string>();
}

std::vector<double> read_real_list(const json& v, const std::string& where) {
  if (v.is_number()) return {v.get<double>()};
  if (!v.is_array()) throw ConfigError(where + ": expected a number or a list of numbers");
  std::vector<double> out;
  for (const auto& x : v) {
    if (!x.is_number()) throw ConfigError(where + ": expected numbers");
    out.push_back(x.get<double>());
  }
  return out;
}

CheckpointPolicy parse_checkpoint(const std::string& s, const std::string& where) {
  if (s == "best_validation") return CheckpointPolicy::best_validation;
  if (s == "final_epoch") return CheckpointPolicy::final_epoch;
  throw ConfigError(where + ": expected \"best_validation\" or \"final_epoch\"");
}

const char* checkpoint_name(CheckpointPolicy p) {
  return p == CheckpointPolicy::best_validation ? "best_validation" : "final_epoch";
}

AveragingMode parse_averaging(const std::string& s, const std::string& where) {
  if (s == "uniform") return AveragingMode::uniform;
  if (s == "sample_weighted") return AveragingMode::sample_weighted;
  throw ConfigError(where + ": expected \"uniform\" or \"sample_weighted\"");
}

ClientPartition parse_partition(const json& c, const std::string& path) {
  check_keys(c, path, {"id", "total", "positives", "train", "val", "test", "feature_shift", "feature_scale", "site_effect"});
  ClientPartition p;
  read_string(c, path, "id", p.client_id);
  if (p.client_id.empty()) throw ConfigError(path + ".id: required");
  read_uint(c, path, "total", p.total);
  read_uint(c, path, "positives", p.positives);
  read_uint(c, path, "train", p.splits.train);
  read_uint(c, path, "val", p.splits.val);
  read_uint(c, path, "test", p.splits.test);
  if (c.contains("feature_shift")) p.feature_shift = read_real_list(c.at("feature_shift"), path + ".feature_shift");
  read_real(c, path, "feature_scale", p.feature_scale);
  read_real(c, path, "site_effect", p.site_effect);
  return p;
}

}  // namespace

ExperimentConfig parse_config(const std::string& json_text) {
  json root;
  try {
    root = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  ExperimentConfig cfg;
  check_keys(root, "", {"seed", "model", "data", "training", "federation", "output"});
  read_uint(root, "", "seed", cfg.seed);
  if (root.contains("output")) {
    std::string out;
    read_string(root, "", "output", out);
    cfg.out_dir = out;
  }

  if (root.contains("model")) {
    const auto& m = root.at("model");
    check_keys(m, "model", {"hidden_dims"});
    if (m.contains("hidden_dims")) {
      const auto& h = m.at("hidden_dims");
      if (!h.is_array()) throw ConfigError("model.hidden_dims: expected a list of positive integers");
      cfg.hidden_dims.clear();
      for (const auto& x : h) {
        if (!x.is_number_unsigned() || x.get<std::uint64_t>() == 0) {
          throw ConfigError("model.hidden_dims: expected a list of positive integers");
        }
        cfg.hidden_dims.push_back(x.get<std::size_t>());
      }
    }
  }

  if (root.contains("data")) {
    const auto& d = root.at("data");
    check_keys(d, "data", {"seed", "csv_dir", "clients", "feature_dim", "class_mean_separation"});
    if (d.contains("seed")) {
      std::uint64_t s = 0;
      read_uint(d, "data", "seed", s);
      cfg.data_seed = s;
    }
    read_uint(d, "data", "feature_dim", cfg.synthetic.feature_dim);
    read_real(d, "data", "class_mean_separation", cfg.synthetic.class_mean_separation);
    if (d.contains("csv_dir")) {
      std::string dir;
      read_string(d, "data", "csv_dir", dir);
      cfg.csv_dir = dir;
    }
    if (d.contains("clients")) {
      const auto& list = d.at("clients");
      if (!list.is_array()) throw ConfigError("data.clients: expected a list");
      if (cfg.csv_dir) {
        for (std::size_t i = 0; i < list.size(); ++i) {
          if (!list[i].is_string()) throw ConfigError("data.clients[" + std::to_string(i) + "]: expected a client id");
          cfg.csv_clients.push_back(list[i].get<std::string>());
        }
      } else {
        cfg.synthetic.clients.clear();
        for (std::size_t i = 0; i < list.size(); ++i) {
          cfg.synthetic.clients.push_back(parse_partition(list[i], "data.clients[" + std::to_string(i) + "]"));
        }
      }
    }
  }

  if (root.contains("training")) {
    const auto& t = root.at("training");
    check_keys(t, "training", {"learning_rate", "batch_size", "adam_beta1", "adam_beta2", "adam_epsilon",
                               "baseline_epochs", "checkpoint", "baseline_checkpoint"});
    read_real(t, "training", "learning_rate", cfg.train.learning_rate);
    read_uint(t, "training", "batch_size", cfg.train.batch_size);
    read_real(t, "training", "adam_beta1", cfg.train.adam_beta1);
    read_real(t, "training", "adam_beta2", cfg.train.adam_beta2);
    read_real(t, "training", "adam_epsilon", cfg.train.adam_epsilon);
    read_uint(t, "training", "baseline_epochs", cfg.baseline_epochs);
    if (t.contains("checkpoint")) {
      std::string s;
      read_string(t, "training", "checkpoint", s);
      cfg.train.checkpoint = parse_checkpoint(s, "training.checkpoint");
    }
    if (t.contains("baseline_checkpoint")) {
      std::string s;
      read_string(t, "training", "baseline_checkpoint", s);
      cfg.baseline_checkpoint = parse_checkpoint(s, "training.baseline_checkpoint");
    }
  }

  if (root.contains("federation")) {
    const auto& f = root.at("federation");
    check_keys(f, "federation", {"rounds", "local_epochs", "averaging", "round_timeout_ms"});
    read_uint(f, "federation", "rounds", cfg.rounds);
    read_uint(f, "federation", "local_epochs", cfg.local_epochs);
    if (f.contains("averaging")) {
      std::string s;
      read_string(f, "federation", "averaging", s);
      cfg.averaging = parse_averaging(s, "federation.averaging");
    }
    if (f.contains("round_timeout_ms")) {
      std::uint64_t ms = 0;
      read_uint(f, "federation", "round_timeout_ms", ms);
      cfg.round_timeout = std::chrono::milliseconds(ms);
    }
  }
  cfg.validate();
  return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str());
}

namespace {

json config_json(const ExperimentConfig& cfg) {
  json root;
  root["seed"] = cfg.seed;
  root["model"]["hidden_dims"] = cfg.hidden_dims;
  json data;
  if (cfg.data_seed) data["seed"] = *cfg.data_seed;
  if (cfg.csv_dir) {
    data["csv_dir"] = cfg.csv_dir->string();
    data["clients"] = cfg.csv_clients;
  } else {
    data["feature_dim"] = cfg.synthetic.feature_dim;
    data["class_mean_separation"] = cfg.synthetic.class_mean_separation;
    json clients = json::array();
    for (const auto& c : cfg.synthetic.clients) {
      clients.push_back({{"id", c.client_id},
                         {"total", c.total},
                         {"positives", c.positives},
                         {"train", c.splits.train},
                         {"val", c.splits.val},
                         {"test", c.splits.test},
                         {"feature_shift", c.feature_shift},
                         {"feature_scale", c.feature_scale},
                         {"site_effect", c.site_effect}});
    }
    data["clients"] = std::move(clients);
  }
  root["data"] = std::move(data);
  root["training"] = {{"learning_rate", cfg.train.learning_rate},
                      {"batch_size", cfg.train.batch_size},
                      {"adam_beta1", cfg.train.adam_beta1},
                      {"adam_beta2", cfg.train.adam_beta2},
                      {"adam_epsilon", cfg.train.adam_epsilon},
                      {"baseline_epochs", cfg.baseline_epochs},
                      {"checkpoint", checkpoint_name(cfg.train.checkpoint)},
                      {"baseline_checkpoint", checkpoint_name(cfg.baseline_checkpoint)}};
  root["federation"] = {{"rounds", cfg.rounds},
                        {"local_epochs", cfg.local_epochs},
                        {"averaging", to_string(cfg.averaging)},
                        {"round_timeout_ms", cfg.round_timeout.count()}};
  root["output"] = cfg.out_dir.string();
  return root;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace

std::string config_to_json(const ExperimentConfig& cfg) { return config_json(cfg).dump(2) + "\n"; }

std::string config_hash(const ExperimentConfig& cfg) {
  // The output location does not affect results.
  json j = config_json(cfg);
  j.erase("output");
  return hex64(fnv1a64(j.dump()));
}

// ---------------------------------------------------------------------------
// Data

ClientDataset load_client_dataset(const ExperimentConfig& cfg, const std::string& client_id) {
  if (cfg.csv_dir) {
    ClientDataset ds;
    ds.client_id = client_id;
    ds.train = load_csv(*cfg.csv_dir / (client_id + "_train.csv"));
    ds.val = load_csv(*cfg.csv_dir / (client_id + "_val.csv"));
    ds.test = load_csv(*cfg.csv_dir / (client_id + "_test.csv"));
    return ds;
  }
  PartitionSpec spec = cfg.resolved_partition();
  const auto it = std::find_if(spec.clients.begin(), spec.clients.end(),
                               [&](const auto& c) { return c.client_id == client_id; });
  if (it == spec.clients.end()) throw ConfigError("client '" + client_id + "' is not in the data configuration");
  // Generating one client alone yields the same data as generating all of them.
  spec.clients = {*it};
  return std::move(generate_synthetic(spec).front());
}

std::vector<ClientDataset> load_datasets(const ExperimentConfig& cfg) {
  if (!cfg.csv_dir) return generate_synthetic(cfg.resolved_partition());
  std::vector<ClientDataset> out;
  for (const auto& id : cfg.csv_clients) out.push_back(load_client_dataset(cfg, id));
  const std::size_t dim = out.front().feature_dim();
  for (const auto& ds : out) {
    if (ds.feature_dim() != dim) throw DataError("client '" + ds.client_id + "' has a different feature dimension");
  }
  return out;
}

void write_client_csvs(std::span<const ClientDataset> datasets, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw DataError("cannot create directory " + dir.string() + ": " + ec.message());
  for (const auto& ds : datasets) {
    write_csv(dir / (ds.client_id + "_train.csv"), ds.train);
    write_csv(dir / (ds.client_id + "_val.csv"), ds.val);
    write_csv(dir / (ds.client_id + "_test.csv"), ds.test);
  }
}

FederationConfig federation_config(const ExperimentConfig& cfg, std::size_t input_dim) {
  FederationConfig f;
  f.num_rounds = cfg.rounds;
  f.local_epochs = cfg.local_epochs;
  f.averaging = cfg.averaging;
  f.model = ModelSpec{input_dim, cfg.hidden_dims, Activation::relu};
  f.train = cfg.train;
  f.expected_clients = cfg.client_ids();
  f.seed = cfg.seed;
  return f;
}

std::string display_name(const std::string& client_id) {
  std::string out = client_id;
  if (!out.empty()) out[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(out[0])));
  return out;
}

std::vector<NamedTestSet> test_sets_of(std::span<const ClientDataset> datasets) {
  std::vector<NamedTestSet> out;
  for (const auto& ds : datasets) out.push_back({display_name(ds.client_id), ds.test});
  return out;
}

MetricsReport fl_report(const ParameterSet& fl_params, std::span<const NamedTestSet> test_sets) {
  const NamedModel fl{"FL", fl_params};
  return cross_eval_matrix(std::span(&fl, 1), test_sets);
}

// ---------------------------------------------------------------------------
// Experiment

ExperimentResult run_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  const auto datasets = load_datasets(cfg);
  const std::size_t dim = datasets.front().feature_dim();
  const FederationConfig fed_cfg = federation_config(cfg, dim);
  const ParameterSet init = initial_global_params(fed_cfg);

  auto baseline_cfg = [&](const std::string& label) {
    TrainConfig t = cfg.train;
    t.epochs = cfg.baseline_epochs;
    t.checkpoint = cfg.baseline_checkpoint;
    t.seed = derive_seed(cfg.seed, label);
    return t;
  };

  ExperimentResult out;
  for (const auto& ds : datasets) {
    out.baselines.push_back(
        {display_name(ds.client_id), train_local(init, ds, baseline_cfg("individual:" + ds.client_id))});
  }
  const ClientDataset pooled = combine(datasets);
  out.baselines.push_back({"Combined", train_local(init, pooled, baseline_cfg("combined"))});

  std::vector<ClientRole> roles;
  for (const auto& ds : datasets) roles.push_back(make_client_role(fed_cfg, ds));
  out.federation = run_federation(fed_cfg, roles, TransportKind::in_process);

  out.test_sets = test_sets_of(datasets);
  for (std::size_t i = 0; i < datasets.size(); ++i) out.models.push_back({out.baselines[i].name, out.baselines[i].result.best.params});
  out.models.push_back({"FL", out.federation.final_params});
  out.models.push_back({"Combined", out.baselines.back().result.best.params});
  out.report = cross_eval_matrix(out.models, out.test_sets);

  for (const auto& round : out.federation.history) {
    for (const auto& test : out.test_sets) {
      out.round_metrics.push_back({round.round_index, test.name, evaluate(round.global_params, test.examples)});
    }
  }
  return out;
}

namespace {

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw Error("failed writing " + path.string());
}

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string updates_csv(const std::vector<RoundRecord>& history) {
  std::string out = "round,client_id,num_train_samples,best_val_loss,epochs_run\n";
  for (const auto& r : history) {
    for (const auto& u : r.updates) {
      out += std::to_string(r.round_index) + "," + u.client_id + "," + std::to_string(u.num_train_samples) + "," +
             num(u.best_val_loss) + "," + std::to_string(u.epochs_run) + "\n";
    }
  }
  return out;
}

void write_tables(const MetricsReport& report, const std::filesystem::path& dir) {
  write_text(dir / "auroc.csv", to_csv(report, Metric::auroc));
  write_text(dir / "auprc.csv", to_csv(report, Metric::auprc));
  write_text(dir / "auroc.md", to_markdown(report, Metric::auroc));
  write_text(dir / "auprc.md", to_markdown(report, Metric::auprc));
}

std::string params_fingerprint(const ParameterSet& p) {
  const Bytes bytes = encode_global_model_payload(GlobalModel{0, p});
  return hex64(fnv1a64(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size())));
}

void make_dir(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw Error("cannot create directory " + dir.string() + ": " + ec.message());
}

}  // namespace

void write_experiment_outputs(const ExperimentConfig& cfg, const ExperimentResult& result,
                              const std::filesystem::path& dir) {
  make_dir(dir / "models");
  write_tables(result.report, dir);

  std::string history = "round,test_set,auroc,auprc\n";
  for (const auto& r : result.round_metrics) {
    history += std::to_string(r.round_index) + "," + r.test_set + "," + num(r.eval.auroc) + "," + num(r.eval.auprc) + "\n";
  }
  write_text(dir / "fl_history.csv", history);
  write_text(dir / "fl_updates.csv", updates_csv(result.federation.history));

  std::string baselines = "model,epochs_run,best_epoch,best_val_loss,final_train_loss\n";
  for (const auto& b : result.baselines) {
    baselines += b.name + "," + std::to_string(b.result.history.size()) + "," +
                 std::to_string(b.result.best.epoch_index) + "," + num(b.result.best.val_loss) + "," +
                 num(b.result.history.back().train_loss) + "\n";
  }
  write_text(dir / "baselines.csv", baselines);

  json manifest;
  manifest["config"] = json::parse(config_to_json(cfg));
  manifest["config_hash"] = config_hash(cfg);
  manifest["seed"] = cfg.seed;
  manifest["data_seed"] = cfg.csv_dir ? json(nullptr) : json(cfg.resolved_partition().seed);
  manifest["averaging"] = to_string(cfg.averaging);
  manifest["rounds_completed"] = result.federation.history.size();
  json models = json::object();
  for (const auto& m : result.models) {
    const std::string file = "models/" + m.name + ".fmdl";
    save_model(dir / file, m.params);
    models[m.name] = {{"file", file}, {"fingerprint", params_fingerprint(m.params)}};
  }
  manifest["models"] = std::move(models);
  manifest["outputs"] = {"auroc.csv", "auprc.csv", "auroc.md", "auprc.md", "fl_history.csv", "fl_updates.csv",
                         "baselines.csv"};
  write_text(dir / "manifest.json", manifest.dump(2) + "\n");
}

FederationResult serve(const ExperimentConfig& cfg, const SocketAddress& listen, const std::filesystem::path& out_dir,
                       const std::optional<std::filesystem::path>& ready_file) {
  cfg.validate();
  // The server needs the feature dimension and, for reporting, the test splits.
  std::vector<ClientDataset> datasets;
  std::size_t dim = 0;
  try {
    datasets = load_datasets(cfg);
    dim = datasets.front().feature_dim();
  } catch (const DataError&) {
    if (cfg.csv_dir) throw;
  }
  if (dim == 0) dim = cfg.synthetic.feature_dim;

  FederationConfig fed_cfg = federation_config(cfg, dim);
  fed_cfg.round_timeout = cfg.round_timeout;
  ServerState state = make_server_state(fed_cfg, initial_global_params(fed_cfg));

  auto endpoint = listen_socket(listen);
  if (ready_file) {
    auto tmp = *ready_file;
    tmp += ".tmp";
    write_text(tmp, std::to_string(bound_port(*endpoint)) + "\n");
    std::filesystem::rename(tmp, *ready_file);
  }
  state = run_server(std::move(state), *endpoint, fed_cfg.round_timeout);

  make_dir(out_dir);
  save_model(out_dir / "FL.fmdl", state.global_params, state.num_rounds);
  write_text(out_dir / "fl_updates.csv", updates_csv(state.history));
  if (!datasets.empty()) write_tables(fl_report(state.global_params, test_sets_of(datasets)), out_dir);
  return {state.global_params, std::move(state.history)};
}

std::uint32_t serve_client(const ExperimentConfig& cfg, const SocketAddress& server, const std::string& client_id) {
  cfg.validate();
  const ClientDataset data = load_client_dataset(cfg, client_id);
  auto channel = connect_socket(server);
  return run_client(*channel, client_id, data, cfg.round_timeout * 2);
}

}  // namespace fedavg
