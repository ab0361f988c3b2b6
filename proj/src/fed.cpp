#include "fedavg/fed.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <exception>
#include <thread>

#include "fedavg/error.hpp"
#include "fedavg/rng.hpp"

namespace fedavg {

const char* to_string(AveragingMode mode) {
  return mode == AveragingMode::uniform ? "uniform" : "sample_weighted";
}

const char* to_string(Phase phase) {
  switch (phase) {
    case Phase::idle: return "Idle";
    case Phase::broadcasting: return "Broadcasting";
    case Phase::collecting: return "Collecting";
    case Phase::aggregating: return "Aggregating";
    case Phase::finished: return "Finished";
  }
  return "?";
}

void FederationConfig::validate() const {
  if (num_rounds == 0) throw UsageError("num_rounds must be positive");
  if (local_epochs == 0) throw UsageError("local_epochs must be positive");
  if (expected_clients.empty()) throw UsageError("federation has no expected clients");
  std::set<std::string> ids;
  for (const auto& id : expected_clients) {
    if (id.empty()) throw UsageError("empty client id");
    if (!ids.insert(id).second) throw UsageError("duplicate expected client '" + id + "'");
  }
  model.validate();
  TrainConfig t = train;
  t.epochs = local_epochs;
  t.validate();
}

std::uint64_t client_seed(std::uint64_t federation_seed, const std::string& client_id) {
  return derive_seed(federation_seed, "client:" + client_id);
}

std::uint64_t round_seed(std::uint64_t client_key, std::uint32_t round_index) {
  return derive_seed(client_key, static_cast<std::uint64_t>(round_index));
}

ParameterSet initial_global_params(const FederationConfig& cfg) {
  return init_params(cfg.model, derive_seed(cfg.seed, "init"));
}

ClientRole make_client_role(const FederationConfig& cfg, ClientDataset dataset) {
  ClientRole role;
  role.client_id = dataset.client_id;
  role.dataset = std::move(dataset);
  role.model = cfg.model;
  role.train = cfg.train;
  role.train.epochs = cfg.local_epochs;
  role.train.seed = client_seed(cfg.seed, role.client_id);
  return role;
}

ParameterSet federated_average(std::span<const ModelUpdate> updates, AveragingMode mode) {
  if (updates.empty()) throw UsageError("federated_average needs at least one update");

  std::vector<const ModelUpdate*> sorted;
  sorted.reserve(updates.size());
  for (const auto& u : updates) sorted.push_back(&u);
  std::sort(sorted.begin(), sorted.end(), [](const auto* a, const auto* b) { return a->client_id < b->client_id; });

  const ModelUpdate& first = *sorted.front();
  for (std::size_t k = 1; k < sorted.size(); ++k) {
    const ModelUpdate& u = *sorted[k];
    if (u.client_id == sorted[k - 1]->client_id) {
      throw ProtocolError("two updates from client '" + u.client_id + "'");
    }
    if (u.round_index != first.round_index) {
      throw ProtocolError("updates from rounds " + std::to_string(first.round_index) + " and " +
                          std::to_string(u.round_index) + " cannot be averaged together");
    }
    require_shape_compatible(first.params, u.params);
  }

  auto weight_of = [&](const ModelUpdate& u) {
    if (mode == AveragingMode::uniform) return 1.0;
    if (u.num_train_samples == 0) throw UsageError("client '" + u.client_id + "' reports zero training samples");
    return static_cast<double>(u.num_train_samples);
  };

  std::vector<Layer> mean = first.params.layers();
  std::vector<Layer> lo = mean;
  std::vector<Layer> hi = mean;
  double total = weight_of(first);
  for (std::size_t k = 1; k < sorted.size(); ++k) {
    const ModelUpdate& u = *sorted[k];
    const double w = weight_of(u);
    total += w;
    const double t = w / total;
    for (std::size_t l = 0; l < mean.size(); ++l) {
      auto& m = mean[l].values;
      const auto& x = u.params.layer(l).values;
      for (std::size_t i = 0; i < m.size(); ++i) {
        const double step = (x[i] - m[i]) * t;
        if (step != 0.0) m[i] += step;
        lo[l].values[i] = std::min(lo[l].values[i], x[i]);
        hi[l].values[i] = std::max(hi[l].values[i], x[i]);
      }
    }
  }
  for (std::size_t l = 0; l < mean.size(); ++l) {
    auto& m = mean[l].values;
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = std::clamp(m[i], lo[l].values[i], hi[l].values[i]);
  }
  return ParameterSet(std::move(mean));
}

ModelUpdate client_local_round(const ParameterSet& global, const ClientRole& role, std::uint32_t round_index,
                               std::uint32_t local_epochs, const LocalTrainer& trainer) {
  if (local_epochs == 0) throw UsageError("local_epochs must be positive");
  TrainConfig cfg = role.train;
  cfg.epochs = local_epochs;
  cfg.seed = round_seed(role.train.seed, round_index);

  TrainResult result;
  try {
    if (infer_spec(global) != role.model) {
      throw StructuralError("global model does not match the agreed model spec");
    }
    result = trainer ? trainer(global, role.dataset, cfg) : train_local(global, role.dataset, cfg);
    result.best.params.validate();
  } catch (const UsageError& e) {
    throw ProtocolError("client '" + role.client_id + "' failed in round " + std::to_string(round_index) + ": " + e.what());
  } catch (const StructuralError& e) {
    throw ProtocolError("client '" + role.client_id + "' failed in round " + std::to_string(round_index) + ": " + e.what());
  }

  ModelUpdate update;
  update.client_id = role.client_id;
  update.round_index = round_index;
  update.params = std::move(result.best.params);
  update.num_train_samples = role.dataset.train.size();
  update.best_val_loss = result.best.val_loss;
  update.epochs_run = static_cast<std::uint32_t>(result.history.size());
  return update;
}

// ---------------------------------------------------------------------------
// Server state machine

ServerState make_server_state(const FederationConfig& cfg, ParameterSet initial,
                              std::map<std::string, TrainConfig> client_train) {
  cfg.validate();
  require_shape_compatible(initial, init_params(cfg.model, 0));
  for (const auto& id : cfg.expected_clients) {
    if (!client_train.count(id)) throw UsageError("no training settings for client '" + id + "'");
  }
  ServerState s;
  s.global_params = std::move(initial);
  s.num_rounds = cfg.num_rounds;
  s.averaging = cfg.averaging;
  s.model = cfg.model;
  s.expected_clients = cfg.expected_clients;
  std::sort(s.expected_clients.begin(), s.expected_clients.end());
  s.client_train = std::move(client_train);
  return s;
}

ServerState make_server_state(const FederationConfig& cfg, ParameterSet initial) {
  std::map<std::string, TrainConfig> train;
  for (const auto& id : cfg.expected_clients) {
    TrainConfig t = cfg.train;
    t.epochs = cfg.local_epochs;
    t.seed = client_seed(cfg.seed, id);
    train.emplace(id, t);
  }
  return make_server_state(cfg, std::move(initial), std::move(train));
}

namespace {

[[noreturn]] void illegal(const ServerState& s, const char* event) {
  throw ProtocolError(std::string(event) + " is not allowed in phase " + to_string(s.phase));
}

bool is_expected(const ServerState& s, const std::string& id) {
  return std::binary_search(s.expected_clients.begin(), s.expected_clients.end(), id);
}

std::string join_names(const std::vector<std::string>& names) {
  std::string out;
  for (const auto& n : names) out += (out.empty() ? "" : ", ") + n;
  return out;
}

}  // namespace

Transition server_handle(const ServerState& state, const ServerEvent& event) {
  Transition t{state, {}};
  ServerState& s = t.state;

  std::visit(
      [&](const auto& ev) {
        using E = std::decay_t<decltype(ev)>;
        if constexpr (std::is_same_v<E, JoinEvent>) {
          if (s.phase != Phase::idle) illegal(state, "join");
          if (!is_expected(s, ev.client_id)) throw ProtocolError("unknown client '" + ev.client_id + "' tried to join");
          if (!s.joined.insert(ev.client_id).second) throw ProtocolError("client '" + ev.client_id + "' joined twice");
          t.outbound.push_back({ev.client_id, JoinAck{ev.client_id, s.model, s.client_train.at(ev.client_id)}});
          if (s.joined.size() == s.expected_clients.size()) s.phase = Phase::broadcasting;
        } else if constexpr (std::is_same_v<E, BroadcastEvent>) {
          if (s.phase != Phase::broadcasting) illegal(state, "broadcast");
          for (const auto& id : s.expected_clients) {
            t.outbound.push_back({id, GlobalModel{s.current_round, s.global_params}});
          }
          s.pending_clients = std::set<std::string>(s.expected_clients.begin(), s.expected_clients.end());
          s.received.clear();
          s.phase = Phase::collecting;
        } else if constexpr (std::is_same_v<E, UpdateEvent>) {
          const ModelUpdate& u = ev.update;
          if (s.phase != Phase::collecting) illegal(state, "update");
          if (!is_expected(s, u.client_id)) throw ProtocolError("update from unknown client '" + u.client_id + "'");
          if (u.round_index != s.current_round) {
            throw ProtocolError("client '" + u.client_id + "' sent an update for round " + std::to_string(u.round_index) +
                                " during round " + std::to_string(s.current_round));
          }
          if (!s.pending_clients.count(u.client_id)) {
            throw ProtocolError("duplicate update from client '" + u.client_id + "' in round " +
                                std::to_string(s.current_round));
          }
          if (!u.params.shape_compatible(s.global_params)) {
            throw ProtocolError("update from client '" + u.client_id + "' does not match the global model shape");
          }
          try {
            u.params.validate();
          } catch (const StructuralError& e) {
            throw ProtocolError("update from client '" + u.client_id + "': " + e.what());
          }
          if (u.num_train_samples == 0) throw ProtocolError("client '" + u.client_id + "' reports zero training samples");
          s.received.push_back(u);
          s.pending_clients.erase(u.client_id);
          if (s.pending_clients.empty()) s.phase = Phase::aggregating;
        } else if constexpr (std::is_same_v<E, AggregateEvent>) {
          if (s.phase != Phase::aggregating) illegal(state, "aggregate");
          RoundRecord record;
          record.round_index = s.current_round;
          record.global_params = federated_average(s.received, s.averaging);
          record.updates = std::move(s.received);
          std::sort(record.updates.begin(), record.updates.end(),
                    [](const auto& a, const auto& b) { return a.client_id < b.client_id; });
          s.received.clear();
          s.global_params = record.global_params;
          s.history.push_back(std::move(record));
          for (const auto& id : s.expected_clients) t.outbound.push_back({id, RoundComplete{s.current_round}});
          if (s.current_round + 1 == s.num_rounds) {
            s.phase = Phase::finished;
            for (const auto& id : s.expected_clients) t.outbound.push_back({id, Shutdown{"federation complete"}});
          } else {
            ++s.current_round;
            s.phase = Phase::broadcasting;
          }
        } else if constexpr (std::is_same_v<E, TimeoutEvent>) {
          std::vector<std::string> missing;
          if (s.phase == Phase::idle) {
            for (const auto& id : s.expected_clients) {
              if (!s.joined.count(id)) missing.push_back(id);
            }
            throw MissingClientsError("timed out waiting for clients to join: " + join_names(missing), missing);
          }
          if (s.phase == Phase::collecting) {
            missing.assign(s.pending_clients.begin(), s.pending_clients.end());
            throw MissingClientsError("round " + std::to_string(s.current_round) +
                                          " timed out waiting for updates from: " + join_names(missing),
                                      missing);
          }
          illegal(state, "timeout");
        } else if constexpr (std::is_same_v<E, ClientFailureEvent>) {
          if (s.phase == Phase::finished) return;
          throw ProtocolError("client '" + ev.client_id + "' failed: " + ev.reason);
        }
      },
      event);
  return t;
}

ServerState run_server(ServerState state, ServerEndpoint& endpoint, Timeout timeout) {
  using Clock = std::chrono::steady_clock;
  std::map<std::string, ConnectionId> conn_of;
  std::map<ConnectionId, std::string> id_of;

  auto dispatch = [&](const std::vector<Outbound>& out) {
    for (const auto& o : out) endpoint.send(conn_of.at(o.to), o.message);
  };
  auto apply = [&](const ServerEvent& ev) {
    Transition t = server_handle(state, ev);
    state = std::move(t.state);
    dispatch(t.outbound);
  };

  std::optional<Clock::time_point> deadline;
  Phase deadline_phase = Phase::finished;
  std::uint32_t deadline_round = 0;

  try {
    while (state.phase != Phase::finished) {
      if (state.phase == Phase::broadcasting) {
        apply(BroadcastEvent{});
        continue;
      }
      if (state.phase == Phase::aggregating) {
        apply(AggregateEvent{});
        continue;
      }
      // Idle or Collecting: one deadline per phase occurrence.
      if (deadline_phase != state.phase || deadline_round != state.current_round) {
        deadline_phase = state.phase;
        deadline_round = state.current_round;
        deadline = timeout ? std::optional(Clock::now() + *timeout) : std::nullopt;
      }
      Timeout wait;
      if (deadline) {
        wait = std::max(std::chrono::milliseconds(0),
                        std::chrono::duration_cast<std::chrono::milliseconds>(*deadline - Clock::now()));
      }
      auto inbound = endpoint.receive(wait);
      if (!inbound) {
        apply(TimeoutEvent{});
        continue;
      }
      const ConnectionId conn = inbound->connection;
      const auto bound = id_of.find(conn);
      if (!inbound->message) {
        if (bound != id_of.end()) apply(ClientFailureEvent{bound->second, "connection closed"});
        continue;
      }
      Message& msg = *inbound->message;
      if (auto* join = std::get_if<JoinRequest>(&msg)) {
        if (bound != id_of.end()) throw ProtocolError(endpoint.describe(conn) + " sent a second JoinRequest");
        try {
          Transition t = server_handle(state, JoinEvent{join->client_id});
          conn_of[join->client_id] = conn;
          id_of[conn] = join->client_id;
          state = std::move(t.state);
          dispatch(t.outbound);
        } catch (const ProtocolError& e) {
          // Turn away the stray connection; the federation carries on.
          endpoint.send(conn, Shutdown{e.what()});
        }
      } else if (auto* upd = std::get_if<ClientUpdate>(&msg)) {
        if (bound == id_of.end() || bound->second != upd->update.client_id) {
          throw ProtocolError(endpoint.describe(conn) + " sent an update for '" + upd->update.client_id +
                              "' without joining as that client");
        }
        apply(UpdateEvent{std::move(upd->update)});
      } else if (auto* bye = std::get_if<Shutdown>(&msg)) {
        apply(ClientFailureEvent{bound != id_of.end() ? bound->second : endpoint.describe(conn), bye->reason});
      } else {
        throw ProtocolError(endpoint.describe(conn) + " sent unexpected " + message_name(message_type(msg)));
      }
    }
  } catch (const Error& e) {
    for (const auto& [id, conn] : conn_of) {
      try {
        endpoint.send(conn, Shutdown{e.what()});
      } catch (const TransportError&) {
      }
    }
    throw;
  }
  return state;
}

std::uint32_t run_client(ClientChannel& channel, const std::string& client_id, const ClientDataset& dataset,
                         Timeout timeout, const LocalTrainer& trainer) {
  channel.send(JoinRequest{client_id});
  Message first = channel.receive(timeout);
  if (auto* bye = std::get_if<Shutdown>(&first)) {
    throw ProtocolError("server refused client '" + client_id + "': " + bye->reason);
  }
  auto* ack = std::get_if<JoinAck>(&first);
  if (!ack) throw ProtocolError("expected JoinAck, got " + std::string(message_name(message_type(first))));
  if (ack->client_id != client_id) throw ProtocolError("JoinAck addressed to '" + ack->client_id + "'");

  ClientRole role{client_id, dataset, ack->model, ack->train};
  const std::uint32_t local_epochs = ack->train.epochs;
  std::uint32_t rounds = 0;
  while (true) {
    Message m = channel.receive(timeout);
    if (auto* g = std::get_if<GlobalModel>(&m)) {
      ModelUpdate update;
      try {
        update = client_local_round(g->params, role, g->round_index, local_epochs, trainer);
      } catch (const Error& e) {
        channel.send(Shutdown{e.what()});
        throw ProtocolError(e.what());
      }
      channel.send(ClientUpdate{std::move(update)});
      ++rounds;
    } else if (std::holds_alternative<RoundComplete>(m)) {
      continue;
    } else if (auto* bye = std::get_if<Shutdown>(&m)) {
      if (bye->reason != "federation complete") {
        throw ProtocolError("server aborted the federation: " + bye->reason);
      }
      return rounds;
    } else {
      throw ProtocolError("client '" + client_id + "' got unexpected " + message_name(message_type(m)));
    }
  }
}

FederationResult run_federation(const FederationConfig& cfg, std::span<const ClientRole> clients, TransportKind kind,
                                const SocketAddress& address, const LocalTrainer& trainer) {
  cfg.validate();
  std::map<std::string, TrainConfig> client_train;
  for (const auto& role : clients) {
    if (role.model != cfg.model) throw UsageError("client '" + role.client_id + "' uses a different model spec");
    TrainConfig t = role.train;
    t.epochs = cfg.local_epochs;
    if (!client_train.emplace(role.client_id, t).second) {
      throw UsageError("client '" + role.client_id + "' listed twice");
    }
  }
  for (const auto& id : cfg.expected_clients) {
    if (!client_train.count(id)) throw UsageError("expected client '" + id + "' has no role");
  }
  if (client_train.size() != cfg.expected_clients.size()) {
    throw UsageError("clients do not match the expected client list");
  }

  ServerState state = make_server_state(cfg, initial_global_params(cfg), std::move(client_train));
  TransportPair pair = transport_pair(kind, address);

  std::vector<std::exception_ptr> client_errors(clients.size());
  std::vector<std::thread> threads;
  std::vector<std::unique_ptr<ClientChannel>> channels;
  for (std::size_t i = 0; i < clients.size(); ++i) channels.push_back(pair.connect());
  for (std::size_t i = 0; i < clients.size(); ++i) {
    threads.emplace_back([&, i] {
      try {
        run_client(*channels[i], clients[i].client_id, clients[i].dataset, std::nullopt, trainer);
      } catch (...) {
        client_errors[i] = std::current_exception();
      }
    });
  }

  std::exception_ptr server_error;
  try {
    state = run_server(std::move(state), *pair.server, cfg.round_timeout);
  } catch (...) {
    server_error = std::current_exception();
  }
  // Closing the server endpoint releases any client still waiting on it.
  pair.server.reset();
  for (auto& th : threads) th.join();
  if (server_error) std::rethrow_exception(server_error);
  for (auto& e : client_errors) {
    if (e) std::rethrow_exception(e);
  }
  return {state.global_params, std::move(state.history)};
}

}  // namespace fedavg
