#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <set>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "fedavg/data.hpp"
#include "fedavg/messages.hpp"
#include "fedavg/nn.hpp"
#include "fedavg/params.hpp"
#include "fedavg/transport.hpp"

namespace fedavg {

enum class AveragingMode : std::uint8_t { uniform, sample_weighted };

const char* to_string(AveragingMode mode);

struct FederationConfig {
  std::uint32_t num_rounds = 5;
  std::uint32_t local_epochs = 4;
  AveragingMode averaging = AveragingMode::uniform;
  ModelSpec model;
  // Template for every client; epochs is replaced by local_epochs and the seed
  // by the client's own stream key (see client_seed()).
  TrainConfig train;
  std::vector<std::string> expected_clients;
  Timeout round_timeout;  // nullopt: wait forever
  std::uint64_t seed = 0;

  void validate() const;
};

// Stream key of one client: derived from the federation seed and the client id.
std::uint64_t client_seed(std::uint64_t federation_seed, const std::string& client_id);
// Key for one round of one client, derived from the client's key.
std::uint64_t round_seed(std::uint64_t client_key, std::uint32_t round_index);
// Initial global model for a federation.
ParameterSet initial_global_params(const FederationConfig& cfg);

struct ClientRole {
  std::string client_id;
  ClientDataset dataset;
  ModelSpec model;
  TrainConfig train;  // seed is this client's stream key
};

ClientRole make_client_role(const FederationConfig& cfg, ClientDataset dataset);

/// Aggregates client updates into the next global model.
///
/// Updates are put in client_id order before summation so the result is
/// bitwise independent of arrival order. The mean is accumulated
/// incrementally (m += (x - m) * w / W), which makes identical inputs
/// reproduce themselves exactly; results are clamped into the per-element
/// [min, max] of the inputs.
ParameterSet federated_average(std::span<const ModelUpdate> updates, AveragingMode mode);

// Pluggable local trainer; defaults to train_local.
using LocalTrainer = std::function<TrainResult(const ParameterSet&, const ClientDataset&, const TrainConfig&)>;

/// One client's share of a round: train from the global model for
/// `local_epochs` epochs and package the selected checkpoint.
ModelUpdate client_local_round(const ParameterSet& global, const ClientRole& role, std::uint32_t round_index,
                               std::uint32_t local_epochs, const LocalTrainer& trainer = {});

// ---------------------------------------------------------------------------
// Server state machine

enum class Phase : std::uint8_t { idle, broadcasting, collecting, aggregating, finished };

const char* to_string(Phase phase);

struct RoundRecord {
  std::uint32_t round_index = 0;
  std::vector<ModelUpdate> updates;  // client_id order
  ParameterSet global_params;        // aggregate produced by this round
};

struct ServerState {
  Phase phase = Phase::idle;
  std::uint32_t current_round = 0;
  ParameterSet global_params;
  std::set<std::string> joined;
  std::set<std::string> pending_clients;
  std::vector<ModelUpdate> received;  // this round, arrival order
  std::vector<RoundRecord> history;

  // Fixed for the federation.
  std::uint32_t num_rounds = 0;
  AveragingMode averaging = AveragingMode::uniform;
  ModelSpec model;
  std::vector<std::string> expected_clients;
  std::map<std::string, TrainConfig> client_train;
};

// client_train maps each expected client to the settings sent in its JoinAck.
ServerState make_server_state(const FederationConfig& cfg, ParameterSet initial,
                              std::map<std::string, TrainConfig> client_train);
// Same, deriving each client's settings from cfg.
ServerState make_server_state(const FederationConfig& cfg, ParameterSet initial);

struct JoinEvent {
  std::string client_id;
};
struct BroadcastEvent {};
struct UpdateEvent {
  ModelUpdate update;
};
struct AggregateEvent {};
struct TimeoutEvent {};
struct ClientFailureEvent {
  std::string client_id;
  std::string reason;
};

using ServerEvent = std::variant<JoinEvent, BroadcastEvent, UpdateEvent, AggregateEvent, TimeoutEvent, ClientFailureEvent>;

struct Outbound {
  std::string to;  // client id
  Message message;
};

struct Transition {
  ServerState state;
  std::vector<Outbound> outbound;
};

/// Pure transition function. Phases advance
///
///   Idle --(all joined)--> Broadcasting --> Collecting --(all updates)-->
///   Aggregating --> Broadcasting (next round) ... --> Finished
///
/// Events that are illegal in the current phase, updates from unknown
/// clients, duplicates and wrong-round updates throw ProtocolError; the input
/// state is never modified. A timeout in Idle or Collecting throws
/// MissingClientsError listing the clients not yet heard from.
Transition server_handle(const ServerState& state, const ServerEvent& event);

/// Drives the state machine over a transport until Finished. Each receive
/// waits at most `timeout`. Returns the final state.
ServerState run_server(ServerState state, ServerEndpoint& endpoint, Timeout timeout);

/// Client side: join, train on every GlobalModel received, stop on Shutdown.
/// A local training failure is reported to the server with a Shutdown before
/// being rethrown as ProtocolError. Returns the number of rounds served.
std::uint32_t run_client(ClientChannel& channel, const std::string& client_id, const ClientDataset& dataset,
                         Timeout timeout = std::nullopt, const LocalTrainer& trainer = {});

struct FederationResult {
  ParameterSet final_params;
  std::vector<RoundRecord> history;
};

/// Full federation: server loop in the calling thread, one thread per client,
/// all attached through a transport of the given kind.
FederationResult run_federation(const FederationConfig& cfg, std::span<const ClientRole> clients,
                                TransportKind kind = TransportKind::in_process, const SocketAddress& address = {},
                                const LocalTrainer& trainer = {});

}  // namespace fedavg
