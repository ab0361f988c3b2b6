#pragma once

#include <cstdint>
#include <string>
#include <variant>

#include "fedavg/nn.hpp"
#include "fedavg/params.hpp"

namespace fedavg {

/// What a client returns after one round of local training.
struct ModelUpdate {
  std::string client_id;
  std::uint32_t round_index = 0;
  ParameterSet params;
  std::uint64_t num_train_samples = 0;
  double best_val_loss = 0.0;
  // Local epochs actually run this round.
  std::uint32_t epochs_run = 0;

  friend bool operator==(const ModelUpdate&, const ModelUpdate&) = default;
};

struct JoinRequest {
  std::string client_id;
  friend bool operator==(const JoinRequest&, const JoinRequest&) = default;
};

// Server's reply to a join: the model to train and this client's training
// settings (epochs = local epochs per round, seed = the client's stream key).
struct JoinAck {
  std::string client_id;
  ModelSpec model;
  TrainConfig train;
  friend bool operator==(const JoinAck&, const JoinAck&) = default;
};

struct GlobalModel {
  std::uint32_t round_index = 0;
  ParameterSet params;
  friend bool operator==(const GlobalModel&, const GlobalModel&) = default;
};

struct ClientUpdate {
  ModelUpdate update;
  friend bool operator==(const ClientUpdate&, const ClientUpdate&) = default;
};

struct RoundComplete {
  std::uint32_t round_index = 0;
  friend bool operator==(const RoundComplete&, const RoundComplete&) = default;
};

// Sent by the server when the federation ends, or by a client that has to
// abort (the reason is then reported as that client's failure).
struct Shutdown {
  std::string reason;
  friend bool operator==(const Shutdown&, const Shutdown&) = default;
};

using Message = std::variant<JoinRequest, JoinAck, GlobalModel, ClientUpdate, RoundComplete, Shutdown>;

enum class MessageType : std::uint8_t {
  join_request = 1,
  join_ack = 2,
  global_model = 3,
  client_update = 4,
  round_complete = 5,
  shutdown = 6,
};

MessageType message_type(const Message& m);
const char* message_name(MessageType t);

}  // namespace fedavg
