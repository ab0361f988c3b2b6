#include <gtest/gtest.h>

#include <algorithm>
#include <chrono>
#include <deque>
#include <map>
#include <random>
#include <set>
#include <thread>

#include "fed_support.hpp"
#include "fedavg/error.hpp"
#include "fedavg/fed.hpp"
#include "oracles.hpp"

using fedavg::AveragingMode;
using fedavg::ModelUpdate;
using fedavg::ParameterSet;
using fedavg::Phase;

namespace {

ModelUpdate upd(const std::string& id, std::vector<double> w, std::uint64_t n = 1, std::uint32_t round = 0) {
  ModelUpdate u;
  u.client_id = id;
  u.round_index = round;
  u.params = ParameterSet({fedavg::Layer{"w", std::move(w)}});
  u.num_train_samples = n;
  u.epochs_run = 1;
  return u;
}

}  // namespace

// ---------------------------------------------------------------------------
// federated_average

TEST(FederatedAverage, Examples) {
  const std::vector<ModelUpdate> single = {upd("a", {1.5, -2})};
  EXPECT_EQ(fedavg::federated_average(single, AveragingMode::uniform), single[0].params);

  const std::vector<ModelUpdate> two = {upd("a", {0}), upd("b", {2})};
  EXPECT_EQ(fedavg::federated_average(two, AveragingMode::uniform).layer(0).values[0], 1.0);

  const std::vector<ModelUpdate> weighted = {upd("a", {0}, 1), upd("b", {4}, 3)};
  EXPECT_EQ(fedavg::federated_average(weighted, AveragingMode::sample_weighted).layer(0).values[0], 3.0);
}

TEST(FederatedAverage, Errors) {
  EXPECT_THROW(fedavg::federated_average({}, AveragingMode::uniform), fedavg::UsageError);
  const std::vector<ModelUpdate> shapes = {upd("a", {0}), upd("b", {1, 2})};
  EXPECT_THROW(fedavg::federated_average(shapes, AveragingMode::uniform), fedavg::StructuralError);
  const std::vector<ModelUpdate> rounds = {upd("a", {0}, 1, 0), upd("b", {1}, 1, 1)};
  EXPECT_THROW(fedavg::federated_average(rounds, AveragingMode::uniform), fedavg::ProtocolError);
  const std::vector<ModelUpdate> dup = {upd("a", {0}), upd("a", {1})};
  EXPECT_THROW(fedavg::federated_average(dup, AveragingMode::uniform), fedavg::ProtocolError);
}

TEST(FederatedAverage, OraclePermutationAndConvexity) {
  std::mt19937_64 gen(61);
  for (int rep = 0; rep < 200; ++rep) {
    auto ups = fedsupport::random_updates(gen);
    for (auto mode : {AveragingMode::uniform, AveragingMode::sample_weighted}) {
      const auto avg = fedavg::federated_average(ups, mode);
      const auto ref = oracle::weighted_mean(ups, mode == AveragingMode::sample_weighted);
      for (std::size_t l = 0; l < avg.layer_count(); ++l) {
        for (std::size_t i = 0; i < ref[l].size(); ++i) {
          const double x = avg.layer(l).values[i];
          EXPECT_NEAR(x, ref[l][i], 1e-12);
          double mn = ups[0].params.layer(l).values[i], mx = mn;
          for (const auto& u : ups) {
            mn = std::min(mn, u.params.layer(l).values[i]);
            mx = std::max(mx, u.params.layer(l).values[i]);
          }
          EXPECT_GE(x, mn);
          EXPECT_LE(x, mx);
        }
      }
      auto shuffled = ups;
      for (int p = 0; p < 5; ++p) {
        std::shuffle(shuffled.begin(), shuffled.end(), gen);
        EXPECT_EQ(fedavg::federated_average(shuffled, mode), avg);
      }
    }
  }
}

TEST(FederatedAverage, IdenticalInputsReproduceExactly) {
  std::mt19937_64 gen(62);
  for (int rep = 0; rep < 100; ++rep) {
    auto ups = fedsupport::random_updates(gen);
    for (auto& u : ups) u.params = ups[0].params;
    EXPECT_EQ(fedavg::federated_average(ups, AveragingMode::uniform), ups[0].params);
    EXPECT_EQ(fedavg::federated_average(ups, AveragingMode::sample_weighted), ups[0].params);
  }
}

TEST(FederatedAverage, EqualCountsMakeModesAgree) {
  std::mt19937_64 gen(63);
  for (int rep = 0; rep < 100; ++rep) {
    auto ups = fedsupport::random_updates(gen);
    for (auto& u : ups) u.num_train_samples = 48;
    EXPECT_EQ(fedavg::federated_average(ups, AveragingMode::uniform),
              fedavg::federated_average(ups, AveragingMode::sample_weighted));
  }
}

// ---------------------------------------------------------------------------
// client_local_round

TEST(ClientLocalRound, ZeroEpochsRejected) {
  auto cfg = fedsupport::toy_config({"a"}, 1, 1);
  const auto role = fedavg::make_client_role(cfg, fedsupport::toy_client("a", 1));
  EXPECT_THROW(fedavg::client_local_round(fedavg::initial_global_params(cfg), role, 0, 0), fedavg::UsageError);
}

TEST(ClientLocalRound, DeterministicUpdate) {
  auto cfg = fedsupport::toy_config({"a"}, 1, 3);
  const auto role = fedavg::make_client_role(cfg, fedsupport::toy_client("a", 1));
  const auto g = fedavg::initial_global_params(cfg);
  const auto u1 = fedavg::client_local_round(g, role, 2, 3);
  const auto u2 = fedavg::client_local_round(g, role, 2, 3);
  EXPECT_EQ(u1, u2);
  EXPECT_EQ(u1.round_index, 2u);
  EXPECT_EQ(u1.epochs_run, 3u);
  EXPECT_EQ(u1.num_train_samples, 60u);
  EXPECT_FALSE(fedavg::client_local_round(g, role, 3, 3) == u1);
}

TEST(ClientLocalRound, TrainSizeMatchesSplit) {
  fedavg::PartitionSpec spec = fedavg::PartitionSpec::reference_default(1);
  spec.clients.resize(1);
  auto ds = fedavg::generate_synthetic(spec).front();
  auto cfg = fedsupport::toy_config({"client1"}, 1, 1, ds.feature_dim());
  const auto role = fedavg::make_client_role(cfg, ds);
  EXPECT_EQ(fedavg::client_local_round(fedavg::initial_global_params(cfg), role, 0, 1).num_train_samples, 623u);
}

TEST(ClientLocalRound, TrainerFailureBecomesProtocolError) {
  auto cfg = fedsupport::toy_config({"a"}, 1, 1);
  auto role = fedavg::make_client_role(cfg, fedsupport::toy_client("a", 1));
  role.dataset.val.clear();
  EXPECT_THROW(fedavg::client_local_round(fedavg::initial_global_params(cfg), role, 0, 1), fedavg::ProtocolError);
}

// ---------------------------------------------------------------------------
// server_handle

namespace {

struct Machine {
  fedavg::FederationConfig cfg = fedsupport::toy_config({"a", "b"}, 2, 1);
  ParameterSet init = fedavg::initial_global_params(cfg);

  fedavg::ServerState start() const { return fedavg::make_server_state(cfg, init); }

  ModelUpdate update(const std::string& id, std::uint32_t round, double bump = 0.25) const {
    ModelUpdate u;
    u.client_id = id;
    u.round_index = round;
    u.params = fedavg::add_scaled(init, init, bump);
    u.num_train_samples = id == "a" ? 10 : 30;
    u.best_val_loss = 0.5;
    u.epochs_run = 1;
    return u;
  }
};

fedavg::ServerState to_collecting(const Machine& m) {
  auto s = m.start();
  s = fedavg::server_handle(s, fedavg::JoinEvent{"a"}).state;
  s = fedavg::server_handle(s, fedavg::JoinEvent{"b"}).state;
  return fedavg::server_handle(s, fedavg::BroadcastEvent{}).state;
}

}  // namespace

TEST(ServerHandle, JoinThenBroadcast) {
  Machine m;
  auto t = fedavg::server_handle(m.start(), fedavg::JoinEvent{"a"});
  EXPECT_EQ(t.state.phase, Phase::idle);
  ASSERT_EQ(t.outbound.size(), 1u);
  ASSERT_TRUE(std::holds_alternative<fedavg::JoinAck>(t.outbound[0].message));
  const auto& ack = std::get<fedavg::JoinAck>(t.outbound[0].message);
  EXPECT_EQ(ack.train.epochs, 1u);
  EXPECT_EQ(ack.train.seed, fedavg::client_seed(m.cfg.seed, "a"));
  EXPECT_THROW(fedavg::server_handle(t.state, fedavg::JoinEvent{"a"}), fedavg::ProtocolError);
  EXPECT_THROW(fedavg::server_handle(t.state, fedavg::JoinEvent{"zed"}), fedavg::ProtocolError);

  t = fedavg::server_handle(t.state, fedavg::JoinEvent{"b"});
  EXPECT_EQ(t.state.phase, Phase::broadcasting);
  t = fedavg::server_handle(t.state, fedavg::BroadcastEvent{});
  EXPECT_EQ(t.state.phase, Phase::collecting);
  EXPECT_EQ(t.outbound.size(), 2u);
  EXPECT_EQ(t.state.pending_clients, (std::set<std::string>{"a", "b"}));
}

TEST(ServerHandle, CollectingRules) {
  Machine m;
  const auto s = to_collecting(m);
  auto t = fedavg::server_handle(s, fedavg::UpdateEvent{m.update("a", 0)});
  EXPECT_EQ(t.state.phase, Phase::collecting);

  const auto before = t.state;
  EXPECT_THROW(fedavg::server_handle(before, fedavg::UpdateEvent{m.update("a", 0)}), fedavg::ProtocolError);
  EXPECT_EQ(before.received.size(), 1u);
  EXPECT_EQ(before.pending_clients, (std::set<std::string>{"b"}));
  EXPECT_THROW(fedavg::server_handle(before, fedavg::UpdateEvent{m.update("zed", 0)}), fedavg::ProtocolError);
  EXPECT_THROW(fedavg::server_handle(before, fedavg::UpdateEvent{m.update("b", 1)}), fedavg::ProtocolError);
  auto bad_shape = m.update("b", 0);
  bad_shape.params = ParameterSet({fedavg::Layer{"w0", {1}}});
  EXPECT_THROW(fedavg::server_handle(before, fedavg::UpdateEvent{bad_shape}), fedavg::Error);

  t = fedavg::server_handle(before, fedavg::UpdateEvent{m.update("b", 0)});
  EXPECT_EQ(t.state.phase, Phase::aggregating);
  EXPECT_TRUE(t.state.pending_clients.empty());
}

TEST(ServerHandle, AggregateLoopsThenFinishes) {
  Machine m;
  auto s = to_collecting(m);
  s = fedavg::server_handle(s, fedavg::UpdateEvent{m.update("b", 0)}).state;
  s = fedavg::server_handle(s, fedavg::UpdateEvent{m.update("a", 0)}).state;
  auto t = fedavg::server_handle(s, fedavg::AggregateEvent{});
  EXPECT_EQ(t.state.phase, Phase::broadcasting);
  EXPECT_EQ(t.state.current_round, 1u);
  ASSERT_EQ(t.state.history.size(), 1u);
  EXPECT_EQ(t.state.history[0].updates[0].client_id, "a");
  EXPECT_EQ(t.state.global_params, fedavg::add_scaled(m.init, m.init, 0.25));

  s = fedavg::server_handle(t.state, fedavg::BroadcastEvent{}).state;
  s = fedavg::server_handle(s, fedavg::UpdateEvent{m.update("a", 1)}).state;
  s = fedavg::server_handle(s, fedavg::UpdateEvent{m.update("b", 1)}).state;
  t = fedavg::server_handle(s, fedavg::AggregateEvent{});
  EXPECT_EQ(t.state.phase, Phase::finished);
  EXPECT_EQ(t.state.history.size(), 2u);
  bool shutdown = false;
  for (const auto& o : t.outbound) shutdown |= std::holds_alternative<fedavg::Shutdown>(o.message);
  EXPECT_TRUE(shutdown);
}

TEST(ServerHandle, TimeoutNamesMissingClients) {
  Machine m;
  auto s = to_collecting(m);
  s = fedavg::server_handle(s, fedavg::UpdateEvent{m.update("a", 0)}).state;
  try {
    fedavg::server_handle(s, fedavg::TimeoutEvent{});
    FAIL();
  } catch (const fedavg::MissingClientsError& e) {
    EXPECT_EQ(e.missing(), std::vector<std::string>{"b"});
    EXPECT_NE(std::string(e.what()).find("b"), std::string::npos);
  }
  auto idle = fedavg::server_handle(m.start(), fedavg::JoinEvent{"b"}).state;
  try {
    fedavg::server_handle(idle, fedavg::TimeoutEvent{});
    FAIL();
  } catch (const fedavg::MissingClientsError& e) {
    EXPECT_EQ(e.missing(), std::vector<std::string>{"a"});
  }
}

// Breadth-first over every event sequence from the initial state. Checks the
// phase graph, that Collecting only exits with nothing pending, and that
// history and round counters stay consistent.
TEST(ServerHandle, ReachableStatesRespectPhaseGraph) {
  Machine m;
  const std::map<Phase, std::set<Phase>> allowed = {
      {Phase::idle, {Phase::idle, Phase::broadcasting}},
      {Phase::broadcasting, {Phase::collecting}},
      {Phase::collecting, {Phase::collecting, Phase::aggregating}},
      {Phase::aggregating, {Phase::broadcasting, Phase::finished}},
      {Phase::finished, {Phase::finished}},
  };
  auto events_for = [&](const fedavg::ServerState& s) {
    std::vector<fedavg::ServerEvent> ev = {fedavg::JoinEvent{"a"},      fedavg::JoinEvent{"b"},
                                           fedavg::JoinEvent{"zed"},    fedavg::BroadcastEvent{},
                                           fedavg::AggregateEvent{},    fedavg::TimeoutEvent{},
                                           fedavg::ClientFailureEvent{"a", "boom"}};
    for (std::uint32_t r = 0; r <= s.num_rounds; ++r) {
      ev.push_back(fedavg::UpdateEvent{m.update("a", r)});
      ev.push_back(fedavg::UpdateEvent{m.update("b", r)});
    }
    ev.push_back(fedavg::UpdateEvent{m.update("zed", s.current_round)});
    return ev;
  };
  auto key = [](const fedavg::ServerState& s) {
    std::string k = std::to_string(static_cast<int>(s.phase)) + "/" + std::to_string(s.current_round) + "/" +
                    std::to_string(s.history.size()) + "/";
    for (const auto& j : s.joined) k += j + ",";
    k += "/";
    for (const auto& p : s.pending_clients) k += p + ",";
    return k;
  };

  std::deque<fedavg::ServerState> queue = {m.start()};
  std::set<std::string> seen = {key(queue.front())};
  std::size_t transitions = 0, rejected = 0;
  bool reached_finished = false;
  while (!queue.empty()) {
    const auto s = queue.front();
    queue.pop_front();
    for (const auto& e : events_for(s)) {
      fedavg::Transition t;
      try {
        t = fedavg::server_handle(s, e);
      } catch (const fedavg::Error&) {
        ++rejected;
        continue;
      }
      ++transitions;
      const auto& n = t.state;
      EXPECT_TRUE(allowed.at(s.phase).count(n.phase)) << fedavg::to_string(s.phase) << " -> " << fedavg::to_string(n.phase);
      if (s.phase == Phase::collecting && n.phase != Phase::collecting) {
        EXPECT_TRUE(n.pending_clients.empty());
      }
      if (n.phase == Phase::collecting) {
        EXPECT_EQ(n.pending_clients.size() + n.received.size(), 2u);
      }
      EXPECT_LE(n.current_round, n.num_rounds);
      const std::size_t done = n.phase == Phase::finished ? n.num_rounds : n.current_round;
      EXPECT_EQ(n.history.size(), done);
      reached_finished |= n.phase == Phase::finished;
      if (seen.insert(key(n)).second) queue.push_back(n);
    }
  }
  EXPECT_TRUE(reached_finished);
  EXPECT_GT(transitions, 10u);
  EXPECT_GT(rejected, 10u);
}

// ---------------------------------------------------------------------------
// run_federation

TEST(RunFederation, SingleClientEqualsChainedLocalTraining) {
  for (std::uint32_t rounds : {1u, 3u}) {
    for (std::uint32_t epochs : {1u, 2u}) {
      auto cfg = fedsupport::toy_config({"solo"}, rounds, epochs);
      std::vector<fedavg::ClientRole> roles = {fedavg::make_client_role(cfg, fedsupport::toy_client("solo", 4))};
      const auto res = fedavg::run_federation(cfg, roles);
      EXPECT_EQ(res.final_params, fedsupport::chained_local(cfg, roles[0]));
      ASSERT_EQ(res.history.size(), rounds);
    }
  }
}

TEST(RunFederation, IdenticalClientsEqualOne) {
  auto cfg = fedsupport::toy_config({"solo"}, 3, 2);
  const auto ds = fedsupport::toy_client("x", 9);
  const auto base = fedavg::make_client_role(cfg, ds);
  const auto single = fedsupport::chained_local(cfg, base);
  for (auto mode : {AveragingMode::uniform, AveragingMode::sample_weighted}) {
    auto kcfg = cfg;
    kcfg.averaging = mode;
    kcfg.expected_clients = {"k1", "k2", "k3"};
    std::vector<fedavg::ClientRole> roles;
    for (const auto& id : kcfg.expected_clients) {
      auto r = base;
      r.client_id = id;
      r.dataset.client_id = id;
      roles.push_back(r);
    }
    EXPECT_EQ(fedavg::run_federation(kcfg, roles).final_params, single);
  }
}

TEST(RunFederation, FiveRoundsOfFourEpochs) {
  auto cfg = fedsupport::toy_config({"c1", "c2", "c3"}, 5, 4);
  std::vector<fedavg::ClientRole> roles;
  for (std::size_t i = 0; i < 3; ++i) {
    const auto id = cfg.expected_clients[i];
    roles.push_back(fedavg::make_client_role(cfg, fedsupport::toy_client(id, i + 1, 30 + 20 * i)));
  }
  const auto res = fedavg::run_federation(cfg, roles);
  ASSERT_EQ(res.history.size(), 5u);
  std::map<std::string, std::uint32_t> epochs;
  for (std::size_t r = 0; r < 5; ++r) {
    EXPECT_EQ(res.history[r].round_index, r);
    ASSERT_EQ(res.history[r].updates.size(), 3u);
    for (const auto& u : res.history[r].updates) epochs[u.client_id] += u.epochs_run;
  }
  for (const auto& id : cfg.expected_clients) EXPECT_EQ(epochs[id], 20u);
  EXPECT_EQ(res.final_params, res.history.back().global_params);

  const auto again = fedavg::run_federation(cfg, roles);
  EXPECT_EQ(again.final_params, res.final_params);
  const auto over_socket = fedavg::run_federation(cfg, roles, fedavg::TransportKind::socket);
  EXPECT_EQ(over_socket.final_params, res.final_params);
}

TEST(RunFederation, ClientFailureAbortsWithContext) {
  auto cfg = fedsupport::toy_config({"good", "bad"}, 2, 1);
  std::vector<fedavg::ClientRole> roles = {fedavg::make_client_role(cfg, fedsupport::toy_client("good", 1)),
                                           fedavg::make_client_role(cfg, fedsupport::toy_client("bad", 2))};
  roles[1].dataset.val.clear();
  try {
    fedavg::run_federation(cfg, roles);
    FAIL();
  } catch (const fedavg::ProtocolError& e) {
    EXPECT_NE(std::string(e.what()).find("bad"), std::string::npos) << e.what();
  }
}

TEST(RunServer, TimeoutNamesAbsentClient) {
  auto cfg = fedsupport::toy_config({"a", "b"}, 1, 1);
  auto t = fedavg::make_in_process_transport();
  auto role = fedavg::make_client_role(cfg, fedsupport::toy_client("a", 1));
  auto channel = t.connect();
  std::thread client([&] {
    try {
      fedavg::run_client(*channel, "a", role.dataset, std::chrono::milliseconds(5000));
    } catch (const fedavg::Error&) {
    }
  });
  try {
    fedavg::run_server(fedavg::make_server_state(cfg, fedavg::initial_global_params(cfg)), *t.server,
                       std::chrono::milliseconds(300));
    ADD_FAILURE() << "server finished without client b";
  } catch (const fedavg::MissingClientsError& e) {
    EXPECT_EQ(e.missing(), std::vector<std::string>{"b"});
  }
  client.join();
}
