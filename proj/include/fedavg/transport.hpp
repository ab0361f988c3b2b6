#pragma once

#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <string>

#include "fedavg/messages.hpp"

namespace fedavg {

using ConnectionId = std::uint64_t;
using Timeout = std::optional<std::chrono::milliseconds>;  // nullopt waits forever

/// Something arriving at the server: a message, or (message empty) notice that
/// the connection closed.
struct Inbound {
  ConnectionId connection = 0;
  std::optional<Message> message;
};

/// Server side of a transport. Messages from all connections funnel into one
/// ordered queue; ordering across connections is unspecified.
class ServerEndpoint {
 public:
  virtual ~ServerEndpoint() = default;
  // nullopt on timeout.
  virtual std::optional<Inbound> receive(Timeout timeout) = 0;
  virtual void send(ConnectionId connection, const Message& m) = 0;
  virtual std::string describe(ConnectionId connection) const = 0;
};

/// One client's ordered, reliable channel to the server.
class ClientChannel {
 public:
  virtual ~ClientChannel() = default;
  virtual void send(const Message& m) = 0;
  // Throws TransportError on timeout or when the server is gone.
  virtual Message receive(Timeout timeout) = 0;
};

template <typename T>
class BlockingQueue {
 public:
  void push(T item) {
    {
      std::lock_guard lock(mu_);
      items_.push_back(std::move(item));
    }
    cv_.notify_one();
  }

  std::optional<T> pop(Timeout timeout) {
    std::unique_lock lock(mu_);
    auto ready = [&] { return !items_.empty(); };
    if (timeout) {
      if (!cv_.wait_for(lock, *timeout, ready)) return std::nullopt;
    } else {
      cv_.wait(lock, ready);
    }
    T item = std::move(items_.front());
    items_.pop_front();
    return item;
  }

 private:
  std::mutex mu_;
  std::condition_variable cv_;
  std::deque<T> items_;
};

enum class TransportKind { in_process, socket };

struct SocketAddress {
  std::string host = "127.0.0.1";
  std::uint16_t port = 0;  // 0 = pick an ephemeral port when listening

  std::string to_string() const { return host + ":" + std::to_string(port); }
};

// Parses "host:port". Throws ConfigError.
SocketAddress parse_address(const std::string& text);

/// A server endpoint plus a factory for client channels attached to it. Both
/// kinds honour the same delivery contract.
struct TransportPair {
  std::unique_ptr<ServerEndpoint> server;
  std::function<std::unique_ptr<ClientChannel>()> connect;
};

TransportPair make_in_process_transport();

/// TCP server listening on `address`; accepts any number of clients.
std::unique_ptr<ServerEndpoint> listen_socket(const SocketAddress& address);
// Port actually bound (useful after listening on port 0).
std::uint16_t bound_port(const ServerEndpoint& endpoint);

std::unique_ptr<ClientChannel> connect_socket(const SocketAddress& address);

TransportPair transport_pair(TransportKind kind, const SocketAddress& address = {});

}  // namespace fedavg
