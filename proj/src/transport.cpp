#include "fedavg/transport.hpp"

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <atomic>
#include <cerrno>
#include <charconv>
#include <cstring>
#include <map>
#include <thread>

#include "fedavg/codec.hpp"
#include "fedavg/error.hpp"

namespace fedavg {

SocketAddress parse_address(const std::string& text) {
  const auto colon = text.rfind(':');
  if (colon == std::string::npos || colon == 0 || colon + 1 == text.size()) {
    throw ConfigError("address '" + text + "' is not of the form HOST:PORT");
  }
  unsigned port = 0;
  const char* first = text.data() + colon + 1;
  const char* last = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(first, last, port);
  if (ec != std::errc{} || ptr != last || port > 65535) {
    throw ConfigError("address '" + text + "' has an invalid port");
  }
  return {text.substr(0, colon), static_cast<std::uint16_t>(port)};
}

// ---------------------------------------------------------------------------
// In-process

namespace {

struct Hub {
  BlockingQueue<Inbound> server_inbox;
  std::mutex mu;
  // nullopt in a client queue means the server went away.
  std::map<ConnectionId, std::shared_ptr<BlockingQueue<std::optional<Message>>>> client_inboxes;
  ConnectionId next_id = 1;
};

class InProcessServer : public ServerEndpoint {
 public:
  explicit InProcessServer(std::shared_ptr<Hub> hub) : hub_(std::move(hub)) {}
  ~InProcessServer() override {
    std::lock_guard lock(hub_->mu);
    for (auto& [id, q] : hub_->client_inboxes) q->push(std::nullopt);
  }

  std::optional<Inbound> receive(Timeout timeout) override { return hub_->server_inbox.pop(timeout); }

  void send(ConnectionId connection, const Message& m) override {
    std::shared_ptr<BlockingQueue<std::optional<Message>>> q;
    {
      std::lock_guard lock(hub_->mu);
      const auto it = hub_->client_inboxes.find(connection);
      if (it == hub_->client_inboxes.end()) {
        throw TransportError("in-process connection " + std::to_string(connection) + " is closed");
      }
      q = it->second;
    }
    q->push(m);
  }

  std::string describe(ConnectionId connection) const override {
    return "in-process#" + std::to_string(connection);
  }

 private:
  std::shared_ptr<Hub> hub_;
};

class InProcessClient : public ClientChannel {
 public:
  explicit InProcessClient(std::shared_ptr<Hub> hub) : hub_(std::move(hub)) {
    inbox_ = std::make_shared<BlockingQueue<std::optional<Message>>>();
    std::lock_guard lock(hub_->mu);
    id_ = hub_->next_id++;
    hub_->client_inboxes.emplace(id_, inbox_);
  }
  ~InProcessClient() override {
    {
      std::lock_guard lock(hub_->mu);
      hub_->client_inboxes.erase(id_);
    }
    hub_->server_inbox.push(Inbound{id_, std::nullopt});
  }

  void send(const Message& m) override { hub_->server_inbox.push(Inbound{id_, m}); }

  Message receive(Timeout timeout) override {
    auto item = inbox_->pop(timeout);
    if (!item) throw TransportError("in-process#" + std::to_string(id_) + ": timed out waiting for server");
    if (!*item) throw TransportError("in-process#" + std::to_string(id_) + ": server closed");
    return std::move(**item);
  }

 private:
  std::shared_ptr<Hub> hub_;
  std::shared_ptr<BlockingQueue<std::optional<Message>>> inbox_;
  ConnectionId id_ = 0;
};

}  // namespace

TransportPair make_in_process_transport() {
  auto hub = std::make_shared<Hub>();
  TransportPair pair;
  pair.server = std::make_unique<InProcessServer>(hub);
  pair.connect = [hub]() -> std::unique_ptr<ClientChannel> { return std::make_unique<InProcessClient>(hub); };
  return pair;
}

// ---------------------------------------------------------------------------
// TCP

namespace {

std::string errno_text() { return std::strerror(errno); }

void write_all(int fd, const Bytes& bytes, const std::string& peer) {
  std::size_t off = 0;
  while (off < bytes.size()) {
    const ssize_t n = ::send(fd, bytes.data() + off, bytes.size() - off, MSG_NOSIGNAL);
    if (n < 0) {
      if (errno == EINTR) continue;
      throw TransportError(peer + ": send failed: " + errno_text());
    }
    off += static_cast<std::size_t>(n);
  }
}

std::string peer_name(const sockaddr_storage& addr) {
  char host[INET6_ADDRSTRLEN] = "?";
  std::uint16_t port = 0;
  if (addr.ss_family == AF_INET) {
    const auto* in = reinterpret_cast<const sockaddr_in*>(&addr);
    ::inet_ntop(AF_INET, &in->sin_addr, host, sizeof host);
    port = ntohs(in->sin_port);
  } else if (addr.ss_family == AF_INET6) {
    const auto* in6 = reinterpret_cast<const sockaddr_in6*>(&addr);
    ::inet_ntop(AF_INET6, &in6->sin6_addr, host, sizeof host);
    port = ntohs(in6->sin6_port);
  }
  return std::string(host) + ":" + std::to_string(port);
}

struct AddrInfoDeleter {
  void operator()(addrinfo* p) const { ::freeaddrinfo(p); }
};

std::unique_ptr<addrinfo, AddrInfoDeleter> resolve(const SocketAddress& address, bool passive) {
  addrinfo hints{};
  hints.ai_family = AF_UNSPEC;
  hints.ai_socktype = SOCK_STREAM;
  if (passive) hints.ai_flags = AI_PASSIVE;
  addrinfo* res = nullptr;
  const std::string port = std::to_string(address.port);
  const int rc = ::getaddrinfo(address.host.c_str(), port.c_str(), &hints, &res);
  if (rc != 0) throw TransportError(address.to_string() + ": " + ::gai_strerror(rc));
  return std::unique_ptr<addrinfo, AddrInfoDeleter>(res);
}

class SocketServer : public ServerEndpoint {
 public:
  explicit SocketServer(const SocketAddress& address) {
    auto info = resolve(address, true);
    std::string last_error = "no usable address";
    for (addrinfo* ai = info.get(); ai; ai = ai->ai_next) {
      const int fd = ::socket(ai->ai_family, ai->ai_socktype, ai->ai_protocol);
      if (fd < 0) continue;
      const int one = 1;
      ::setsockopt(fd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
      if (::bind(fd, ai->ai_addr, ai->ai_addrlen) == 0 && ::listen(fd, 64) == 0) {
        listen_fd_ = fd;
        break;
      }
      last_error = errno_text();
      ::close(fd);
    }
    if (listen_fd_ < 0) throw TransportError("cannot listen on " + address.to_string() + ": " + last_error);

    sockaddr_storage bound{};
    socklen_t len = sizeof bound;
    ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&bound), &len);
    port_ = bound.ss_family == AF_INET6 ? ntohs(reinterpret_cast<sockaddr_in6*>(&bound)->sin6_port)
                                        : ntohs(reinterpret_cast<sockaddr_in*>(&bound)->sin_port);
    acceptor_ = std::thread([this] { accept_loop(); });
  }

  ~SocketServer() override {
    stopping_ = true;
    if (acceptor_.joinable()) acceptor_.join();
    ::close(listen_fd_);
    std::map<ConnectionId, std::shared_ptr<Connection>> conns;
    {
      std::lock_guard lock(mu_);
      conns.swap(connections_);
    }
    for (auto& [id, c] : conns) ::shutdown(c->fd, SHUT_RDWR);
    for (auto& [id, c] : conns) {
      if (c->reader.joinable()) c->reader.join();
      ::close(c->fd);
    }
  }

  std::uint16_t port() const { return port_; }

  std::optional<Inbound> receive(Timeout timeout) override { return inbox_.pop(timeout); }

  void send(ConnectionId connection, const Message& m) override {
    const auto c = find(connection);
    if (!c) throw TransportError("connection " + std::to_string(connection) + " is closed");
    const Bytes frame = encode(m);
    std::lock_guard lock(c->write_mu);
    write_all(c->fd, frame, c->peer);
  }

  std::string describe(ConnectionId connection) const override {
    const auto c = find(connection);
    return c ? c->peer : "connection#" + std::to_string(connection);
  }

 private:
  struct Connection {
    int fd = -1;
    std::string peer;
    std::mutex write_mu;
    std::thread reader;
  };

  std::shared_ptr<Connection> find(ConnectionId id) const {
    std::lock_guard lock(mu_);
    const auto it = connections_.find(id);
    return it == connections_.end() ? nullptr : it->second;
  }

  void accept_loop() {
    while (!stopping_) {
      pollfd pfd{listen_fd_, POLLIN, 0};
      const int rc = ::poll(&pfd, 1, 100);
      if (rc <= 0) continue;
      sockaddr_storage addr{};
      socklen_t len = sizeof addr;
      const int fd = ::accept(listen_fd_, reinterpret_cast<sockaddr*>(&addr), &len);
      if (fd < 0) continue;
      const int one = 1;
      ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
      auto conn = std::make_shared<Connection>();
      conn->fd = fd;
      conn->peer = peer_name(addr);
      std::lock_guard lock(mu_);
      const ConnectionId id = next_id_++;
      connections_.emplace(id, conn);
      conn->reader = std::thread([this, id, conn] { read_loop(id, conn); });
    }
  }

  void read_loop(ConnectionId id, std::shared_ptr<Connection> conn) {
    FrameReassembler frames;
    std::uint8_t buf[64 * 1024];
    try {
      while (true) {
        const ssize_t n = ::recv(conn->fd, buf, sizeof buf, 0);
        if (n < 0 && errno == EINTR) continue;
        if (n <= 0) break;
        frames.feed(std::span<const std::uint8_t>(buf, static_cast<std::size_t>(n)));
        while (auto m = frames.next()) inbox_.push(Inbound{id, std::move(*m)});
      }
    } catch (const ProtocolError&) {
      // A peer speaking garbage is treated like one that hung up.
    }
    inbox_.push(Inbound{id, std::nullopt});
  }

  int listen_fd_ = -1;
  std::uint16_t port_ = 0;
  std::atomic<bool> stopping_{false};
  std::thread acceptor_;
  mutable std::mutex mu_;
  std::map<ConnectionId, std::shared_ptr<Connection>> connections_;
  ConnectionId next_id_ = 1;
  BlockingQueue<Inbound> inbox_;
};

class SocketClient : public ClientChannel {
 public:
  explicit SocketClient(const SocketAddress& address) : peer_(address.to_string()) {
    auto info = resolve(address, false);
    std::string last_error = "no usable address";
    for (addrinfo* ai = info.get(); ai; ai = ai->ai_next) {
      const int fd = ::socket(ai->ai_family, ai->ai_socktype, ai->ai_protocol);
      if (fd < 0) continue;
      if (::connect(fd, ai->ai_addr, ai->ai_addrlen) == 0) {
        fd_ = fd;
        break;
      }
      last_error = errno_text();
      ::close(fd);
    }
    if (fd_ < 0) throw TransportError("connect to " + peer_ + " failed: " + last_error);
    const int one = 1;
    ::setsockopt(fd_, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
  }

  ~SocketClient() override { ::close(fd_); }

  void send(const Message& m) override { write_all(fd_, encode(m), peer_); }

  Message receive(Timeout timeout) override {
    const auto deadline = timeout ? std::optional(std::chrono::steady_clock::now() + *timeout) : std::nullopt;
    std::uint8_t buf[64 * 1024];
    while (true) {
      if (auto m = frames_.next()) return std::move(*m);
      int wait_ms = -1;
      if (deadline) {
        const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(*deadline - std::chrono::steady_clock::now());
        if (left.count() <= 0) throw TransportError(peer_ + ": timed out waiting for server");
        wait_ms = static_cast<int>(left.count());
      }
      pollfd pfd{fd_, POLLIN, 0};
      const int rc = ::poll(&pfd, 1, wait_ms);
      if (rc < 0 && errno == EINTR) continue;
      if (rc < 0) throw TransportError(peer_ + ": poll failed: " + errno_text());
      if (rc == 0) continue;
      const ssize_t n = ::recv(fd_, buf, sizeof buf, 0);
      if (n < 0 && errno == EINTR) continue;
      if (n < 0) throw TransportError(peer_ + ": receive failed: " + errno_text());
      if (n == 0) throw TransportError(peer_ + ": server closed the connection");
      frames_.feed(std::span<const std::uint8_t>(buf, static_cast<std::size_t>(n)));
    }
  }

 private:
  std::string peer_;
  int fd_ = -1;
  FrameReassembler frames_;
};

}  // namespace

std::unique_ptr<ServerEndpoint> listen_socket(const SocketAddress& address) {
  return std::make_unique<SocketServer>(address);
}

std::uint16_t bound_port(const ServerEndpoint& endpoint) {
  const auto* s = dynamic_cast<const SocketServer*>(&endpoint);
  return s ? s->port() : 0;
}

std::unique_ptr<ClientChannel> connect_socket(const SocketAddress& address) {
  return std::make_unique<SocketClient>(address);
}

TransportPair transport_pair(TransportKind kind, const SocketAddress& address) {
  if (kind == TransportKind::in_process) return make_in_process_transport();
  TransportPair pair;
  pair.server = listen_socket(address);
  SocketAddress target = address;
  target.port = bound_port(*pair.server);
  if (target.host.empty() || target.host == "0.0.0.0") target.host = "127.0.0.1";
  pair.connect = [target]() -> std::unique_ptr<ClientChannel> { return connect_socket(target); };
  return pair;
}

}  // namespace fedavg
