#include "tsclab/envserver.hpp"

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>
#include <limits>

#include "tsclab/errors.hpp"

namespace tsclab {

using nlohmann::json;

// ---- framing

std::string encode_frame(const json& message) {
  const std::string body = message.dump();
  const auto n = static_cast<std::uint32_t>(body.size());
  std::string out;
  out.reserve(body.size() + 4);
  out.push_back(static_cast<char>((n >> 24) & 0xff));
  out.push_back(static_cast<char>((n >> 16) & 0xff));
  out.push_back(static_cast<char>((n >> 8) & 0xff));
  out.push_back(static_cast<char>(n & 0xff));
  out += body;
  return out;
}

std::uint32_t decode_length(const unsigned char h[4]) {
  return (std::uint32_t{h[0]} << 24) | (std::uint32_t{h[1]} << 16) | (std::uint32_t{h[2]} << 8) | std::uint32_t{h[3]};
}

namespace {

// 1 = filled, 0 = orderly close before any byte, -1 = error or close mid-buffer
int read_exact(int fd, char* buf, std::size_t n) {
  std::size_t got = 0;
  while (got < n) {
    const ssize_t r = ::recv(fd, buf + got, n - got, 0);
    if (r == 0) return got == 0 ? 0 : -1;
    if (r < 0) {
      if (errno == EINTR) continue;
      return -1;
    }
    got += static_cast<std::size_t>(r);
  }
  return 1;
}

bool write_all(int fd, const char* buf, std::size_t n) {
  while (n > 0) {
    const ssize_t w = ::send(fd, buf, n, MSG_NOSIGNAL);
    if (w < 0) {
      if (errno == EINTR) continue;
      return false;
    }
    buf += w;
    n -= static_cast<std::size_t>(w);
  }
  return true;
}

}  // namespace

ReadStatus read_frame(int fd, std::string& body, std::size_t max_bytes) {
  unsigned char header[4];
  const int h = read_exact(fd, reinterpret_cast<char*>(header), 4);
  if (h == 0) return ReadStatus::closed;
  if (h < 0) return ReadStatus::error;
  const std::uint32_t n = decode_length(header);
  if (n > max_bytes) return ReadStatus::too_large;
  body.assign(n, '\0');
  if (n == 0) return ReadStatus::ok;
  return read_exact(fd, body.data(), n) == 1 ? ReadStatus::ok : ReadStatus::error;
}

bool write_frame(int fd, const json& message) {
  const std::string frame = encode_frame(message);
  return write_all(fd, frame.data(), frame.size());
}

// ---- payloads

json error_message(std::string_view code, std::string_view message) {
  return {{"type", "error"}, {"code", code}, {"message", message}};
}

json observations_to_json(std::span<const Observation> obs) {
  json out = json::array();
  for (const auto& o : obs) out.push_back(o.values);
  return out;
}

std::vector<Observation> observations_from_json(const json& j) {
  std::vector<Observation> out;
  for (std::size_t i = 0; i < j.size(); ++i) {
    out.push_back({static_cast<int>(i), j[i].get<std::vector<double>>()});
  }
  return out;
}

json step_result_to_json(const StepResult& r) {
  json j{{"type", "transition"},
         {"observations", observations_to_json(r.observations)},
         {"state", r.state.values},
         {"reward", r.reward},
         {"terminated", r.terminated},
         {"info", r.info.to_json()}};
  if (!r.local_rewards.empty()) j["local_rewards"] = r.local_rewards;
  return j;
}

StepResult step_result_from_json(const json& j) {
  StepResult r;
  r.observations = observations_from_json(j.at("observations"));
  r.state.values = j.at("state").get<std::vector<double>>();
  r.reward = j.at("reward").get<double>();
  r.terminated = j.at("terminated").get<bool>();
  if (j.contains("local_rewards")) r.local_rewards = j["local_rewards"].get<std::vector<double>>();
  const json& i = j.at("info");
  r.info.queue_sum = i.at("queue_sum").get<double>();
  r.info.mean_delay = i.at("mean_delay").get<double>();
  r.info.mean_speed = i.at("mean_speed").get<double>();
  r.info.mean_occupancy = i.at("mean_occupancy").get<double>();
  r.info.completed = i.at("completed").get<std::int64_t>();
  r.info.dropped = i.at("dropped").get<std::int64_t>();
  return r;
}

// ---- session

Session::Session(const EnvConfig& config) : env_(config) {}

json Session::handle_text(std::string_view body) {
  json request;
  try {
    request = json::parse(body);
  } catch (const json::parse_error& e) {
    return error_message("bad_frame", std::string("body is not valid JSON: ") + e.what());
  }
  return handle(request);
}

json Session::handle(const json& request) {
  if (!request.is_object() || !request.contains("type") || !request["type"].is_string()) {
    return error_message("bad_frame", "message must be a JSON object with a string \"type\"");
  }
  const std::string type = request["type"];
  if (type == "hello" || type == "spec") {
    json spec = env_.spec().to_json();
    spec["type"] = "spec";
    spec["action_mode"] = to_string(env_.config().action_mode);
    return spec;
  }
  if (type == "reset") {
    std::uint64_t seed = env_.config().seed;
    if (request.contains("seed")) {
      const json& sv = request["seed"];
      if (!sv.is_number_integer() || (!sv.is_number_unsigned() && sv.get<std::int64_t>() < 0)) {
        return error_message("bad_frame", "seed must be a non-negative integer");
      }
      seed = request["seed"].get<std::uint64_t>();
    }
    const ResetResult r = env_.reset(seed);
    return {{"type", "obs"}, {"observations", observations_to_json(r.observations)}, {"state", r.state.values}};
  }
  if (type == "step") {
    if (!env_.is_reset()) return error_message("not_reset", "step before reset");
    const json& a = request.contains("actions") ? request["actions"] : json();
    const std::size_t expected = static_cast<std::size_t>(env_.n_agents());
    if (!a.is_array()) return error_message("bad_actions", "actions must be an array of " + std::to_string(expected) + " integers");
    if (a.size() != expected) {
      return error_message("bad_actions",
                           "expected " + std::to_string(expected) + " actions, got " + std::to_string(a.size()));
    }
    std::vector<int> actions;
    for (const auto& v : a) {
      if (!v.is_number_integer()) return error_message("bad_actions", "actions must be integers");
      actions.push_back(v.get<int>());
    }
    if (env_.steps_taken() >= env_.config().episode_limit) {
      return error_message("episode_over", "episode terminated; send reset");
    }
    try {
      return step_result_to_json(env_.step(actions));
    } catch (const ContractError& e) {
      return error_message("bad_actions", e.what());
    }
  }
  if (type == "bye") {
    finished_ = true;
    return {{"type", "bye"}};
  }
  return error_message("unknown_type", "unknown message type \"" + type + "\"");
}

// ---- server

BindAddress BindAddress::parse(std::string_view text) {
  const auto colon = text.rfind(':');
  if (colon == std::string_view::npos) throw ConfigError("bind address must look like host:port");
  BindAddress a;
  a.host = std::string(text.substr(0, colon));
  if (a.host.empty()) a.host = "0.0.0.0";
  const std::string port(text.substr(colon + 1));
  char* end = nullptr;
  const long p = std::strtol(port.c_str(), &end, 10);
  if (port.empty() || *end != '\0' || p < 0 || p > 65535) throw ConfigError("bad port in bind address \"" + std::string(text) + "\"");
  a.port = static_cast<std::uint16_t>(p);
  return a;
}

namespace {

sockaddr_in resolve_ipv4(const std::string& host, std::uint16_t port) {
  addrinfo hints{};
  hints.ai_family = AF_INET;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* res = nullptr;
  if (::getaddrinfo(host.c_str(), nullptr, &hints, &res) != 0 || !res) {
    throw IoError("cannot resolve host \"" + host + "\"");
  }
  sockaddr_in addr = *reinterpret_cast<sockaddr_in*>(res->ai_addr);
  ::freeaddrinfo(res);
  addr.sin_port = htons(port);
  return addr;
}

}  // namespace

EnvServer::EnvServer(EnvConfig config, BindAddress address) : config_(std::move(config)), address_(std::move(address)) {
  config_.validate();
}

EnvServer::~EnvServer() { stop(); }

void EnvServer::start() {
  if (running_) return;
  const sockaddr_in addr = resolve_ipv4(address_.host, address_.port);
  listen_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
  if (listen_fd_ < 0) throw IoError(std::string("socket: ") + std::strerror(errno));
  int one = 1;
  ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
  if (::bind(listen_fd_, reinterpret_cast<const sockaddr*>(&addr), sizeof addr) != 0 ||
      ::listen(listen_fd_, SOMAXCONN) != 0) {
    const std::string why = std::strerror(errno);
    ::close(listen_fd_);
    listen_fd_ = -1;
    throw IoError("cannot bind " + address_.host + ":" + std::to_string(address_.port) + ": " + why);
  }
  sockaddr_in bound{};
  socklen_t len = sizeof bound;
  ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&bound), &len);
  port_ = ntohs(bound.sin_port);
  running_ = true;
  acceptor_ = std::thread([this] { accept_loop(); });
}

void EnvServer::accept_loop() {
  while (running_) {
    pollfd p{listen_fd_, POLLIN, 0};
    const int r = ::poll(&p, 1, 100);
    if (r <= 0) {
      reap(false);
      continue;
    }
    const int fd = ::accept(listen_fd_, nullptr, nullptr);
    if (fd < 0) continue;
    int one = 1;
    ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
    auto conn = std::make_shared<Connection>();
    conn->fd = fd;
    std::lock_guard lock(conns_mu_);
    if (!running_) {
      ::close(fd);
      break;
    }
    conns_.push_back(conn);
    conn->thread = std::thread([this, conn] { serve_connection(conn); });
  }
}

void EnvServer::serve_connection(const std::shared_ptr<Connection>& conn) {
  Session session(config_);
  std::string body;
  while (running_) {
    const ReadStatus st = read_frame(conn->fd, body);
    if (st == ReadStatus::closed || st == ReadStatus::error) break;
    std::lock_guard lock(conn->write_mu);
    if (st == ReadStatus::too_large) {
      write_frame(conn->fd, error_message("frame_too_large", "frame exceeds " + std::to_string(kMaxFrameBytes) +
                                                                  " bytes; closing connection"));
      break;
    }
    json reply;
    try {
      reply = session.handle_text(body);
    } catch (const std::exception& e) {
      reply = error_message("internal", e.what());
    }
    if (!running_) break;  // stop() already said bye
    if (!write_frame(conn->fd, reply) || session.finished()) break;
  }
  {
    std::lock_guard lock(conn->write_mu);
    ::shutdown(conn->fd, SHUT_RDWR);
  }
  conn->done = true;
}

void EnvServer::reap(bool all) {
  std::list<std::shared_ptr<Connection>> finished;
  {
    std::lock_guard lock(conns_mu_);
    for (auto it = conns_.begin(); it != conns_.end();) {
      if (all || (*it)->done) {
        finished.push_back(*it);
        it = conns_.erase(it);
      } else {
        ++it;
      }
    }
  }
  for (auto& c : finished) {
    if (c->thread.joinable()) c->thread.join();
    ::close(c->fd);
  }
}

void EnvServer::stop() {
  if (!running_.exchange(false)) return;
  if (acceptor_.joinable()) acceptor_.join();
  {
    std::lock_guard lock(conns_mu_);
    for (auto& c : conns_) {
      std::lock_guard wl(c->write_mu);
      if (!c->done) write_frame(c->fd, {{"type", "bye"}, {"reason", "server shutting down"}});
      ::shutdown(c->fd, SHUT_RDWR);
    }
  }
  reap(true);
  ::close(listen_fd_);
  listen_fd_ = -1;
}

std::size_t EnvServer::live_sessions() const {
  std::lock_guard lock(conns_mu_);
  std::size_t n = 0;
  for (const auto& c : conns_) n += c->done ? 0 : 1;
  return n;
}

// ---- client

EnvClient::EnvClient(const std::string& host, std::uint16_t port) {
  const sockaddr_in addr = resolve_ipv4(host, port);
  fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
  if (fd_ < 0) throw IoError(std::string("socket: ") + std::strerror(errno));
  if (::connect(fd_, reinterpret_cast<const sockaddr*>(&addr), sizeof addr) != 0) {
    const std::string why = std::strerror(errno);
    ::close(fd_);
    fd_ = -1;
    throw IoError("cannot connect to " + host + ":" + std::to_string(port) + ": " + why);
  }
  int one = 1;
  ::setsockopt(fd_, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
}

EnvClient::~EnvClient() {
  if (fd_ >= 0) ::close(fd_);
}

json EnvClient::request(const json& message) {
  if (!write_frame(fd_, message)) throw IoError("connection lost while sending");
  auto reply = receive();
  if (!reply) throw IoError("connection closed before a reply arrived");
  return *reply;
}

void EnvClient::send_raw(std::string_view bytes) {
  if (!write_all(fd_, bytes.data(), bytes.size())) throw IoError("connection lost while sending");
}

std::optional<json> EnvClient::receive() {
  std::string body;
  const ReadStatus st = read_frame(fd_, body, std::numeric_limits<std::uint32_t>::max());
  if (st != ReadStatus::ok) return std::nullopt;
  return json::parse(body);
}

}  // namespace tsclab
