#pragma once

#include <atomic>
#include <cstdint>
#include <list>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <thread>

#include <json.hpp>

#include "tsclab/env.hpp"

namespace tsclab {

// Wire format: 4-byte big-endian body length, then a UTF-8 JSON object with a "type" field.
inline constexpr std::size_t kMaxFrameBytes = 16u * 1024u * 1024u;

std::string encode_frame(const nlohmann::json& message);
std::uint32_t decode_length(const unsigned char header[4]);

enum class ReadStatus { ok, closed, too_large, error };

/// Blocking read of one frame body. On too_large the body is not consumed.
ReadStatus read_frame(int fd, std::string& body, std::size_t max_bytes = kMaxFrameBytes);
/// Blocking write of one frame; false when the peer is gone.
bool write_frame(int fd, const nlohmann::json& message);

nlohmann::json error_message(std::string_view code, std::string_view message);

nlohmann::json observations_to_json(std::span<const Observation> obs);
std::vector<Observation> observations_from_json(const nlohmann::json& j);
nlohmann::json step_result_to_json(const StepResult& r);
StepResult step_result_from_json(const nlohmann::json& j);

/// One client's private environment. Maps each request to exactly one reply.
class Session {
 public:
  explicit Session(const EnvConfig& config);

  nlohmann::json handle(const nlohmann::json& request);
  /// Parses a raw frame body; anything that is not a JSON object with a string "type" is bad_frame.
  nlohmann::json handle_text(std::string_view body);
  /// Set once a bye request has been answered.
  bool finished() const { return finished_; }

 private:
  Environment env_;
  bool finished_ = false;
};

/// "host:port" with an IPv4 host or a resolvable name; port 0 picks a free port.
struct BindAddress {
  std::string host = "127.0.0.1";
  std::uint16_t port = 0;

  static BindAddress parse(std::string_view text);
};

class EnvServer {
 public:
  EnvServer(EnvConfig config, BindAddress address);
  ~EnvServer();
  EnvServer(const EnvServer&) = delete;
  EnvServer& operator=(const EnvServer&) = delete;

  /// Binds and starts accepting; throws IoError when the address cannot be bound.
  void start();
  /// Sends bye to every live session, closes all sockets and joins the threads.
  void stop();
  std::uint16_t port() const { return port_; }
  bool running() const { return running_; }
  std::size_t live_sessions() const;

 private:
  struct Connection {
    int fd = -1;
    std::mutex write_mu;
    std::atomic<bool> done{false};
    std::thread thread;
  };

  void accept_loop();
  void serve_connection(const std::shared_ptr<Connection>& conn);
  void reap(bool all);

  EnvConfig config_;
  BindAddress address_;
  int listen_fd_ = -1;
  std::uint16_t port_ = 0;
  std::atomic<bool> running_{false};
  std::thread acceptor_;
  mutable std::mutex conns_mu_;
  std::list<std::shared_ptr<Connection>> conns_;
};

/// Minimal blocking client, used by tests and tools.
class EnvClient {
 public:
  EnvClient(const std::string& host, std::uint16_t port);
  ~EnvClient();
  EnvClient(const EnvClient&) = delete;
  EnvClient& operator=(const EnvClient&) = delete;

  /// Sends one message and waits for its reply; throws IoError if the connection drops.
  nlohmann::json request(const nlohmann::json& message);
  /// Sends raw bytes as-is (for malformed-frame tests).
  void send_raw(std::string_view bytes);
  /// Next frame, or nullopt once the server closed the connection.
  std::optional<nlohmann::json> receive();
  int fd() const { return fd_; }

 private:
  int fd_ = -1;
};

}  // namespace tsclab
