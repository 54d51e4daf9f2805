#pragma once

#include <chrono>
#include <cstdint>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "rdc/env.hpp"

namespace rdc::proto {

using Json = nlohmann::ordered_json;

inline constexpr int kVersion = 1;
inline constexpr std::uint32_t kMaxFrame = 64u << 20;
inline constexpr int kDefaultPort = 7654;
inline constexpr const char* kDefaultAddress = "127.0.0.1";

class ProtocolError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Connection loss, timeout or socket failure.
class TransportError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Kind {
  hello,
  hello_ack,
  reset,
  observation,
  action,
  reward_info,
  episode_end,
  shutdown,
  error
};

std::string_view to_string(Kind k);
Kind kind_from_string(std::string_view s);

/// body holds the kind-specific fields; "kind" itself is added on encode.
struct Message {
  Kind kind{Kind::shutdown};
  Json body = Json::object();

  bool operator==(const Message&) const = default;
};

/// Throws ProtocolError naming the first missing or mistyped field.
void validate(const Message& m);

/// 4-byte big-endian length, then the JSON object.
std::string encode(const Message& m);
/// Exactly one frame; trailing or missing bytes are errors.
Message decode(std::string_view frame);
Message parse_payload(std::string_view json_text);

/// Incremental frame extraction, independent of how the stream is split.
class FrameDecoder {
 public:
  void feed(std::string_view bytes);
  std::optional<Message> next();
  std::size_t buffered() const { return buf_.size() - pos_; }

 private:
  std::string buf_;
  std::size_t pos_{0};
};

// Message builders and readers.
Message hello(int version = kVersion);
Message hello_ack(const EnvInfo& info);
Message reset(std::uint64_t seed, bool record_baseline);
Message observation(const StepResult& r);
Message action(std::span<const double> a);
Message reward_info(const std::optional<BaselineTrace>& baseline);
Message episode_end(int episode, bool aborted);
Message shutdown();
Message error(const std::string& what, bool aborted = false);

EnvInfo read_info(const Message& m);
StepResult read_observation(const Message& m);
std::vector<double> read_action(const Message& m);
std::optional<BaselineTrace> read_baseline(const Message& m);

// ---------------------------------------------------------------------------
// Transport

struct Endpoint {
  std::string address{kDefaultAddress};
  int port{kDefaultPort};
};

/// Defaults overridden by RDC_ADDR / RDC_PORT when set.
Endpoint endpoint_from_environment();

/// Blocking stream socket carrying whole frames.
class Connection {
 public:
  Connection() = default;
  Connection(int fd, std::chrono::milliseconds timeout);
  ~Connection();
  Connection(Connection&& other) noexcept;
  Connection& operator=(Connection&& other) noexcept;
  Connection(const Connection&) = delete;
  Connection& operator=(const Connection&) = delete;

  static Connection connect(const Endpoint& to, std::chrono::milliseconds timeout);

  bool is_open() const { return fd_ >= 0; }
  void send(const Message& m);
  Message receive();
  /// Bytes already received past the last returned frame.
  std::size_t pending() const { return decoder_.buffered(); }
  void close();

 private:
  int fd_{-1};
  FrameDecoder decoder_;
};

struct ServerOptions {
  Endpoint endpoint{};
  std::chrono::milliseconds timeout{std::chrono::seconds(300)};
  std::function<void(const std::string&)> log;
};

/// Serves one environment to one agent at a time. The listening socket is
/// bound on construction (port 0 picks a free port).
class EnvServer {
 public:
  EnvServer(Environment& env, ServerOptions opts);
  ~EnvServer();
  EnvServer(const EnvServer&) = delete;
  EnvServer& operator=(const EnvServer&) = delete;

  int port() const { return port_; }

  /// Accepts sessions until a client sends shutdown. A lost or misbehaving
  /// client ends its session and the server waits for the next one.
  void run();

 private:
  enum class SessionEnd { closed, shutdown };
  SessionEnd session(Connection& conn);
  Message handle(const Message& request);
  void log(const std::string& line) const;

  Environment& env_;
  ServerOptions opts_;
  int listen_fd_{-1};
  int port_{0};
};

/// Environment handle backed by a remote EnvServer.
class RemoteEnvironment final : public Environment {
 public:
  explicit RemoteEnvironment(
      const Endpoint& to,
      std::chrono::milliseconds timeout = std::chrono::seconds(300));

  using Environment::reset;
  EnvInfo info() const override { return info_; }
  StepResult reset(std::uint64_t seed, bool record_baseline) override;
  StepResult step(std::span<const double> action) override;
  BaselineTrace baseline() override;
  void set_baseline(const BaselineTrace& baseline) override;
  void end_episode(int episode, bool aborted) override;

  /// Asks the server to exit and closes the connection.
  void shutdown_server();

 private:
  Message call(const Message& request, Kind expected);

  Connection conn_;
  EnvInfo info_{};
};

}  // namespace rdc::proto
