#include "rdc/proto.hpp"

#include <array>
#include <cerrno>
#include <cmath>
#include <cstdlib>
#include <cstring>

#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <unistd.h>

namespace rdc::proto {

namespace {

constexpr std::array<std::string_view, 9> kKindNames = {
    "hello",       "hello_ack",   "reset",    "observation", "action",
    "reward_info", "episode_end", "shutdown", "error"};

[[noreturn]] void field_error(Kind k, std::string_view field,
                              std::string_view problem) {
  throw ProtocolError(std::string(to_string(k)) + " message: field '" +
                      std::string(field) + "' " + std::string(problem));
}

const Json& require(const Message& m, std::string_view field) {
  auto it = m.body.find(field);
  if (it == m.body.end()) field_error(m.kind, field, "is missing");
  return *it;
}

void require_int(const Message& m, std::string_view field) {
  if (!require(m, field).is_number_integer()) {
    field_error(m.kind, field, "must be an integer");
  }
}

void require_uint(const Message& m, std::string_view field) {
  if (!require(m, field).is_number_unsigned()) {
    field_error(m.kind, field, "must be a non-negative integer");
  }
}

void require_bool(const Message& m, std::string_view field) {
  if (!require(m, field).is_boolean()) {
    field_error(m.kind, field, "must be a boolean");
  }
}

void check_number(const Message& m, std::string_view field, const Json& v) {
  if (!v.is_number()) field_error(m.kind, field, "must be a number");
  if (v.is_number_float() && !std::isfinite(v.get<double>())) {
    field_error(m.kind, field, "must be finite");
  }
}

void require_number(const Message& m, std::string_view field) {
  check_number(m, field, require(m, field));
}

void require_numbers(const Message& m, std::string_view field, const Json& v) {
  if (!v.is_array()) field_error(m.kind, field, "must be an array of numbers");
  for (const auto& x : v) check_number(m, field, x);
}

void require_numbers(const Message& m, std::string_view field) {
  require_numbers(m, field, require(m, field));
}

std::vector<double> to_doubles(const Json& v) {
  std::vector<double> out;
  out.reserve(v.size());
  for (const auto& x : v) out.push_back(x.get<double>());
  return out;
}

Message make(Kind k, Json body = Json::object()) {
  return Message{k, std::move(body)};
}

}  // namespace

std::string_view to_string(Kind k) {
  return kKindNames[static_cast<std::size_t>(k)];
}

Kind kind_from_string(std::string_view s) {
  for (std::size_t i = 0; i < kKindNames.size(); ++i) {
    if (kKindNames[i] == s) return static_cast<Kind>(i);
  }
  throw ProtocolError("unknown message kind '" + std::string(s) + "'");
}

void validate(const Message& m) {
  if (!m.body.is_object()) throw ProtocolError("message body must be an object");
  if (m.body.contains("kind")) {
    throw ProtocolError("message body must not carry its own 'kind'");
  }
  switch (m.kind) {
    case Kind::hello:
      require_int(m, "version");
      break;
    case Kind::hello_ack:
      for (auto f : {"version", "n_actions", "obs_size", "episode_len"}) {
        require_int(m, f);
      }
      break;
    case Kind::reset:
      require_uint(m, "seed");
      if (m.body.contains("baseline")) require_bool(m, "baseline");
      break;
    case Kind::observation:
      require_numbers(m, "state");
      require_numbers(m, "action");
      require_number(m, "norm_c");
      require_number(m, "norm_kappa");
      require_int(m, "step");
      require_number(m, "reward");
      require_bool(m, "done");
      break;
    case Kind::action:
      require_numbers(m, "action");
      break;
    case Kind::reward_info:
      if (m.body.contains("baseline") && !m.body["baseline"].is_null()) {
        const Json& b = m.body["baseline"];
        if (!b.is_object()) field_error(m.kind, "baseline", "must be an object");
        for (auto f : {"norm_c", "norm_kappa"}) {
          if (!b.contains(f)) field_error(m.kind, std::string("baseline.") + f, "is missing");
          require_numbers(m, std::string("baseline.") + f, b[f]);
        }
        if (b["norm_c"].empty() || b["norm_c"].size() != b["norm_kappa"].size()) {
          field_error(m.kind, "baseline", "needs equal, non-empty norm arrays");
        }
      }
      break;
    case Kind::episode_end:
      require_int(m, "episode");
      require_bool(m, "aborted");
      break;
    case Kind::shutdown:
      break;
    case Kind::error:
      if (!require(m, "message").is_string()) {
        field_error(m.kind, "message", "must be a string");
      }
      if (m.body.contains("aborted")) require_bool(m, "aborted");
      break;
  }
}

std::string encode(const Message& m) {
  validate(m);
  Json j = Json::object();
  j["kind"] = to_string(m.kind);
  for (const auto& [key, value] : m.body.items()) j[key] = value;
  std::string payload;
  try {
    payload = j.dump();
  } catch (const nlohmann::json::exception& e) {
    throw ProtocolError(std::string("cannot serialize message: ") + e.what());
  }
  if (payload.size() > kMaxFrame) {
    throw ProtocolError("frame of " + std::to_string(payload.size()) +
                        " bytes exceeds the 64 MiB limit");
  }
  const auto n = static_cast<std::uint32_t>(payload.size());
  std::string out;
  out.reserve(4 + payload.size());
  out.push_back(static_cast<char>((n >> 24) & 0xff));
  out.push_back(static_cast<char>((n >> 16) & 0xff));
  out.push_back(static_cast<char>((n >> 8) & 0xff));
  out.push_back(static_cast<char>(n & 0xff));
  out += payload;
  return out;
}

Message parse_payload(std::string_view text) {
  Json j;
  try {
    j = Json::parse(text.begin(), text.end());
  } catch (const nlohmann::json::parse_error& e) {
    throw ProtocolError(std::string("malformed JSON: ") + e.what());
  }
  if (!j.is_object()) throw ProtocolError("message must be a JSON object");
  auto it = j.find("kind");
  if (it == j.end()) throw ProtocolError("field 'kind' is missing");
  if (!it->is_string()) throw ProtocolError("field 'kind' must be a string");
  Message m;
  m.kind = kind_from_string(it->get<std::string>());
  j.erase(it);
  m.body = std::move(j);
  validate(m);
  return m;
}

namespace {

std::uint32_t read_length(std::string_view bytes) {
  return (static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[0])) << 24) |
         (static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[1])) << 16) |
         (static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[2])) << 8) |
         static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[3]));
}

void check_length(std::uint32_t n) {
  if (n > kMaxFrame) {
    throw ProtocolError("frame length " + std::to_string(n) +
                        " exceeds the 64 MiB limit");
  }
}

}  // namespace

Message decode(std::string_view frame) {
  if (frame.size() < 4) throw ProtocolError("truncated frame: missing length prefix");
  const std::uint32_t n = read_length(frame);
  check_length(n);
  if (frame.size() - 4 < n) {
    throw ProtocolError("truncated frame: expected " + std::to_string(n) +
                        " payload bytes, got " + std::to_string(frame.size() - 4));
  }
  if (frame.size() - 4 > n) throw ProtocolError("trailing bytes after frame");
  return parse_payload(frame.substr(4));
}

void FrameDecoder::feed(std::string_view bytes) {
  if (pos_ > 0 && pos_ == buf_.size()) {
    buf_.clear();
    pos_ = 0;
  }
  buf_.append(bytes);
}

std::optional<Message> FrameDecoder::next() {
  const std::string_view rest = std::string_view(buf_).substr(pos_);
  if (rest.size() < 4) return std::nullopt;
  const std::uint32_t n = read_length(rest);
  check_length(n);
  if (rest.size() - 4 < n) return std::nullopt;
  Message m = parse_payload(rest.substr(4, n));
  pos_ += 4 + n;
  if (pos_ > (1u << 20) && pos_ * 2 > buf_.size()) {
    buf_.erase(0, pos_);
    pos_ = 0;
  }
  return m;
}

// ---------------------------------------------------------------------------

Message hello(int version) { return make(Kind::hello, {{"version", version}}); }

Message hello_ack(const EnvInfo& info) {
  return make(Kind::hello_ack, {{"version", kVersion},
                                {"n_actions", info.n_actions},
                                {"obs_size", info.obs_size},
                                {"episode_len", info.episode_len}});
}

Message reset(std::uint64_t seed, bool record_baseline) {
  return make(Kind::reset, {{"seed", seed}, {"baseline", record_baseline}});
}

Message observation(const StepResult& r) {
  return make(Kind::observation, {{"state", r.obs.state},
                                  {"action", r.obs.action},
                                  {"norm_c", r.obs.norm_c},
                                  {"norm_kappa", r.obs.norm_kappa},
                                  {"step", r.obs.step_index},
                                  {"reward", r.reward},
                                  {"done", r.done}});
}

Message action(std::span<const double> a) {
  return make(Kind::action,
              {{"action", std::vector<double>(a.begin(), a.end())}});
}

Message reward_info(const std::optional<BaselineTrace>& baseline) {
  Json body = Json::object();
  if (baseline) {
    body["baseline"] = {{"norm_c", baseline->norm_c_bef},
                        {"norm_kappa", baseline->norm_kappa_bef}};
  } else {
    body["baseline"] = nullptr;
  }
  return make(Kind::reward_info, std::move(body));
}

Message episode_end(int episode, bool aborted) {
  return make(Kind::episode_end, {{"episode", episode}, {"aborted", aborted}});
}

Message shutdown() { return make(Kind::shutdown); }

Message error(const std::string& what, bool aborted) {
  Json body = {{"message", what}};
  if (aborted) body["aborted"] = true;
  return make(Kind::error, std::move(body));
}

EnvInfo read_info(const Message& m) {
  if (m.kind != Kind::hello_ack) throw ProtocolError("expected hello_ack");
  return {m.body["n_actions"].get<int>(), m.body["obs_size"].get<int>(),
          m.body["episode_len"].get<int>()};
}

StepResult read_observation(const Message& m) {
  if (m.kind != Kind::observation) throw ProtocolError("expected observation");
  StepResult r;
  r.obs.state = to_doubles(m.body["state"]);
  r.obs.action = to_doubles(m.body["action"]);
  r.obs.norm_c = m.body["norm_c"].get<double>();
  r.obs.norm_kappa = m.body["norm_kappa"].get<double>();
  r.obs.step_index = m.body["step"].get<int>();
  r.reward = m.body["reward"].get<double>();
  r.done = m.body["done"].get<bool>();
  return r;
}

std::vector<double> read_action(const Message& m) {
  if (m.kind != Kind::action) throw ProtocolError("expected action");
  return to_doubles(m.body["action"]);
}

std::optional<BaselineTrace> read_baseline(const Message& m) {
  if (m.kind != Kind::reward_info) throw ProtocolError("expected reward_info");
  auto it = m.body.find("baseline");
  if (it == m.body.end() || it->is_null()) return std::nullopt;
  BaselineTrace b;
  b.norm_c_bef = to_doubles((*it)["norm_c"]);
  b.norm_kappa_bef = to_doubles((*it)["norm_kappa"]);
  b.norm_c0 = b.norm_c_bef.front();
  b.norm_kappa0 = b.norm_kappa_bef.front();
  return b;
}

// ---------------------------------------------------------------------------
// Transport

Endpoint endpoint_from_environment() {
  Endpoint e;
  if (const char* a = std::getenv("RDC_ADDR"); a && *a) e.address = a;
  if (const char* p = std::getenv("RDC_PORT"); p && *p) {
    char* end = nullptr;
    const long v = std::strtol(p, &end, 10);
    if (*end != '\0' || v < 0 || v > 65535) {
      throw TransportError(std::string("RDC_PORT is not a port number: ") + p);
    }
    e.port = static_cast<int>(v);
  }
  return e;
}

namespace {

std::string sys_error(const std::string& what) {
  return what + ": " + std::strerror(errno);
}

void set_timeout(int fd, std::chrono::milliseconds timeout) {
  if (timeout.count() <= 0) return;
  timeval tv{};
  tv.tv_sec = static_cast<time_t>(timeout.count() / 1000);
  tv.tv_usec = static_cast<suseconds_t>((timeout.count() % 1000) * 1000);
  ::setsockopt(fd, SOL_SOCKET, SO_RCVTIMEO, &tv, sizeof tv);
  ::setsockopt(fd, SOL_SOCKET, SO_SNDTIMEO, &tv, sizeof tv);
}

void set_nodelay(int fd) {
  int one = 1;
  ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
}

struct AddrInfo {
  addrinfo* head{nullptr};
  AddrInfo(const Endpoint& e, bool passive) {
    addrinfo hints{};
    hints.ai_family = AF_UNSPEC;
    hints.ai_socktype = SOCK_STREAM;
    if (passive) hints.ai_flags = AI_PASSIVE;
    const std::string port = std::to_string(e.port);
    const int rc = ::getaddrinfo(e.address.empty() ? nullptr : e.address.c_str(),
                                 port.c_str(), &hints, &head);
    if (rc != 0) {
      throw TransportError("cannot resolve " + e.address + ": " +
                           ::gai_strerror(rc));
    }
  }
  ~AddrInfo() {
    if (head) ::freeaddrinfo(head);
  }
  AddrInfo(const AddrInfo&) = delete;
  AddrInfo& operator=(const AddrInfo&) = delete;
};

std::string describe(const Endpoint& e) {
  return e.address + ":" + std::to_string(e.port);
}

}  // namespace

Connection::Connection(int fd, std::chrono::milliseconds timeout) : fd_(fd) {
  set_timeout(fd_, timeout);
  set_nodelay(fd_);
}

Connection::~Connection() { close(); }

Connection::Connection(Connection&& other) noexcept
    : fd_(other.fd_), decoder_(std::move(other.decoder_)) {
  other.fd_ = -1;
}

Connection& Connection::operator=(Connection&& other) noexcept {
  if (this != &other) {
    close();
    fd_ = other.fd_;
    decoder_ = std::move(other.decoder_);
    other.fd_ = -1;
  }
  return *this;
}

Connection Connection::connect(const Endpoint& to,
                               std::chrono::milliseconds timeout) {
  AddrInfo ai(to, false);
  std::string last = "no addresses";
  for (addrinfo* p = ai.head; p; p = p->ai_next) {
    const int fd = ::socket(p->ai_family, p->ai_socktype, p->ai_protocol);
    if (fd < 0) {
      last = sys_error("socket");
      continue;
    }
    if (::connect(fd, p->ai_addr, p->ai_addrlen) == 0) {
      return Connection(fd, timeout);
    }
    last = sys_error("connect");
    ::close(fd);
  }
  throw TransportError("cannot connect to " + describe(to) + ": " + last);
}

void Connection::send(const Message& m) {
  if (fd_ < 0) throw TransportError("send on a closed connection");
  const std::string frame = encode(m);
  std::size_t off = 0;
  while (off < frame.size()) {
    const ssize_t n =
        ::send(fd_, frame.data() + off, frame.size() - off, MSG_NOSIGNAL);
    if (n < 0) {
      if (errno == EINTR) continue;
      if (errno == EAGAIN || errno == EWOULDBLOCK) {
        throw TransportError("send timed out");
      }
      throw TransportError(sys_error("send failed"));
    }
    off += static_cast<std::size_t>(n);
  }
}

Message Connection::receive() {
  if (fd_ < 0) throw TransportError("receive on a closed connection");
  std::array<char, 65536> chunk;
  for (;;) {
    if (auto m = decoder_.next()) return std::move(*m);
    const ssize_t n = ::recv(fd_, chunk.data(), chunk.size(), 0);
    if (n == 0) throw TransportError("connection closed by peer");
    if (n < 0) {
      if (errno == EINTR) continue;
      if (errno == EAGAIN || errno == EWOULDBLOCK) {
        throw TransportError("receive timed out");
      }
      throw TransportError(sys_error("receive failed"));
    }
    decoder_.feed(std::string_view(chunk.data(), static_cast<std::size_t>(n)));
  }
}

void Connection::close() {
  if (fd_ >= 0) {
    ::close(fd_);
    fd_ = -1;
  }
  decoder_ = FrameDecoder{};
}

// ---------------------------------------------------------------------------

EnvServer::EnvServer(Environment& env, ServerOptions opts)
    : env_(env), opts_(std::move(opts)) {
  AddrInfo ai(opts_.endpoint, true);
  std::string last = "no addresses";
  for (addrinfo* p = ai.head; p; p = p->ai_next) {
    const int fd = ::socket(p->ai_family, p->ai_socktype, p->ai_protocol);
    if (fd < 0) {
      last = sys_error("socket");
      continue;
    }
    int one = 1;
    ::setsockopt(fd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    if (::bind(fd, p->ai_addr, p->ai_addrlen) == 0 && ::listen(fd, 1) == 0) {
      listen_fd_ = fd;
      break;
    }
    last = sys_error("bind");
    ::close(fd);
  }
  if (listen_fd_ < 0) {
    throw TransportError("cannot listen on " + describe(opts_.endpoint) + ": " +
                         last);
  }
  sockaddr_storage addr{};
  socklen_t len = sizeof addr;
  ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&addr), &len);
  port_ = addr.ss_family == AF_INET6
              ? ntohs(reinterpret_cast<sockaddr_in6*>(&addr)->sin6_port)
              : ntohs(reinterpret_cast<sockaddr_in*>(&addr)->sin_port);
}

EnvServer::~EnvServer() {
  if (listen_fd_ >= 0) ::close(listen_fd_);
}

void EnvServer::log(const std::string& line) const {
  if (opts_.log) opts_.log(line);
}

void EnvServer::run() {
  if (listen_fd_ < 0) throw TransportError("server is not listening");
  for (;;) {
    const int fd = ::accept(listen_fd_, nullptr, nullptr);
    if (fd < 0) {
      if (errno == EINTR || errno == ECONNABORTED) continue;
      throw TransportError(sys_error("accept failed"));
    }
    Connection conn(fd, opts_.timeout);
    log("agent connected");
    if (session(conn) == SessionEnd::shutdown) {
      log("shutdown requested");
      ::close(listen_fd_);
      listen_fd_ = -1;
      return;
    }
    log("session ended, waiting for the next agent");
  }
}

EnvServer::SessionEnd EnvServer::session(Connection& conn) {
  auto reject = [&](const std::string& what) {
    log(what);
    try {
      conn.send(error(what));
    } catch (const std::exception&) {
    }
    return SessionEnd::closed;
  };

  try {
    const Message first = conn.receive();
    if (first.kind != Kind::hello) {
      return reject("expected hello, got " + std::string(to_string(first.kind)));
    }
    const int version = first.body["version"].get<int>();
    if (version != kVersion) {
      return reject("protocol version " + std::to_string(version) +
                    " not supported (server speaks " +
                    std::to_string(kVersion) + ")");
    }
    conn.send(hello_ack(env_.info()));

    for (;;) {
      const Message req = conn.receive();
      if (conn.pending() > 0) {
        return reject("request sent before the previous response was read");
      }
      if (req.kind == Kind::shutdown) {
        conn.send(shutdown());
        return SessionEnd::shutdown;
      }
      conn.send(handle(req));
    }
  } catch (const ProtocolError& e) {
    return reject(std::string("protocol error: ") + e.what());
  } catch (const TransportError& e) {
    log(std::string("session lost: ") + e.what());
    return SessionEnd::closed;
  }
}

Message EnvServer::handle(const Message& req) {
  try {
    switch (req.kind) {
      case Kind::reset: {
        const auto seed = req.body["seed"].get<std::uint64_t>();
        const bool rec = req.body.value("baseline", false);
        return observation(env_.reset(seed, rec));
      }
      case Kind::action: {
        const auto a = read_action(req);
        return observation(env_.step(a));
      }
      case Kind::reward_info: {
        if (auto b = read_baseline(req)) env_.set_baseline(*b);
        std::optional<BaselineTrace> current;
        try {
          current = env_.baseline();
        } catch (const EnvError&) {
        }
        return reward_info(current);
      }
      case Kind::episode_end: {
        const int ep = req.body["episode"].get<int>();
        const bool aborted = req.body["aborted"].get<bool>();
        env_.end_episode(ep, aborted);
        return episode_end(ep, aborted);
      }
      default:
        return error("unexpected " + std::string(to_string(req.kind)) +
                     " request");
    }
  } catch (const EpisodeAborted& e) {
    return error(e.what(), true);
  } catch (const std::exception& e) {
    return error(e.what());
  }
}

// ---------------------------------------------------------------------------

RemoteEnvironment::RemoteEnvironment(const Endpoint& to,
                                     std::chrono::milliseconds timeout)
    : conn_(Connection::connect(to, timeout)) {
  info_ = read_info(call(hello(), Kind::hello_ack));
}

Message RemoteEnvironment::call(const Message& request, Kind expected) {
  conn_.send(request);
  Message resp = conn_.receive();
  if (resp.kind == Kind::error) {
    const auto what = resp.body["message"].get<std::string>();
    if (resp.body.value("aborted", false)) throw EpisodeAborted(what);
    if (request.kind == Kind::hello) throw ProtocolError(what);
    throw EnvError(what);
  }
  if (resp.kind != expected) {
    throw ProtocolError("expected " + std::string(to_string(expected)) +
                        " response, got " + std::string(to_string(resp.kind)));
  }
  return resp;
}

StepResult RemoteEnvironment::reset(std::uint64_t seed, bool record_baseline) {
  return read_observation(
      call(proto::reset(seed, record_baseline), Kind::observation));
}

StepResult RemoteEnvironment::step(std::span<const double> a) {
  return read_observation(call(action(a), Kind::observation));
}

BaselineTrace RemoteEnvironment::baseline() {
  auto b = read_baseline(call(reward_info(std::nullopt), Kind::reward_info));
  if (!b) throw EnvError("baseline not recorded");
  return *b;
}

void RemoteEnvironment::set_baseline(const BaselineTrace& b) {
  call(reward_info(b), Kind::reward_info);
}

void RemoteEnvironment::end_episode(int episode, bool aborted) {
  call(proto::episode_end(episode, aborted), Kind::episode_end);
}

void RemoteEnvironment::shutdown_server() {
  if (!conn_.is_open()) return;
  try {
    conn_.send(shutdown());
    conn_.receive();
  } catch (const TransportError&) {
  }
  conn_.close();
}

}  // namespace rdc::proto
