#include <doctest.h>

#include <arpa/inet.h>
#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cstring>
#include <random>
#include <thread>

#include "rdc/proto.hpp"

using namespace rdc;
using namespace rdc::proto;

namespace {

std::string error_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const ProtocolError& e) {
    return e.what();
  }
  return "no error";
}

std::string frame_of(const std::string& json) {
  std::string out(4, '\0');
  const auto n = static_cast<std::uint32_t>(json.size());
  out[0] = static_cast<char>(n >> 24);
  out[1] = static_cast<char>(n >> 16);
  out[2] = static_cast<char>(n >> 8);
  out[3] = static_cast<char>(n);
  return out + json;
}

std::vector<double> random_doubles(std::mt19937_64& rng, std::size_t n) {
  std::uniform_real_distribution<double> u(-1e3, 1e3);
  std::uniform_int_distribution<int> e(-300, 300);
  std::vector<double> v(n);
  for (auto& x : v) x = std::ldexp(u(rng), e(rng) / 10);
  return v;
}

Message random_message(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> kind(0, 8);
  std::uniform_int_distribution<int> small(0, 70);
  const auto n = static_cast<std::size_t>(small(rng));
  switch (kind(rng)) {
    case 0: return hello();
    case 1: return hello_ack(EnvInfo{small(rng) + 1, small(rng) + 1, small(rng) + 1});
    case 2: return reset(rng(), small(rng) % 2 == 0);
    case 3: {
      StepResult r;
      r.obs.state = random_doubles(rng, n);
      r.obs.action = random_doubles(rng, n / 2);
      r.obs.norm_c = random_doubles(rng, 1)[0];
      r.obs.norm_kappa = random_doubles(rng, 1)[0];
      r.obs.step_index = small(rng);
      r.reward = random_doubles(rng, 1)[0];
      r.done = small(rng) % 2 == 1;
      return observation(r);
    }
    case 4: return action(random_doubles(rng, n + 1));
    case 5: {
      BaselineTrace b;
      b.norm_c_bef = random_doubles(rng, n + 1);
      b.norm_kappa_bef = random_doubles(rng, n + 1);
      b.norm_c0 = b.norm_c_bef[0];
      b.norm_kappa0 = b.norm_kappa_bef[0];
      return reward_info(small(rng) % 3 == 0 ? std::nullopt : std::optional<BaselineTrace>(b));
    }
    case 6: return episode_end(small(rng) - 1, small(rng) % 2 == 0);
    case 7: return shutdown();
    default: return error("failure " + std::to_string(small(rng)), small(rng) % 2 == 0);
  }
}

struct Fixture {
  std::shared_ptr<const Mesh> mesh = std::make_shared<const Mesh>(build_unit_square(8, 8, 4, 4));
  SimParams sim;
  EnvConfig cfg;
  Fixture() {
    sim.dt = 0.02;
    cfg.episode_len = 5;
  }
  FemEnvironment env() const { return FemEnvironment(mesh, sim, cfg); }
};

struct Served {
  FemEnvironment env;
  std::unique_ptr<EnvServer> server;
  std::thread thread;

  explicit Served(FemEnvironment e) : env(std::move(e)) {
    ServerOptions opts;
    opts.endpoint.port = 0;
    opts.timeout = std::chrono::seconds(20);
    server = std::make_unique<EnvServer>(env, opts);
    thread = std::thread([this] { server->run(); });
  }
  Endpoint endpoint() const { return {"127.0.0.1", server->port()}; }
  ~Served() {
    if (thread.joinable()) {
      RemoteEnvironment(endpoint()).shutdown_server();
      thread.join();
    }
  }
};

int raw_connect(int port) {
  const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(static_cast<std::uint16_t>(port));
  ::inet_pton(AF_INET, "127.0.0.1", &addr.sin_addr);
  REQUIRE(::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr) == 0);
  return fd;
}

}  // namespace

TEST_CASE("smallest frame is byte exact") {
  const std::string f = encode(shutdown());
  CHECK(f.size() == 4 + 19);
  CHECK(f == std::string("\0\0\0\x13", 4) + R"({"kind":"shutdown"})");
  CHECK(decode(f) == shutdown());
}

TEST_CASE("randomized round trip") {
  std::mt19937_64 rng(2024);
  for (int i = 0; i < 500; ++i) {
    const Message m = random_message(rng);
    const std::string f = encode(m);
    CHECK(decode(f) == m);
    CHECK(encode(decode(f)) == f);
  }
}

TEST_CASE("observation and action readers") {
  std::mt19937_64 rng(5);
  const auto a = random_doubles(rng, 15);
  const auto back = read_action(decode(encode(action(a))));
  CHECK(back.size() == 15);
  CHECK(back == a);

  StepResult r;
  r.obs.state = random_doubles(rng, 9);
  r.obs.action = random_doubles(rng, 4);
  r.obs.norm_c = 0.1 + 0.2;
  r.obs.norm_kappa = 1.0 / 3.0;
  r.obs.step_index = 17;
  r.reward = -std::nextafter(1.0, 2.0);
  r.done = true;
  CHECK(read_observation(decode(encode(observation(r)))) == r);

  const EnvInfo info = read_info(decode(encode(hello_ack({15, 273, 40}))));
  CHECK(info.n_actions == 15);
  CHECK(info.obs_size == 273);
  CHECK(info.episode_len == 40);
}

TEST_CASE("stream parsing is independent of segmentation") {
  std::mt19937_64 rng(77);
  std::vector<Message> sent;
  std::string stream;
  for (int i = 0; i < 40; ++i) {
    sent.push_back(random_message(rng));
    stream += encode(sent.back());
  }
  FrameDecoder bytewise;
  std::vector<Message> got;
  for (char c : stream) {
    bytewise.feed(std::string_view(&c, 1));
    while (auto m = bytewise.next()) got.push_back(*m);
  }
  CHECK(got == sent);
  CHECK(bytewise.buffered() == 0);

  FrameDecoder whole;
  whole.feed(stream);
  got.clear();
  while (auto m = whole.next()) got.push_back(*m);
  CHECK(got == sent);
}

TEST_CASE("malformed frames") {
  const std::string ok = encode(action(std::vector<double>{1.0, 2.0}));
  CHECK(error_of([&] { decode(ok.substr(0, ok.size() - 1)); }).find("truncated") != std::string::npos);
  CHECK(error_of([&] { decode(ok.substr(0, 2)); }).find("truncated") != std::string::npos);
  CHECK(error_of([&] { decode(ok + "x"); }) != "no error");

  std::string huge = std::string("\x04\x00\x00\x01", 4);
  CHECK(error_of([&] { decode(huge); }).find("exceeds") != std::string::npos);
  FrameDecoder d;
  d.feed(huge);
  CHECK_THROWS_AS(d.next(), ProtocolError);

  CHECK(error_of([&] { decode(frame_of("{\"kind\":\"action\",")); }).find("JSON") != std::string::npos);
  CHECK(error_of([&] { decode(frame_of("[1,2]")); }) != "no error");
  CHECK(error_of([&] { decode(frame_of(R"({"action":[1]})")); }).find("'kind'") != std::string::npos);
  CHECK(error_of([&] { decode(frame_of(R"({"kind":"bogus"})")); }).find("bogus") != std::string::npos);
  CHECK(error_of([&] { decode(frame_of(R"({"kind":"action"})")); }).find("'action'") != std::string::npos);
  CHECK(error_of([&] { decode(frame_of(R"({"kind":"action","action":[1,"x"]})")); })
            .find("'action'") != std::string::npos);
  CHECK(error_of([&] { decode(frame_of(R"({"kind":"reset"})")); }).find("'seed'") != std::string::npos);
  CHECK(error_of([&] {
          decode(frame_of(R"({"kind":"observation","state":[],"action":[],"norm_c":1,)"
                          R"("norm_kappa":1,"step":0,"reward":0})"));
        }).find("'done'") != std::string::npos);
  CHECK(error_of([&] { decode(frame_of(R"({"kind":"hello_ack","version":1})")); })
            .find("'n_actions'") != std::string::npos);
}

TEST_CASE("loopback episode equals the in-process episode") {
  Fixture fx;
  Served served(fx.env());
  auto local = fx.env();
  RemoteEnvironment remote(served.endpoint(), std::chrono::seconds(20));
  CHECK(remote.info().n_actions == 16);
  CHECK(remote.info().obs_size == 81);
  CHECK(remote.info().episode_len == 5);

  CHECK(remote.reset(3, true) == local.reset(3, true));
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(-1, 1);
  for (int i = 0; i < 5; ++i) {
    std::vector<double> a(16);
    for (auto& x : a) x = u(rng);
    CHECK(remote.step(a) == local.step(a));
  }
  CHECK(remote.baseline() == local.baseline());

  CHECK(remote.reset(11) == local.reset(11));
  for (int i = 0; i < 5; ++i) {
    const std::vector<double> a(16, 0.1 * i);
    CHECK(remote.step(a) == local.step(a));
  }
  remote.end_episode(0, false);

  BaselineTrace b = local.baseline();
  b.norm_c_bef[2] *= 1.5;
  remote.set_baseline(b);
  CHECK(remote.baseline() == b);

  CHECK_THROWS_AS(remote.step(std::vector<double>(16, 0.0)), EnvError);
  remote.reset(1);
  CHECK_THROWS_AS(remote.step(std::vector<double>(3, 0.0)), EnvError);
}

TEST_CASE("version mismatch is refused") {
  Fixture fx;
  Served served(fx.env());
  Connection c = Connection::connect(served.endpoint(), std::chrono::seconds(5));
  c.send(hello(kVersion + 1));
  const Message reply = c.receive();
  CHECK(reply.kind == Kind::error);
  CHECK(reply.body["message"].get<std::string>().find("version") != std::string::npos);
  CHECK_THROWS_AS(c.receive(), TransportError);
}

TEST_CASE("pipelined requests are refused") {
  Fixture fx;
  Served served(fx.env());
  Connection c = Connection::connect(served.endpoint(), std::chrono::seconds(5));
  c.send(hello());
  CHECK(c.receive().kind == Kind::hello_ack);
  c.close();

  const int fd = raw_connect(served.server->port());
  const std::string burst = encode(hello()) + encode(reset(1, false)) + encode(reset(2, false));
  REQUIRE(::write(fd, burst.data(), burst.size()) == static_cast<ssize_t>(burst.size()));
  FrameDecoder d;
  char buf[65536];
  std::vector<Message> got;
  for (;;) {
    const ssize_t n = ::read(fd, buf, sizeof buf);
    if (n <= 0) break;
    d.feed(std::string_view(buf, static_cast<std::size_t>(n)));
    while (auto m = d.next()) got.push_back(*m);
  }
  ::close(fd);
  REQUIRE(!got.empty());
  CHECK(got.back().kind == Kind::error);
  CHECK(got.back().body["message"].get<std::string>().find("before the previous response") !=
        std::string::npos);

  // the server went back to accepting
  RemoteEnvironment again(served.endpoint(), std::chrono::seconds(5));
  CHECK(again.reset(1).obs.step_index == 0);
}

TEST_CASE("lost connection mid-episode") {
  Fixture fx;
  Served served(fx.env());
  {
    Connection c = Connection::connect(served.endpoint(), std::chrono::seconds(5));
    c.send(hello());
    c.receive();
    c.send(reset(4, false));
    CHECK(c.receive().kind == Kind::observation);
  }
  RemoteEnvironment next(served.endpoint(), std::chrono::seconds(5));
  CHECK(next.reset(4).obs.step_index == 0);

  // client side: the server vanishes after the handshake
  const int lfd = ::socket(AF_INET, SOCK_STREAM, 0);
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = 0;
  ::inet_pton(AF_INET, "127.0.0.1", &addr.sin_addr);
  REQUIRE(::bind(lfd, reinterpret_cast<sockaddr*>(&addr), sizeof addr) == 0);
  REQUIRE(::listen(lfd, 1) == 0);
  socklen_t len = sizeof addr;
  ::getsockname(lfd, reinterpret_cast<sockaddr*>(&addr), &len);
  const int port = ntohs(addr.sin_port);
  std::thread fake([&] {
    Connection s(::accept(lfd, nullptr, nullptr), std::chrono::seconds(5));
    s.receive();
    s.send(hello_ack({16, 81, 5}));
    s.receive();
  });
  RemoteEnvironment client(Endpoint{"127.0.0.1", port}, std::chrono::seconds(5));
  CHECK_THROWS_AS(client.reset(1), TransportError);
  fake.join();
  ::close(lfd);
}

TEST_CASE("shutdown stops the server and frees the port") {
  Fixture fx;
  auto env = fx.env();
  ServerOptions opts;
  opts.endpoint.port = 0;
  auto server = std::make_unique<EnvServer>(env, opts);
  const int port = server->port();
  std::thread t([&] { server->run(); });
  RemoteEnvironment(Endpoint{"127.0.0.1", port}).shutdown_server();
  t.join();
  server.reset();

  opts.endpoint.port = port;
  EnvServer again(env, opts);
  CHECK(again.port() == port);
}

TEST_CASE("endpoint from environment variables") {
  ::setenv("RDC_ADDR", "0.0.0.0", 1);
  ::setenv("RDC_PORT", "9100", 1);
  const Endpoint e = endpoint_from_environment();
  CHECK(e.address == "0.0.0.0");
  CHECK(e.port == 9100);
  ::unsetenv("RDC_ADDR");
  ::unsetenv("RDC_PORT");
  CHECK(endpoint_from_environment().port == kDefaultPort);
}
