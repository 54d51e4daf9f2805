#include <doctest.h>

#include <cmath>
#include <random>

#include "rdc/env.hpp"
#include "rdc/policy.hpp"

using namespace rdc;

namespace {

BaselineTrace make_baseline(double c0, double k0, std::vector<double> c_bef,
                            std::vector<double> k_bef) {
  BaselineTrace b;
  b.norm_c0 = c0;
  b.norm_kappa0 = k0;
  b.norm_c_bef = std::move(c_bef);
  b.norm_kappa_bef = std::move(k_bef);
  return b;
}

struct Small {
  std::shared_ptr<const Mesh> mesh = std::make_shared<const Mesh>(build_unit_square(8, 8, 4, 4));
  SimParams sim;
  EnvConfig cfg;
  Small() {
    sim.dt = 0.02;
    cfg.episode_len = 6;
  }
  FemEnvironment env() const { return FemEnvironment(mesh, sim, cfg); }
};

std::vector<double> seeded_action(int n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1, 1);
  std::vector<double> a(static_cast<std::size_t>(n));
  for (auto& x : a) x = u(rng);
  return a;
}

}  // namespace

TEST_CASE("action scaling") {
  EnvConfig cfg;
  const std::vector<double> lo(4, -1.0), hi(4, 1.0), mid(4, 0.0);
  for (double k : scale_action(lo, cfg).kappa_per_region) CHECK(k == doctest::Approx(0.1));
  for (double k : scale_action(mid, cfg).kappa_per_region) CHECK(k == doctest::Approx(2.55));
  cfg.kappa_scale = 1e4;
  for (double k : scale_action(lo, cfg).kappa_per_region) CHECK(k == doctest::Approx(1000.0));
  for (double k : scale_action(hi, cfg).kappa_per_region) CHECK(k == doctest::Approx(50000.0));

  const auto a = seeded_action(15, 3);
  const auto back = unscale_action(scale_action(a, cfg), cfg);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(std::abs(back[i] - a[i]) < 1e-12);

  const std::vector<double> bad{1.5};
  CHECK_THROWS_AS(scale_action(bad, cfg), EnvError);
  const std::vector<double> nan{std::nan("")};
  CHECK_THROWS_AS(scale_action(nan, cfg), EnvError);
}

TEST_CASE("reward_diff examples") {
  // norm_kappa equal to the initial one, infection at or below baseline
  const auto b = make_baseline(2.0, 3.0, {2.0, 1.5}, {3.0, 3.0});
  CHECK(std::abs(reward_diff(3.0, 1.5, 1, b, 1.0, 1.0) - 1.0) < 1e-12);
  CHECK(std::abs(reward_diff(3.0, 1.0, 1, b, 1.0, 1.0) - 1.0) < 1e-12);
  // kappa ratio 2, infection excess 0.5 of c0: 2 - 0.5
  CHECK(std::abs(reward_diff(6.0, 2.5, 1, b, 1.0, 1.0) - 1.5) < 1e-12);
  double prev = reward_diff(3.0, 0.0, 1, b, 1.0, 1.0);
  for (double c = 0.1; c < 5.0; c += 0.1) {
    const double r = reward_diff(3.0, c, 1, b, 1.0, 1.0);
    CHECK(r <= prev);
    prev = r;
  }
  CHECK_THROWS_AS(reward_diff(3.0, 1.0, 2, b, 1.0, 1.0), EnvError);
  CHECK_THROWS_AS(reward_diff(3.0, 1.0, 0, make_baseline(0.0, 3.0, {0, 0}, {3, 3}), 1, 1),
                  EnvError);
}

TEST_CASE("reward_state examples") {
  const auto b = make_baseline(2.0, 5.0, {2.0, 2.0}, {5.0, 4.0});
  CHECK(reward_state(4.0, 0.0, 1, b, 1.0, 1.0) == 0.0);
  CHECK(reward_state(9.0, 0.0, 1, b, 1.0, 1.0) == 0.0);
  // c ratio 0.4, kappa deficit -0.2 of kappa0
  CHECK(std::abs(reward_state(3.0, 0.8, 1, b, 1.0, 1.0) - (-0.6)) < 1e-12);
  double prev_c = reward_state(4.0, 0.0, 1, b, 1.0, 1.0);
  double prev_k = reward_state(0.0, 1.0, 1, b, 1.0, 1.0);
  for (double x = 0.1; x < 8.0; x += 0.1) {
    const double rc = reward_state(4.0, x, 1, b, 1.0, 1.0);
    const double rk = reward_state(x, 1.0, 1, b, 1.0, 1.0);
    CHECK(rc <= prev_c);
    CHECK(rk >= prev_k);
    CHECK(rc <= 0.0);
    prev_c = rc;
    prev_k = rk;
  }
}

TEST_CASE("objective names") {
  CHECK(objective_from_string("diff") == Objective::diff);
  CHECK(objective_from_string("state") == Objective::state);
  CHECK(to_string(Objective::state) == "state");
  CHECK_THROWS_AS(objective_from_string("other"), EnvError);
}

TEST_CASE("initial conditions") {
  const Mesh sq = build_unit_square(16, 16, 8, 8);
  const Field f = initial_condition(sq, InitialCondition{});
  for (std::size_t i = 0; i < sq.num_nodes(); ++i) {
    const double dx = sq.nodes()[i].x - 0.5, dy = sq.nodes()[i].y - 0.5;
    const double expect = std::sqrt(dx * dx + dy * dy) <= 0.3 + 1e-12 ? 1.0 : 0.0;
    CHECK(f.values[static_cast<Eigen::Index>(i)] == expect);
  }

  const Mesh r = build_regions15();
  InitialCondition ic;
  ic.kind = InitialCondition::Kind::region;
  ic.region = kRegions15Center;
  const Field g = initial_condition(r, ic);
  std::vector<int> in_center(r.num_nodes(), 0);
  for (std::size_t e = 0; e < r.num_elements(); ++e) {
    if (r.regions()[e] != kRegions15Center) continue;
    for (int v : r.elements()[e]) in_center[static_cast<std::size_t>(v)] = 1;
  }
  for (std::size_t i = 0; i < r.num_nodes(); ++i) {
    CHECK(g.values[static_cast<Eigen::Index>(i)] == in_center[i]);
  }
  ic.region = 15;
  CHECK_THROWS_AS(initial_condition(r, ic), EnvError);
}

TEST_CASE("reset and step contract") {
  Small s;
  auto env = s.env();
  const EnvInfo info = env.info();
  CHECK(info.n_actions == 16);
  CHECK(info.obs_size == 81);
  CHECK(info.episode_len == 6);

  const StepResult r0 = env.reset(42);
  CHECK(r0.obs.step_index == 0);
  CHECK(r0.obs.action == seeded_action(16, 42));
  CHECK(r0 == env.reset(42));
  CHECK(!(r0 == env.reset(43)));

  const std::vector<double> a(16, 0.25);
  env.reset(7);
  const StepResult s1 = env.step(a);
  const StepResult s2 = env.step(a);
  CHECK(s1.obs.norm_kappa == s2.obs.norm_kappa);
  for (int i = 2; i < 6; ++i) {
    CHECK(!env.step(a).done == (i < 5));
  }
  CHECK_THROWS_AS(env.step(a), EnvError);
  env.reset(7);
  CHECK_THROWS_AS(env.step(std::vector<double>(3, 0.0)), EnvError);
}

TEST_CASE("square preset episodes end at step 60") {
  Small s;
  s.cfg.episode_len = 60;
  auto env = s.env();
  env.reset(1);
  const std::vector<double> a(16, 0.0);
  int steps = 0;
  bool done = false;
  while (!done) {
    done = env.step(a).done;
    ++steps;
  }
  CHECK(steps == 60);
}

TEST_CASE("norm trajectory matches a direct simulation") {
  Small s;
  auto env = s.env();
  const StepResult r0 = env.reset(5);
  ReactionDiffusionModel model(s.mesh, s.sim);
  Field f = initial_condition(*s.mesh, s.cfg.ic);
  CHECK(model.norm(f.values) == r0.obs.norm_c);
  for (int i = 1; i <= 6; ++i) {
    const auto a = seeded_action(16, 1000 + static_cast<std::uint64_t>(i));
    const StepResult r = env.step(a);
    const ControlMap k = scale_action(a, s.cfg);
    f = model.step(f, k);
    CHECK(r.obs.norm_c == model.norm(f.values));
    CHECK(r.obs.norm_kappa == l2_norm_control(k, *s.mesh));
    CHECK(r.obs.step_index == i);
    for (std::size_t j = 0; j < r.obs.state.size(); ++j) {
      CHECK(r.obs.state[j] == f.values[static_cast<Eigen::Index>(j)]);
    }
  }
}

TEST_CASE("seeded baseline") {
  Small s;
  auto env = s.env();
  CHECK(!env.has_baseline());
  CHECK_THROWS_AS(env.baseline(), EnvError);
  const BaselineTrace b = env.record_baseline(9);
  CHECK(b.norm_c_bef.size() == 7);
  CHECK(b.norm_kappa_bef.size() == 7);
  CHECK(b.norm_c0 == b.norm_c_bef[0]);
  CHECK(b.norm_kappa0 == b.norm_kappa_bef[0]);
  CHECK(env.baseline() == b);

  // oracle replay of the recorded control schedule
  const auto& ep = env.baseline_episode();
  REQUIRE(ep.steps.size() == 7);
  ReactionDiffusionModel model(s.mesh, s.sim);
  Field f = initial_condition(*s.mesh, s.cfg.ic);
  for (int i = 1; i <= 6; ++i) {
    const ControlMap k = scale_action(ep.steps[static_cast<std::size_t>(i)].action, s.cfg);
    f = model.step(f, k);
    CHECK(b.norm_c_bef[static_cast<std::size_t>(i)] == model.norm(f.values));
    CHECK(b.norm_kappa_bef[static_cast<std::size_t>(i)] == l2_norm_control(k, *s.mesh));
  }

  // replaying the same trajectory gives the pure mobility reward
  env.reset(9);
  for (int i = 1; i <= 6; ++i) {
    const StepResult r = env.step(ep.steps[static_cast<std::size_t>(i)].action);
    CHECK(std::abs(r.reward - r.obs.norm_kappa / b.norm_kappa0) < 1e-12);
  }
}

TEST_CASE("a normal reset records a baseline when none exists") {
  Small s;
  s.cfg.seed = 77;
  auto env = s.env();
  env.reset(1);
  CHECK(env.has_baseline());
  auto other = s.env();
  CHECK(other.record_baseline(77) == env.baseline());
}

TEST_CASE("baseline installed by a recording episode") {
  Small s;
  auto env = s.env();
  Agent agent(env.info(), PolicyConfig{}, 3);
  const EpisodeTrace t = agent.record_baseline(env);
  CHECK(t.episode == -1);
  CHECK(t.steps.size() == 7);
  REQUIRE(agent.baseline().has_value());
  CHECK(*agent.baseline() == env.baseline());
  for (std::size_t i = 0; i < t.steps.size(); ++i) {
    CHECK(env.baseline().norm_c_bef[i] == t.steps[i].norm_c);
    // during recording the rewards are evaluated against the episode itself
    CHECK(std::abs(t.steps[i].reward - t.steps[i].norm_kappa / env.baseline().norm_kappa0) <
          1e-12);
  }

  BaselineTrace bad = env.baseline();
  bad.norm_c_bef.pop_back();
  CHECK_THROWS_AS(env.set_baseline(bad), EnvError);
}

TEST_CASE("state objective rewards are non-positive") {
  Small s;
  s.cfg.objective = Objective::state;
  auto env = s.env();
  env.record_baseline(2);
  env.reset(3);
  for (int i = 0; i < 6; ++i) CHECK(env.step(seeded_action(16, 50 + i)).reward <= 0.0);
}

TEST_CASE("invalid environment configuration") {
  EnvConfig cfg;
  cfg.action_low = 6.0;
  CHECK_THROWS_AS(cfg.validate(), EnvError);
  cfg = {};
  cfg.episode_len = 0;
  CHECK_THROWS_AS(cfg.validate(), EnvError);
  cfg = {};
  cfg.weights.w2 = -1.0;
  CHECK_THROWS_AS(cfg.validate(), EnvError);
}
