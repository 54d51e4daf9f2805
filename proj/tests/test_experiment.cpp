#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "rdc/experiment.hpp"

using namespace rdc;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("rdc_test_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

ExperimentConfig small_config(int episodes) {
  ExperimentConfig cfg = load_config({}, "square",
                                     {parse_override("mesh.nx=8"), parse_override("mesh.ny=8"),
                                      parse_override("mesh.patches_x=4"),
                                      parse_override("mesh.patches_y=4"),
                                      parse_override("env.episode_len=6"),
                                      parse_override("agent.hidden=8")});
  cfg.agent.episodes = episodes;
  return cfg;
}

EpisodeTrace trace(int episode, int steps, double bias) {
  EpisodeTrace t;
  t.episode = episode;
  for (int i = 0; i <= steps; ++i) {
    t.steps.push_back({i, bias + 0.1 * i, 1.0 + bias * i, 2.0 - 0.01 * i, {0.5, -0.25}});
  }
  return t;
}

}  // namespace

TEST_CASE("presets") {
  const auto sq = preset("square");
  CHECK(sq.sim.beta == 2.5);
  CHECK(sq.sim.gamma == 1.0);
  CHECK(sq.env.episode_len == 60);
  CHECK(sq.mesh.patches_x * sq.mesh.patches_y == 64);
  CHECK(sq.agent.episodes == 200);

  const auto rg = preset("regions");
  CHECK(rg.sim.beta == 50.0);
  CHECK(rg.env.episode_len == 40);
  CHECK(rg.env.kappa_scale == 1e4);
  CHECK(build_mesh(rg.mesh)->num_regions() == 15);
  CHECK_THROWS_AS(preset("madrid"), ConfigError);
}

TEST_CASE("config text round trip") {
  ExperimentConfig cfg = preset("regions");
  cfg.sim.dt = 0.0123456789;
  cfg.env.weights.w2 = 2.5;
  cfg.agent.seed = 99;
  cfg.agent.policy.learning_rate = 1e-3;
  cfg.run.out = "somewhere else";
  const std::string text = format_config(cfg);

  ExperimentConfig back = preset("square");
  for (const auto& e : parse_config_text(text)) apply_setting(back, e.section, e.key, e.value);
  CHECK(format_config(back) == text);
  CHECK(back.sim.dt == 0.0123456789);
  CHECK(back.run.out == "somewhere else");
}

TEST_CASE("config file, preset and overrides") {
  const fs::path dir = fresh_dir("config");
  fs::create_directories(dir);
  std::ofstream(dir / "exp.toml") << "# experiment\n[run]\npreset = \"regions\"\n\n"
                                     "[sim]\ndt = 0.005   # smaller\n[agent]\nepisodes = 7\n";
  auto cfg = load_config(dir / "exp.toml", "", {parse_override("agent.episodes=9")});
  CHECK(cfg.run.preset == "regions");
  CHECK(cfg.sim.beta == 50.0);
  CHECK(cfg.sim.dt == 0.005);
  CHECK(cfg.agent.episodes == 9);

  cfg = load_config(dir / "exp.toml", "square", {});
  CHECK(cfg.sim.beta == 2.5);
  CHECK(cfg.agent.episodes == 7);

  std::ofstream(dir / "bad.toml") << "[sim]\n\ndt = fast\n";
  try {
    load_config(dir / "bad.toml", "", {});
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find(":3:") != std::string::npos);
  }
  CHECK_THROWS_AS(parse_override("nodot=1"), ConfigError);
  CHECK_THROWS_AS(load_config({}, "", {parse_override("sim.nope=1")}), ConfigError);
  CHECK_THROWS_AS(load_config({}, "", {parse_override("env.objective=maybe")}), ConfigError);
  CHECK_THROWS_AS(load_config({}, "", {parse_override("sim.dt=-1")}), ConfigError);
  CHECK_THROWS_AS(load_config({}, "", {parse_override("agent.episodes=-3")}), ConfigError);
  CHECK_THROWS_AS(load_config({}, "", {parse_override("mesh.patches_x=5")}), ConfigError);
  CHECK_THROWS_AS(load_config(dir / "missing.toml", "", {}), ConfigError);
  CHECK_THROWS_AS(load_config({}, "", {parse_override("mesh.kind=file"),
                                       parse_override("mesh.file=nowhere.mesh")}),
                  ConfigError);
  fs::remove_all(dir);
}

TEST_CASE("trace csv round trip") {
  const fs::path dir = fresh_dir("trace");
  fs::create_directories(dir);
  std::vector<EpisodeTrace> ts{trace(0, 4, 0.1), trace(1, 4, 1.0 / 3.0)};
  ts[1].steps[4].action.clear();
  ts[1].steps[4].reward = -std::numeric_limits<double>::infinity();
  ts[1].aborted = true;
  write_trace_csv(dir / "t.csv", ts, 2);
  const auto back = read_trace_csv(dir / "t.csv");
  REQUIRE(back.size() == 2);
  CHECK(back[1].aborted);
  for (std::size_t e = 0; e < 2; ++e) {
    REQUIRE(back[e].steps.size() == ts[e].steps.size());
    for (std::size_t i = 0; i < ts[e].steps.size(); ++i) {
      CHECK(back[e].steps[i].reward == ts[e].steps[i].reward);
      CHECK(back[e].steps[i].norm_c == ts[e].steps[i].norm_c);
      CHECK(back[e].steps[i].action == ts[e].steps[i].action);
    }
  }
  fs::remove_all(dir);
}

TEST_CASE("compare") {
  std::vector<EpisodeTrace> a;
  for (int e = 0; e < 20; ++e) a.push_back(trace(e, 6, 0.01 * e));
  const auto same = compare_traces(a, a);
  CHECK(same.rows.size() == 7);
  for (const auto& r : same.rows) {
    CHECK(r.reward_after - r.reward_before == 0.0);
    CHECK(r.norm_c_after - r.norm_c_before == 0.0);
    CHECK(r.norm_kappa_after - r.norm_kappa_before == 0.0);
  }
  CHECK(same.episodes_before == 2);

  // final decile of 20 episodes is episodes 18 and 19
  const auto s = compare_traces({trace(0, 6, 0.0)}, a);
  CHECK(s.episodes_before == 1);
  CHECK(s.episodes_after == 2);
  CHECK(s.rows[3].reward_after == doctest::Approx(0.185 + 0.3));
  CHECK(s.mean_reward_after - s.mean_reward_before == doctest::Approx(0.185));
  CHECK(format_compare(s).find("reward") != std::string::npos);

  CHECK_THROWS_AS(compare_traces({trace(0, 5, 0.0)}, a), ConfigError);
}

TEST_CASE("zero episodes writes only the baseline and before snapshots") {
  const auto cfg = small_config(0);
  const auto mesh = build_mesh(cfg.mesh);
  auto env = make_environment(cfg, mesh);
  const fs::path out = fresh_dir("zero");
  const RunOutcome o = run_experiment(cfg, *env, *mesh, 1, out);
  CHECK(o.ok);
  CHECK(o.episodes_done == 0);
  for (const char* f : {"baseline.csv", "field_before_step0.csv", "field_before_final.csv",
                        "kappa_before_step0.csv", "kappa_before_final.csv", "manifest.json",
                        "config.toml"}) {
    CHECK_MESSAGE(fs::exists(out / f), f);
  }
  for (const char* f : {"trace.csv", "checkpoint.txt", "after.csv", "compare.csv"}) {
    CHECK_MESSAGE(!fs::exists(out / f), f);
  }
  const auto m = proto::Json::parse(slurp(out / "manifest.json"));
  CHECK(m["status"] == "ok");
  CHECK(m["episodes_run"] == 0);
  CHECK(read_trace_csv(out / "baseline.csv")[0].steps.size() == 7);
  fs::remove_all(out);
}

TEST_CASE("reruns reproduce every artifact") {
  const auto cfg = small_config(4);
  const auto mesh = build_mesh(cfg.mesh);
  const fs::path a = fresh_dir("rerun_a"), b = fresh_dir("rerun_b");
  {
    auto env = make_environment(cfg, mesh);
    CHECK(run_experiment(cfg, *env, *mesh, 3, a).ok);
  }
  {
    auto env = make_environment(cfg, mesh);
    CHECK(run_experiment(cfg, *env, *mesh, 3, b).ok);
  }
  int files = 0;
  for (const auto& entry : fs::directory_iterator(a)) {
    const auto name = entry.path().filename();
    ++files;
    if (name == "manifest.json") {
      auto ma = proto::Json::parse(slurp(a / name)), mb = proto::Json::parse(slurp(b / name));
      ma.erase("wall_time_s");
      mb.erase("wall_time_s");
      CHECK(ma == mb);
    } else {
      CHECK_MESSAGE(slurp(a / name) == slurp(b / name), name.string());
    }
  }
  CHECK(files == 16);
  CHECK(read_trace_csv(a / "trace.csv").size() == 4);
  CHECK(fs::exists(a / "compare.txt"));
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST_CASE("resume continues the same run") {
  auto cfg = small_config(6);
  const auto mesh = build_mesh(cfg.mesh);
  const fs::path full = fresh_dir("resume_full"), part = fresh_dir("resume_part"),
                 rest = fresh_dir("resume_rest");
  {
    auto env = make_environment(cfg, mesh);
    run_experiment(cfg, *env, *mesh, 5, full);
  }
  {
    auto c = cfg;
    c.agent.episodes = 3;
    auto env = make_environment(c, mesh);
    run_experiment(c, *env, *mesh, 5, part);
  }
  {
    auto c = cfg;
    c.agent.resume = part / "checkpoint.txt";
    auto env = make_environment(c, mesh);
    const RunOutcome o = run_experiment(c, *env, *mesh, 5, rest);
    CHECK(o.ok);
    CHECK(o.episodes_done == 3);
  }
  CHECK(slurp(full / "checkpoint.txt") == slurp(rest / "checkpoint.txt"));
  const auto t_full = read_trace_csv(full / "trace.csv");
  const auto t_rest = read_trace_csv(rest / "trace.csv");
  REQUIRE(t_rest.size() == 3);
  for (std::size_t e = 0; e < 3; ++e) {
    CHECK(t_rest[e].episode == t_full[e + 3].episode);
    for (std::size_t i = 0; i < t_rest[e].steps.size(); ++i) {
      CHECK(t_rest[e].steps[i].reward == t_full[e + 3].steps[i].reward);
    }
  }
  fs::remove_all(full);
  fs::remove_all(part);
  fs::remove_all(rest);
}
