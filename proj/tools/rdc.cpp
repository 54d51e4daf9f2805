// rdc: reaction-diffusion control experiments.
//
//   rdc run     [config flags]                 train in-process, write artifacts
//   rdc serve   [config flags]                 host the environment on a socket
//   rdc train   --connect host:port [flags]    train against a served environment
//   rdc compare before.csv after.csv           per-step before/after deltas
//   rdc mesh gen --kind square|regions15 -o f  write a mesh file
//
// Exit codes: 0 success, 1 runtime failure, 2 configuration error.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <limits>

#include <CLI11.hpp>

#include "rdc/experiment.hpp"

namespace fs = std::filesystem;
using namespace rdc;

namespace {

struct ConfigFlags {
  std::string config;
  std::string preset;
  std::vector<std::string> set;
  std::optional<int> episodes;
  std::optional<std::uint64_t> seed;
  std::optional<int> seeds;
  std::optional<std::string> objective;
  std::optional<std::string> out;
  std::optional<std::string> resume;
  std::optional<std::string> address;
  std::optional<int> port;
  std::optional<double> timeout;
  bool quiet{false};

  void add_to(CLI::App* app) {
    app->add_option("-c,--config", config, "configuration file");
    app->add_option("-p,--preset", preset, "square or regions");
    app->add_option("--set", set, "override, section.key=value (repeatable)");
    app->add_option("-e,--episodes", episodes, "training episodes");
    app->add_option("-s,--seed", seed, "base seed");
    app->add_option("--seeds", seeds, "independent runs with seeds seed..seed+k-1");
    app->add_option("--objective", objective, "diff or state");
    app->add_option("-o,--out", out, "output directory");
    app->add_option("--resume", resume, "checkpoint to continue from");
    app->add_option("--address", address, "bind or connect address");
    app->add_option("--port", port, "bind or connect port");
    app->add_option("--timeout", timeout, "socket timeout in seconds");
    app->add_flag("-q,--quiet", quiet, "no progress output");
  }

  ExperimentConfig load() const {
    std::vector<ConfigEntry> ov;
    for (const auto& s : set) ov.push_back(parse_override(s));
    auto put = [&](const char* section, const char* key, const std::string& v) {
      ov.push_back({section, key, v, 0});
    };
    if (episodes) put("agent", "episodes", std::to_string(*episodes));
    if (seed) put("agent", "seed", std::to_string(*seed));
    if (seeds) put("run", "seeds", std::to_string(*seeds));
    if (objective) put("env", "objective", *objective);
    if (out) put("run", "out", *out);
    if (resume) put("agent", "resume", *resume);
    if (address) put("run", "address", *address);
    if (port) put("run", "port", std::to_string(*port));
    if (timeout) put("run", "timeout", std::to_string(*timeout));
    return load_config(config, preset, ov);
  }

  LogFn logger() const {
    if (quiet) return {};
    return [](const std::string& m) { std::cerr << m << std::endl; };
  }
};

std::chrono::milliseconds timeout_of(const ExperimentConfig& cfg) {
  return std::chrono::milliseconds(static_cast<long long>(cfg.run.timeout_s * 1000.0));
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

// Runs every requested seed against env and writes a per-seed summary when
// there is more than one.
int run_seeds(const ExperimentConfig& cfg, Environment& env, const Mesh& mesh,
              const LogFn& log) {
  const auto base = cfg.agent.seed;
  bool all_ok = true;
  std::vector<std::pair<std::uint64_t, RunOutcome>> results;
  for (int i = 0; i < cfg.run.seeds; ++i) {
    const std::uint64_t seed = base + static_cast<std::uint64_t>(i);
    const fs::path out =
        cfg.run.seeds > 1 ? cfg.run.out / ("seed_" + std::to_string(seed)) : cfg.run.out;
    RunOutcome o = run_experiment(cfg, env, mesh, seed, out, log);
    if (!o.ok) {
      std::cerr << "seed " << seed << ": " << o.error << "\n";
      all_ok = false;
    }
    results.emplace_back(seed, std::move(o));
  }
  if (cfg.run.seeds > 1) {
    std::ofstream s(cfg.run.out / "seeds.csv");
    s << "seed,status,episodes,aborted,reward_first_decile,reward_last_decile,"
         "norm_c_last_decile,norm_c_baseline,norm_kappa_last_decile,norm_kappa_baseline\n";
    for (const auto& [seed, o] : results) {
      s << seed << "," << (o.ok ? "ok" : "failed") << "," << o.episodes_done << ","
        << o.aborted_episodes;
      if (o.has_summary) {
        const auto& c = o.summary;
        s << "," << fmt(o.reward_first_decile) << "," << fmt(c.mean_reward_after) << ","
          << fmt(c.mean_norm_c_after) << "," << fmt(c.mean_norm_c_before) << ","
          << fmt(c.mean_norm_kappa_after) << "," << fmt(c.mean_norm_kappa_before);
      } else {
        s << ",,,,,,";
      }
      s << "\n";
    }
  }
  return all_ok ? 0 : 1;
}

proto::Endpoint parse_endpoint(const std::string& text, const proto::Endpoint& fallback) {
  proto::Endpoint e = fallback;
  const auto colon = text.rfind(':');
  if (colon == std::string::npos) {
    e.address = text;
    return e;
  }
  e.address = text.substr(0, colon);
  const std::string port = text.substr(colon + 1);
  try {
    std::size_t used = 0;
    e.port = std::stoi(port, &used);
    if (used != port.size() || e.port < 0 || e.port > 65535) throw std::out_of_range(port);
  } catch (const std::exception&) {
    throw ConfigError("bad port in '" + text + "'");
  }
  return e;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"reaction-diffusion control with policy-gradient agents"};
  app.require_subcommand(1);

  ConfigFlags run_flags;
  auto* run = app.add_subcommand("run", "train in-process and write artifacts");
  run_flags.add_to(run);

  ConfigFlags serve_flags;
  auto* serve = app.add_subcommand("serve", "serve the environment over TCP");
  serve_flags.add_to(serve);

  ConfigFlags train_flags;
  std::string connect;
  bool keep_server = false;
  auto* train = app.add_subcommand("train", "train against a served environment");
  train_flags.add_to(train);
  train->add_option("--connect", connect, "host:port of rdc serve")->required();
  train->add_flag("--keep-server", keep_server, "leave the server running afterwards");

  std::string before_path, after_path, compare_out;
  auto* compare = app.add_subcommand("compare", "compare two trace files");
  compare->add_option("before", before_path, "trace before training")->required();
  compare->add_option("after", after_path, "trace after training")->required();
  compare->add_option("-o,--out", compare_out, "write <out>.csv and <out>.txt");

  auto* mesh_cmd = app.add_subcommand("mesh", "mesh utilities");
  mesh_cmd->require_subcommand(1);
  std::string mesh_kind = "square", mesh_out;
  int nx = 16, ny = 16, px = 8, py = 8;
  auto* gen = mesh_cmd->add_subcommand("gen", "generate a mesh file");
  gen->add_option("--kind", mesh_kind, "square or regions15")
      ->check(CLI::IsMember({"square", "regions15"}));
  gen->add_option("--nx", nx, "cells in x");
  gen->add_option("--ny", ny, "cells in y");
  gen->add_option("--px", px, "patches in x");
  gen->add_option("--py", py, "patches in y");
  gen->add_option("-o,--out", mesh_out, "output file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*run) {
      const ExperimentConfig cfg = run_flags.load();
      const auto mesh = build_mesh(cfg.mesh);
      auto env = make_environment(cfg, mesh);
      return run_seeds(cfg, *env, *mesh, run_flags.logger());
    }

    if (*serve) {
      const ExperimentConfig cfg = serve_flags.load();
      const auto mesh = build_mesh(cfg.mesh);
      auto env = make_environment(cfg, mesh);
      proto::ServerOptions opts;
      opts.endpoint = cfg.run.endpoint;
      opts.timeout = timeout_of(cfg);
      opts.log = serve_flags.logger();
      proto::EnvServer server(*env, opts);
      std::cout << "listening on " << cfg.run.endpoint.address << ":" << server.port()
                << std::endl;
      server.run();
      return 0;
    }

    if (*train) {
      const ExperimentConfig cfg = train_flags.load();
      const auto mesh = build_mesh(cfg.mesh);
      proto::RemoteEnvironment env(parse_endpoint(connect, cfg.run.endpoint),
                                   timeout_of(cfg));
      const EnvInfo info = env.info();
      if (info.obs_size != static_cast<int>(mesh->num_nodes()) ||
          info.n_actions != mesh->num_regions()) {
        throw ConfigError("served environment does not match the configured mesh");
      }
      const int rc = run_seeds(cfg, env, *mesh, train_flags.logger());
      if (!keep_server) env.shutdown_server();
      return rc;
    }

    if (*compare) {
      const auto s = compare_traces(read_trace_csv(before_path), read_trace_csv(after_path));
      if (compare_out.empty()) {
        std::cout << format_compare(s);
      } else {
        write_compare_csv(compare_out + ".csv", s);
        std::ofstream(compare_out + ".txt") << format_compare(s);
      }
      return 0;
    }

    if (*gen) {
      const Mesh m = mesh_kind == "square" ? build_unit_square(nx, ny, px, py)
                                           : build_regions15();
      save_mesh(m, mesh_out);
      std::cerr << "wrote " << mesh_out << ": " << m.num_nodes() << " nodes, "
                << m.num_elements() << " elements, " << m.num_regions() << " regions\n";
      return 0;
    }
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return 2;
  } catch (const MeshError& e) {
    std::cerr << "mesh error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
