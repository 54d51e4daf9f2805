#include "rdc/experiment.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>

#ifndef RDC_SOURCE_DIR
#define RDC_SOURCE_DIR "."
#endif

namespace rdc {

namespace fs = std::filesystem;

namespace {

std::string num(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  (void)ec;
  return std::string(buf, end);
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::string where(const std::string& section, const std::string& key) {
  return "[" + section + "] " + key;
}

double to_double(const std::string& section, const std::string& key,
                 const std::string& v) {
  double out = 0.0;
  const char* first = v.data();
  const char* last = v.data() + v.size();
  if (!v.empty() && *first == '+') ++first;
  auto [p, ec] = std::from_chars(first, last, out);
  if (ec != std::errc{} || p != last || !std::isfinite(out)) {
    throw ConfigError(where(section, key) + ": expected a number, got '" + v + "'");
  }
  return out;
}

template <typename T>
T to_integer(const std::string& section, const std::string& key,
             const std::string& v) {
  T out{};
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || p != v.data() + v.size()) {
    throw ConfigError(where(section, key) + ": expected an integer, got '" + v + "'");
  }
  return out;
}

[[noreturn]] void bad_choice(const std::string& section, const std::string& key,
                             const std::string& v, const std::string& choices) {
  throw ConfigError(where(section, key) + ": '" + v + "' is not one of " + choices);
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw ConfigError("cannot read " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string unquote(const std::string& raw, int line) {
  std::string out;
  for (std::size_t i = 1; i < raw.size(); ++i) {
    const char c = raw[i];
    if (c == '\\' && i + 1 < raw.size()) {
      const char n = raw[++i];
      out.push_back(n == 'n' ? '\n' : n == 't' ? '\t' : n);
      continue;
    }
    if (c == '"') {
      const std::string rest = trim(raw.substr(i + 1));
      if (!rest.empty() && rest[0] != '#') {
        throw ConfigError("config line " + std::to_string(line) +
                          ": unexpected text after quoted value");
      }
      return out;
    }
    out.push_back(c);
  }
  throw ConfigError("config line " + std::to_string(line) + ": unterminated string");
}

using Fields = std::vector<std::tuple<std::string, std::string, proto::Json>>;

Fields config_fields(const ExperimentConfig& c) {
  const auto& ic = c.env.ic;
  const auto& p = c.agent.policy;
  return {
      {"mesh", "kind", c.mesh.kind == MeshSpec::Kind::square ? "square" : "file"},
      {"mesh", "nx", c.mesh.nx},
      {"mesh", "ny", c.mesh.ny},
      {"mesh", "patches_x", c.mesh.patches_x},
      {"mesh", "patches_y", c.mesh.patches_y},
      {"mesh", "file", c.mesh.file.string()},
      {"sim", "beta", c.sim.beta},
      {"sim", "gamma", c.sim.gamma},
      {"sim", "rho", c.sim.rho},
      {"sim", "dt", c.sim.dt},
      {"sim", "flux", c.sim.flux},
      {"sim", "newton_max_iter", c.sim.newton_max_iter},
      {"sim", "newton_tol", c.sim.newton_tol},
      {"sim", "solver", c.sim.solver == SolverKind::direct ? "direct" : "cg"},
      {"sim", "mass", c.sim.mass == MassTreatment::consistent ? "consistent" : "lumped"},
      {"env", "objective", to_string(c.env.objective)},
      {"env", "w1", c.env.weights.w1},
      {"env", "w2", c.env.weights.w2},
      {"env", "w3", c.env.weights.w3},
      {"env", "w4", c.env.weights.w4},
      {"env", "action_low", c.env.action_low},
      {"env", "action_high", c.env.action_high},
      {"env", "kappa_scale", c.env.kappa_scale},
      {"env", "episode_len", c.env.episode_len},
      {"env", "ic", ic.kind == InitialCondition::Kind::circle ? "circle" : "region"},
      {"env", "ic_x", ic.center.x},
      {"env", "ic_y", ic.center.y},
      {"env", "ic_radius", ic.radius},
      {"env", "ic_region", ic.region},
      {"env", "ic_value", ic.value},
      {"env", "baseline_seed", c.env.seed},
      {"agent", "episodes", c.agent.episodes},
      {"agent", "seed", c.agent.seed},
      {"agent", "resume", c.agent.resume.string()},
      {"agent", "hidden", p.hidden},
      {"agent", "learning_rate", p.learning_rate},
      {"agent", "spread_floor", p.spread_floor},
      {"agent", "log_spread_init", p.log_spread_init},
      {"agent", "adam_beta1", p.adam_beta1},
      {"agent", "adam_beta2", p.adam_beta2},
      {"agent", "adam_eps", p.adam_eps},
      {"agent", "meta_iterations", p.meta_iterations},
      {"agent", "line_search_steps", p.line_search_steps},
      {"agent", "line_search_shrink", p.line_search_shrink},
      {"run", "preset", c.run.preset},
      {"run", "out", c.run.out.string()},
      {"run", "seeds", c.run.seeds},
      {"run", "address", c.run.endpoint.address},
      {"run", "port", c.run.endpoint.port},
      {"run", "timeout", c.run.timeout_s},
  };
}

}  // namespace

// ---------------------------------------------------------------------------
// Configuration

void ExperimentConfig::validate() const {
  try {
    sim.validate();
    env.validate();
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  if (sim.n_steps != env.episode_len) {
    throw ConfigError("sim n_steps must equal env episode_len");
  }
  if (mesh.kind == MeshSpec::Kind::square) {
    if (mesh.nx < 1 || mesh.ny < 1) throw ConfigError("[mesh] nx, ny must be >= 1");
    if (mesh.patches_x < 1 || mesh.patches_y < 1 ||
        mesh.nx % mesh.patches_x != 0 || mesh.ny % mesh.patches_y != 0) {
      throw ConfigError("[mesh] patches_x, patches_y must divide nx, ny");
    }
  } else {
    if (mesh.file.empty()) throw ConfigError("[mesh] file is required for kind = file");
    if (!fs::exists(resolve_data_path(mesh.file))) {
      throw ConfigError("mesh file not found: " + mesh.file.string());
    }
  }
  if (env.ic.kind == InitialCondition::Kind::region && env.ic.region < 0) {
    throw ConfigError("[env] ic_region must be non-negative");
  }
  if (agent.episodes < 0) throw ConfigError("[agent] episodes must be >= 0");
  if (agent.policy.hidden < 1) throw ConfigError("[agent] hidden must be >= 1");
  if (!(agent.policy.learning_rate > 0.0)) {
    throw ConfigError("[agent] learning_rate must be positive");
  }
  if (!(agent.policy.spread_floor > 0.0)) {
    throw ConfigError("[agent] spread_floor must be positive");
  }
  if (agent.policy.meta_iterations < 0 || agent.policy.line_search_steps < 1) {
    throw ConfigError("[agent] meta_iterations >= 0 and line_search_steps >= 1 required");
  }
  if (!(agent.policy.line_search_shrink > 0.0 && agent.policy.line_search_shrink < 1.0)) {
    throw ConfigError("[agent] line_search_shrink must lie in (0,1)");
  }
  if (!agent.resume.empty() && !fs::exists(agent.resume)) {
    throw ConfigError("checkpoint not found: " + agent.resume.string());
  }
  if (run.seeds < 1) throw ConfigError("[run] seeds must be >= 1");
  if (run.endpoint.port < 0 || run.endpoint.port > 65535) {
    throw ConfigError("[run] port must lie in [0, 65535]");
  }
  if (!(run.timeout_s > 0.0)) throw ConfigError("[run] timeout must be positive");
}

ExperimentConfig preset(const std::string& name) {
  ExperimentConfig c;
  c.run.preset = name;
  if (name == "square") {
    c.mesh = MeshSpec{};
    c.sim.beta = 2.5;
    c.sim.gamma = 1.0;
    c.sim.dt = 0.02;
    c.env.episode_len = 60;
  } else if (name == "regions") {
    c.mesh.kind = MeshSpec::Kind::file;
    c.mesh.file = "data/regions15.mesh";
    c.sim.beta = 50.0;
    c.sim.gamma = 1.0;
    c.sim.dt = 0.01;
    c.sim.mass = MassTreatment::lumped;
    c.env.episode_len = 40;
    c.env.kappa_scale = 1e4;
    c.env.ic.kind = InitialCondition::Kind::region;
    c.env.ic.region = kRegions15Center;
  } else {
    throw ConfigError("unknown preset '" + name + "' (expected square or regions)");
  }
  c.sim.n_steps = c.env.episode_len;
  return c;
}

void apply_setting(ExperimentConfig& c, const std::string& s,
                   const std::string& k, const std::string& v) {
  auto dbl = [&] { return to_double(s, k, v); };
  auto i32 = [&] { return to_integer<int>(s, k, v); };
  auto u64 = [&] { return to_integer<std::uint64_t>(s, k, v); };
  auto& ic = c.env.ic;
  auto& p = c.agent.policy;

  if (s == "mesh") {
    if (k == "kind") {
      if (v == "square") c.mesh.kind = MeshSpec::Kind::square;
      else if (v == "file") c.mesh.kind = MeshSpec::Kind::file;
      else bad_choice(s, k, v, "square, file");
    } else if (k == "nx") c.mesh.nx = i32();
    else if (k == "ny") c.mesh.ny = i32();
    else if (k == "patches_x") c.mesh.patches_x = i32();
    else if (k == "patches_y") c.mesh.patches_y = i32();
    else if (k == "file") c.mesh.file = v;
    else throw ConfigError("unknown key " + where(s, k));
  } else if (s == "sim") {
    if (k == "beta") c.sim.beta = dbl();
    else if (k == "gamma") c.sim.gamma = dbl();
    else if (k == "rho") c.sim.rho = dbl();
    else if (k == "dt") c.sim.dt = dbl();
    else if (k == "flux") c.sim.flux = dbl();
    else if (k == "newton_max_iter") c.sim.newton_max_iter = i32();
    else if (k == "newton_tol") c.sim.newton_tol = dbl();
    else if (k == "solver") {
      if (v == "direct") c.sim.solver = SolverKind::direct;
      else if (v == "cg") c.sim.solver = SolverKind::cg;
      else bad_choice(s, k, v, "direct, cg");
    } else if (k == "mass") {
      if (v == "consistent") c.sim.mass = MassTreatment::consistent;
      else if (v == "lumped") c.sim.mass = MassTreatment::lumped;
      else bad_choice(s, k, v, "consistent, lumped");
    } else throw ConfigError("unknown key " + where(s, k));
  } else if (s == "env") {
    if (k == "objective") {
      if (v != "diff" && v != "state") bad_choice(s, k, v, "diff, state");
      c.env.objective = objective_from_string(v);
    } else if (k == "w1") c.env.weights.w1 = dbl();
    else if (k == "w2") c.env.weights.w2 = dbl();
    else if (k == "w3") c.env.weights.w3 = dbl();
    else if (k == "w4") c.env.weights.w4 = dbl();
    else if (k == "action_low") c.env.action_low = dbl();
    else if (k == "action_high") c.env.action_high = dbl();
    else if (k == "kappa_scale") c.env.kappa_scale = dbl();
    else if (k == "episode_len") c.env.episode_len = i32();
    else if (k == "ic") {
      if (v == "circle") ic.kind = InitialCondition::Kind::circle;
      else if (v == "region") ic.kind = InitialCondition::Kind::region;
      else bad_choice(s, k, v, "circle, region");
    } else if (k == "ic_x") ic.center.x = dbl();
    else if (k == "ic_y") ic.center.y = dbl();
    else if (k == "ic_radius") ic.radius = dbl();
    else if (k == "ic_region") ic.region = i32();
    else if (k == "ic_value") ic.value = dbl();
    else if (k == "baseline_seed") c.env.seed = u64();
    else throw ConfigError("unknown key " + where(s, k));
  } else if (s == "agent") {
    if (k == "episodes") c.agent.episodes = i32();
    else if (k == "seed") c.agent.seed = u64();
    else if (k == "resume") c.agent.resume = v;
    else if (k == "hidden") p.hidden = i32();
    else if (k == "learning_rate") p.learning_rate = dbl();
    else if (k == "spread_floor") p.spread_floor = dbl();
    else if (k == "log_spread_init") p.log_spread_init = dbl();
    else if (k == "adam_beta1") p.adam_beta1 = dbl();
    else if (k == "adam_beta2") p.adam_beta2 = dbl();
    else if (k == "adam_eps") p.adam_eps = dbl();
    else if (k == "meta_iterations") p.meta_iterations = i32();
    else if (k == "line_search_steps") p.line_search_steps = i32();
    else if (k == "line_search_shrink") p.line_search_shrink = dbl();
    else throw ConfigError("unknown key " + where(s, k));
  } else if (s == "run") {
    if (k == "preset") c.run.preset = v;
    else if (k == "out") c.run.out = v;
    else if (k == "seeds") c.run.seeds = i32();
    else if (k == "address") c.run.endpoint.address = v;
    else if (k == "port") c.run.endpoint.port = i32();
    else if (k == "timeout") c.run.timeout_s = dbl();
    else throw ConfigError("unknown key " + where(s, k));
  } else {
    throw ConfigError("unknown section [" + s + "]");
  }
}

std::vector<ConfigEntry> parse_config_text(const std::string& text) {
  std::vector<ConfigEntry> out;
  std::istringstream in(text);
  std::string raw;
  std::string section;
  int line = 0;
  while (std::getline(in, raw)) {
    ++line;
    std::string l = trim(raw);
    if (l.empty() || l[0] == '#') continue;
    if (l[0] == '[') {
      const auto close = l.find(']');
      if (close == std::string::npos) {
        throw ConfigError("config line " + std::to_string(line) + ": missing ']'");
      }
      section = trim(l.substr(1, close - 1));
      const std::string rest = trim(l.substr(close + 1));
      if (section.empty() || (!rest.empty() && rest[0] != '#')) {
        throw ConfigError("config line " + std::to_string(line) + ": bad section header");
      }
      continue;
    }
    const auto eq = l.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(line) + ": expected key = value");
    }
    if (section.empty()) {
      throw ConfigError("config line " + std::to_string(line) + ": key outside a section");
    }
    ConfigEntry e{section, trim(l.substr(0, eq)), trim(l.substr(eq + 1)), line};
    if (e.key.empty()) {
      throw ConfigError("config line " + std::to_string(line) + ": empty key");
    }
    if (!e.value.empty() && e.value[0] == '"') {
      e.value = unquote(e.value, line);
    } else {
      e.value = trim(e.value.substr(0, e.value.find('#')));
    }
    out.push_back(std::move(e));
  }
  return out;
}

ConfigEntry parse_override(const std::string& text) {
  const auto eq = text.find('=');
  const auto dot = text.find('.');
  if (eq == std::string::npos || dot == std::string::npos || dot > eq) {
    throw ConfigError("override '" + text + "' is not section.key=value");
  }
  ConfigEntry e{trim(text.substr(0, dot)), trim(text.substr(dot + 1, eq - dot - 1)),
                trim(text.substr(eq + 1)), 0};
  if (e.value.size() >= 2 && e.value.front() == '"' && e.value.back() == '"') {
    e.value = e.value.substr(1, e.value.size() - 2);
  }
  return e;
}

ExperimentConfig load_config(const fs::path& file, const std::string& preset_name,
                             const std::vector<ConfigEntry>& overrides) {
  std::vector<ConfigEntry> entries;
  if (!file.empty()) entries = parse_config_text(read_file(file));

  std::string name = preset_name;
  auto find_preset = [&](const std::vector<ConfigEntry>& es) {
    for (const auto& e : es) {
      if (e.section == "run" && e.key == "preset") name = e.value;
    }
  };
  if (name.empty()) find_preset(overrides);
  if (name.empty()) find_preset(entries);
  if (name.empty()) name = "square";

  ExperimentConfig c = preset(name);
  c.run.endpoint = proto::endpoint_from_environment();
  for (const auto& e : entries) {
    try {
      apply_setting(c, e.section, e.key, e.value);
    } catch (const ConfigError& err) {
      throw ConfigError(file.string() + ":" + std::to_string(e.line) + ": " + err.what());
    }
  }
  for (const auto& e : overrides) apply_setting(c, e.section, e.key, e.value);
  c.run.preset = name;
  c.sim.n_steps = c.env.episode_len;
  c.validate();
  return c;
}

std::string format_config(const ExperimentConfig& cfg) {
  std::ostringstream out;
  std::string section;
  for (const auto& [s, k, v] : config_fields(cfg)) {
    if (s != section) {
      out << (section.empty() ? "" : "\n") << "[" << s << "]\n";
      section = s;
    }
    out << k << " = " << v.dump() << "\n";
  }
  return out.str();
}

proto::Json config_json(const ExperimentConfig& cfg) {
  proto::Json j = proto::Json::object();
  for (const auto& [s, k, v] : config_fields(cfg)) j[s][k] = v;
  return j;
}

fs::path resolve_data_path(const fs::path& p) {
  if (p.is_absolute() || fs::exists(p)) return p;
  const fs::path alt = fs::path(RDC_SOURCE_DIR) / p;
  return fs::exists(alt) ? alt : p;
}

std::shared_ptr<const Mesh> build_mesh(const MeshSpec& spec) {
  try {
    if (spec.kind == MeshSpec::Kind::square) {
      return std::make_shared<const Mesh>(
          build_unit_square(spec.nx, spec.ny, spec.patches_x, spec.patches_y));
    }
    return std::make_shared<const Mesh>(load_mesh(resolve_data_path(spec.file)));
  } catch (const MeshError& e) {
    throw ConfigError(e.what());
  }
}

std::unique_ptr<FemEnvironment> make_environment(const ExperimentConfig& cfg,
                                                 std::shared_ptr<const Mesh> mesh) {
  if (cfg.env.ic.kind == InitialCondition::Kind::region &&
      cfg.env.ic.region >= mesh->num_regions()) {
    throw ConfigError("[env] ic_region " + std::to_string(cfg.env.ic.region) +
                      " not in mesh with " + std::to_string(mesh->num_regions()) +
                      " regions");
  }
  SimParams sim = cfg.sim;
  sim.n_steps = cfg.env.episode_len;
  return std::make_unique<FemEnvironment>(std::move(mesh), sim, cfg.env);
}

// ---------------------------------------------------------------------------
// Traces

void write_trace_csv(const fs::path& path, const std::vector<EpisodeTrace>& traces,
                     int n_actions) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "episode,step,reward,norm_c,norm_kappa";
  for (int a = 0; a < n_actions; ++a) out << ",a" << a;
  out << "\n";
  for (const auto& t : traces) {
    for (const auto& s : t.steps) {
      out << t.episode << "," << s.step << "," << num(s.reward) << ","
          << num(s.norm_c) << "," << num(s.norm_kappa);
      for (int a = 0; a < n_actions; ++a) {
        out << ",";
        if (static_cast<std::size_t>(a) < s.action.size()) out << num(s.action[a]);
      }
      out << "\n";
    }
  }
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

std::vector<EpisodeTrace> read_trace_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read trace " + path.string());
  std::string line;
  if (!std::getline(in, line) ||
      line.rfind("episode,step,reward,norm_c,norm_kappa", 0) != 0) {
    throw ConfigError(path.string() + ": not a trace file (bad header)");
  }
  std::vector<EpisodeTrace> out;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (!line.empty() && line.back() == ',') f.emplace_back();
    if (f.size() < 5) {
      throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": too few columns");
    }
    auto d = [&](const std::string& v) {
      double x = 0.0;
      auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), x);
      if (ec != std::errc{} || p != v.data() + v.size()) {
        throw ConfigError(path.string() + ":" + std::to_string(lineno) +
                          ": bad number '" + v + "'");
      }
      return x;
    };
    const int episode = static_cast<int>(d(f[0]));
    if (out.empty() || out.back().episode != episode) {
      out.push_back({});
      out.back().episode = episode;
    }
    StepRecord r;
    r.step = static_cast<int>(d(f[1]));
    r.reward = d(f[2]);
    r.norm_c = d(f[3]);
    r.norm_kappa = d(f[4]);
    for (std::size_t i = 5; i < f.size(); ++i) {
      if (!f[i].empty()) r.action.push_back(d(f[i]));
    }
    if (std::isinf(r.reward) && r.reward < 0) out.back().aborted = true;
    out.back().steps.push_back(std::move(r));
  }
  return out;
}

namespace {

struct StepMeans {
  std::vector<double> reward, norm_c, norm_kappa;
  int episodes{0};
};

StepMeans final_decile_means(const std::vector<EpisodeTrace>& traces,
                             const char* label) {
  std::vector<const EpisodeTrace*> ok;
  for (const auto& t : traces) {
    if (!t.aborted) ok.push_back(&t);
  }
  if (ok.empty()) throw ConfigError(std::string(label) + " trace has no complete episode");
  const std::size_t k = std::max<std::size_t>(1, ok.size() / 10);
  const std::size_t len = ok.back()->steps.size();
  StepMeans m;
  m.reward.assign(len, 0.0);
  m.norm_c.assign(len, 0.0);
  m.norm_kappa.assign(len, 0.0);
  for (std::size_t e = ok.size() - k; e < ok.size(); ++e) {
    if (ok[e]->steps.size() != len) {
      throw ConfigError(std::string(label) + " trace episodes differ in length");
    }
    for (std::size_t i = 0; i < len; ++i) {
      m.reward[i] += ok[e]->steps[i].reward;
      m.norm_c[i] += ok[e]->steps[i].norm_c;
      m.norm_kappa[i] += ok[e]->steps[i].norm_kappa;
    }
  }
  for (std::size_t i = 0; i < len; ++i) {
    m.reward[i] /= static_cast<double>(k);
    m.norm_c[i] /= static_cast<double>(k);
    m.norm_kappa[i] /= static_cast<double>(k);
  }
  m.episodes = static_cast<int>(k);
  return m;
}

double mean_after_first(const std::vector<double>& v) {
  if (v.size() < 2) return v.empty() ? 0.0 : v[0];
  double s = 0.0;
  for (std::size_t i = 1; i < v.size(); ++i) s += v[i];
  return s / static_cast<double>(v.size() - 1);
}

}  // namespace

CompareSummary compare_traces(const std::vector<EpisodeTrace>& before,
                              const std::vector<EpisodeTrace>& after) {
  const StepMeans b = final_decile_means(before, "before");
  const StepMeans a = final_decile_means(after, "after");
  if (b.reward.size() != a.reward.size()) {
    throw ConfigError("traces cover different step ranges: " +
                      std::to_string(b.reward.size()) + " vs " +
                      std::to_string(a.reward.size()) + " steps");
  }
  CompareSummary s;
  s.episodes_before = b.episodes;
  s.episodes_after = a.episodes;
  for (std::size_t i = 0; i < b.reward.size(); ++i) {
    s.rows.push_back({static_cast<int>(i), b.reward[i], a.reward[i], b.norm_c[i],
                      a.norm_c[i], b.norm_kappa[i], a.norm_kappa[i]});
  }
  s.mean_reward_before = mean_after_first(b.reward);
  s.mean_reward_after = mean_after_first(a.reward);
  s.mean_norm_c_before = mean_after_first(b.norm_c);
  s.mean_norm_c_after = mean_after_first(a.norm_c);
  s.mean_norm_kappa_before = mean_after_first(b.norm_kappa);
  s.mean_norm_kappa_after = mean_after_first(a.norm_kappa);
  return s;
}

void write_compare_csv(const fs::path& path, const CompareSummary& s) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "step,reward_before,reward_after,reward_delta,norm_c_before,norm_c_after,"
         "norm_c_delta,norm_kappa_before,norm_kappa_after,norm_kappa_delta\n";
  for (const auto& r : s.rows) {
    out << r.step << "," << num(r.reward_before) << "," << num(r.reward_after) << ","
        << num(r.reward_after - r.reward_before) << "," << num(r.norm_c_before)
        << "," << num(r.norm_c_after) << "," << num(r.norm_c_after - r.norm_c_before)
        << "," << num(r.norm_kappa_before) << "," << num(r.norm_kappa_after) << ","
        << num(r.norm_kappa_after - r.norm_kappa_before) << "\n";
  }
}

std::string format_compare(const CompareSummary& s) {
  std::ostringstream out;
  out << std::fixed << std::setprecision(6);
  out << "before: final " << s.episodes_before << " episode(s), after: final "
      << s.episodes_after << " episode(s)\n";
  out << "mean over steps 1.." << (s.rows.empty() ? 0 : s.rows.size() - 1) << "\n";
  out << "              before        after        delta\n";
  auto line = [&](const char* name, double b, double a) {
    out << std::setw(10) << name << std::setw(13) << b << std::setw(13) << a
        << std::setw(13) << (a - b) << "\n";
  };
  line("reward", s.mean_reward_before, s.mean_reward_after);
  line("norm_c", s.mean_norm_c_before, s.mean_norm_c_after);
  line("norm_kappa", s.mean_norm_kappa_before, s.mean_norm_kappa_after);
  out << "\n step  reward_delta  norm_c_delta  norm_kappa_delta\n";
  for (const auto& r : s.rows) {
    out << std::setw(5) << r.step << std::setw(14) << (r.reward_after - r.reward_before)
        << std::setw(14) << (r.norm_c_after - r.norm_c_before) << std::setw(18)
        << (r.norm_kappa_after - r.norm_kappa_before) << "\n";
  }
  return out.str();
}

// ---------------------------------------------------------------------------
// Runs

StepResult CapturingEnvironment::reset(std::uint64_t seed, bool record_baseline) {
  StepResult r = inner_.reset(seed, record_baseline);
  first_ = r.obs;
  last_ = r.obs;
  return r;
}

StepResult CapturingEnvironment::step(std::span<const double> action) {
  StepResult r = inner_.step(action);
  last_ = r.obs;
  return r;
}

namespace {

void write_field_csv(const fs::path& path, const Mesh& mesh, const Observation& obs) {
  if (obs.state.size() != mesh.num_nodes()) {
    throw EnvError("observed state has " + std::to_string(obs.state.size()) +
                   " entries, mesh has " + std::to_string(mesh.num_nodes()) + " nodes");
  }
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "node_id,x,y,c\n";
  for (std::size_t i = 0; i < obs.state.size(); ++i) {
    const Point& p = mesh.node(static_cast<int>(i));
    out << i << "," << num(p.x) << "," << num(p.y) << "," << num(obs.state[i]) << "\n";
  }
}

void write_kappa_csv(const fs::path& path, const Observation& obs, const EnvConfig& env) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  const ControlMap k = scale_action(obs.action, env);
  out << "region_id,kappa\n";
  for (std::size_t r = 0; r < k.kappa_per_region.size(); ++r) {
    out << r << "," << num(k.kappa_per_region[r]) << "\n";
  }
}

double decile_mean_reward(const std::vector<EpisodeTrace>& traces, bool first) {
  std::vector<const EpisodeTrace*> ok;
  for (const auto& t : traces) {
    if (!t.aborted) ok.push_back(&t);
  }
  if (ok.empty()) return std::numeric_limits<double>::quiet_NaN();
  const std::size_t k = std::max<std::size_t>(1, ok.size() / 10);
  const std::size_t b = first ? 0 : ok.size() - k;
  double s = 0.0;
  std::size_t n = 0;
  for (std::size_t e = b; e < b + k; ++e) {
    for (std::size_t i = 1; i < ok[e]->steps.size(); ++i) {
      s += ok[e]->steps[i].reward;
      ++n;
    }
  }
  return n ? s / static_cast<double>(n) : std::numeric_limits<double>::quiet_NaN();
}

}  // namespace

RunOutcome run_experiment(const ExperimentConfig& cfg_in, Environment& env,
                          const Mesh& mesh, std::uint64_t seed, const fs::path& out,
                          const LogFn& log) {
  const auto t0 = std::chrono::steady_clock::now();
  ExperimentConfig cfg = cfg_in;
  cfg.agent.seed = seed;
  auto say = [&](const std::string& m) {
    if (log) log("[seed " + std::to_string(seed) + "] " + m);
  };

  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec || !fs::is_directory(out)) {
    throw ConfigError("cannot create output directory " + out.string());
  }

  RunOutcome o;
  std::vector<EpisodeTrace> traces;
  bool training_started = false;
  const EnvInfo info = env.info();
  auto artifact = [&](const std::string& name) {
    o.artifacts.push_back(name);
    return out / name;
  };

  try {
    CapturingEnvironment cap(env);
    std::optional<Agent> agent;
    EpisodeTrace baseline_trace;
    bool have_baseline_trace = false;

    if (!cfg.agent.resume.empty()) {
      agent.emplace(Agent::load_checkpoint(cfg.agent.resume, cfg.agent.policy));
      const auto& p = agent->params();
      if (p.n_in() != info.obs_size || p.n_out() != info.n_actions) {
        throw ConfigError("checkpoint dimensions do not match the environment");
      }
      if (!agent->baseline()) throw ConfigError("checkpoint carries no baseline");
      env.set_baseline(*agent->baseline());
      say("resumed at episode " + std::to_string(agent->episodes_done()));
    } else {
      agent.emplace(info, cfg.agent.policy, seed);
      baseline_trace = agent->record_baseline(cap);
      have_baseline_trace = true;
      write_trace_csv(artifact("baseline.csv"), {baseline_trace}, info.n_actions);
      write_field_csv(artifact("field_before_step0.csv"), mesh, cap.first());
      write_field_csv(artifact("field_before_final.csv"), mesh, cap.last());
      write_kappa_csv(artifact("kappa_before_step0.csv"), cap.first(), cfg.env);
      write_kappa_csv(artifact("kappa_before_final.csv"), cap.last(), cfg.env);
      say("baseline recorded");
    }

    const int target = cfg.agent.episodes;
    const int report = std::max(1, target / 10);
    if (agent->episodes_done() < target) training_started = true;
    while (agent->episodes_done() < target) {
      traces.push_back(agent->train_episode(cap));
      const auto& t = traces.back();
      if (t.aborted) {
        ++o.aborted_episodes;
        say("episode " + std::to_string(t.episode) + " aborted; dropped from training");
      }
      if (agent->episodes_done() % report == 0 || agent->episodes_done() == target) {
        double s = 0.0;
        for (std::size_t i = 1; i < t.steps.size(); ++i) s += t.steps[i].reward;
        say("episode " + std::to_string(agent->episodes_done()) + "/" +
            std::to_string(target) + " mean reward " +
            num(t.steps.size() > 1 ? s / static_cast<double>(t.steps.size() - 1) : 0.0));
      }
    }
    o.episodes_done = static_cast<int>(traces.size());

    if (training_started) {
      write_trace_csv(artifact("trace.csv"), traces, info.n_actions);
      agent->save_checkpoint(artifact("checkpoint.txt"));
      const EpisodeTrace after = agent->evaluate(cap, agent->episode_seed(-1));
      write_trace_csv(artifact("after.csv"), {after}, info.n_actions);
      write_field_csv(artifact("field_after_step0.csv"), mesh, cap.first());
      write_field_csv(artifact("field_after_final.csv"), mesh, cap.last());
      write_kappa_csv(artifact("kappa_after_step0.csv"), cap.first(), cfg.env);
      write_kappa_csv(artifact("kappa_after_final.csv"), cap.last(), cfg.env);
      if (have_baseline_trace && o.aborted_episodes < o.episodes_done) {
        const CompareSummary s = compare_traces({baseline_trace}, traces);
        write_compare_csv(artifact("compare.csv"), s);
        std::ofstream(artifact("compare.txt")) << format_compare(s);
        o.summary = s;
        o.has_summary = true;
        o.reward_first_decile = decile_mean_reward(traces, true);
      }
    }
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    o.ok = false;
    o.error = e.what();
    o.episodes_done = static_cast<int>(traces.size());
    say(std::string("run failed: ") + e.what());
    if (!traces.empty()) {
      try {
        write_trace_csv(artifact("trace.csv"), traces, info.n_actions);
      } catch (const std::exception&) {
      }
    }
  }

  o.wall_time_s =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  proto::Json m = proto::Json::object();
  m["program"] = "rdc";
  m["status"] = o.ok ? "ok" : "failed";
  if (!o.ok) m["error"] = o.error;
  m["partial"] = !o.ok;
  m["seed"] = seed;
  m["preset"] = cfg.run.preset;
  m["episodes_requested"] = cfg.agent.episodes;
  m["episodes_run"] = o.episodes_done;
  m["aborted_episodes"] = o.aborted_episodes;
  if (!cfg.agent.resume.empty()) m["resumed_from"] = cfg.agent.resume.string();
  o.artifacts.push_back("config.toml");
  o.artifacts.push_back("manifest.json");
  m["artifacts"] = o.artifacts;
  m["config"] = config_json(cfg);
  m["wall_time_s"] = o.wall_time_s;
  std::ofstream(out / "manifest.json") << m.dump(2) << "\n";
  std::ofstream(out / "config.toml") << format_config(cfg);
  return o;
}

}  // namespace rdc
