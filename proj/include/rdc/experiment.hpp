#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "rdc/env.hpp"
#include "rdc/fem.hpp"
#include "rdc/mesh.hpp"
#include "rdc/policy.hpp"
#include "rdc/proto.hpp"

namespace rdc {

/// Invalid configuration; the CLI maps it to exit code 2.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct MeshSpec {
  enum class Kind { square, file };
  Kind kind{Kind::square};
  int nx{16};
  int ny{16};
  int patches_x{8};
  int patches_y{8};
  std::filesystem::path file;
};

struct AgentSettings {
  int episodes{200};
  std::uint64_t seed{1};
  std::filesystem::path resume;  // checkpoint to continue from
  PolicyConfig policy{};
};

struct RunSettings {
  std::string preset{"square"};
  std::filesystem::path out{"rdc-out"};
  int seeds{1};
  proto::Endpoint endpoint{};
  double timeout_s{300.0};
};

struct ExperimentConfig {
  MeshSpec mesh{};
  SimParams sim{};
  EnvConfig env{};
  AgentSettings agent{};
  RunSettings run{};

  void validate() const;
};

/// "square": 16x16 unit square, 8x8 patches, beta 2.5, 60 steps of 0.02.
/// "regions": the 15-region fixture, beta 50, 40 steps, kappa in [1e3, 5e4].
ExperimentConfig preset(const std::string& name);

/// Sets [section] key from its text value; throws ConfigError on unknown
/// keys or malformed values.
void apply_setting(ExperimentConfig& cfg, const std::string& section,
                   const std::string& key, const std::string& value);

struct ConfigEntry {
  std::string section;
  std::string key;
  std::string value;
  int line{0};
};

/// TOML-style subset: [section] headers, key = value, '#' comments,
/// double-quoted or bare values.
std::vector<ConfigEntry> parse_config_text(const std::string& text);

/// "section.key=value" as given on the command line.
ConfigEntry parse_override(const std::string& text);

/// Preset (explicit name, else the file's [run] preset, else square), then
/// file entries, then overrides.
ExperimentConfig load_config(const std::filesystem::path& file,
                             const std::string& preset_name,
                             const std::vector<ConfigEntry>& overrides);

/// Round-trips through parse_config_text.
std::string format_config(const ExperimentConfig& cfg);
proto::Json config_json(const ExperimentConfig& cfg);

/// Resolves relative mesh paths against the working directory, then the
/// source tree's data directory.
std::filesystem::path resolve_data_path(const std::filesystem::path& p);

std::shared_ptr<const Mesh> build_mesh(const MeshSpec& spec);
std::unique_ptr<FemEnvironment> make_environment(
    const ExperimentConfig& cfg, std::shared_ptr<const Mesh> mesh);

// ---------------------------------------------------------------------------
// Traces and comparison

/// One row per step: episode,step,reward,norm_c,norm_kappa,a0..a{n-1}.
void write_trace_csv(const std::filesystem::path& path,
                     const std::vector<EpisodeTrace>& traces, int n_actions);
std::vector<EpisodeTrace> read_trace_csv(const std::filesystem::path& path);

struct CompareRow {
  int step{0};
  double reward_before{0}, reward_after{0};
  double norm_c_before{0}, norm_c_after{0};
  double norm_kappa_before{0}, norm_kappa_after{0};
};

struct CompareSummary {
  int episodes_before{0};  // episodes averaged on each side
  int episodes_after{0};
  std::vector<CompareRow> rows;
  double mean_reward_before{0}, mean_reward_after{0};
  double mean_norm_c_before{0}, mean_norm_c_after{0};
  double mean_norm_kappa_before{0}, mean_norm_kappa_after{0};
};

/// Per-step means over the final 10% (at least one) of the non-aborted
/// episodes of each trace, and their differences. Aggregate means skip
/// step 0, whose control is the random initial draw.
CompareSummary compare_traces(const std::vector<EpisodeTrace>& before,
                              const std::vector<EpisodeTrace>& after);
void write_compare_csv(const std::filesystem::path& path,
                       const CompareSummary& s);
std::string format_compare(const CompareSummary& s);

// ---------------------------------------------------------------------------
// Runs

/// Keeps the first and last observation of the most recent episode while
/// forwarding to another environment.
class CapturingEnvironment final : public Environment {
 public:
  explicit CapturingEnvironment(Environment& inner) : inner_(inner) {}

  using Environment::reset;
  EnvInfo info() const override { return inner_.info(); }
  StepResult reset(std::uint64_t seed, bool record_baseline) override;
  StepResult step(std::span<const double> action) override;
  BaselineTrace baseline() override { return inner_.baseline(); }
  void set_baseline(const BaselineTrace& b) override { inner_.set_baseline(b); }
  void end_episode(int episode, bool aborted) override {
    inner_.end_episode(episode, aborted);
  }

  const Observation& first() const { return first_; }
  const Observation& last() const { return last_; }

 private:
  Environment& inner_;
  Observation first_;
  Observation last_;
};

struct RunOutcome {
  bool ok{true};
  std::string error;
  int episodes_done{0};
  int aborted_episodes{0};
  double wall_time_s{0.0};
  std::vector<std::string> artifacts;
  bool has_summary{false};
  CompareSummary summary;  // baseline vs final decile of training
  double reward_first_decile{0.0};
};

using LogFn = std::function<void(const std::string&)>;

/// Baseline, training, greedy evaluation and all artifacts for one seed,
/// written into out. Failures are reported in the outcome and the manifest
/// rather than thrown, except ConfigError.
RunOutcome run_experiment(const ExperimentConfig& cfg, Environment& env,
                          const Mesh& mesh, std::uint64_t seed,
                          const std::filesystem::path& out,
                          const LogFn& log = {});

}  // namespace rdc
