#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "rdc/fem.hpp"
#include "rdc/mesh.hpp"

namespace rdc {

enum class Objective { diff, state };

std::string to_string(Objective o);
Objective objective_from_string(const std::string& s);

struct RewardWeights {
  double w1{1.0};
  double w2{1.0};
  double w3{1.0};
  double w4{1.0};
};

struct InitialCondition {
  enum class Kind { circle, region };
  Kind kind{Kind::circle};
  Point center{0.5, 0.5};
  double radius{0.3};
  int region{0};
  double value{1.0};
};

struct EnvConfig {
  Objective objective{Objective::diff};
  RewardWeights weights{};
  double action_low{0.1};
  double action_high{5.0};
  double kappa_scale{1.0};
  int episode_len{60};
  InitialCondition ic{};
  std::uint64_t seed{0};  // baseline episode seed

  void validate() const;
};

struct Observation {
  std::vector<double> state;   // nodal c
  std::vector<double> action;  // applied RL-space action, pre-scaling
  double norm_c{0.0};
  double norm_kappa{0.0};
  int step_index{0};

  bool operator==(const Observation&) const = default;
};

struct StepResult {
  Observation obs;
  double reward{0.0};
  bool done{false};

  bool operator==(const StepResult&) const = default;
};

struct BaselineTrace {
  std::vector<double> norm_c_bef;
  std::vector<double> norm_kappa_bef;
  double norm_c0{0.0};
  double norm_kappa0{0.0};

  bool operator==(const BaselineTrace&) const = default;
};

/// Sizes an agent needs to talk to an environment.
struct EnvInfo {
  int n_actions{0};
  int obs_size{0};
  int episode_len{0};
};

struct StepRecord {
  int step{0};
  double reward{0.0};
  double norm_c{0.0};
  double norm_kappa{0.0};
  std::vector<double> action;
};

struct EpisodeTrace {
  int episode{0};
  bool aborted{false};
  std::vector<StepRecord> steps;
  std::vector<double> update_losses;  // batch loss before/after each update pass
};

class EnvError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised when the simulator fails mid-episode (Newton divergence).
class EpisodeAborted : public EnvError {
 public:
  using EnvError::EnvError;
};

/// Agent-facing contract shared by the in-process and remote environments.
///
/// reset(seed, true) starts a baseline-recording episode: its per-step norms
/// become the before-training reference once the episode completes, and its
/// rewards are evaluated against itself.
class Environment {
 public:
  virtual ~Environment() = default;
  virtual EnvInfo info() const = 0;
  virtual StepResult reset(std::uint64_t seed, bool record_baseline) = 0;
  virtual StepResult step(std::span<const double> action) = 0;
  virtual BaselineTrace baseline() = 0;
  virtual void set_baseline(const BaselineTrace& baseline) = 0;
  /// Notification that the agent finished (or abandoned) an episode.
  virtual void end_episode(int /*episode*/, bool /*aborted*/) {}

  StepResult reset(std::uint64_t seed) { return reset(seed, false); }
};

/// [-1,1]^n -> [action_low, action_high] * kappa_scale, per region.
ControlMap scale_action(std::span<const double> action, const EnvConfig& cfg);
std::vector<double> unscale_action(const ControlMap& control,
                                   const EnvConfig& cfg);

double reward_diff(double norm_kappa_i, double norm_c_i, std::size_t step,
                   const BaselineTrace& baseline, double w1, double w2);
double reward_state(double norm_kappa_i, double norm_c_i, std::size_t step,
                    const BaselineTrace& baseline, double w3, double w4);

Field initial_condition(const Mesh& mesh, const InitialCondition& ic);

StepRecord to_record(const StepResult& r);

/// Finite-element environment: one implicit Euler step per action.
class FemEnvironment final : public Environment {
 public:
  /// Called after reset and after every step with the new state and control.
  using StepObserver =
      std::function<void(int step, const Field& state, const ControlMap& control)>;

  FemEnvironment(std::shared_ptr<const Mesh> mesh, SimParams sim,
                 EnvConfig cfg);

  using Environment::reset;
  EnvInfo info() const override;
  StepResult reset(std::uint64_t seed, bool record_baseline) override;
  StepResult step(std::span<const double> action) override;
  BaselineTrace baseline() override;
  void set_baseline(const BaselineTrace& baseline) override;

  /// Records a baseline episode driven by seeded uniform random actions.
  /// Used when no agent-driven baseline has been recorded.
  const BaselineTrace& record_baseline(std::uint64_t seed);
  bool has_baseline() const { return has_baseline_; }
  /// The most recent baseline-recording episode, for trace output.
  const EpisodeTrace& baseline_episode() const { return baseline_episode_; }

  void set_observer(StepObserver observer) { observer_ = std::move(observer); }

  const Mesh& mesh() const { return *mesh_; }
  const EnvConfig& config() const { return cfg_; }
  const ReactionDiffusionModel& model() const { return model_; }
  const Field& state() const { return state_; }

 private:
  StepResult observe(double reward, bool done) const;
  double reward_now() const;
  void push_pending();
  void apply_action(std::span<const double> action);
  std::vector<double> random_action(std::uint64_t seed) const;
  void ensure_baseline();

  std::shared_ptr<const Mesh> mesh_;
  EnvConfig cfg_;
  ReactionDiffusionModel model_;
  Field ic_;
  Field state_;
  std::vector<double> action_;
  double norm_c_{0.0};
  double norm_kappa_{0.0};
  int step_index_{0};
  bool active_{false};
  bool recording_{false};
  bool has_baseline_{false};
  BaselineTrace baseline_;
  BaselineTrace pending_;
  EpisodeTrace baseline_episode_;
  StepObserver observer_;
};

}  // namespace rdc
