#include "rdc/env.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace rdc {

namespace {

constexpr double kActionSlack = 1e-9;
constexpr double kNormGuard = 1e-15;

void check_guard(const BaselineTrace& b, std::size_t step) {
  if (step >= b.norm_c_bef.size() || step >= b.norm_kappa_bef.size()) {
    throw EnvError("step index beyond baseline trace");
  }
  if (!(b.norm_c0 > kNormGuard) || !(b.norm_kappa0 > kNormGuard)) {
    throw EnvError("baseline initial norms must exceed 1e-15");
  }
}

}  // namespace

std::string to_string(Objective o) {
  return o == Objective::diff ? "diff" : "state";
}

Objective objective_from_string(const std::string& s) {
  if (s == "diff") return Objective::diff;
  if (s == "state") return Objective::state;
  throw EnvError("unknown objective '" + s + "' (expected diff or state)");
}

void EnvConfig::validate() const {
  if (!(action_low < action_high)) {
    throw EnvError("action_low must be below action_high");
  }
  if (!(action_low > 0.0)) throw EnvError("action_low must be positive");
  if (!(kappa_scale > 0.0)) throw EnvError("kappa_scale must be positive");
  if (episode_len < 1) throw EnvError("episode_len must be at least 1");
  for (double w : {weights.w1, weights.w2, weights.w3, weights.w4}) {
    if (!(w >= 0.0)) throw EnvError("reward weights must be non-negative");
  }
  if (ic.kind == InitialCondition::Kind::circle && !(ic.radius > 0.0)) {
    throw EnvError("initial condition radius must be positive");
  }
}

ControlMap scale_action(std::span<const double> action, const EnvConfig& cfg) {
  ControlMap out;
  out.kappa_per_region.reserve(action.size());
  const double half = 0.5 * (cfg.action_high - cfg.action_low);
  for (double a : action) {
    if (!std::isfinite(a) || a < -1.0 - kActionSlack || a > 1.0 + kActionSlack) {
      throw EnvError("action entry " + std::to_string(a) +
                     " outside [-1,1]");
    }
    a = std::clamp(a, -1.0, 1.0);
    out.kappa_per_region.push_back((cfg.action_low + (a + 1.0) * half) *
                                   cfg.kappa_scale);
  }
  return out;
}

std::vector<double> unscale_action(const ControlMap& control,
                                   const EnvConfig& cfg) {
  std::vector<double> out;
  out.reserve(control.kappa_per_region.size());
  const double half = 0.5 * (cfg.action_high - cfg.action_low);
  for (double k : control.kappa_per_region) {
    out.push_back((k / cfg.kappa_scale - cfg.action_low) / half - 1.0);
  }
  return out;
}

double reward_diff(double norm_kappa_i, double norm_c_i, std::size_t step,
                   const BaselineTrace& b, double w1, double w2) {
  check_guard(b, step);
  return w1 * norm_kappa_i / b.norm_kappa0 -
         w2 * std::max(0.0, (norm_c_i - b.norm_c_bef[step]) / b.norm_c0);
}

double reward_state(double norm_kappa_i, double norm_c_i, std::size_t step,
                    const BaselineTrace& b, double w3, double w4) {
  check_guard(b, step);
  return -w3 * norm_c_i / b.norm_c0 +
         w4 * std::min(0.0, (norm_kappa_i - b.norm_kappa_bef[step]) /
                                b.norm_kappa0);
}

Field initial_condition(const Mesh& mesh, const InitialCondition& ic) {
  Field f{Vector::Zero(static_cast<Eigen::Index>(mesh.num_nodes())), 0};
  if (ic.kind == InitialCondition::Kind::circle) {
    const auto nodes = mesh.nodes();
    for (std::size_t i = 0; i < nodes.size(); ++i) {
      const double dx = nodes[i].x - ic.center.x;
      const double dy = nodes[i].y - ic.center.y;
      if (dx * dx + dy * dy <= ic.radius * ic.radius) {
        f.values[static_cast<Eigen::Index>(i)] = ic.value;
      }
    }
  } else {
    if (ic.region < 0 || ic.region >= mesh.num_regions()) {
      throw EnvError("initial condition region " + std::to_string(ic.region) +
                     " not in mesh");
    }
    for (std::size_t e = 0; e < mesh.num_elements(); ++e) {
      if (mesh.regions()[e] != ic.region) continue;
      for (int v : mesh.elements()[e]) f.values[v] = ic.value;
    }
  }
  return f;
}

StepRecord to_record(const StepResult& r) {
  return {r.obs.step_index, r.reward, r.obs.norm_c, r.obs.norm_kappa,
          r.obs.action};
}

// ---------------------------------------------------------------------------

FemEnvironment::FemEnvironment(std::shared_ptr<const Mesh> mesh, SimParams sim,
                               EnvConfig cfg)
    : mesh_(std::move(mesh)), cfg_(cfg), model_(mesh_, sim) {
  cfg_.validate();
  ic_ = initial_condition(*mesh_, cfg_.ic);
}

EnvInfo FemEnvironment::info() const {
  return {mesh_->num_regions(), static_cast<int>(mesh_->num_nodes()),
          cfg_.episode_len};
}

std::vector<double> FemEnvironment::random_action(std::uint64_t seed) const {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<double> a(static_cast<std::size_t>(mesh_->num_regions()));
  for (auto& x : a) x = u(rng);
  return a;
}

void FemEnvironment::apply_action(std::span<const double> action) {
  if (static_cast<int>(action.size()) != mesh_->num_regions()) {
    throw EnvError("action has " + std::to_string(action.size()) +
                   " entries, environment expects " +
                   std::to_string(mesh_->num_regions()));
  }
  const ControlMap control = scale_action(action, cfg_);
  model_.set_control(control);
  action_.assign(action.begin(), action.end());
  for (auto& a : action_) a = std::clamp(a, -1.0, 1.0);
  norm_kappa_ = l2_norm_control(control, *mesh_);
}

double FemEnvironment::reward_now() const {
  const auto i = static_cast<std::size_t>(step_index_);
  const auto& w = cfg_.weights;
  const BaselineTrace& b = recording_ ? pending_ : baseline_;
  return cfg_.objective == Objective::diff
             ? reward_diff(norm_kappa_, norm_c_, i, b, w.w1, w.w2)
             : reward_state(norm_kappa_, norm_c_, i, b, w.w3, w.w4);
}

void FemEnvironment::push_pending() {
  pending_.norm_c_bef.push_back(norm_c_);
  pending_.norm_kappa_bef.push_back(norm_kappa_);
  if (step_index_ == 0) {
    pending_.norm_c0 = norm_c_;
    pending_.norm_kappa0 = norm_kappa_;
  }
}

StepResult FemEnvironment::observe(double reward, bool done) const {
  StepResult r;
  r.obs.state.assign(state_.values.data(),
                     state_.values.data() + state_.values.size());
  r.obs.action = action_;
  r.obs.norm_c = norm_c_;
  r.obs.norm_kappa = norm_kappa_;
  r.obs.step_index = step_index_;
  r.reward = reward;
  r.done = done;
  return r;
}

void FemEnvironment::ensure_baseline() {
  if (!has_baseline_) record_baseline(cfg_.seed);
}

StepResult FemEnvironment::reset(std::uint64_t seed, bool record_baseline) {
  if (!record_baseline) ensure_baseline();
  recording_ = record_baseline;
  pending_ = {};
  state_ = ic_;
  step_index_ = 0;
  apply_action(random_action(seed));
  norm_c_ = model_.norm(state_.values);
  active_ = true;
  if (recording_) {
    push_pending();
    baseline_episode_ = {};
  }
  if (observer_) observer_(0, state_, model_.control());
  StepResult r = observe(reward_now(), false);
  if (recording_) baseline_episode_.steps.push_back(to_record(r));
  return r;
}

StepResult FemEnvironment::step(std::span<const double> action) {
  if (!active_) throw EnvError("step called without an active episode");
  apply_action(action);
  try {
    state_ = model_.step(state_);
  } catch (const FemError& err) {
    active_ = false;
    const bool was_recording = recording_;
    recording_ = false;
    const std::string what = std::string(was_recording ? "baseline " : "") +
                             "episode aborted at step " +
                             std::to_string(step_index_ + 1) + ": " + err.what();
    throw EpisodeAborted(what);
  }
  ++step_index_;
  norm_c_ = model_.norm(state_.values);
  const bool done = step_index_ >= cfg_.episode_len;
  if (recording_) push_pending();
  if (observer_) observer_(step_index_, state_, model_.control());
  StepResult r = observe(reward_now(), done);
  if (recording_) baseline_episode_.steps.push_back(to_record(r));
  if (done) {
    active_ = false;
    if (recording_) {
      recording_ = false;
      set_baseline(pending_);
    }
  }
  return r;
}

const BaselineTrace& FemEnvironment::record_baseline(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<double> a(static_cast<std::size_t>(mesh_->num_regions()));
  reset(seed, true);
  for (auto& x : a) x = u(rng);  // the same draws fixed the step-0 control
  try {
    while (active_) {
      for (auto& x : a) x = u(rng);
      step(a);
    }
  } catch (const EpisodeAborted& err) {
    throw EnvError(std::string("baseline generation failed: ") + err.what());
  }
  return baseline_;
}

void FemEnvironment::set_baseline(const BaselineTrace& baseline) {
  const auto n = static_cast<std::size_t>(cfg_.episode_len) + 1;
  if (baseline.norm_c_bef.size() != n || baseline.norm_kappa_bef.size() != n) {
    throw EnvError("baseline trace length must be episode_len + 1");
  }
  if (!(baseline.norm_c0 > kNormGuard) || !(baseline.norm_kappa0 > kNormGuard)) {
    throw EnvError("baseline initial norms must exceed 1e-15");
  }
  baseline_ = baseline;
  has_baseline_ = true;
}

BaselineTrace FemEnvironment::baseline() {
  if (!has_baseline_) throw EnvError("baseline not recorded");
  return baseline_;
}

}  // namespace rdc
