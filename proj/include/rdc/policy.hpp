#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

#include "rdc/env.hpp"

namespace rdc {

struct PolicyConfig {
  int hidden{128};
  double learning_rate{8e-5};
  double spread_floor{0.1};     // exploration: minimum action stddev
  double log_spread_init{-0.6931471805599453};  // log(0.5)
  double adam_beta1{0.9};
  double adam_beta2{0.999};
  double adam_eps{1e-8};
  int meta_iterations{10};
  int line_search_steps{10};
  double line_search_shrink{0.5};
};

class PolicyError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Weights of a one-hidden-layer tanh network with a tanh mean head and a
/// state-independent log stddev per action, stored in one flat vector:
///   [W1 (hidden x in, row-major) | b1 | W2 (out x hidden) | b2 | log_spread]
class PolicyParams {
 public:
  using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                                  Eigen::RowMajor>;

  PolicyParams() = default;
  PolicyParams(int n_in, int n_hidden, int n_out);

  /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases.
  static PolicyParams initialize(int n_in, int n_hidden, int n_out,
                                 double log_spread_init, std::uint64_t seed);

  int n_in() const { return n_in_; }
  int n_hidden() const { return n_hidden_; }
  int n_out() const { return n_out_; }
  std::size_t size() const { return data_.size(); }

  std::vector<double>& data() { return data_; }
  const std::vector<double>& data() const { return data_; }

  Eigen::Map<const RowMatrix> w1() const;
  Eigen::Map<const Eigen::VectorXd> b1() const;
  Eigen::Map<const RowMatrix> w2() const;
  Eigen::Map<const Eigen::VectorXd> b2() const;
  Eigen::Map<const Eigen::VectorXd> log_spread() const;

  // offsets into data()
  std::size_t off_b1() const { return static_cast<std::size_t>(n_hidden_) * n_in_; }
  std::size_t off_w2() const { return off_b1() + n_hidden_; }
  std::size_t off_b2() const { return off_w2() + static_cast<std::size_t>(n_out_) * n_hidden_; }
  std::size_t off_log_spread() const { return off_b2() + n_out_; }

  bool operator==(const PolicyParams&) const = default;

 private:
  int n_in_{0};
  int n_hidden_{0};
  int n_out_{0};
  std::vector<double> data_;
};

struct PolicyOutput {
  Eigen::VectorXd mean;    // in (-1,1)
  Eigen::VectorXd spread;  // stddev, >= floor
  Eigen::VectorXd hidden;
};

PolicyOutput forward(const PolicyParams& params, std::span<const double> obs,
                     double spread_floor);

/// Gaussian draw around mean, clipped to [-1,1].
std::vector<double> sample(const Eigen::VectorXd& mean,
                           const Eigen::VectorXd& spread, std::mt19937_64& rng,
                           std::normal_distribution<double>& normal);

/// Sum of per-dimension Gaussian log densities (no clipping correction).
double log_prob(const Eigen::VectorXd& mean, const Eigen::VectorXd& spread,
                std::span<const double> action);

struct Transition {
  std::vector<double> obs;
  std::vector<double> action;
  double reward{0.0};
};
using Batch = std::vector<Transition>;

/// -(1/|B|) sum log pi(a|s) (r - mean r): horizon-1 returns, mean baseline.
double pg_loss(const PolicyParams& params, const Batch& batch,
               double spread_floor);

/// Exact gradient of pg_loss. Samples are processed in fixed blocks in
/// parallel and block sums are added in order.
std::vector<double> backward(const PolicyParams& params, const Batch& batch,
                             double spread_floor);

namespace serial {
double pg_loss(const PolicyParams& params, const Batch& batch,
               double spread_floor);
std::vector<double> backward(const PolicyParams& params, const Batch& batch,
                             double spread_floor);
}  // namespace serial

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  long step{0};
  double lr{8e-5};
  double beta1{0.9};
  double beta2{0.999};
  double eps{1e-8};

  static AdamState for_size(std::size_t n, const PolicyConfig& cfg);
  bool operator==(const AdamState&) const = default;
};

/// Advances the moments with grad and returns the bias-corrected update.
std::vector<double> adam_direction(std::span<const double> grad,
                                   AdamState& state);
void adam_step(std::vector<double>& params, std::span<const double> grad,
               AdamState& state);

struct UpdateStats {
  std::vector<double> losses;  // losses[0] before, losses[k] after pass k
  std::vector<double> step_scales;  // accepted scale per pass, 0 if rejected
  bool monotone() const;
};

using LossFn = std::function<double(std::span<const double>)>;
using GradFn = std::function<std::vector<double>(std::span<const double>)>;

/// meta_iterations passes of: Adam direction, then backtracking on its
/// length (shrink factor, up to line_search_steps trials), accepting the
/// first trial that does not increase the loss; no move if all fail.
UpdateStats multi_step_update(std::vector<double>& x, AdamState& adam,
                              const LossFn& loss, const GradFn& grad,
                              const PolicyConfig& cfg);

UpdateStats multi_step_update(PolicyParams& params, AdamState& adam,
                              const Batch& batch, const PolicyConfig& cfg);

/// Stateful trainer: parameters, optimizer state and sampling RNG.
class Agent {
 public:
  Agent(EnvInfo info, PolicyConfig cfg, std::uint64_t seed);

  const PolicyParams& params() const { return params_; }
  const AdamState& adam() const { return adam_; }
  const PolicyConfig& config() const { return cfg_; }
  int episodes_done() const { return episode_; }

  std::vector<double> act(std::span<const double> obs);
  std::vector<double> act_mean(std::span<const double> obs) const;

  /// Seed passed to env.reset for the given episode index.
  std::uint64_t episode_seed(int episode) const;

  /// Drives one baseline-recording episode with the current (untrained)
  /// stochastic policy; the environment keeps the resulting norms as the
  /// before-training reference. No update.
  EpisodeTrace record_baseline(Environment& env);
  const std::optional<BaselineTrace>& baseline() const { return baseline_; }

  /// One training episode: roll out, then one multi-step update. An episode
  /// that aborts is returned flagged and leaves the policy unchanged.
  EpisodeTrace train_episode(Environment& env);

  /// Greedy rollout with mean actions; no update.
  EpisodeTrace evaluate(Environment& env, std::uint64_t reset_seed);

  void save_checkpoint(const std::filesystem::path& path) const;
  static Agent load_checkpoint(const std::filesystem::path& path,
                               PolicyConfig cfg);

  bool operator==(const Agent& other) const;

 private:
  Agent() = default;

  EnvInfo info_{};
  PolicyConfig cfg_{};
  std::uint64_t seed_{0};
  int episode_{0};
  PolicyParams params_;
  AdamState adam_;
  std::mt19937_64 rng_;
  std::normal_distribution<double> normal_{0.0, 1.0};
  std::optional<BaselineTrace> baseline_;
};

struct TrainResult {
  PolicyParams params;
  EpisodeTrace baseline;
  std::vector<EpisodeTrace> traces;
};

using EpisodeCallback = std::function<void(const EpisodeTrace&)>;

/// Records the baseline with the untrained agent, then trains n_episodes.

TrainResult train(Environment& env, int n_episodes, std::uint64_t seed,
                  const PolicyConfig& cfg = {},
                  const EpisodeCallback& on_episode = {});

}  // namespace rdc
