#include "rdc/policy.hpp"

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <ios>
#include <limits>
#include <numbers>
#include <sstream>

namespace rdc {

namespace {

constexpr std::size_t kBlock = 8;

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

std::vector<double> advantages(const Batch& batch) {
  double mean = 0.0;
  for (const auto& t : batch) mean += t.reward;
  mean /= static_cast<double>(batch.size());
  std::vector<double> adv(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) adv[i] = batch[i].reward - mean;
  return adv;
}

void check_batch(const PolicyParams& p, const Batch& batch) {
  if (batch.empty()) throw PolicyError("empty batch");
  for (const auto& t : batch) {
    if (static_cast<int>(t.obs.size()) != p.n_in() ||
        static_cast<int>(t.action.size()) != p.n_out()) {
      throw PolicyError("transition shape does not match policy");
    }
    if (!std::isfinite(t.reward)) throw PolicyError("non-finite reward in batch");
  }
}

// grad += coef * d log pi(a|s) / d params
void accumulate_sample(const PolicyParams& p, const Transition& t, double coef,
                       double floor, std::span<double> grad) {
  const PolicyOutput out = forward(p, t.obs, floor);
  const Eigen::Map<const Eigen::VectorXd> x(t.obs.data(),
                                            static_cast<Eigen::Index>(t.obs.size()));
  const Eigen::Map<const Eigen::VectorXd> a(t.action.data(),
                                            static_cast<Eigen::Index>(t.action.size()));
  const auto ls = p.log_spread();

  const Eigen::VectorXd diff = a - out.mean;
  const Eigen::VectorXd var = out.spread.array().square();
  const Eigen::VectorXd d_mean = diff.cwiseQuotient(var);
  const Eigen::VectorXd d_z2 =
      d_mean.cwiseProduct((1.0 - out.mean.array().square()).matrix());
  const Eigen::VectorXd d_h = p.w2().transpose() * d_z2;
  const Eigen::VectorXd d_z1 =
      d_h.cwiseProduct((1.0 - out.hidden.array().square()).matrix());

  using RowMap = Eigen::Map<PolicyParams::RowMatrix>;
  using VecMap = Eigen::Map<Eigen::VectorXd>;
  RowMap g_w1(grad.data(), p.n_hidden(), p.n_in());
  VecMap g_b1(grad.data() + p.off_b1(), p.n_hidden());
  RowMap g_w2(grad.data() + p.off_w2(), p.n_out(), p.n_hidden());
  VecMap g_b2(grad.data() + p.off_b2(), p.n_out());
  VecMap g_ls(grad.data() + p.off_log_spread(), p.n_out());

  g_w1.noalias() += (coef * d_z1) * x.transpose();
  g_b1 += coef * d_z1;
  g_w2.noalias() += (coef * d_z2) * out.hidden.transpose();
  g_b2 += coef * d_z2;
  for (int j = 0; j < p.n_out(); ++j) {
    // spread = max(exp(ls), floor): no gradient through the floor
    if (std::exp(ls[j]) > floor) {
      g_ls[j] += coef * (diff[j] * diff[j] / var[j] - 1.0);
    }
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// PolicyParams

PolicyParams::PolicyParams(int n_in, int n_hidden, int n_out)
    : n_in_(n_in), n_hidden_(n_hidden), n_out_(n_out) {
  if (n_in < 1 || n_hidden < 1 || n_out < 1) {
    throw PolicyError("policy dimensions must be positive");
  }
  data_.assign(off_log_spread() + static_cast<std::size_t>(n_out), 0.0);
}

PolicyParams PolicyParams::initialize(int n_in, int n_hidden, int n_out,
                                      double log_spread_init,
                                      std::uint64_t seed) {
  PolicyParams p(n_in, n_hidden, n_out);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u1(-1.0 / std::sqrt(n_in),
                                            1.0 / std::sqrt(n_in));
  std::uniform_real_distribution<double> u2(-1.0 / std::sqrt(n_hidden),
                                            1.0 / std::sqrt(n_hidden));
  auto& d = p.data_;
  for (std::size_t i = 0; i < p.off_b1(); ++i) d[i] = u1(rng);
  for (std::size_t i = p.off_w2(); i < p.off_b2(); ++i) d[i] = u2(rng);
  for (std::size_t i = p.off_log_spread(); i < d.size(); ++i) {
    d[i] = log_spread_init;
  }
  return p;
}

Eigen::Map<const PolicyParams::RowMatrix> PolicyParams::w1() const {
  return {data_.data(), n_hidden_, n_in_};
}
Eigen::Map<const Eigen::VectorXd> PolicyParams::b1() const {
  return {data_.data() + off_b1(), n_hidden_};
}
Eigen::Map<const PolicyParams::RowMatrix> PolicyParams::w2() const {
  return {data_.data() + off_w2(), n_out_, n_hidden_};
}
Eigen::Map<const Eigen::VectorXd> PolicyParams::b2() const {
  return {data_.data() + off_b2(), n_out_};
}
Eigen::Map<const Eigen::VectorXd> PolicyParams::log_spread() const {
  return {data_.data() + off_log_spread(), n_out_};
}

// ---------------------------------------------------------------------------

PolicyOutput forward(const PolicyParams& p, std::span<const double> obs,
                     double spread_floor) {
  if (static_cast<int>(obs.size()) != p.n_in()) {
    throw PolicyError("observation has " + std::to_string(obs.size()) +
                      " entries, policy expects " + std::to_string(p.n_in()));
  }
  const Eigen::Map<const Eigen::VectorXd> x(obs.data(),
                                            static_cast<Eigen::Index>(obs.size()));
  PolicyOutput out;
  out.hidden = (p.w1() * x + p.b1()).array().tanh();
  out.mean = (p.w2() * out.hidden + p.b2()).array().tanh();
  out.spread = p.log_spread().array().exp().max(spread_floor);
  return out;
}

std::vector<double> sample(const Eigen::VectorXd& mean,
                           const Eigen::VectorXd& spread, std::mt19937_64& rng,
                           std::normal_distribution<double>& normal) {
  std::vector<double> a(static_cast<std::size_t>(mean.size()));
  for (Eigen::Index j = 0; j < mean.size(); ++j) {
    const double draw = mean[j] + spread[j] * normal(rng);
    a[static_cast<std::size_t>(j)] = std::clamp(draw, -1.0, 1.0);
  }
  return a;
}

double log_prob(const Eigen::VectorXd& mean, const Eigen::VectorXd& spread,
                std::span<const double> action) {
  constexpr double kHalfLog2Pi = 0.91893853320467274178;  // log(2 pi)/2
  double lp = 0.0;
  for (Eigen::Index j = 0; j < mean.size(); ++j) {
    const double z = (action[static_cast<std::size_t>(j)] - mean[j]) / spread[j];
    lp += -0.5 * z * z - std::log(spread[j]) - kHalfLog2Pi;
  }
  return lp;
}

double pg_loss(const PolicyParams& p, const Batch& batch, double floor) {
  check_batch(p, batch);
  const auto adv = advantages(batch);
  std::vector<double> terms(batch.size());
  const long n = static_cast<long>(batch.size());
#pragma omp parallel for schedule(static)
  for (long i = 0; i < n; ++i) {
    const auto& t = batch[static_cast<std::size_t>(i)];
    const auto out = forward(p, t.obs, floor);
    terms[static_cast<std::size_t>(i)] =
        log_prob(out.mean, out.spread, t.action) * adv[static_cast<std::size_t>(i)];
  }
  double s = 0.0;
  for (double v : terms) s += v;
  return -s / static_cast<double>(batch.size());
}

std::vector<double> backward(const PolicyParams& p, const Batch& batch,
                             double floor) {
  check_batch(p, batch);
  const auto adv = advantages(batch);
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  const std::size_t n_blocks = (batch.size() + kBlock - 1) / kBlock;
  std::vector<std::vector<double>> partial(n_blocks);
#pragma omp parallel for schedule(static)
  for (long b = 0; b < static_cast<long>(n_blocks); ++b) {
    auto& g = partial[static_cast<std::size_t>(b)];
    g.assign(p.size(), 0.0);
    const std::size_t lo = static_cast<std::size_t>(b) * kBlock;
    const std::size_t hi = std::min(batch.size(), lo + kBlock);
    for (std::size_t i = lo; i < hi; ++i) {
      if (adv[i] == 0.0) continue;
      accumulate_sample(p, batch[i], -adv[i] * inv_n, floor, g);
    }
  }
  std::vector<double> grad(p.size(), 0.0);
  for (const auto& g : partial) {
    for (std::size_t k = 0; k < grad.size(); ++k) grad[k] += g[k];
  }
  return grad;
}

namespace serial {

double pg_loss(const PolicyParams& p, const Batch& batch, double floor) {
  check_batch(p, batch);
  const auto adv = advantages(batch);
  double s = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto out = forward(p, batch[i].obs, floor);
    s += log_prob(out.mean, out.spread, batch[i].action) * adv[i];
  }
  return -s / static_cast<double>(batch.size());
}

std::vector<double> backward(const PolicyParams& p, const Batch& batch,
                             double floor) {
  check_batch(p, batch);
  const auto adv = advantages(batch);
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  std::vector<double> grad(p.size(), 0.0);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    accumulate_sample(p, batch[i], -adv[i] * inv_n, floor, grad);
  }
  return grad;
}

}  // namespace serial

// ---------------------------------------------------------------------------
// Adam and the line-search wrapper

AdamState AdamState::for_size(std::size_t n, const PolicyConfig& cfg) {
  AdamState s;
  s.m.assign(n, 0.0);
  s.v.assign(n, 0.0);
  s.lr = cfg.learning_rate;
  s.beta1 = cfg.adam_beta1;
  s.beta2 = cfg.adam_beta2;
  s.eps = cfg.adam_eps;
  return s;
}

std::vector<double> adam_direction(std::span<const double> grad,
                                   AdamState& s) {
  if (grad.size() != s.m.size() || grad.size() != s.v.size()) {
    throw PolicyError("gradient shape does not match optimizer state");
  }
  ++s.step;
  const double c1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.step));
  const double c2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.step));
  std::vector<double> d(grad.size());
  for (std::size_t i = 0; i < grad.size(); ++i) {
    s.m[i] = s.beta1 * s.m[i] + (1.0 - s.beta1) * grad[i];
    s.v[i] = s.beta2 * s.v[i] + (1.0 - s.beta2) * grad[i] * grad[i];
    d[i] = -s.lr * (s.m[i] / c1) / (std::sqrt(s.v[i] / c2) + s.eps);
  }
  return d;
}

void adam_step(std::vector<double>& params, std::span<const double> grad,
               AdamState& state) {
  const auto d = adam_direction(grad, state);
  for (std::size_t i = 0; i < params.size(); ++i) params[i] += d[i];
}

bool UpdateStats::monotone() const {
  for (std::size_t k = 1; k < losses.size(); ++k) {
    if (losses[k] > losses[k - 1]) return false;
  }
  return true;
}

UpdateStats multi_step_update(std::vector<double>& x, AdamState& adam,
                              const LossFn& loss, const GradFn& grad,
                              const PolicyConfig& cfg) {
  UpdateStats st;
  st.losses.push_back(loss(x));
  std::vector<double> trial(x.size());
  for (int pass = 0; pass < cfg.meta_iterations; ++pass) {
    const auto d = adam_direction(grad(x), adam);
    const double base = st.losses.back();
    double scale = 1.0;
    double accepted = 0.0;
    double accepted_loss = base;
    for (int k = 0; k < cfg.line_search_steps; ++k) {
      for (std::size_t i = 0; i < x.size(); ++i) trial[i] = x[i] + scale * d[i];
      const double l = loss(trial);
      if (l <= base) {
        accepted = scale;
        accepted_loss = l;
        x.swap(trial);
        break;
      }
      scale *= cfg.line_search_shrink;
    }
    st.losses.push_back(accepted_loss);
    st.step_scales.push_back(accepted);
  }
  return st;
}

UpdateStats multi_step_update(PolicyParams& params, AdamState& adam,
                              const Batch& batch, const PolicyConfig& cfg) {
  check_batch(params, batch);
  PolicyParams scratch = params;
  const double floor = cfg.spread_floor;
  auto with = [&](std::span<const double> x) -> const PolicyParams& {
    std::copy(x.begin(), x.end(), scratch.data().begin());
    return scratch;
  };
  LossFn loss = [&](std::span<const double> x) {
    return pg_loss(with(x), batch, floor);
  };
  GradFn grad = [&](std::span<const double> x) {
    return backward(with(x), batch, floor);
  };
  return multi_step_update(params.data(), adam, loss, grad, cfg);
}

// ---------------------------------------------------------------------------
// Agent

Agent::Agent(EnvInfo info, PolicyConfig cfg, std::uint64_t seed)
    : info_(info),
      cfg_(cfg),
      seed_(seed),
      params_(PolicyParams::initialize(info.obs_size, cfg.hidden,
                                       info.n_actions, cfg.log_spread_init,
                                       splitmix64(seed))),
      adam_(AdamState::for_size(params_.size(), cfg)),
      rng_(splitmix64(seed ^ 0x5DEECE66Dull)) {}

std::uint64_t Agent::episode_seed(int episode) const {
  return splitmix64(seed_ + 0x100000001B3ull * static_cast<std::uint64_t>(episode + 1));
}

std::vector<double> Agent::act(std::span<const double> obs) {
  const auto out = forward(params_, obs, cfg_.spread_floor);
  return sample(out.mean, out.spread, rng_, normal_);
}

std::vector<double> Agent::act_mean(std::span<const double> obs) const {
  const auto out = forward(params_, obs, cfg_.spread_floor);
  return {out.mean.data(), out.mean.data() + out.mean.size()};
}

EpisodeTrace Agent::record_baseline(Environment& env) {
  EpisodeTrace trace;
  trace.episode = -1;
  StepResult r = env.reset(episode_seed(-1), true);
  trace.steps.push_back(to_record(r));
  while (!r.done) {
    r = env.step(act(r.obs.state));
    trace.steps.push_back(to_record(r));
  }
  baseline_ = env.baseline();
  return trace;
}

EpisodeTrace Agent::train_episode(Environment& env) {
  EpisodeTrace trace;
  trace.episode = episode_;
  const int episode = episode_++;
  Batch batch;
  batch.reserve(static_cast<std::size_t>(info_.episode_len));
  int step = 0;
  try {
    StepResult r = env.reset(episode_seed(episode));
    trace.steps.push_back(to_record(r));
    for (step = 0; step < info_.episode_len && !r.done; ++step) {
      auto a = act(r.obs.state);
      StepResult next = env.step(a);
      batch.push_back({std::move(r.obs.state), std::move(a), next.reward});
      trace.steps.push_back(to_record(next));
      r = std::move(next);
    }
  } catch (const EpisodeAborted&) {
    trace.aborted = true;
    trace.steps.push_back({step + 1, -std::numeric_limits<double>::infinity(),
                           0.0, 0.0, {}});
    env.end_episode(episode, true);
    return trace;
  }
  env.end_episode(episode, false);
  const auto stats = multi_step_update(params_, adam_, batch, cfg_);
  trace.update_losses = stats.losses;
  return trace;
}

EpisodeTrace Agent::evaluate(Environment& env, std::uint64_t reset_seed) {
  EpisodeTrace trace;
  trace.episode = episode_;
  StepResult r = env.reset(reset_seed);
  trace.steps.push_back(to_record(r));
  while (!r.done) {
    r = env.step(act_mean(r.obs.state));
    trace.steps.push_back(to_record(r));
  }
  return trace;
}

bool Agent::operator==(const Agent& o) const {
  return info_.n_actions == o.info_.n_actions &&
         info_.obs_size == o.info_.obs_size &&
         info_.episode_len == o.info_.episode_len && seed_ == o.seed_ &&
         episode_ == o.episode_ && params_ == o.params_ && adam_ == o.adam_ &&
         rng_ == o.rng_ && normal_ == o.normal_ && baseline_ == o.baseline_;
}

// Checkpoint: line-oriented text, doubles as hex floats so a reload is
// bit-identical.
namespace {

constexpr const char* kCheckpointMagic = "rdc-checkpoint";
constexpr int kCheckpointVersion = 1;

void write_doubles(std::ostream& out, const char* tag,
                   const std::vector<double>& v) {
  out << tag << " " << v.size() << "\n";
  out << std::hexfloat;
  for (std::size_t i = 0; i < v.size(); ++i) {
    out << v[i] << ((i + 1) % 8 == 0 || i + 1 == v.size() ? "\n" : " ");
  }
  out << std::defaultfloat;
}

double parse_double(const std::string& tok) {
  char* end = nullptr;
  const double v = std::strtod(tok.c_str(), &end);
  if (end == tok.c_str() || *end != '\0') {
    throw PolicyError("checkpoint: bad number '" + tok + "'");
  }
  return v;
}

std::vector<double> read_doubles(std::istream& in, const std::string& tag) {
  std::string t;
  std::size_t n = 0;
  if (!(in >> t >> n) || t != tag) {
    throw PolicyError("checkpoint: expected section '" + tag + "'");
  }
  std::vector<double> v(n);
  std::string tok;
  for (auto& x : v) {
    if (!(in >> tok)) throw PolicyError("checkpoint: truncated " + tag);
    x = parse_double(tok);
  }
  return v;
}

template <typename T>
void expect(std::istream& in, const std::string& tag, T& value) {
  std::string t;
  if (!(in >> t >> value) || t != tag) {
    throw PolicyError("checkpoint: expected '" + tag + "'");
  }
}

}  // namespace

void Agent::save_checkpoint(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw PolicyError("cannot write checkpoint " + path.string());
  out << kCheckpointMagic << " " << kCheckpointVersion << "\n";
  out << "dims " << info_.obs_size << " " << params_.n_hidden() << " "
      << info_.n_actions << "\n";
  out << "episode_len " << info_.episode_len << "\n";
  out << "seed " << seed_ << "\n";
  out << "episode " << episode_ << "\n";
  write_doubles(out, "params", params_.data());
  out << "adam_step " << adam_.step << "\n";
  write_doubles(out, "adam_m", adam_.m);
  write_doubles(out, "adam_v", adam_.v);
  out << "rng " << rng_ << "\n";
  out << "normal " << normal_ << "\n";
  out << "baseline " << (baseline_ ? 1 : 0) << "\n";
  if (baseline_) {
    write_doubles(out, "norm_c", baseline_->norm_c_bef);
    write_doubles(out, "norm_kappa", baseline_->norm_kappa_bef);
  }
  if (!out) throw PolicyError("failed writing checkpoint " + path.string());
}

Agent Agent::load_checkpoint(const std::filesystem::path& path,
                             PolicyConfig cfg) {
  std::ifstream in(path);
  if (!in) throw PolicyError("cannot open checkpoint " + path.string());
  std::string magic;
  int version = 0;
  if (!(in >> magic >> version) || magic != kCheckpointMagic) {
    throw PolicyError("not a checkpoint file: " + path.string());
  }
  if (version != kCheckpointVersion) {
    throw PolicyError("unsupported checkpoint version " +
                      std::to_string(version));
  }
  Agent a;
  std::string t;
  int hidden = 0;
  if (!(in >> t >> a.info_.obs_size >> hidden >> a.info_.n_actions) ||
      t != "dims") {
    throw PolicyError("checkpoint: expected 'dims'");
  }
  if (hidden != cfg.hidden) {
    throw PolicyError("checkpoint hidden size " + std::to_string(hidden) +
                      " does not match configuration " +
                      std::to_string(cfg.hidden));
  }
  expect(in, "episode_len", a.info_.episode_len);
  expect(in, "seed", a.seed_);
  expect(in, "episode", a.episode_);
  a.cfg_ = cfg;
  a.params_ = PolicyParams(a.info_.obs_size, hidden, a.info_.n_actions);
  auto data = read_doubles(in, "params");
  if (data.size() != a.params_.size()) {
    throw PolicyError("checkpoint parameter count mismatch");
  }
  a.params_.data() = std::move(data);
  a.adam_ = AdamState::for_size(a.params_.size(), cfg);
  expect(in, "adam_step", a.adam_.step);
  a.adam_.m = read_doubles(in, "adam_m");
  a.adam_.v = read_doubles(in, "adam_v");
  if (a.adam_.m.size() != a.params_.size() ||
      a.adam_.v.size() != a.params_.size()) {
    throw PolicyError("checkpoint optimizer state size mismatch");
  }
  if (!(in >> t) || t != "rng" || !(in >> a.rng_)) {
    throw PolicyError("checkpoint: bad rng state");
  }
  if (!(in >> t) || t != "normal" || !(in >> a.normal_)) {
    throw PolicyError("checkpoint: bad normal-distribution state");
  }
  int has_baseline = 0;
  expect(in, "baseline", has_baseline);
  if (has_baseline) {
    BaselineTrace b;
    b.norm_c_bef = read_doubles(in, "norm_c");
    b.norm_kappa_bef = read_doubles(in, "norm_kappa");
    if (b.norm_c_bef.empty() || b.norm_kappa_bef.size() != b.norm_c_bef.size()) {
      throw PolicyError("checkpoint: bad baseline trace");
    }
    b.norm_c0 = b.norm_c_bef.front();
    b.norm_kappa0 = b.norm_kappa_bef.front();
    a.baseline_ = std::move(b);
  }
  return a;
}

TrainResult train(Environment& env, int n_episodes, std::uint64_t seed,
                  const PolicyConfig& cfg, const EpisodeCallback& on_episode) {
  Agent agent(env.info(), cfg, seed);
  TrainResult result;
  result.traces.reserve(static_cast<std::size_t>(std::max(0, n_episodes)));
  result.baseline = agent.record_baseline(env);
  for (int e = 0; e < n_episodes; ++e) {
    result.traces.push_back(agent.train_episode(env));
    if (on_episode) on_episode(result.traces.back());
  }
  result.params = agent.params();
  return result;
}

}  // namespace rdc
