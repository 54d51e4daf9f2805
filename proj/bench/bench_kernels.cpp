// Serial references vs OpenMP kernels.

#include <random>

#include <benchmark/benchmark.h>

#include "rdc/fem.hpp"
#include "rdc/kernels.hpp"
#include "rdc/policy.hpp"

using namespace rdc;

namespace {

std::vector<double> random_values(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1, 1);
  std::vector<double> v(n);
  for (auto& x : v) x = u(rng);
  return v;
}

Vector random_vector(Eigen::Index n, std::uint64_t seed) {
  const auto v = random_values(static_cast<std::size_t>(n), seed);
  return Eigen::Map<const Vector>(v.data(), n);
}

struct MeshData {
  explicit MeshData(int n) : mesh(build_unit_square(n, n, 8, 8)), plan(mesh) {}
  Mesh mesh;
  AssemblyPlan plan;
};

template <bool Parallel>
void gather_matrix(benchmark::State& state) {
  const MeshData d(static_cast<int>(state.range(0)));
  const auto local = random_values(d.mesh.num_elements() * 9, 1);
  std::vector<double> out(d.plan.nnz());
  for (auto _ : state) {
    if constexpr (Parallel) kernels::gather_matrix(d.plan, local, out);
    else kernels::serial::gather_matrix(d.plan, local, out);
    benchmark::DoNotOptimize(out.data());
  }
}

template <bool Parallel>
void gather_vector(benchmark::State& state) {
  const MeshData d(static_cast<int>(state.range(0)));
  const auto local = random_values(d.mesh.num_elements() * 3, 2);
  std::vector<double> out(d.mesh.num_nodes());
  for (auto _ : state) {
    if constexpr (Parallel) kernels::gather_vector(d.plan, local, out);
    else kernels::serial::gather_vector(d.plan, local, out);
    benchmark::DoNotOptimize(out.data());
  }
}

template <bool Parallel>
void spmv(benchmark::State& state) {
  const Mesh mesh = build_unit_square(static_cast<int>(state.range(0)),
                                      static_cast<int>(state.range(0)), 8, 8);
  const SparseMatrix m = assemble_mass(mesh);
  const Vector x = random_vector(m.rows(), 3);
  Vector y(m.rows());
  for (auto _ : state) {
    if constexpr (Parallel) kernels::spmv_symmetric(m, x, y);
    else kernels::serial::spmv_symmetric(m, x, y);
    benchmark::DoNotOptimize(y.data());
  }
}

template <bool Parallel>
void dot(benchmark::State& state) {
  const Vector x = random_vector(state.range(0), 4), y = random_vector(state.range(0), 5);
  for (auto _ : state) {
    double s;
    if constexpr (Parallel) s = kernels::dot(x, y);
    else s = kernels::serial::dot(x, y);
    benchmark::DoNotOptimize(s);
  }
}

template <bool Parallel>
void stiffness(benchmark::State& state) {
  const Mesh mesh = build_unit_square(static_cast<int>(state.range(0)),
                                      static_cast<int>(state.range(0)), 8, 8);
  const ControlMap k{random_values(64, 6)};
  ControlMap pos = k;
  for (auto& v : pos.kappa_per_region) v = 1.5 + v;
  for (auto _ : state) {
    SparseMatrix s = Parallel ? assemble_stiffness(mesh, pos, 1.0)
                              : serial::assemble_stiffness(mesh, pos, 1.0);
    benchmark::DoNotOptimize(s.valuePtr());
  }
}

template <bool Parallel>
void policy_backward(benchmark::State& state) {
  const int n_in = static_cast<int>(state.range(0));
  PolicyParams p = PolicyParams::initialize(n_in, 128, 64, -0.69, 7);
  const auto obs = random_values(static_cast<std::size_t>(n_in) * 60, 8);
  const auto act = random_values(64 * 60, 9);
  Batch batch(60);
  for (std::size_t i = 0; i < 60; ++i) {
    batch[i].obs.assign(obs.begin() + static_cast<long>(i * n_in),
                        obs.begin() + static_cast<long>((i + 1) * n_in));
    batch[i].action.assign(act.begin() + static_cast<long>(i * 64),
                           act.begin() + static_cast<long>((i + 1) * 64));
    batch[i].reward = obs[i];
  }
  for (auto _ : state) {
    auto g = Parallel ? backward(p, batch, 0.1) : serial::backward(p, batch, 0.1);
    benchmark::DoNotOptimize(g.data());
  }
}

}  // namespace

BENCHMARK(gather_matrix<false>)->Arg(32)->Arg(128);
BENCHMARK(gather_matrix<true>)->Arg(32)->Arg(128);
BENCHMARK(gather_vector<false>)->Arg(32)->Arg(128);
BENCHMARK(gather_vector<true>)->Arg(32)->Arg(128);
BENCHMARK(spmv<false>)->Arg(32)->Arg(128);
BENCHMARK(spmv<true>)->Arg(32)->Arg(128);
BENCHMARK(dot<false>)->Arg(1 << 12)->Arg(1 << 20);
BENCHMARK(dot<true>)->Arg(1 << 12)->Arg(1 << 20);
BENCHMARK(stiffness<false>)->Arg(16)->Arg(64);
BENCHMARK(stiffness<true>)->Arg(16)->Arg(64);
BENCHMARK(policy_backward<false>)->Arg(289);
BENCHMARK(policy_backward<true>)->Arg(289);

BENCHMARK_MAIN();
