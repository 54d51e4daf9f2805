#include <doctest.h>

#include <random>
#include <tuple>

#include <Eigen/Dense>
#include <omp.h>

#include "rdc/fem.hpp"
#include "rdc/kernels.hpp"
#include "rdc/linsolve.hpp"

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

}  // namespace

TEST_CASE("parallel kernels match serial references bit for bit") {
  const Mesh mesh = build_unit_square(24, 20, 4, 4);
  const AssemblyPlan plan(mesh);

  const auto local_m = random_values(mesh.num_elements() * 9, 1);
  std::vector<double> a(plan.nnz()), b(plan.nnz());
  kernels::gather_matrix(plan, local_m, a);
  kernels::serial::gather_matrix(plan, local_m, b);
  CHECK(a == b);

  const auto local_v = random_values(mesh.num_elements() * 3, 2);
  std::vector<double> va(mesh.num_nodes()), vb(mesh.num_nodes());
  kernels::gather_vector(plan, local_v, va);
  kernels::serial::gather_vector(plan, local_v, vb);
  CHECK(va == vb);

  const SparseMatrix m = assemble_mass(mesh);
  const Vector x = random_vector(m.rows(), 3);
  Vector ya(m.rows()), yb(m.rows());
  kernels::spmv_symmetric(m, x, ya);
  kernels::serial::spmv_symmetric(m, x, yb);
  CHECK(ya == yb);
  CHECK((ya - m * x).cwiseAbs().maxCoeff() < 1e-14);

  // the chunked sum associates differently from the plain loop
  const Vector big_x = random_vector(100000, 4), big_y = random_vector(100000, 5);
  CHECK(std::abs(kernels::dot(big_x, big_y) - kernels::serial::dot(big_x, big_y)) < 1e-10);
  CHECK(std::abs(kernels::dot(big_x, big_y) - big_x.dot(big_y)) < 1e-10);
}

TEST_CASE("parallel kernels do not depend on the thread count") {
  const Mesh mesh = build_unit_square(24, 20, 4, 4);
  const AssemblyPlan plan(mesh);
  const auto local_m = random_values(mesh.num_elements() * 9, 1);
  const auto local_v = random_values(mesh.num_elements() * 3, 2);
  const SparseMatrix m = assemble_mass(mesh);
  const Vector x = random_vector(m.rows(), 3);
  const Vector big_x = random_vector(100000, 4), big_y = random_vector(100000, 5);

  auto run = [&](int threads) {
    omp_set_num_threads(threads);
    std::vector<double> a(plan.nnz()), v(mesh.num_nodes());
    kernels::gather_matrix(plan, local_m, a);
    kernels::gather_vector(plan, local_v, v);
    Vector y(m.rows());
    kernels::spmv_symmetric(m, x, y);
    return std::make_tuple(a, v, std::vector<double>(y.data(), y.data() + y.size()),
                           kernels::dot(big_x, big_y));
  };
  const int saved = omp_get_max_threads();
  const auto one = run(1);
  const auto four = run(4);
  omp_set_num_threads(saved);
  CHECK(one == four);
}

TEST_CASE("scatter oracle for the gather kernels") {
  const Mesh mesh = build_unit_square(5, 3, 1, 1);
  const AssemblyPlan plan(mesh);
  const auto local = random_values(mesh.num_elements() * 9, 6);
  std::vector<double> values(plan.nnz());
  kernels::gather_matrix(plan, local, values);

  Eigen::MatrixXd dense = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(mesh.num_nodes()),
                                                static_cast<Eigen::Index>(mesh.num_nodes()));
  for (std::size_t e = 0; e < mesh.num_elements(); ++e) {
    const auto& t = mesh.elements()[e];
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) dense(t[i], t[j]) += local[e * 9 + i * 3 + j];
  }
  SparseMatrix s = plan.pattern();
  std::copy(values.begin(), values.end(), s.valuePtr());
  CHECK((Eigen::MatrixXd(s) - dense).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("linear solves") {
  SparseMatrix eye(7, 7);
  eye.setIdentity();
  const Vector rhs = random_vector(7, 7);
  for (auto kind : {SolverKind::direct, SolverKind::cg}) {
    CHECK((solve_linear(eye, rhs, kind) - rhs).cwiseAbs().maxCoeff() < 1e-14);
  }

  const Mesh mesh = build_unit_square(8, 8, 1, 1);
  const SparseMatrix m = assemble_mass(mesh);
  const Vector ones = Vector::Ones(m.rows());
  for (auto kind : {SolverKind::direct, SolverKind::cg}) {
    CHECK((solve_linear(m, m * ones, kind) - ones).cwiseAbs().maxCoeff() < 1e-10);
  }

  // random SPD 50x50 against a dense factorization
  const Eigen::Index n = 50;
  Eigen::MatrixXd b(n, n);
  const auto vals = random_values(static_cast<std::size_t>(n * n), 8);
  for (Eigen::Index i = 0; i < n * n; ++i) b.data()[i] = vals[static_cast<std::size_t>(i)];
  Eigen::MatrixXd a = b.transpose() * b + static_cast<double>(n) * Eigen::MatrixXd::Identity(n, n);
  const SparseMatrix as = a.sparseView();
  const Vector r = random_vector(n, 9);
  const Vector oracle = a.llt().solve(r);
  for (auto kind : {SolverKind::direct, SolverKind::cg}) {
    CHECK((solve_linear(as, r, kind) - oracle).cwiseAbs().maxCoeff() < 1e-9);
  }
}

TEST_CASE("indefinite systems are rejected") {
  SparseMatrix a(2, 2);
  a.insert(0, 0) = 1.0;
  a.insert(1, 1) = -1.0;
  CHECK_THROWS_AS(solve_linear(a, Vector::Ones(2), SolverKind::direct), LinearSolveError);
}
