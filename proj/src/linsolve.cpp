#include "rdc/linsolve.hpp"

#include <cmath>
#include <string>
#include <vector>

#include <Eigen/SparseCholesky>

namespace rdc {

namespace {

constexpr double kRelTol = 1e-12;

double relative_residual(const SparseMatrix& a, const Vector& x,
                         const Vector& rhs) {
  Vector ax;
  kernels::spmv_symmetric(a, x, ax);
  const double bn = rhs.norm();
  const double rn = (rhs - ax).norm();
  return bn > 0.0 ? rn / bn : rn;
}

}  // namespace

struct LinearSolver::Factorization {
  Eigen::SimplicialLLT<SparseMatrix> llt;
  std::vector<int> outer;
  std::vector<int> inner;

  bool same_pattern(const SparseMatrix& a) const {
    const auto n = static_cast<std::size_t>(a.outerSize());
    const auto nnz = static_cast<std::size_t>(a.nonZeros());
    return outer.size() == n + 1 && inner.size() == nnz &&
           std::equal(outer.begin(), outer.end(), a.outerIndexPtr()) &&
           std::equal(inner.begin(), inner.end(), a.innerIndexPtr());
  }
};

LinearSolver::LinearSolver(SolverKind kind) : kind_(kind) {}
LinearSolver::~LinearSolver() = default;
LinearSolver::LinearSolver(LinearSolver&&) noexcept = default;
LinearSolver& LinearSolver::operator=(LinearSolver&&) noexcept = default;

Vector LinearSolver::solve(const SparseMatrix& a, const Vector& rhs) {
  if (a.rows() != a.cols() || a.rows() != rhs.size()) {
    throw LinearSolveError("linear system dimensions do not match");
  }
  if (!a.isCompressed()) {
    throw LinearSolveError("matrix must be in compressed storage");
  }
  if (rhs.size() == 0 || rhs.isZero(0.0)) return Vector::Zero(rhs.size());
  return kind_ == SolverKind::direct ? solve_direct(a, rhs) : solve_cg(a, rhs);
}

Vector LinearSolver::solve_direct(const SparseMatrix& a, const Vector& rhs) {
  if (!fact_) fact_ = std::make_unique<Factorization>();
  if (!fact_->same_pattern(a)) {
    fact_->llt.analyzePattern(a);
    fact_->outer.assign(a.outerIndexPtr(), a.outerIndexPtr() + a.outerSize() + 1);
    fact_->inner.assign(a.innerIndexPtr(), a.innerIndexPtr() + a.nonZeros());
  }
  fact_->llt.factorize(a);
  if (fact_->llt.info() != Eigen::Success) {
    throw LinearSolveError("matrix is singular or not positive definite");
  }
  Vector x = fact_->llt.solve(rhs);
  double rel = relative_residual(a, x, rhs);
  if (!(rel <= kRelTol)) {
    Vector ax;
    kernels::spmv_symmetric(a, x, ax);
    x += fact_->llt.solve(Vector(rhs - ax));
    rel = relative_residual(a, x, rhs);
  }
  if (!(rel <= kRelTol)) {
    throw LinearSolveError("direct solve residual " + std::to_string(rel) +
                           " above tolerance");
  }
  return x;
}

// Jacobi-preconditioned conjugate gradients.
Vector LinearSolver::solve_cg(const SparseMatrix& a, const Vector& rhs) {
  const Eigen::Index n = rhs.size();
  Vector inv_diag(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double d = a.coeff(i, i);
    if (!(d > 0.0)) {
      throw LinearSolveError("matrix has a non-positive diagonal entry");
    }
    inv_diag[i] = 1.0 / d;
  }

  const double bnorm = std::sqrt(kernels::dot(rhs, rhs));
  Vector x = Vector::Zero(n);
  Vector r = rhs;
  Vector z = inv_diag.cwiseProduct(r);
  Vector p = z;
  Vector ap(n);
  double rz = kernels::dot(r, z);
  const long max_iter = 10 * static_cast<long>(n);
  for (long it = 0; it < max_iter; ++it) {
    kernels::spmv_symmetric(a, p, ap);
    const double pap = kernels::dot(p, ap);
    if (!(pap > 0.0)) {
      throw LinearSolveError("matrix is not positive definite (p'Ap <= 0)");
    }
    const double alpha = rz / pap;
    x += alpha * p;
    r -= alpha * ap;
    if (std::sqrt(kernels::dot(r, r)) <= kRelTol * bnorm) {
      // recurrence residual can drift; confirm on the true residual
      if (relative_residual(a, x, rhs) <= kRelTol) {
        last_iterations_ = static_cast<int>(it + 1);
        return x;
      }
      Vector ax;
      kernels::spmv_symmetric(a, x, ax);
      r = rhs - ax;
    }
    z = inv_diag.cwiseProduct(r);
    const double rz_next = kernels::dot(r, z);
    p = z + (rz_next / rz) * p;
    rz = rz_next;
  }
  last_iterations_ = static_cast<int>(max_iter);
  throw LinearSolveError("conjugate gradients did not converge in " +
                         std::to_string(max_iter) + " iterations");
}

Vector solve_linear(const SparseMatrix& a, const Vector& rhs, SolverKind kind) {
  LinearSolver solver(kind);
  return solver.solve(a, rhs);
}

}  // namespace rdc
