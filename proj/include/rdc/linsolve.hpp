#pragma once

#include <memory>
#include <stdexcept>

#include "rdc/kernels.hpp"

namespace rdc {

enum class SolverKind { direct, cg };

class LinearSolveError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// SPD solver. The direct path keeps its symbolic analysis between calls
/// with the same sparsity pattern, which is the common case inside Newton.
class LinearSolver {
 public:
  explicit LinearSolver(SolverKind kind = SolverKind::direct);
  ~LinearSolver();
  LinearSolver(LinearSolver&&) noexcept;
  LinearSolver& operator=(LinearSolver&&) noexcept;

  SolverKind kind() const { return kind_; }

  /// Solves A x = rhs to relative residual <= 1e-12.
  Vector solve(const SparseMatrix& a, const Vector& rhs);

  /// Iterations used by the last CG solve.
  int last_iterations() const { return last_iterations_; }

 private:
  Vector solve_direct(const SparseMatrix& a, const Vector& rhs);
  Vector solve_cg(const SparseMatrix& a, const Vector& rhs);

  struct Factorization;
  SolverKind kind_;
  std::unique_ptr<Factorization> fact_;
  int last_iterations_{0};
};

Vector solve_linear(const SparseMatrix& a, const Vector& rhs,
                    SolverKind kind = SolverKind::direct);

}  // namespace rdc
