#pragma once

#include <memory>
#include <stdexcept>
#include <vector>

#include "rdc/kernels.hpp"
#include "rdc/linsolve.hpp"
#include "rdc/mesh.hpp"

namespace rdc {

/// How the time-derivative and reaction terms are integrated.
/// consistent: exact integrals of the linear interpolant.
/// lumped: row-sum mass and nodal reaction; keeps a discrete maximum
/// principle on non-obtuse meshes when fronts are under-resolved.
enum class MassTreatment { consistent, lumped };

/// Physical and time-stepping parameters of one simulation.
struct SimParams {
  double beta{2.5};   // contact rate
  double gamma{1.0};  // infectious rate
  double rho{1.0};    // density
  double dt{0.01};
  int n_steps{60};
  double flux{0.0};   // constant influx h on flux edges
  int newton_max_iter{25};
  double newton_tol{1e-10};  // absolute, infinity norm, floored at roundoff
  SolverKind solver{SolverKind::direct};
  MassTreatment mass{MassTreatment::consistent};

  void validate() const;
};

/// Nodal coefficients of c at one time level.
struct Field {
  Vector values;
  int time_index{0};
};

/// One diffusivity per region.
struct ControlMap {
  std::vector<double> kappa_per_region;

  void validate(int n_regions) const;
  bool operator==(const ControlMap&) const = default;
};

class FemError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class NewtonError : public FemError {
 public:
  NewtonError(const std::string& what, double last_residual)
      : FemError(what), last_residual_(last_residual) {}
  double last_residual() const { return last_residual_; }

 private:
  double last_residual_;
};

// SIS reaction R(c) = (beta-gamma) c - beta c^2, its derivative, and the
// antiderivative H with H' = R.
inline double reaction(double c, double beta, double gamma) {
  return (beta - gamma) * c - beta * c * c;
}
inline double reaction_deriv(double c, double beta, double gamma) {
  return (beta - gamma) - 2.0 * beta * c;
}
inline double reaction_potential(double c, double beta, double gamma) {
  return 0.5 * (beta - gamma) * c * c - beta * c * c * c / 3.0;
}

SparseMatrix assemble_mass(const Mesh& mesh);
SparseMatrix assemble_stiffness(const Mesh& mesh, const ControlMap& control,
                                double rho);

namespace serial {
SparseMatrix assemble_mass(const Mesh& mesh);
SparseMatrix assemble_stiffness(const Mesh& mesh, const ControlMap& control,
                                double rho);
}  // namespace serial

/// sqrt(c' M c)
double l2_norm_field(const Vector& c, const SparseMatrix& mass);
/// sqrt(sum_r kappa_r^2 |region r|)
double l2_norm_control(const ControlMap& control, const Mesh& mesh);

struct NewtonStats {
  int iterations{0};
  std::vector<double> residual_norms;  // infinity norms, one per evaluation
};

/// Implicit Euler / linear FE discretization of
///   c_t = div(rho kappa grad c) + R(c)
/// on a fixed mesh. The reaction is integrated exactly for the piecewise
/// linear interpolant, so the discrete residual is the exact gradient of the
/// incremental potential and the Newton matrix is symmetric.
///
/// Holds the mass matrix, the stiffness for the current control, and the
/// factorization cache. Not thread-safe; use one instance per thread.
class ReactionDiffusionModel {
 public:
  ReactionDiffusionModel(std::shared_ptr<const Mesh> mesh, SimParams params);

  const Mesh& mesh() const { return *mesh_; }
  const SimParams& params() const { return params_; }
  const SparseMatrix& mass() const { return mass_; }
  const SparseMatrix& stiffness() const { return stiffness_; }
  const ControlMap& control() const { return control_; }
  const Vector& flux_load() const { return flux_load_; }
  const Vector& lumped_mass() const { return lumped_mass_; }

  /// Reassembles K for a new control map.
  void set_control(const ControlMap& control);

  /// F(c_next) = M (c_next - c_prev)/dt + K c_next - r(c_next) - b_h, with
  /// Dirichlet rows replaced by c_next - g.
  Vector residual(const Vector& c_next, const Vector& c_prev) const;

  /// dF/dc_next = M/dt + K - dr/dc; Dirichlet rows and columns are identity.
  SparseMatrix jacobian(const Vector& c_next) const;

  /// Integral of R(c_h) N_a for every node a (m_a R(c_a) when lumped).
  Vector reaction_load(const Vector& c) const;

  /// I[c_next] = |c_next - c_prev|_M^2/(2dt) + c_next'Kc_next/2
  ///             - int H(c_h) - b_h'c_next
  double incremental_potential(const Vector& c_next,
                               const Vector& c_prev) const;

  /// One implicit Euler step via Newton from the initial guess c_prev.
  Field step(const Field& prev, NewtonStats* stats = nullptr);

  /// Step with a new control applied first.
  Field step(const Field& prev, const ControlMap& control,
             NewtonStats* stats = nullptr);

  double norm(const Vector& c) const { return l2_norm_field(c, mass_); }

 private:
  SparseMatrix lumped_jacobian(const Vector& c) const;
  void apply_dirichlet(SparseMatrix& jac) const;
  void apply_time_mass(const Vector& x, Vector& out) const;
  double effective_tolerance(const Vector& c) const;

  std::shared_ptr<const Mesh> mesh_;
  SimParams params_;
  AssemblyPlan plan_;
  std::vector<ElementGeometry> geometry_;
  std::vector<double> unit_stiffness_;  // area * grad Na . grad Nb
  SparseMatrix mass_;
  SparseMatrix stiffness_;
  ControlMap control_;
  Vector flux_load_;
  Vector lumped_mass_;
  std::vector<int> dirichlet_index_;  // node -> index into dirichlet list or -1
  std::vector<unsigned char> dirichlet_slot_;  // 1 if slot touches a Dirichlet row/col
  LinearSolver solver_;
};

}  // namespace rdc
