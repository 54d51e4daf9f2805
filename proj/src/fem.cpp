#include "rdc/fem.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace rdc {

namespace {

// Integral over a triangle of l_i l_j l_k divided by its area, for
// barycentric coordinates l.
constexpr double cubic_moment(int i, int j, int k) {
  if (i == j && j == k) return 1.0 / 10.0;
  if (i == j || j == k || i == k) return 1.0 / 30.0;
  return 1.0 / 60.0;
}

// Integral of l_i l_j over the triangle divided by its area.
constexpr double quadratic_moment(int i, int j) {
  return i == j ? 1.0 / 6.0 : 1.0 / 12.0;
}

std::vector<ElementGeometry> compute_geometry(const Mesh& mesh) {
  std::vector<ElementGeometry> g(mesh.num_elements());
  for (std::size_t e = 0; e < g.size(); ++e) {
    g[e] = element_gradients(mesh, static_cast<int>(e));
  }
  return g;
}

void local_mass(const std::vector<ElementGeometry>& geom,
                std::vector<double>& local) {
  const long ne = static_cast<long>(geom.size());
  local.resize(geom.size() * 9);
#pragma omp parallel for schedule(static)
  for (long e = 0; e < ne; ++e) {
    const double area = geom[static_cast<std::size_t>(e)].area;
    for (int a = 0; a < 3; ++a) {
      for (int b = 0; b < 3; ++b) {
        local[static_cast<std::size_t>(e * 9 + a * 3 + b)] =
            area * quadratic_moment(a, b);
      }
    }
  }
}

std::vector<double> unit_stiffness(const std::vector<ElementGeometry>& geom) {
  std::vector<double> local(geom.size() * 9);
  const long ne = static_cast<long>(geom.size());
#pragma omp parallel for schedule(static)
  for (long e = 0; e < ne; ++e) {
    const auto& g = geom[static_cast<std::size_t>(e)];
    for (int a = 0; a < 3; ++a) {
      for (int b = 0; b < 3; ++b) {
        local[static_cast<std::size_t>(e * 9 + a * 3 + b)] =
            g.area * (g.grad[a].x * g.grad[b].x + g.grad[a].y * g.grad[b].y);
      }
    }
  }
  return local;
}

std::vector<double> element_kappa(const Mesh& mesh, const ControlMap& control,
                                  double rho) {
  control.validate(mesh.num_regions());
  std::vector<double> k(mesh.num_elements());
  for (std::size_t e = 0; e < k.size(); ++e) {
    k[e] = rho * control.kappa_per_region[static_cast<std::size_t>(
                     mesh.regions()[e])];
  }
  return k;
}

SparseMatrix with_values(const AssemblyPlan& plan) { return plan.pattern(); }

std::span<double> values_of(SparseMatrix& m) {
  return {m.valuePtr(), static_cast<std::size_t>(m.nonZeros())};
}

}  // namespace

void SimParams::validate() const {
  if (!(dt > 0.0)) throw FemError("dt must be positive");
  if (n_steps < 1) throw FemError("n_steps must be at least 1");
  if (!(rho > 0.0)) throw FemError("rho must be positive");
  if (newton_max_iter < 1) throw FemError("newton_max_iter must be >= 1");
  if (!(newton_tol > 0.0)) throw FemError("newton_tol must be positive");
  if (!std::isfinite(beta) || !std::isfinite(gamma) || !std::isfinite(flux)) {
    throw FemError("reaction and flux parameters must be finite");
  }
}

void ControlMap::validate(int n_regions) const {
  if (static_cast<int>(kappa_per_region.size()) != n_regions) {
    throw FemError("control map has " +
                   std::to_string(kappa_per_region.size()) +
                   " entries, mesh has " + std::to_string(n_regions) +
                   " regions");
  }
  for (double k : kappa_per_region) {
    if (!(k > 0.0) || !std::isfinite(k)) {
      throw FemError("diffusivities must be positive and finite");
    }
  }
}

SparseMatrix assemble_mass(const Mesh& mesh) {
  AssemblyPlan plan(mesh);
  std::vector<double> local;
  local_mass(compute_geometry(mesh), local);
  SparseMatrix m = with_values(plan);
  kernels::gather_matrix(plan, local, values_of(m));
  return m;
}

SparseMatrix assemble_stiffness(const Mesh& mesh, const ControlMap& control,
                                double rho) {
  AssemblyPlan plan(mesh);
  const auto kappa = element_kappa(mesh, control, rho);
  auto local = unit_stiffness(compute_geometry(mesh));
  const long ne = static_cast<long>(kappa.size());
#pragma omp parallel for schedule(static)
  for (long e = 0; e < ne; ++e) {
    for (int k = 0; k < 9; ++k) {
      local[static_cast<std::size_t>(e * 9 + k)] *= kappa[static_cast<std::size_t>(e)];
    }
  }
  SparseMatrix m = with_values(plan);
  kernels::gather_matrix(plan, local, values_of(m));
  return m;
}

namespace serial {

SparseMatrix assemble_mass(const Mesh& mesh) {
  AssemblyPlan plan(mesh);
  std::vector<double> local(mesh.num_elements() * 9);
  for (std::size_t e = 0; e < mesh.num_elements(); ++e) {
    const double area = element_gradients(mesh, static_cast<int>(e)).area;
    for (int a = 0; a < 3; ++a) {
      for (int b = 0; b < 3; ++b) {
        local[e * 9 + static_cast<std::size_t>(a * 3 + b)] =
            area * quadratic_moment(a, b);
      }
    }
  }
  SparseMatrix m = with_values(plan);
  kernels::serial::gather_matrix(plan, local, values_of(m));
  return m;
}

SparseMatrix assemble_stiffness(const Mesh& mesh, const ControlMap& control,
                                double rho) {
  AssemblyPlan plan(mesh);
  control.validate(mesh.num_regions());
  std::vector<double> local(mesh.num_elements() * 9);
  for (std::size_t e = 0; e < mesh.num_elements(); ++e) {
    const auto g = element_gradients(mesh, static_cast<int>(e));
    const double k =
        rho * control.kappa_per_region[static_cast<std::size_t>(mesh.regions()[e])];
    for (int a = 0; a < 3; ++a) {
      for (int b = 0; b < 3; ++b) {
        local[e * 9 + static_cast<std::size_t>(a * 3 + b)] =
            g.area * (g.grad[a].x * g.grad[b].x + g.grad[a].y * g.grad[b].y) * k;
      }
    }
  }
  SparseMatrix m = with_values(plan);
  kernels::serial::gather_matrix(plan, local, values_of(m));
  return m;
}

}  // namespace serial

double l2_norm_field(const Vector& c, const SparseMatrix& mass) {
  Vector mc;
  kernels::spmv_symmetric(mass, c, mc);
  return std::sqrt(std::max(0.0, c.dot(mc)));
}

double l2_norm_control(const ControlMap& control, const Mesh& mesh) {
  control.validate(mesh.num_regions());
  const auto& areas = mesh.region_areas();
  double s = 0.0;
  for (std::size_t r = 0; r < areas.size(); ++r) {
    const double k = control.kappa_per_region[r];
    s += k * k * areas[r];
  }
  return std::sqrt(s);
}

// ---------------------------------------------------------------------------

ReactionDiffusionModel::ReactionDiffusionModel(std::shared_ptr<const Mesh> mesh,
                                               SimParams params)
    : mesh_(std::move(mesh)),
      params_(params),
      plan_(*mesh_),
      geometry_(compute_geometry(*mesh_)),
      unit_stiffness_(unit_stiffness(geometry_)),
      solver_(params.solver) {
  params_.validate();
  std::vector<double> local;
  local_mass(geometry_, local);
  mass_ = plan_.pattern();
  kernels::gather_matrix(plan_, local, values_of(mass_));
  lumped_mass_ = Vector(static_cast<Eigen::Index>(mesh_->num_nodes()));
  {
    std::vector<double> third(plan_.num_elements() * 3);
    for (std::size_t e = 0; e < geometry_.size(); ++e) {
      for (int a = 0; a < 3; ++a) {
        third[e * 3 + static_cast<std::size_t>(a)] = geometry_[e].area / 3.0;
      }
    }
    kernels::gather_vector(plan_, third,
                           {lumped_mass_.data(),
                            static_cast<std::size_t>(lumped_mass_.size())});
  }

  const auto n = static_cast<Eigen::Index>(mesh_->num_nodes());
  flux_load_ = Vector::Zero(n);
  if (params_.flux != 0.0) {
    for (const auto& edge : mesh_->boundary_edges()) {
      if (edge.kind != EdgeKind::flux) continue;
      const Point& p = mesh_->node(edge.a);
      const Point& q = mesh_->node(edge.b);
      const double half = 0.5 * std::hypot(q.x - p.x, q.y - p.y) * params_.flux;
      flux_load_[edge.a] += half;
      flux_load_[edge.b] += half;
    }
  }

  dirichlet_index_.assign(mesh_->num_nodes(), -1);
  const auto dir = mesh_->dirichlet_nodes();
  for (std::size_t i = 0; i < dir.size(); ++i) {
    dirichlet_index_[static_cast<std::size_t>(dir[i].node)] = static_cast<int>(i);
  }
  dirichlet_slot_.assign(plan_.nnz(), 0);
  if (!dir.empty()) {
    const int* outer = mass_.outerIndexPtr();
    const int* inner = mass_.innerIndexPtr();
    for (Eigen::Index col = 0; col < n; ++col) {
      for (int k = outer[col]; k < outer[col + 1]; ++k) {
        if (dirichlet_index_[static_cast<std::size_t>(col)] >= 0 ||
            dirichlet_index_[static_cast<std::size_t>(inner[k])] >= 0) {
          dirichlet_slot_[static_cast<std::size_t>(k)] = 1;
        }
      }
    }
  }

  stiffness_ = plan_.pattern();
  set_control(ControlMap{std::vector<double>(
      static_cast<std::size_t>(mesh_->num_regions()), 1.0)});
}

void ReactionDiffusionModel::set_control(const ControlMap& control) {
  const auto kappa = element_kappa(*mesh_, control, params_.rho);
  const long ne = static_cast<long>(kappa.size());
  std::vector<double> local(unit_stiffness_.size());
#pragma omp parallel for schedule(static)
  for (long e = 0; e < ne; ++e) {
    for (int k = 0; k < 9; ++k) {
      const auto i = static_cast<std::size_t>(e * 9 + k);
      local[i] = unit_stiffness_[i] * kappa[static_cast<std::size_t>(e)];
    }
  }
  kernels::gather_matrix(plan_, local, values_of(stiffness_));
  control_ = control;
}

Vector ReactionDiffusionModel::reaction_load(const Vector& c) const {
  const double bg = params_.beta - params_.gamma;
  const double beta = params_.beta;
  if (params_.mass == MassTreatment::lumped) {
    Vector out(c.size());
    for (Eigen::Index i = 0; i < c.size(); ++i) {
      out[i] = lumped_mass_[i] * reaction(c[i], params_.beta, params_.gamma);
    }
    return out;
  }
  const long ne = static_cast<long>(plan_.num_elements());
  const auto& tris = plan_.triangles();
  std::vector<double> local(plan_.num_elements() * 3);
#pragma omp parallel for schedule(static)
  for (long e = 0; e < ne; ++e) {
    const auto& t = tris[static_cast<std::size_t>(e)];
    const double area = geometry_[static_cast<std::size_t>(e)].area;
    const double ce[3] = {c[t[0]], c[t[1]], c[t[2]]};
    for (int a = 0; a < 3; ++a) {
      double lin = 0.0;
      double quad = 0.0;
      for (int k = 0; k < 3; ++k) {
        lin += ce[k] * quadratic_moment(k, a);
        for (int l = 0; l < 3; ++l) quad += ce[k] * ce[l] * cubic_moment(k, l, a);
      }
      local[static_cast<std::size_t>(e * 3 + a)] = area * (bg * lin - beta * quad);
    }
  }
  Vector out(static_cast<Eigen::Index>(plan_.num_nodes()));
  kernels::gather_vector(plan_, local,
                         {out.data(), static_cast<std::size_t>(out.size())});
  return out;
}

Vector ReactionDiffusionModel::residual(const Vector& c_next,
                                       const Vector& c_prev) const {
  const auto n = static_cast<Eigen::Index>(mesh_->num_nodes());
  if (c_next.size() != n || c_prev.size() != n) {
    throw FemError("field size does not match mesh");
  }
  Vector diff = c_next - c_prev;
  Vector m_diff;
  Vector k_c;
  apply_time_mass(diff, m_diff);
  kernels::spmv_symmetric(stiffness_, c_next, k_c);
  Vector f = m_diff / params_.dt + k_c - reaction_load(c_next) - flux_load_;
  for (const auto& d : mesh_->dirichlet_nodes()) {
    f[d.node] = c_next[d.node] - d.value;
  }
  return f;
}

SparseMatrix ReactionDiffusionModel::jacobian(const Vector& c) const {
  if (params_.mass == MassTreatment::lumped) return lumped_jacobian(c);
  const double bg = params_.beta - params_.gamma;
  const double beta = params_.beta;
  const long ne = static_cast<long>(plan_.num_elements());
  const auto& tris = plan_.triangles();
  std::vector<double> local(plan_.num_elements() * 9);
#pragma omp parallel for schedule(static)
  for (long e = 0; e < ne; ++e) {
    const auto& t = tris[static_cast<std::size_t>(e)];
    const double area = geometry_[static_cast<std::size_t>(e)].area;
    const double ce[3] = {c[t[0]], c[t[1]], c[t[2]]};
    for (int a = 0; a < 3; ++a) {
      for (int b = 0; b < 3; ++b) {
        double cub = 0.0;
        for (int k = 0; k < 3; ++k) cub += ce[k] * cubic_moment(k, a, b);
        local[static_cast<std::size_t>(e * 9 + a * 3 + b)] =
            area * (bg * quadratic_moment(a, b) - 2.0 * beta * cub);
      }
    }
  }
  SparseMatrix jac = plan_.pattern();
  auto vals = values_of(jac);
  kernels::gather_matrix(plan_, local, vals);

  const double inv_dt = 1.0 / params_.dt;
  const double* m = mass_.valuePtr();
  const double* k = stiffness_.valuePtr();
  const long nnz = static_cast<long>(vals.size());
#pragma omp parallel for schedule(static)
  for (long s = 0; s < nnz; ++s) {
    vals[static_cast<std::size_t>(s)] =
        m[s] * inv_dt + k[s] - vals[static_cast<std::size_t>(s)];
  }

  apply_dirichlet(jac);
  return jac;
}

SparseMatrix ReactionDiffusionModel::lumped_jacobian(const Vector& c) const {
  SparseMatrix jac = stiffness_;
  const int* outer = jac.outerIndexPtr();
  const int* inner = jac.innerIndexPtr();
  double* vals = jac.valuePtr();
  const double inv_dt = 1.0 / params_.dt;
  for (Eigen::Index col = 0; col < jac.outerSize(); ++col) {
    for (int s = outer[col]; s < outer[col + 1]; ++s) {
      if (inner[s] == col) {
        vals[s] += lumped_mass_[col] *
                   (inv_dt - reaction_deriv(c[col], params_.beta, params_.gamma));
      }
    }
  }
  apply_dirichlet(jac);
  return jac;
}

void ReactionDiffusionModel::apply_dirichlet(SparseMatrix& jac) const {
  auto vals = values_of(jac);
  if (!mesh_->dirichlet_nodes().empty()) {
    const int* outer = jac.outerIndexPtr();
    const int* inner = jac.innerIndexPtr();
    for (Eigen::Index col = 0; col < jac.outerSize(); ++col) {
      for (int s = outer[col]; s < outer[col + 1]; ++s) {
        if (dirichlet_slot_[static_cast<std::size_t>(s)]) {
          vals[static_cast<std::size_t>(s)] = inner[s] == col ? 1.0 : 0.0;
        }
      }
    }
  }
}

void ReactionDiffusionModel::apply_time_mass(const Vector& x, Vector& out) const {
  if (params_.mass == MassTreatment::lumped) {
    out = lumped_mass_.cwiseProduct(x);
  } else {
    kernels::spmv_symmetric(mass_, x, out);
  }
}

double ReactionDiffusionModel::incremental_potential(const Vector& c_next,
                                                    const Vector& c_prev) const {
  const auto n = static_cast<Eigen::Index>(mesh_->num_nodes());
  if (c_next.size() != n || c_prev.size() != n) {
    throw FemError("field size does not match mesh");
  }
  Vector diff = c_next - c_prev;
  Vector m_diff;
  Vector k_c;
  apply_time_mass(diff, m_diff);
  kernels::spmv_symmetric(stiffness_, c_next, k_c);

  const double bg = params_.beta - params_.gamma;
  const double beta = params_.beta;
  double h_total = 0.0;
  if (params_.mass == MassTreatment::lumped) {
    for (Eigen::Index i = 0; i < c_next.size(); ++i) {
      h_total += lumped_mass_[i] *
                 reaction_potential(c_next[i], params_.beta, params_.gamma);
    }
  } else {
    const auto& tris = plan_.triangles();
    for (std::size_t e = 0; e < tris.size(); ++e) {
      const auto& t = tris[e];
      const double ce[3] = {c_next[t[0]], c_next[t[1]], c_next[t[2]]};
      double quad = 0.0;
      double cub = 0.0;
      for (int i = 0; i < 3; ++i) {
        for (int j = 0; j < 3; ++j) {
          quad += ce[i] * ce[j] * quadratic_moment(i, j);
          for (int k = 0; k < 3; ++k) {
            cub += ce[i] * ce[j] * ce[k] * cubic_moment(i, j, k);
          }
        }
      }
      h_total += geometry_[e].area * (0.5 * bg * quad - beta * cub / 3.0);
    }
  }
  return diff.dot(m_diff) / (2.0 * params_.dt) + 0.5 * c_next.dot(k_c) -
         h_total - flux_load_.dot(c_next);
}

// The absolute tolerance, floored at the roundoff level of evaluating F for
// this operator scale; matters only for large physical domains.
double ReactionDiffusionModel::effective_tolerance(const Vector& c) const {
  const double inv_dt = 1.0 / params_.dt;
  const int* outer = mass_.outerIndexPtr();
  const double* m = mass_.valuePtr();
  const double* k = stiffness_.valuePtr();
  double row_max = 0.0;
  for (Eigen::Index col = 0; col < mass_.outerSize(); ++col) {
    double s = 0.0;
    for (int i = outer[col]; i < outer[col + 1]; ++i) {
      s += std::abs(m[i] * inv_dt + k[i]);
    }
    row_max = std::max(row_max, s);
  }
  const double c_max = std::max(1.0, c.lpNorm<Eigen::Infinity>());
  constexpr double kFloor = 64.0 * std::numeric_limits<double>::epsilon();
  return std::max(params_.newton_tol, kFloor * row_max * c_max);
}

Field ReactionDiffusionModel::step(const Field& prev, const ControlMap& control,
                                   NewtonStats* stats) {
  set_control(control);
  return step(prev, stats);
}

Field ReactionDiffusionModel::step(const Field& prev, NewtonStats* stats) {
  Vector c = prev.values;
  for (const auto& d : mesh_->dirichlet_nodes()) c[d.node] = d.value;

  NewtonStats local_stats;
  NewtonStats& st = stats ? *stats : local_stats;
  st = {};
  const double tol = effective_tolerance(c);
  double rn = 0.0;
  for (int it = 0;; ++it) {
    const Vector f = residual(c, prev.values);
    rn = f.lpNorm<Eigen::Infinity>();
    st.residual_norms.push_back(rn);
    if (!std::isfinite(rn)) {
      throw NewtonError("Newton residual is not finite", rn);
    }
    if (rn <= tol) break;
    if (it == params_.newton_max_iter) {
      throw NewtonError("Newton did not converge in " +
                            std::to_string(params_.newton_max_iter) +
                            " iterations, residual " + std::to_string(rn),
                        rn);
    }
    Vector delta;
    try {
      delta = solver_.solve(jacobian(c), -f);
    } catch (const LinearSolveError& err) {
      throw NewtonError(std::string("Newton linear solve failed: ") + err.what(),
                        rn);
    }
    c += delta;
    st.iterations = it + 1;
  }
  return Field{std::move(c), prev.time_index + 1};
}

}  // namespace rdc
