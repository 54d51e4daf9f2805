#pragma once

// Data-parallel inner loops. Each kernel has an OpenMP version used by the
// solver and a serial reference under kernels::serial kept for tests and
// benchmarks. Parallel versions never reduce across threads in a
// thread-count dependent order, so results do not depend on OMP_NUM_THREADS.

#include <span>
#include <vector>

#include <Eigen/SparseCore>

#include "rdc/mesh.hpp"

namespace rdc {

using SparseMatrix = Eigen::SparseMatrix<double>;  // column-major
using Vector = Eigen::VectorXd;

/// Fixed sparsity pattern of a linear-triangle operator plus the maps used
/// to assemble element blocks into it.
///
/// Element-local values live in a flat buffer: 9 entries per element for
/// matrices (row-major a*3+b), 3 per element for vectors. For every matrix
/// slot and every node, the contributing buffer indices are kept sorted by
/// element, so a parallel gather adds contributions in exactly the order a
/// serial scatter would.
class AssemblyPlan {
 public:
  explicit AssemblyPlan(const Mesh& mesh);

  std::size_t num_nodes() const { return n_nodes_; }
  std::size_t num_elements() const { return n_elements_; }
  std::size_t nnz() const { return static_cast<std::size_t>(pattern_.nonZeros()); }

  /// Zero-valued matrix with the assembled sparsity pattern.
  const SparseMatrix& pattern() const { return pattern_; }

  /// Value-array slot for entry (a,b) of element e.
  int slot(std::size_t e, int a, int b) const {
    return slot_[e * 9 + static_cast<std::size_t>(a * 3 + b)];
  }

  std::span<const int> slot_map() const { return slot_; }
  std::span<const int> slot_gather_ptr() const { return slot_ptr_; }
  std::span<const int> slot_gather_idx() const { return slot_idx_; }
  std::span<const int> node_gather_ptr() const { return node_ptr_; }
  std::span<const int> node_gather_idx() const { return node_idx_; }
  const std::vector<Triangle>& triangles() const { return triangles_; }

 private:
  std::size_t n_nodes_{0};
  std::size_t n_elements_{0};
  SparseMatrix pattern_;
  std::vector<Triangle> triangles_;
  std::vector<int> slot_;
  std::vector<int> slot_ptr_;
  std::vector<int> slot_idx_;
  std::vector<int> node_ptr_;
  std::vector<int> node_idx_;
};

namespace kernels {

/// Writes assembled matrix values (size nnz) from element blocks.
void gather_matrix(const AssemblyPlan& plan, std::span<const double> local,
                   std::span<double> values);

/// Writes an assembled nodal vector from element 3-vectors.
void gather_vector(const AssemblyPlan& plan, std::span<const double> local,
                   std::span<double> out);

/// y = A x for a symmetric matrix stored column-major (column i is row i).
void spmv_symmetric(const SparseMatrix& a, const Vector& x, Vector& y);

/// Dot product summed over fixed-size chunks, then chunk sums in order.
double dot(const Vector& x, const Vector& y);

namespace serial {

void gather_matrix(const AssemblyPlan& plan, std::span<const double> local,
                   std::span<double> values);
void gather_vector(const AssemblyPlan& plan, std::span<const double> local,
                   std::span<double> out);
void spmv_symmetric(const SparseMatrix& a, const Vector& x, Vector& y);
double dot(const Vector& x, const Vector& y);

}  // namespace serial
}  // namespace kernels
}  // namespace rdc
