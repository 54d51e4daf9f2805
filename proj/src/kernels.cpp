#include "rdc/kernels.hpp"

#include <algorithm>
#include <stdexcept>

namespace rdc {

AssemblyPlan::AssemblyPlan(const Mesh& mesh)
    : n_nodes_(mesh.num_nodes()),
      n_elements_(mesh.num_elements()),
      triangles_(mesh.elements().begin(), mesh.elements().end()) {
  const auto n = static_cast<Eigen::Index>(n_nodes_);
  std::vector<Eigen::Triplet<double>> trip;
  trip.reserve(n_elements_ * 9);
  for (const auto& t : triangles_) {
    for (int a = 0; a < 3; ++a) {
      for (int b = 0; b < 3; ++b) trip.emplace_back(t[a], t[b], 0.0);
    }
  }
  pattern_.resize(n, n);
  pattern_.setFromTriplets(trip.begin(), trip.end());
  pattern_.makeCompressed();

  const int* outer = pattern_.outerIndexPtr();
  const int* inner = pattern_.innerIndexPtr();
  slot_.resize(n_elements_ * 9);
  for (std::size_t e = 0; e < n_elements_; ++e) {
    const auto& t = triangles_[e];
    for (int a = 0; a < 3; ++a) {
      for (int b = 0; b < 3; ++b) {
        const int col = t[b];
        const int* first = inner + outer[col];
        const int* last = inner + outer[col + 1];
        const int* it = std::lower_bound(first, last, t[a]);
        if (it == last || *it != t[a]) {
          throw std::logic_error("assembly pattern is missing an entry");
        }
        slot_[e * 9 + static_cast<std::size_t>(a * 3 + b)] =
            static_cast<int>(it - inner);
      }
    }
  }

  // Inverse maps, filled in element order so each list is sorted.
  const std::size_t nnz = static_cast<std::size_t>(pattern_.nonZeros());
  slot_ptr_.assign(nnz + 1, 0);
  for (int s : slot_) ++slot_ptr_[static_cast<std::size_t>(s) + 1];
  for (std::size_t i = 0; i < nnz; ++i) slot_ptr_[i + 1] += slot_ptr_[i];
  slot_idx_.resize(slot_.size());
  {
    std::vector<int> fill(slot_ptr_.begin(), slot_ptr_.end() - 1);
    for (std::size_t k = 0; k < slot_.size(); ++k) {
      slot_idx_[static_cast<std::size_t>(fill[static_cast<std::size_t>(slot_[k])]++)] =
          static_cast<int>(k);
    }
  }

  node_ptr_.assign(n_nodes_ + 1, 0);
  for (const auto& t : triangles_) {
    for (int v : t) ++node_ptr_[static_cast<std::size_t>(v) + 1];
  }
  for (std::size_t i = 0; i < n_nodes_; ++i) node_ptr_[i + 1] += node_ptr_[i];
  node_idx_.resize(n_elements_ * 3);
  {
    std::vector<int> fill(node_ptr_.begin(), node_ptr_.end() - 1);
    for (std::size_t e = 0; e < n_elements_; ++e) {
      for (int a = 0; a < 3; ++a) {
        const auto v = static_cast<std::size_t>(triangles_[e][a]);
        node_idx_[static_cast<std::size_t>(fill[v]++)] =
            static_cast<int>(e * 3 + static_cast<std::size_t>(a));
      }
    }
  }
}

namespace kernels {

namespace {
constexpr Eigen::Index kDotChunk = 1024;
}

void gather_matrix(const AssemblyPlan& plan, std::span<const double> local,
                   std::span<double> values) {
  const auto ptr = plan.slot_gather_ptr();
  const auto idx = plan.slot_gather_idx();
  const auto nnz = static_cast<long>(plan.nnz());
#pragma omp parallel for schedule(static)
  for (long s = 0; s < nnz; ++s) {
    double sum = 0.0;
    for (int k = ptr[static_cast<std::size_t>(s)];
         k < ptr[static_cast<std::size_t>(s) + 1]; ++k) {
      sum += local[static_cast<std::size_t>(idx[static_cast<std::size_t>(k)])];
    }
    values[static_cast<std::size_t>(s)] = sum;
  }
}

void gather_vector(const AssemblyPlan& plan, std::span<const double> local,
                   std::span<double> out) {
  const auto ptr = plan.node_gather_ptr();
  const auto idx = plan.node_gather_idx();
  const auto n = static_cast<long>(plan.num_nodes());
#pragma omp parallel for schedule(static)
  for (long v = 0; v < n; ++v) {
    double sum = 0.0;
    for (int k = ptr[static_cast<std::size_t>(v)];
         k < ptr[static_cast<std::size_t>(v) + 1]; ++k) {
      sum += local[static_cast<std::size_t>(idx[static_cast<std::size_t>(k)])];
    }
    out[static_cast<std::size_t>(v)] = sum;
  }
}

void spmv_symmetric(const SparseMatrix& a, const Vector& x, Vector& y) {
  const int* outer = a.outerIndexPtr();
  const int* inner = a.innerIndexPtr();
  const double* val = a.valuePtr();
  const long n = static_cast<long>(a.outerSize());
  y.resize(n);
#pragma omp parallel for schedule(static)
  for (long i = 0; i < n; ++i) {
    double sum = 0.0;
    for (int k = outer[i]; k < outer[i + 1]; ++k) sum += val[k] * x[inner[k]];
    y[i] = sum;
  }
}

double dot(const Vector& x, const Vector& y) {
  const Eigen::Index n = x.size();
  const long chunks = static_cast<long>((n + kDotChunk - 1) / kDotChunk);
  std::vector<double> partial(static_cast<std::size_t>(chunks), 0.0);
#pragma omp parallel for schedule(static)
  for (long c = 0; c < chunks; ++c) {
    const Eigen::Index lo = c * kDotChunk;
    const Eigen::Index hi = std::min(n, lo + kDotChunk);
    double s = 0.0;
    for (Eigen::Index i = lo; i < hi; ++i) s += x[i] * y[i];
    partial[static_cast<std::size_t>(c)] = s;
  }
  double total = 0.0;
  for (double p : partial) total += p;
  return total;
}

namespace serial {

void gather_matrix(const AssemblyPlan& plan, std::span<const double> local,
                   std::span<double> values) {
  std::fill(values.begin(), values.end(), 0.0);
  const auto slots = plan.slot_map();
  for (std::size_t k = 0; k < slots.size(); ++k) {
    values[static_cast<std::size_t>(slots[k])] += local[k];
  }
}

void gather_vector(const AssemblyPlan& plan, std::span<const double> local,
                   std::span<double> out) {
  std::fill(out.begin(), out.end(), 0.0);
  const auto& tris = plan.triangles();
  for (std::size_t e = 0; e < tris.size(); ++e) {
    for (int a = 0; a < 3; ++a) {
      out[static_cast<std::size_t>(tris[e][a])] +=
          local[e * 3 + static_cast<std::size_t>(a)];
    }
  }
}

void spmv_symmetric(const SparseMatrix& a, const Vector& x, Vector& y) {
  const int* outer = a.outerIndexPtr();
  const int* inner = a.innerIndexPtr();
  const double* val = a.valuePtr();
  y.resize(a.outerSize());
  for (Eigen::Index i = 0; i < a.outerSize(); ++i) {
    double sum = 0.0;
    for (int k = outer[i]; k < outer[i + 1]; ++k) sum += val[k] * x[inner[k]];
    y[i] = sum;
  }
}

double dot(const Vector& x, const Vector& y) {
  double s = 0.0;
  for (Eigen::Index i = 0; i < x.size(); ++i) s += x[i] * y[i];
  return s;
}

}  // namespace serial
}  // namespace kernels
}  // namespace rdc
