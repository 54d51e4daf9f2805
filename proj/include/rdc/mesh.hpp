#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace rdc {

struct Point {
  double x{0.0};
  double y{0.0};
  bool operator==(const Point&) const = default;
};

using Triangle = std::array<int, 3>;

enum class EdgeKind : std::uint8_t { flux, essential };

struct BoundaryEdge {
  int a{0};
  int b{0};
  EdgeKind kind{EdgeKind::flux};
  bool operator==(const BoundaryEdge&) const = default;
};

struct DirichletNode {
  int node{0};
  double value{0.0};
  bool operator==(const DirichletNode&) const = default;
};

/// Area and constant shape-function gradients of one linear triangle.
struct ElementGeometry {
  double area{0.0};
  std::array<Point, 3> grad{};
};

class MeshError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Linear triangulation with per-element region tags.
///
/// Regions double as the control partition: one diffusivity per region.
/// Elements are stored counter-clockwise. The boundary is recomputed from
/// the element list; edges whose two nodes are both Dirichlet nodes are
/// essential, the rest carry the flux condition.
class Mesh {
 public:
  Mesh() = default;
  Mesh(std::vector<Point> nodes, std::vector<Triangle> elements,
       std::vector<int> region_of_element,
       std::vector<DirichletNode> dirichlet = {});

  std::size_t num_nodes() const { return nodes_.size(); }
  std::size_t num_elements() const { return elements_.size(); }
  int num_regions() const { return n_regions_; }

  std::span<const Point> nodes() const { return nodes_; }
  std::span<const Triangle> elements() const { return elements_; }
  std::span<const int> regions() const { return region_of_element_; }
  std::span<const BoundaryEdge> boundary_edges() const { return boundary_; }
  std::span<const DirichletNode> dirichlet_nodes() const { return dirichlet_; }

  const Point& node(int i) const { return nodes_[static_cast<std::size_t>(i)]; }
  const Triangle& element(int e) const {
    return elements_[static_cast<std::size_t>(e)];
  }
  int region(int e) const {
    return region_of_element_[static_cast<std::size_t>(e)];
  }

  /// Sum of element areas per region.
  const std::vector<double>& region_areas() const { return region_areas_; }
  double total_area() const;

  bool operator==(const Mesh&) const = default;

 private:
  void validate_and_orient();
  void extract_boundary();

  std::vector<Point> nodes_;
  std::vector<Triangle> elements_;
  std::vector<int> region_of_element_;
  std::vector<DirichletNode> dirichlet_;
  std::vector<BoundaryEdge> boundary_;
  std::vector<double> region_areas_;
  int n_regions_{0};
};

double signed_area(const Point& a, const Point& b, const Point& c);

ElementGeometry element_gradients(const Mesh& mesh, int e);

/// Structured triangulation of [0,1]^2 with nx*ny cells, each split along
/// its lower-left to upper-right diagonal. Regions are patch_nx*patch_ny
/// axis-aligned patches numbered row-major from the bottom-left.
Mesh build_unit_square(int nx, int ny, int patch_nx, int patch_ny);

/// Same construction on [0,width]x[0,height].
Mesh build_rectangle(double width, double height, int nx, int ny, int patch_nx,
                     int patch_ny);

/// Synthetic 15-region map used by the multi-region experiment: a 1000x600
/// rectangle, 20x12 cells, regions tiled 5x3. Region 7 is the central one.
Mesh build_regions15();
inline constexpr int kRegions15Center = 7;

Mesh load_mesh(const std::filesystem::path& path);
Mesh parse_mesh(const std::string& text);
void save_mesh(const Mesh& mesh, const std::filesystem::path& path);
std::string format_mesh(const Mesh& mesh);

}  // namespace rdc
