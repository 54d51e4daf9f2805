#include "rdc/mesh.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>

namespace rdc {

namespace {

constexpr double kAreaTolerance = 1e-14;

}  // namespace

double signed_area(const Point& a, const Point& b, const Point& c) {
  return 0.5 * ((b.x - a.x) * (c.y - a.y) - (c.x - a.x) * (b.y - a.y));
}

Mesh::Mesh(std::vector<Point> nodes, std::vector<Triangle> elements,
           std::vector<int> region_of_element,
           std::vector<DirichletNode> dirichlet)
    : nodes_(std::move(nodes)),
      elements_(std::move(elements)),
      region_of_element_(std::move(region_of_element)),
      dirichlet_(std::move(dirichlet)) {
  validate_and_orient();
  extract_boundary();
}

void Mesh::validate_and_orient() {
  if (region_of_element_.size() != elements_.size()) {
    throw MeshError("region tag count does not match element count");
  }
  const int nn = static_cast<int>(nodes_.size());
  int max_region = -1;
  for (std::size_t e = 0; e < elements_.size(); ++e) {
    auto& t = elements_[e];
    for (int v : t) {
      if (v < 0 || v >= nn) {
        throw MeshError("element " + std::to_string(e) +
                        " references node out of range");
      }
    }
    if (t[0] == t[1] || t[1] == t[2] || t[0] == t[2]) {
      throw MeshError("element " + std::to_string(e) + " repeats a node");
    }
    const double a = signed_area(nodes_[t[0]], nodes_[t[1]], nodes_[t[2]]);
    if (std::abs(a) <= kAreaTolerance) {
      throw MeshError("element " + std::to_string(e) + " has zero area");
    }
    if (a < 0.0) std::swap(t[1], t[2]);
    if (region_of_element_[e] < 0) {
      throw MeshError("element " + std::to_string(e) + " has negative region");
    }
    max_region = std::max(max_region, region_of_element_[e]);
  }
  n_regions_ = max_region + 1;
  std::vector<bool> seen(static_cast<std::size_t>(n_regions_), false);
  for (int r : region_of_element_) seen[static_cast<std::size_t>(r)] = true;
  for (int r = 0; r < n_regions_; ++r) {
    if (!seen[static_cast<std::size_t>(r)]) {
      throw MeshError("region ids have a gap at " + std::to_string(r));
    }
  }
  region_areas_.assign(static_cast<std::size_t>(n_regions_), 0.0);
  for (std::size_t e = 0; e < elements_.size(); ++e) {
    const auto& t = elements_[e];
    region_areas_[static_cast<std::size_t>(region_of_element_[e])] +=
        signed_area(nodes_[t[0]], nodes_[t[1]], nodes_[t[2]]);
  }
  std::set<int> dir_seen;
  for (const auto& d : dirichlet_) {
    if (d.node < 0 || d.node >= nn) {
      throw MeshError("dirichlet node out of range");
    }
    if (!dir_seen.insert(d.node).second) {
      throw MeshError("dirichlet node listed twice: " + std::to_string(d.node));
    }
  }
}

void Mesh::extract_boundary() {
  std::map<std::pair<int, int>, int> count;
  for (const auto& t : elements_) {
    for (int k = 0; k < 3; ++k) {
      const int a = t[k];
      const int b = t[(k + 1) % 3];
      ++count[{std::min(a, b), std::max(a, b)}];
    }
  }
  std::set<int> dir;
  for (const auto& d : dirichlet_) dir.insert(d.node);

  boundary_.clear();
  for (const auto& t : elements_) {
    for (int k = 0; k < 3; ++k) {
      const int a = t[k];
      const int b = t[(k + 1) % 3];
      const int c = count[{std::min(a, b), std::max(a, b)}];
      if (c > 2) throw MeshError("non-manifold edge");
      if (c == 1) {
        const bool essential = dir.contains(a) && dir.contains(b);
        boundary_.push_back(
            {a, b, essential ? EdgeKind::essential : EdgeKind::flux});
      }
    }
  }
}

double Mesh::total_area() const {
  double s = 0.0;
  for (double a : region_areas_) s += a;
  return s;
}

ElementGeometry element_gradients(const Mesh& mesh, int e) {
  if (e < 0 || static_cast<std::size_t>(e) >= mesh.num_elements()) {
    throw MeshError("element id out of range");
  }
  const auto& t = mesh.element(e);
  const Point& p0 = mesh.node(t[0]);
  const Point& p1 = mesh.node(t[1]);
  const Point& p2 = mesh.node(t[2]);
  const double area = signed_area(p0, p1, p2);
  if (area <= kAreaTolerance) throw MeshError("degenerate element");
  const double inv = 1.0 / (2.0 * area);
  ElementGeometry g;
  g.area = area;
  g.grad[0] = {(p1.y - p2.y) * inv, (p2.x - p1.x) * inv};
  g.grad[1] = {(p2.y - p0.y) * inv, (p0.x - p2.x) * inv};
  g.grad[2] = {(p0.y - p1.y) * inv, (p1.x - p0.x) * inv};
  return g;
}

Mesh build_rectangle(double width, double height, int nx, int ny,
                     int patch_nx, int patch_ny) {
  if (nx < 1 || ny < 1 || patch_nx < 1 || patch_ny < 1) {
    throw MeshError("cell and patch counts must be positive");
  }
  if (patch_nx > nx || patch_ny > ny || nx % patch_nx != 0 ||
      ny % patch_ny != 0) {
    throw MeshError("patch counts (" + std::to_string(patch_nx) + "x" +
                    std::to_string(patch_ny) + ") must divide cell counts (" +
                    std::to_string(nx) + "x" + std::to_string(ny) + ")");
  }
  std::vector<Point> nodes;
  nodes.reserve(static_cast<std::size_t>((nx + 1) * (ny + 1)));
  for (int j = 0; j <= ny; ++j) {
    for (int i = 0; i <= nx; ++i) {
      nodes.push_back({width * i / nx, height * j / ny});
    }
  }
  auto id = [nx](int i, int j) { return j * (nx + 1) + i; };
  const int cells_per_patch_x = nx / patch_nx;
  const int cells_per_patch_y = ny / patch_ny;

  std::vector<Triangle> elements;
  std::vector<int> regions;
  elements.reserve(static_cast<std::size_t>(2 * nx * ny));
  regions.reserve(elements.capacity());
  for (int j = 0; j < ny; ++j) {
    for (int i = 0; i < nx; ++i) {
      const int region =
          (j / cells_per_patch_y) * patch_nx + (i / cells_per_patch_x);
      // lower-left -> upper-right diagonal
      elements.push_back({id(i, j), id(i + 1, j), id(i + 1, j + 1)});
      elements.push_back({id(i, j), id(i + 1, j + 1), id(i, j + 1)});
      regions.push_back(region);
      regions.push_back(region);
    }
  }
  return Mesh(std::move(nodes), std::move(elements), std::move(regions));
}

Mesh build_unit_square(int nx, int ny, int patch_nx, int patch_ny) {
  return build_rectangle(1.0, 1.0, nx, ny, patch_nx, patch_ny);
}

Mesh build_regions15() { return build_rectangle(1000.0, 600.0, 20, 12, 5, 3); }

// ---------------------------------------------------------------------------
// Text format

namespace {

struct LineReader {
  std::istringstream in;
  int line_no{0};

  explicit LineReader(const std::string& text) : in(text) {}

  // Next non-empty line with comments stripped; false at EOF.
  bool next(std::string& out) {
    std::string line;
    while (std::getline(in, line)) {
      ++line_no;
      if (auto hash = line.find('#'); hash != std::string::npos) {
        line.erase(hash);
      }
      const auto first = line.find_first_not_of(" \t\r");
      if (first == std::string::npos) continue;
      const auto last = line.find_last_not_of(" \t\r");
      out = line.substr(first, last - first + 1);
      return true;
    }
    return false;
  }

  [[noreturn]] void fail(const std::string& what) const {
    throw MeshError("mesh parse error at line " + std::to_string(line_no) +
                    ": " + what);
  }
};

std::size_t read_count(LineReader& r, const std::string& keyword) {
  std::string line;
  if (!r.next(line)) r.fail("expected '" + keyword + " <count>'");
  std::istringstream ls(line);
  std::string kw;
  long long n = -1;
  std::string extra;
  if (!(ls >> kw >> n) || kw != keyword || n < 0 || (ls >> extra)) {
    r.fail("expected '" + keyword + " <count>', got '" + line + "'");
  }
  return static_cast<std::size_t>(n);
}

}  // namespace

Mesh parse_mesh(const std::string& text) {
  LineReader r(text);
  std::string line;
  if (!r.next(line) || line != "mesh 2d tri") {
    r.fail("expected header 'mesh 2d tri'");
  }

  const std::size_t nn = read_count(r, "nodes");
  std::vector<Point> nodes(nn);
  for (std::size_t i = 0; i < nn; ++i) {
    if (!r.next(line)) r.fail("unexpected end of file in node list");
    std::istringstream ls(line);
    std::string extra;
    if (!(ls >> nodes[i].x >> nodes[i].y) || (ls >> extra)) {
      r.fail("malformed node line '" + line + "'");
    }
  }

  const std::size_t ne = read_count(r, "elements");
  std::vector<Triangle> elements(ne);
  std::vector<int> regions(ne);
  for (std::size_t e = 0; e < ne; ++e) {
    if (!r.next(line)) r.fail("unexpected end of file in element list");
    std::istringstream ls(line);
    std::string extra;
    auto& t = elements[e];
    if (!(ls >> t[0] >> t[1] >> t[2] >> regions[e]) || (ls >> extra)) {
      r.fail("malformed element line '" + line + "'");
    }
    for (int v : t) {
      if (v < 0 || static_cast<std::size_t>(v) >= nn) {
        r.fail("node index " + std::to_string(v) + " out of range");
      }
    }
    if (regions[e] < 0) r.fail("negative region id");
    const double a = signed_area(nodes[t[0]], nodes[t[1]], nodes[t[2]]);
    if (std::abs(a) <= kAreaTolerance) r.fail("zero-area element");
  }

  std::vector<DirichletNode> dirichlet;
  if (r.next(line)) {
    std::istringstream ls(line);
    std::string kw;
    long long k = -1;
    std::string extra;
    if (!(ls >> kw >> k) || kw != "dirichlet" || k < 0 || (ls >> extra)) {
      r.fail("expected 'dirichlet <count>' or end of file, got '" + line +
             "'");
    }
    dirichlet.resize(static_cast<std::size_t>(k));
    for (auto& d : dirichlet) {
      if (!r.next(line)) r.fail("unexpected end of file in dirichlet list");
      std::istringstream ds(line);
      if (!(ds >> d.node >> d.value) || (ds >> extra)) {
        r.fail("malformed dirichlet line '" + line + "'");
      }
      if (d.node < 0 || static_cast<std::size_t>(d.node) >= nn) {
        r.fail("dirichlet node out of range");
      }
    }
    if (r.next(line)) r.fail("trailing content '" + line + "'");
  }

  try {
    return Mesh(std::move(nodes), std::move(elements), std::move(regions),
                std::move(dirichlet));
  } catch (const MeshError& err) {
    throw MeshError(std::string("mesh parse error: ") + err.what());
  }
}

Mesh load_mesh(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw MeshError("cannot open mesh file " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_mesh(ss.str());
}

std::string format_mesh(const Mesh& mesh) {
  std::ostringstream out;
  out << std::setprecision(17);
  out << "mesh 2d tri\n";
  out << "nodes " << mesh.num_nodes() << "\n";
  for (const auto& p : mesh.nodes()) out << p.x << " " << p.y << "\n";
  out << "elements " << mesh.num_elements() << "\n";
  for (std::size_t e = 0; e < mesh.num_elements(); ++e) {
    const auto& t = mesh.elements()[e];
    out << t[0] << " " << t[1] << " " << t[2] << " " << mesh.regions()[e]
        << "\n";
  }
  if (!mesh.dirichlet_nodes().empty()) {
    out << "dirichlet " << mesh.dirichlet_nodes().size() << "\n";
    for (const auto& d : mesh.dirichlet_nodes()) {
      out << d.node << " " << d.value << "\n";
    }
  }
  return out.str();
}

void save_mesh(const Mesh& mesh, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw MeshError("cannot write mesh file " + path.string());
  out << format_mesh(mesh);
}

}  // namespace rdc
