#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <istream>
#include <map>
#include <numbers>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "ptensor/quadrature.hpp"

namespace ptensor {

template <int Dim>
using Vec = Eigen::Matrix<double, Dim, 1>;

constexpr double pi = std::numbers::pi;

// ---------------------------------------------------------------------------
// Multi-indices
// ---------------------------------------------------------------------------

struct MultiIndex {
  int dim = 2;
  std::array<int, 3> e{0, 0, 0};

  MultiIndex() = default;
  MultiIndex(int d, std::array<int, 3> exps) : dim(d), e(exps) {
    if (d != 2 && d != 3) throw std::invalid_argument("MultiIndex: dimension must be 2 or 3");
    if (d == 2 && e[2] != 0) throw std::invalid_argument("MultiIndex: third exponent set in 2D");
    for (int k = 0; k < d; ++k)
      if (e[k] < 0) throw std::invalid_argument("MultiIndex: negative exponent");
  }
  static MultiIndex zero(int d) { return MultiIndex(d, {0, 0, 0}); }
  static MultiIndex unit(int d, int axis) {
    std::array<int, 3> x{0, 0, 0};
    x[axis] = 1;
    return MultiIndex(d, x);
  }

  int order() const { return e[0] + e[1] + e[2]; }
  int operator[](int k) const { return e[k]; }

  double factorial() const {
    double f = 1.0;
    for (int k = 0; k < dim; ++k)
      for (int m = 2; m <= e[k]; ++m) f *= m;
    return f;
  }

  MultiIndex operator+(const MultiIndex& o) const {
    return MultiIndex(dim, {e[0] + o.e[0], e[1] + o.e[1], e[2] + o.e[2]});
  }
  bool operator==(const MultiIndex& o) const { return dim == o.dim && e == o.e; }
  bool operator!=(const MultiIndex& o) const { return !(*this == o); }

  /// Graded lexicographic order: by total order, then larger leading exponents first.
  bool operator<(const MultiIndex& o) const {
    if (order() != o.order()) return order() < o.order();
    for (int k = 0; k < 3; ++k)
      if (e[k] != o.e[k]) return e[k] > o.e[k];
    return false;
  }

  std::string str() const {
    std::ostringstream os;
    os << "(";
    for (int k = 0; k < dim; ++k) os << (k ? "," : "") << e[k];
    os << ")";
    return os.str();
  }
};

/** @brief All multi-indices with 0 <= |i| <= max_order in graded lexicographic order. */
inline std::vector<MultiIndex> multi_indices(int d, int max_order, int min_order = 0) {
  if (d != 2 && d != 3) throw std::invalid_argument("multi_indices: d must be 2 or 3");
  if (max_order < 0) throw std::invalid_argument("multi_indices: max_order must be >= 0");
  std::vector<MultiIndex> out;
  for (int n = std::max(0, min_order); n <= max_order; ++n) {
    if (d == 2) {
      for (int a = n; a >= 0; --a) out.emplace_back(2, std::array<int, 3>{a, n - a, 0});
    } else {
      for (int a = n; a >= 0; --a)
        for (int b = n - a; b >= 0; --b) out.emplace_back(3, std::array<int, 3>{a, b, n - a - b});
    }
  }
  return out;
}

inline double ipow(double x, int n) {
  double r = 1.0;
  for (int k = 0; k < n; ++k) r *= x;
  return r;
}

template <int Dim>
double monomial(const MultiIndex& i, const Vec<Dim>& x) {
  double v = 1.0;
  for (int k = 0; k < Dim; ++k) v *= ipow(x[k], i.e[k]);
  return v;
}

template <int Dim>
Vec<Dim> monomial_grad(const MultiIndex& i, const Vec<Dim>& x) {
  Vec<Dim> g;
  for (int l = 0; l < Dim; ++l) {
    if (i.e[l] == 0) {
      g[l] = 0.0;
      continue;
    }
    double v = i.e[l];
    for (int k = 0; k < Dim; ++k) v *= ipow(x[k], k == l ? i.e[k] - 1 : i.e[k]);
    g[l] = v;
  }
  return g;
}

template <int Dim>
double monomial_laplacian(const MultiIndex& i, const Vec<Dim>& x) {
  double s = 0.0;
  for (int l = 0; l < Dim; ++l) {
    if (i.e[l] < 2) continue;
    double v = double(i.e[l]) * (i.e[l] - 1);
    for (int k = 0; k < Dim; ++k) v *= ipow(x[k], k == l ? i.e[k] - 2 : i.e[k]);
    s += v;
  }
  return s;
}

// ---------------------------------------------------------------------------
// Volume meshes
// ---------------------------------------------------------------------------

template <int Dim>
struct VolumeMesh {
  using Point = Vec<Dim>;
  using Cell = std::array<int, Dim + 1>;
  using Facet = std::array<int, Dim>;

  std::vector<Point> vertices;
  std::vector<Cell> cells;
  std::vector<int> cell_tags;

  std::vector<double> cell_measures;
  std::vector<std::array<Point, Dim + 1>> bary_grads;
  std::vector<double> cell_diameters;
  std::vector<Point> centroids;

  std::vector<Facet> boundary_facets;
  std::vector<int> facet_cell;
  std::vector<Point> facet_normals;
  std::vector<double> facet_measures;

  std::size_t num_vertices() const { return vertices.size(); }
  std::size_t num_cells() const { return cells.size(); }

  /// Orients cells positively and computes measures, gradients and boundary facets.
  void finalize() {
    const std::size_t nc = cells.size();
    if (cell_tags.size() != nc) cell_tags.assign(nc, 0);
    cell_measures.resize(nc);
    bary_grads.resize(nc);
    cell_diameters.resize(nc);
    centroids.resize(nc);
    for (std::size_t c = 0; c < nc; ++c) {
      Eigen::Matrix<double, Dim, Dim> J;
      for (int k = 0; k < Dim; ++k) J.col(k) = vertices[cells[c][k + 1]] - vertices[cells[c][0]];
      double det = J.determinant();
      if (det < 0) {
        std::swap(cells[c][1], cells[c][2]);
        for (int k = 0; k < Dim; ++k) J.col(k) = vertices[cells[c][k + 1]] - vertices[cells[c][0]];
        det = -det;
      }
      double fact = (Dim == 2) ? 2.0 : 6.0;
      cell_measures[c] = det / fact;
      if (!(cell_measures[c] > 0.0))
        throw std::runtime_error("VolumeMesh: degenerate cell " + std::to_string(c));
      Eigen::Matrix<double, Dim, Dim> Jinv = J.inverse();
      Point g0 = Point::Zero();
      for (int k = 0; k < Dim; ++k) {
        bary_grads[c][k + 1] = Jinv.row(k).transpose();
        g0 -= bary_grads[c][k + 1];
      }
      bary_grads[c][0] = g0;
      double diam = 0.0;
      Point ctr = Point::Zero();
      for (int a = 0; a <= Dim; ++a) {
        ctr += vertices[cells[c][a]];
        for (int b = a + 1; b <= Dim; ++b)
          diam = std::max(diam, (vertices[cells[c][a]] - vertices[cells[c][b]]).norm());
      }
      cell_diameters[c] = diam;
      centroids[c] = ctr / (Dim + 1);
    }
    build_boundary();
  }

  double total_measure() const {
    double s = 0.0;
    for (double m : cell_measures) s += m;
    return s;
  }

  double max_diameter() const {
    double h = 0.0;
    for (double d : cell_diameters) h = std::max(h, d);
    return h;
  }

  double boundary_measure() const {
    double s = 0.0;
    for (double m : facet_measures) s += m;
    return s;
  }

  Point map_point(std::size_t c, const std::array<double, Dim + 1>& lam) const {
    Point x = Point::Zero();
    for (int a = 0; a <= Dim; ++a) x += lam[a] * vertices[cells[c][a]];
    return x;
  }

  std::array<Point, Dim + 1> cell_vertices(std::size_t c) const {
    std::array<Point, Dim + 1> v;
    for (int a = 0; a <= Dim; ++a) v[a] = vertices[cells[c][a]];
    return v;
  }

  /// Gradient of a P1 nodal field on cell c.
  template <class Field>
  Point cell_gradient(std::size_t c, const Field& u) const {
    Point g = Point::Zero();
    for (int a = 0; a <= Dim; ++a) g += u[cells[c][a]] * bary_grads[c][a];
    return g;
  }

  /// Sorted list of vertex indices lying on the boundary.
  std::vector<int> boundary_vertices() const {
    std::vector<int> b;
    for (const auto& f : boundary_facets)
      for (int v : f) b.push_back(v);
    std::sort(b.begin(), b.end());
    b.erase(std::unique(b.begin(), b.end()), b.end());
    return b;
  }

  /// Integral of a function over the mesh with the given quadrature degree.
  double integrate(const std::function<double(const Point&)>& f, int degree = 4) const {
    const auto& rule = simplex_rule<Dim>(degree);
    double s = 0.0;
    for (std::size_t c = 0; c < cells.size(); ++c) {
      double sc = 0.0;
      for (std::size_t q = 0; q < rule.size(); ++q) sc += rule.w[q] * f(map_point(c, rule.bary[q]));
      s += sc * cell_measures[c];
    }
    return s;
  }

  /// Simple content hash of geometry and connectivity.
  std::uint64_t hash() const {
    std::uint64_t h = 1469598103934665603ull;
    auto mix = [&](std::uint64_t v) {
      h ^= v;
      h *= 1099511628211ull;
    };
    for (const auto& p : vertices)
      for (int k = 0; k < Dim; ++k) {
        std::int64_t q = std::llround(p[k] * 1e12);
        mix(static_cast<std::uint64_t>(q));
      }
    for (const auto& c : cells)
      for (int v : c) mix(static_cast<std::uint64_t>(v));
    return h;
  }

 private:
  void build_boundary() {
    std::map<Facet, std::pair<int, int>> count;
    for (std::size_t c = 0; c < cells.size(); ++c) {
      for (int skip = 0; skip <= Dim; ++skip) {
        Facet f;
        int m = 0;
        for (int a = 0; a <= Dim; ++a)
          if (a != skip) f[m++] = cells[c][a];
        Facet key = f;
        std::sort(key.begin(), key.end());
        auto& e = count[key];
        e.first += 1;
        e.second = static_cast<int>(c);
      }
    }
    boundary_facets.clear();
    facet_cell.clear();
    facet_normals.clear();
    facet_measures.clear();
    for (const auto& [key, e] : count) {
      if (e.first > 2) throw std::runtime_error("VolumeMesh: non-manifold facet");
      if (e.first != 1) continue;
      const int c = e.second;
      Facet f = key;
      Point n;
      double meas;
      if constexpr (Dim == 2) {
        Point t = vertices[f[1]] - vertices[f[0]];
        meas = t.norm();
        n = Point(t[1], -t[0]) / meas;
      } else {
        Point a = vertices[f[1]] - vertices[f[0]];
        Point b = vertices[f[2]] - vertices[f[0]];
        Point cr = a.cross(b);
        meas = 0.5 * cr.norm();
        n = cr / cr.norm();
      }
      Point fc = Point::Zero();
      for (int v : f) fc += vertices[v];
      fc /= Dim;
      if (n.dot(fc - centroids[c]) < 0) {
        n = -n;
        std::swap(f[0], f[1]);
      }
      boundary_facets.push_back(f);
      facet_cell.push_back(c);
      facet_normals.push_back(n);
      facet_measures.push_back(meas);
    }
  }
};

// ---------------------------------------------------------------------------
// Mesh builders
// ---------------------------------------------------------------------------

/// One ring of a ring mesh: nodes at given angles, positions supplied by the ring map.
struct RingSpec {
  std::vector<double> angles;
  std::vector<Vec<2>> points;
};

namespace detail {

inline double wrap_angle(double a) {
  const double two_pi = 2.0 * pi;
  a = std::fmod(a, two_pi);
  if (a < 0) a += two_pi;
  return a;
}

/// Triangulates the strip between two closed rings by advancing on angle.
inline void zip_rings(const std::vector<int>& inner, const std::vector<double>& ai,
                      const std::vector<int>& outer, const std::vector<double>& ao,
                      std::vector<std::array<int, 3>>& cells) {
  const int ni = static_cast<int>(inner.size()), no = static_cast<int>(outer.size());
  auto dist = [](double a, double b) {
    double d = std::abs(wrap_angle(a) - wrap_angle(b));
    return std::min(d, 2.0 * pi - d);
  };
  int q0 = 0;
  for (int q = 1; q < no; ++q)
    if (dist(ao[q], ai[0]) < dist(ao[q0], ai[0])) q0 = q;
  std::vector<double> A(ni + 1), B(no + 1);
  A[0] = ai[0];
  for (int p = 1; p <= ni; ++p) {
    double v = ai[p % ni];
    while (v <= A[p - 1]) v += 2.0 * pi;
    A[p] = v;
  }
  A[ni] = A[0] + 2.0 * pi;
  B[0] = ao[q0];
  while (B[0] > A[0] + pi) B[0] -= 2.0 * pi;
  while (B[0] < A[0] - pi) B[0] += 2.0 * pi;
  for (int q = 1; q <= no; ++q) {
    double v = ao[(q0 + q) % no];
    while (v <= B[q - 1]) v += 2.0 * pi;
    B[q] = v;
  }
  B[no] = B[0] + 2.0 * pi;
  int p = 0, q = 0;
  while (p < ni || q < no) {
    const int a = inner[p % ni], b = outer[(q0 + q) % no];
    bool advance_inner = (q >= no) || (p < ni && A[p + 1] <= B[q + 1]);
    if (advance_inner) {
      cells.push_back({a, inner[(p + 1) % ni], b});
      ++p;
    } else {
      cells.push_back({a, outer[(q0 + q + 1) % no], b});
      ++q;
    }
  }
}

}  // namespace detail

/**
 * @brief Builds a 2D mesh from concentric closed rings (star-shaped about the centre).
 * If has_center, vertex 0 is the centre and is fanned to the first ring.
 */
inline VolumeMesh<2> ring_mesh(const Vec<2>& center, bool has_center, const std::vector<RingSpec>& rings,
                               const std::vector<int>& ring_tags = {}) {
  VolumeMesh<2> m;
  std::vector<std::vector<int>> ids(rings.size());
  if (has_center) m.vertices.push_back(center);
  for (std::size_t r = 0; r < rings.size(); ++r) {
    if (rings[r].points.size() < 3 || rings[r].points.size() != rings[r].angles.size())
      throw std::invalid_argument("ring_mesh: each ring needs >= 3 points with matching angles");
    for (const auto& p : rings[r].points) {
      ids[r].push_back(static_cast<int>(m.vertices.size()));
      m.vertices.push_back(p);
    }
  }
  std::vector<std::array<int, 3>> cells;
  std::vector<int> tags;
  auto tag_of = [&](std::size_t r) { return ring_tags.empty() ? 0 : ring_tags[std::min(r, ring_tags.size() - 1)]; };
  if (has_center) {
    const auto& r0 = ids[0];
    for (std::size_t k = 0; k < r0.size(); ++k) cells.push_back({0, r0[k], r0[(k + 1) % r0.size()]});
    tags.assign(cells.size(), tag_of(0));
  }
  for (std::size_t r = 0; r + 1 < rings.size(); ++r) {
    detail::zip_rings(ids[r], rings[r].angles, ids[r + 1], rings[r + 1].angles, cells);
    tags.resize(cells.size(), tag_of(r + 1));
  }
  m.cells = std::move(cells);
  m.cell_tags = std::move(tags);
  m.finalize();
  return m;
}

inline RingSpec circle_ring(const Vec<2>& center, double radius, int n, double phase = 0.0) {
  RingSpec r;
  for (int k = 0; k < n; ++k) {
    double a = detail::wrap_angle(phase + 2.0 * pi * k / n);
    r.angles.push_back(a);
    r.points.push_back(center + radius * Vec<2>(std::cos(a), std::sin(a)));
  }
  return r;
}

/**
 * @brief Hexagonal ring disk: ring k at radius k*R/K with 6k nodes.
 * Structured under refinement K -> 2K.
 */
inline VolumeMesh<2> hex_disk_mesh(int K, double R = 1.0, const Vec<2>& center = Vec<2>::Zero()) {
  if (K < 1) throw std::invalid_argument("hex_disk_mesh: K must be >= 1");
  std::vector<RingSpec> rings;
  for (int k = 1; k <= K; ++k) rings.push_back(circle_ring(center, R * k / K, 6 * k));
  return ring_mesh(center, true, rings);
}

/**
 * @brief Disk mesh with prescribed ring radii (increasing, last = R); angular spacing
 * close to h_theta at each radius, counts rounded to multiples of 6.
 */
inline VolumeMesh<2> graded_disk_mesh(const std::vector<double>& radii, double h_theta,
                                      const Vec<2>& center = Vec<2>::Zero()) {
  std::vector<RingSpec> rings;
  double prev = 0.0;
  for (double r : radii) {
    if (!(r > prev)) throw std::invalid_argument("graded_disk_mesh: radii must increase");
    double hr = r - prev;
    double h = std::max(std::min(h_theta, 4.0 * hr), 0.25 * hr);
    int n = std::max(6, 6 * static_cast<int>(std::lround(2.0 * pi * r / h / 6.0)));
    rings.push_back(circle_ring(center, r, n));
    prev = r;
  }
  return ring_mesh(center, true, rings);
}

/** @brief Annulus rin..rout with n nodes per ring and geometric radial spacing. */
inline VolumeMesh<2> annulus_mesh(double rin, double rout, int n, const Vec<2>& center = Vec<2>::Zero()) {
  if (!(rout > rin) || rin <= 0) throw std::invalid_argument("annulus_mesh: need 0 < rin < rout");
  std::vector<RingSpec> rings;
  const double dr = 2.0 * pi / n;
  int m = std::max(2, static_cast<int>(std::ceil(std::log(rout / rin) / std::log1p(dr))));
  for (int k = 0; k <= m; ++k) rings.push_back(circle_ring(center, rin * std::pow(rout / rin, double(k) / m), n));
  return ring_mesh(center, false, rings);
}

/**
 * @brief Validation mesh for the unit disk aligned with a small disk inclusion x0 + eps*B.
 * Inside the inclusion: hexagonal rings with n = 6K nodes on its boundary. Outside:
 * n nodes per ring, geometric growth along rays from x0 up to the unit circle.
 * Cells inside the inclusion carry tag 1.
 */
inline VolumeMesh<2> inclusion_disk_mesh(const Vec<2>& x0, double eps, int n_angular) {
  if (!(eps > 0) || x0.norm() + eps >= 1.0)
    throw std::invalid_argument("inclusion_disk_mesh: inclusion must lie inside the unit disk");
  const int K = std::max(1, n_angular / 6);
  const int n = 6 * K;
  std::vector<RingSpec> rings;
  std::vector<int> tags;
  for (int k = 1; k <= K; ++k) {
    rings.push_back(circle_ring(x0, eps * k / K, 6 * k));
    tags.push_back(1);
  }
  // Distance from x0 to the unit circle along each ray.
  std::vector<double> ang = rings.back().angles, tmax(n);
  for (int k = 0; k < n; ++k) {
    Vec<2> d(std::cos(ang[k]), std::sin(ang[k]));
    double b = x0.dot(d), c = x0.squaredNorm() - 1.0;
    tmax[k] = -b + std::sqrt(b * b - c);
  }
  double tmin = *std::min_element(tmax.begin(), tmax.end());
  const double growth = 1.0 + 2.0 * pi / n;
  int M = std::max(2, static_cast<int>(std::ceil(std::log(tmin / eps) / std::log(growth))));
  for (int m = 1; m <= M; ++m) {
    RingSpec r;
    r.angles = ang;
    double s = double(m) / M;
    for (int k = 0; k < n; ++k) {
      double t = eps * std::pow(tmax[k] / eps, s);
      r.points.push_back(x0 + t * Vec<2>(std::cos(ang[k]), std::sin(ang[k])));
    }
    rings.push_back(r);
    tags.push_back(0);
  }
  if (M > 0) {
    // Snap the last ring exactly onto the unit circle.
    for (auto& p : rings.back().points) p /= p.norm();
  }
  return ring_mesh(x0, true, rings, tags);
}

/**
 * @brief Unit-disk validation mesh with independent inclusion and boundary resolution.
 * Inside x0 + eps*B: K hexagonal rings (tag 1). Outside: geometric circles about x0 with
 * 6K nodes until the arc spacing reaches 2*pi/n_outer, then quasi-uniform rings blended
 * onto the unit circle with node counts growing to n_outer.
 */
inline VolumeMesh<2> graded_inclusion_disk_mesh(const Vec<2>& x0, double eps, int K, int n_outer) {
  if (!(eps > 0) || x0.norm() + eps >= 1.0)
    throw std::invalid_argument("graded_inclusion_disk_mesh: inclusion must lie inside the unit disk");
  if (K < 1 || n_outer < 6) throw std::invalid_argument("graded_inclusion_disk_mesh: bad resolution");
  const double hb = 2.0 * pi / n_outer;
  auto tmax_of = [&](double a) {
    const Vec<2> d(std::cos(a), std::sin(a));
    const double b = x0.dot(d), c = x0.squaredNorm() - 1.0;
    return -b + std::sqrt(b * b - c);
  };
  const double tmin = 1.0 - x0.norm();
  std::vector<RingSpec> rings;
  std::vector<int> tags;
  for (int k = 1; k <= K; ++k) {
    rings.push_back(circle_ring(x0, eps * k / K, 6 * k));
    tags.push_back(1);
  }
  const int n_in = 6 * K;
  // Geometric part.
  const double t1 = std::min(0.5 * tmin, std::max(eps, n_in * hb / (2.0 * pi)));
  if (t1 > eps) {
    const double growth = std::log1p(2.0 * pi / n_in);
    const int m = std::max(1, static_cast<int>(std::ceil(std::log(t1 / eps) / growth)));
    for (int k = 1; k <= m; ++k) {
      rings.push_back(circle_ring(x0, eps * std::pow(t1 / eps, double(k) / m), n_in));
      tags.push_back(0);
    }
  }
  // Blended quasi-uniform part: t(theta, u) = t1 + u (tmax(theta) - t1).
  const double span = tmin - t1;
  const int m2 = std::max(1, static_cast<int>(std::ceil(span / hb)));
  for (int k = 1; k <= m2; ++k) {
    const double u = double(k) / m2;
    const double rad = t1 + u * (1.0 - t1);
    int n = std::max(n_in, static_cast<int>(std::lround(2.0 * pi * rad / hb)));
    if (k == m2) n = std::max(n_in, n_outer);
    RingSpec r;
    for (int q = 0; q < n; ++q) {
      const double a = detail::wrap_angle(2.0 * pi * q / n);
      const double t = t1 + u * (tmax_of(a) - t1);
      r.angles.push_back(a);
      Vec<2> p = x0 + t * Vec<2>(std::cos(a), std::sin(a));
      if (k == m2) p /= p.norm();
      r.points.push_back(p);
    }
    rings.push_back(r);
    tags.push_back(0);
  }
  return ring_mesh(x0, true, rings, tags);
}

/// Polygon given by its vertices in counter-clockwise order.
struct PolygonSpec {
  std::vector<Vec<2>> vertices;
};

inline void validate_polygon(const PolygonSpec& poly) {
  const auto& v = poly.vertices;
  const std::size_t n = v.size();
  if (n < 3) throw std::invalid_argument("polygon: fewer than 3 vertices");
  double area = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    const auto& a = v[k];
    const auto& b = v[(k + 1) % n];
    if ((a - b).norm() < 1e-14) throw std::invalid_argument("polygon: repeated vertex");
    area += a[0] * b[1] - a[1] * b[0];
  }
  area *= 0.5;
  if (std::abs(area) < 1e-12) throw std::invalid_argument("polygon: zero area");
  if (area < 0) throw std::invalid_argument("polygon: vertices must be counter-clockwise");
  auto cross = [](const Vec<2>& a, const Vec<2>& b) { return a[0] * b[1] - a[1] * b[0]; };
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      if (j == i + 1 || (i == 0 && j == n - 1)) continue;
      Vec<2> p = v[i], r = v[(i + 1) % n] - v[i], q = v[j], s = v[(j + 1) % n] - v[j];
      double rs = cross(r, s);
      if (std::abs(rs) < 1e-15) continue;
      double t = cross(q - p, s) / rs, u = cross(q - p, r) / rs;
      if (t > 0 && t < 1 && u > 0 && u < 1) throw std::invalid_argument("polygon: self-intersecting");
    }
  Vec<2> c = Vec<2>::Zero();
  for (const auto& p : v) c += p;
  c /= double(n);
  for (std::size_t k = 0; k < n; ++k)
    if (cross(v[k] - c, v[(k + 1) % n] - c) <= 0)
      throw std::invalid_argument("polygon: not star-shaped with respect to its vertex centroid");
}

/** @brief Mesh of a star-shaped polygon: boundary subdivided per edge, rings blended to the centre. */
inline VolumeMesh<2> polygon_mesh(const PolygonSpec& poly, double h) {
  validate_polygon(poly);
  if (!(h > 0)) throw std::invalid_argument("polygon_mesh: h must be positive");
  const auto& v = poly.vertices;
  const std::size_t n = v.size();
  Vec<2> c = Vec<2>::Zero();
  for (const auto& p : v) c += p;
  c /= double(n);
  std::vector<Vec<2>> bpts;
  for (std::size_t k = 0; k < n; ++k) {
    const auto& a = v[k];
    const auto& b = v[(k + 1) % n];
    int m = std::max(1, static_cast<int>(std::ceil((b - a).norm() / h)));
    for (int s = 0; s < m; ++s) bpts.push_back(a + (b - a) * (double(s) / m));
  }
  double rmax = 0.0;
  for (const auto& p : bpts) rmax = std::max(rmax, (p - c).norm());
  int K = std::max(2, static_cast<int>(std::ceil(rmax / h)));
  std::vector<RingSpec> rings;
  for (int k = 1; k <= K; ++k) {
    RingSpec r;
    double s = double(k) / K;
    int count = (k == K) ? static_cast<int>(bpts.size())
                         : std::max(6, static_cast<int>(std::lround(s * bpts.size())));
    for (int q = 0; q < count; ++q) {
      // Interpolate the boundary point at the same relative arc position.
      double pos = double(q) * bpts.size() / count;
      int i0 = static_cast<int>(std::floor(pos)) % static_cast<int>(bpts.size());
      int i1 = (i0 + 1) % static_cast<int>(bpts.size());
      double f = pos - std::floor(pos);
      Vec<2> bp = (k == K) ? bpts[q] : Vec<2>((1 - f) * bpts[i0] + f * bpts[i1]);
      Vec<2> p = c + s * (bp - c);
      r.points.push_back(p);
      r.angles.push_back(detail::wrap_angle(std::atan2(p[1] - c[1], p[0] - c[0])));
    }
    rings.push_back(r);
  }
  return ring_mesh(c, true, rings);
}

/**
 * @brief Unit-ball (scaled by R) tetrahedral mesh: Kuhn-split cube grid mapped radially
 * by x -> x * |x|_inf / |x|_2.
 */
inline VolumeMesh<3> ball_mesh(double h, double R = 1.0, const Vec<3>& center = Vec<3>::Zero()) {
  if (!(h > 0)) throw std::invalid_argument("ball_mesh: h must be positive");
  const int n = std::max(1, static_cast<int>(std::ceil(R / h)));
  const int np = 2 * n + 1;
  VolumeMesh<3> m;
  auto id = [&](int i, int j, int k) { return (i * np + j) * np + k; };
  for (int i = 0; i < np; ++i)
    for (int j = 0; j < np; ++j)
      for (int k = 0; k < np; ++k) {
        Vec<3> x(double(i - n) / n, double(j - n) / n, double(k - n) / n);
        double l2 = x.norm();
        if (l2 > 0) x *= x.cwiseAbs().maxCoeff() / l2;
        m.vertices.push_back(center + R * x);
      }
  // Kuhn split around the main diagonal (0,0,0)-(1,1,1).
  static const int perms[6][3] = {{0, 1, 2}, {0, 2, 1}, {1, 0, 2}, {1, 2, 0}, {2, 0, 1}, {2, 1, 0}};
  for (int i = 0; i < 2 * n; ++i)
    for (int j = 0; j < 2 * n; ++j)
      for (int k = 0; k < 2 * n; ++k)
        for (const auto& p : perms) {
          std::array<int, 3> cur{i, j, k};
          std::array<int, 4> tet;
          tet[0] = id(cur[0], cur[1], cur[2]);
          for (int s = 0; s < 3; ++s) {
            cur[p[s]] += 1;
            tet[s + 1] = id(cur[0], cur[1], cur[2]);
          }
          m.cells.push_back(tet);
        }
  m.finalize();
  return m;
}

/**
 * @brief Spherical shell between the boundary of a ball mesh (radius rin) and rout:
 * boundary triangles extruded along rays and split into tetrahedra by a global-index rule.
 */
inline VolumeMesh<3> shell_mesh(const VolumeMesh<3>& ball, double rin, double rout, int layers,
                                const Vec<3>& center = Vec<3>::Zero()) {
  if (!(rout > rin) || layers < 1) throw std::invalid_argument("shell_mesh: bad radii or layers");
  auto bverts = ball.boundary_vertices();
  std::map<int, int> local;
  for (std::size_t k = 0; k < bverts.size(); ++k) local[bverts[k]] = static_cast<int>(k);
  const int nb = static_cast<int>(bverts.size());
  VolumeMesh<3> m;
  for (int L = 0; L <= layers; ++L) {
    double r = rin * std::pow(rout / rin, double(L) / layers);
    for (int v : bverts) {
      Vec<3> d = ball.vertices[v] - center;
      m.vertices.push_back(center + r * d / d.norm());
    }
  }
  for (int L = 0; L < layers; ++L)
    for (const auto& f : ball.boundary_facets) {
      std::array<int, 3> g{local[f[0]], local[f[1]], local[f[2]]};
      std::sort(g.begin(), g.end());
      int a = g[0], b = g[1], c = g[2];
      int A = L * nb, B = (L + 1) * nb;
      // Sorted-index prism split: consistent across shared quad faces.
      m.cells.push_back({A + a, A + b, A + c, B + c});
      m.cells.push_back({A + a, A + b, B + b, B + c});
      m.cells.push_back({A + a, B + a, B + b, B + c});
    }
  m.finalize();
  return m;
}

/**
 * @brief Exterior layer mesh between the boundary of a star-shaped 2D mesh and its
 * dilation by the factor R about center. Vertices 0..n-1 are the boundary vertices of
 * `inner`, listed in `inner_ids` in the same order; layers grow geometrically.
 */
inline VolumeMesh<2> exterior_mesh(const VolumeMesh<2>& inner, double R, const Vec<2>& center,
                                   std::vector<int>& inner_ids) {
  if (!(R > 1.0)) throw std::invalid_argument("exterior_mesh: R must exceed 1");
  inner_ids = inner.boundary_vertices();
  std::vector<double> ang(inner_ids.size());
  for (std::size_t k = 0; k < inner_ids.size(); ++k) {
    const Vec<2> d = inner.vertices[inner_ids[k]] - center;
    ang[k] = detail::wrap_angle(std::atan2(d[1], d[0]));
  }
  std::vector<std::size_t> order(inner_ids.size());
  for (std::size_t k = 0; k < order.size(); ++k) order[k] = k;
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return ang[a] < ang[b]; });
  std::vector<int> ids;
  std::vector<double> angles;
  for (auto k : order) {
    ids.push_back(inner_ids[k]);
    angles.push_back(ang[k]);
  }
  inner_ids = ids;
  const int n = static_cast<int>(ids.size());
  const int m = std::max(2, static_cast<int>(std::ceil(std::log(R) / std::log1p(2.0 * pi / n))));
  std::vector<RingSpec> rings;
  for (int k = 0; k <= m; ++k) {
    const double s = std::pow(R, double(k) / m);
    RingSpec r;
    r.angles = angles;
    for (int id : ids) r.points.push_back(center + s * (inner.vertices[id] - center));
    rings.push_back(r);
  }
  return ring_mesh(center, false, rings);
}

/// 3D counterpart: spherical shell from the boundary of a ball mesh out to radius R.
inline VolumeMesh<3> exterior_mesh(const VolumeMesh<3>& inner, double R, const Vec<3>& center,
                                   std::vector<int>& inner_ids) {
  if (!(R > 1.0)) throw std::invalid_argument("exterior_mesh: R must exceed 1");
  inner_ids = inner.boundary_vertices();
  double h = 0.0;
  for (std::size_t f = 0; f < inner.boundary_facets.size(); ++f) h = std::max(h, std::sqrt(2.0 * inner.facet_measures[f]));
  const int layers = std::max(2, static_cast<int>(std::ceil(std::log(R) / std::log1p(h))));
  double rin = 0.0;
  for (int v : inner_ids) rin += (inner.vertices[v] - center).norm();
  rin /= double(inner_ids.size());
  // shell_mesh projects onto spheres; the inner layer must reproduce the boundary nodes.
  VolumeMesh<3> m = shell_mesh(inner, rin, R * rin, layers, center);
  for (std::size_t k = 0; k < inner_ids.size(); ++k) m.vertices[k] = inner.vertices[inner_ids[k]];
  m.finalize();
  return m;
}

// ---------------------------------------------------------------------------
// Plain-text mesh / field I/O
// ---------------------------------------------------------------------------

/**
 * Format (one record per line):
 *   dim D
 *   vertices N      followed by N lines "x y [z] [field values...]"
 *   cells M         followed by M lines of D+1 vertex indices
 *   fields K name1 ... nameK   (optional, before vertices)
 */
template <int Dim>
void write_mesh(std::ostream& os, const VolumeMesh<Dim>& m,
                const std::vector<std::pair<std::string, Eigen::VectorXd>>& fields = {}) {
  os.precision(17);
  os << "dim " << Dim << "\n";
  if (!fields.empty()) {
    os << "fields " << fields.size();
    for (const auto& f : fields) os << " " << f.first;
    os << "\n";
  }
  os << "vertices " << m.vertices.size() << "\n";
  for (std::size_t v = 0; v < m.vertices.size(); ++v) {
    for (int k = 0; k < Dim; ++k) os << (k ? " " : "") << m.vertices[v][k];
    for (const auto& f : fields) os << " " << f.second[static_cast<Eigen::Index>(v)];
    os << "\n";
  }
  os << "cells " << m.cells.size() << "\n";
  for (const auto& c : m.cells) {
    for (int a = 0; a <= Dim; ++a) os << (a ? " " : "") << c[a];
    os << "\n";
  }
}

template <int Dim>
VolumeMesh<Dim> read_mesh(std::istream& is, std::vector<std::pair<std::string, Eigen::VectorXd>>* fields = nullptr) {
  std::string key;
  int dim = 0;
  if (!(is >> key >> dim) || key != "dim") throw std::runtime_error("read_mesh: missing dim header");
  if (dim != Dim) throw std::runtime_error("read_mesh: dimension mismatch");
  std::vector<std::string> names;
  is >> key;
  if (key == "fields") {
    std::size_t k;
    is >> k;
    names.resize(k);
    for (auto& s : names) is >> s;
    is >> key;
  }
  if (key != "vertices") throw std::runtime_error("read_mesh: expected vertices");
  std::size_t nv;
  is >> nv;
  VolumeMesh<Dim> m;
  m.vertices.resize(nv);
  std::vector<Eigen::VectorXd> vals(names.size(), Eigen::VectorXd(static_cast<Eigen::Index>(nv)));
  for (std::size_t v = 0; v < nv; ++v) {
    for (int k = 0; k < Dim; ++k) is >> m.vertices[v][k];
    for (auto& f : vals) is >> f[static_cast<Eigen::Index>(v)];
  }
  std::size_t nc;
  if (!(is >> key >> nc) || key != "cells") throw std::runtime_error("read_mesh: expected cells");
  m.cells.resize(nc);
  for (auto& c : m.cells)
    for (int a = 0; a <= Dim; ++a) {
      is >> c[a];
      if (c[a] < 0 || static_cast<std::size_t>(c[a]) >= nv) throw std::runtime_error("read_mesh: bad vertex index");
    }
  if (!is) throw std::runtime_error("read_mesh: truncated input");
  m.finalize();
  if (fields) {
    fields->clear();
    for (std::size_t k = 0; k < names.size(); ++k) fields->emplace_back(names[k], vals[k]);
  }
  return m;
}

// ---------------------------------------------------------------------------
// Reference shapes
// ---------------------------------------------------------------------------

enum class ShapeKind { unit_disk, unit_ball, polygon };

struct ShapeSpec {
  ShapeKind kind = ShapeKind::unit_disk;
  PolygonSpec polygon;
};

/** @brief Reference mesh of B with target cell size h (disk: hexagonal rings). */
inline VolumeMesh<2> build_reference_mesh_2d(const ShapeSpec& s, double h) {
  if (!(h > 0)) throw std::invalid_argument("build_reference_mesh: h must be positive");
  if (s.kind == ShapeKind::unit_disk) return hex_disk_mesh(std::max(1, static_cast<int>(std::ceil(1.0 / h))));
  if (s.kind == ShapeKind::polygon) return polygon_mesh(s.polygon, h);
  throw std::invalid_argument("build_reference_mesh: shape is not two-dimensional");
}

inline VolumeMesh<3> build_reference_mesh_3d(const ShapeSpec& s, double h) {
  if (s.kind != ShapeKind::unit_ball) throw std::invalid_argument("build_reference_mesh: shape is not three-dimensional");
  return ball_mesh(h);
}

/// Domain: validation mesh plus inclusion placement.
template <int Dim>
struct Domain {
  ShapeKind kind = Dim == 2 ? ShapeKind::unit_disk : ShapeKind::unit_ball;
  VolumeMesh<Dim> mesh;
  Vec<Dim> x0 = Vec<Dim>::Zero();
  double d0 = 0.1;

  /// Checks dist(boundary, x0 + eps B) > d0 for a ball-shaped B of unit radius inside the unit disk/ball.
  void check_clearance(double eps) const {
    double dist = 1.0 - x0.norm() - eps;
    if (!(dist > d0)) throw std::invalid_argument("Domain: inclusion too close to the boundary");
  }
};

}  // namespace ptensor
