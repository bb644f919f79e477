#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <functional>
#include <map>
#include <memory>
#include <ostream>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <boost/math/special_functions/bessel.hpp>
#include <boost/math/special_functions/bessel_prime.hpp>
#include <boost/math/special_functions/erf.hpp>
#include <boost/math/special_functions/hermite.hpp>

#include "ptensor/meshgeom.hpp"
#include "ptensor/profile.hpp"
#include "ptensor/quadrature.hpp"

namespace ptensor {

/// Raised when a discrete operator is numerically singular (H-1 fails for the background).
struct ConditioningErrorH1 : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Raised when the mesh does not resolve the inclusion.
struct ResolutionError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/**
 * @brief Nodal values on the boundary vertices of a mesh, in boundary order.
 * In 2D the order follows the boundary chain counter-clockwise and `arc_length` is filled.
 */
template <int Dim>
struct BoundaryTrace {
  std::shared_ptr<const VolumeMesh<Dim>> mesh;
  std::vector<int> vertices;
  std::vector<double> arc_length;
  Eigen::VectorXd values;

  std::size_t size() const { return vertices.size(); }

  BoundaryTrace operator-(const BoundaryTrace& o) const { return combine(1.0, o, -1.0); }
  BoundaryTrace operator+(const BoundaryTrace& o) const { return combine(1.0, o, 1.0); }
  BoundaryTrace scaled(double s) const {
    BoundaryTrace r = *this;
    r.values *= s;
    return r;
  }
  BoundaryTrace combine(double a, const BoundaryTrace& o, double b) const {
    if (o.vertices != vertices) throw std::invalid_argument("BoundaryTrace: traces live on different boundaries");
    BoundaryTrace r = *this;
    r.values = a * values + b * o.values;
    return r;
  }

  /// L²(∂Ω) norm of the piecewise-linear interpolant.
  double l2_norm() const {
    std::vector<double> full(mesh->num_vertices(), 0.0);
    for (std::size_t k = 0; k < vertices.size(); ++k) full[vertices[k]] = values[static_cast<Eigen::Index>(k)];
    double s = 0.0;
    for (std::size_t f = 0; f < mesh->boundary_facets.size(); ++f) {
      const auto& fc = mesh->boundary_facets[f];
      const double L = mesh->facet_measures[f];
      if constexpr (Dim == 2) {
        const double a = full[fc[0]], b = full[fc[1]];
        s += L / 3.0 * (a * a + a * b + b * b);
      } else {
        const double a = full[fc[0]], b = full[fc[1]], c = full[fc[2]];
        s += L / 6.0 * (a * a + b * b + c * c + a * b + b * c + c * a);
      }
    }
    return std::sqrt(s);
  }

  /// ∫_∂Ω of the piecewise-linear interpolant.
  double integral() const {
    std::vector<double> full(mesh->num_vertices(), 0.0);
    for (std::size_t k = 0; k < vertices.size(); ++k) full[vertices[k]] = values[static_cast<Eigen::Index>(k)];
    double s = 0.0;
    for (std::size_t f = 0; f < mesh->boundary_facets.size(); ++f) {
      double m = 0.0;
      for (int v : mesh->boundary_facets[f]) m += full[v];
      s += mesh->facet_measures[f] * m / Dim;
    }
    return s;
  }

  Vec<Dim> point(std::size_t k) const { return mesh->vertices[vertices[k]]; }
};

/// Boundary vertices in traversal order (2D: counter-clockwise chain starting near angle 0).
template <int Dim>
BoundaryTrace<Dim> boundary_layout(std::shared_ptr<const VolumeMesh<Dim>> mesh) {
  BoundaryTrace<Dim> t;
  t.mesh = mesh;
  if constexpr (Dim == 2) {
    std::map<int, std::vector<int>> nb;
    for (const auto& f : mesh->boundary_facets) {
      nb[f[0]].push_back(f[1]);
      nb[f[1]].push_back(f[0]);
    }
    for (const auto& [v, n] : nb)
      if (n.size() != 2) throw std::invalid_argument("boundary_layout: boundary is not a single closed curve");
    Vec<2> ctr = Vec<2>::Zero();
    for (const auto& [v, n] : nb) ctr += mesh->vertices[v];
    ctr /= static_cast<double>(nb.size());
    auto angle = [&](int v) {
      const Vec<2> d = mesh->vertices[v] - ctr;
      double a = std::atan2(d[1], d[0]);
      return a < 0 ? a + 2.0 * pi : a;
    };
    int start = nb.begin()->first;
    for (const auto& [v, n] : nb)
      if (angle(v) < angle(start)) start = v;
    const auto& n0 = nb[start];
    auto cross = [&](int v) {
      const Vec<2> a = mesh->vertices[start] - ctr, b = mesh->vertices[v] - ctr;
      return a[0] * b[1] - a[1] * b[0];
    };
    int next = cross(n0[0]) > cross(n0[1]) ? n0[0] : n0[1];
    t.vertices.push_back(start);
    t.arc_length.push_back(0.0);
    int prev = start, cur = next;
    while (cur != start) {
      t.arc_length.push_back(t.arc_length.back() + (mesh->vertices[cur] - mesh->vertices[prev]).norm());
      t.vertices.push_back(cur);
      const auto& n = nb[cur];
      const int nx = n[0] == prev ? n[1] : n[0];
      prev = cur;
      cur = nx;
      if (t.vertices.size() > nb.size()) throw std::invalid_argument("boundary_layout: boundary is not a single closed curve");
    }
    if (t.vertices.size() != nb.size()) throw std::invalid_argument("boundary_layout: boundary has several components");
  } else {
    t.vertices = mesh->boundary_vertices();
  }
  t.values = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(t.vertices.size()));
  return t;
}

template <int Dim>
BoundaryTrace<Dim> restrict_to_boundary(std::shared_ptr<const VolumeMesh<Dim>> mesh, const Eigen::VectorXd& u) {
  BoundaryTrace<Dim> t = boundary_layout(mesh);
  for (std::size_t k = 0; k < t.vertices.size(); ++k) t.values[static_cast<Eigen::Index>(k)] = u[t.vertices[k]];
  return t;
}

/// Trace of a function evaluated at the boundary vertices.
template <int Dim>
BoundaryTrace<Dim> sample_on_boundary(std::shared_ptr<const VolumeMesh<Dim>> mesh,
                                      const std::function<double(const Vec<Dim>&)>& f) {
  BoundaryTrace<Dim> t = boundary_layout(mesh);
  for (std::size_t k = 0; k < t.vertices.size(); ++k) t.values[static_cast<Eigen::Index>(k)] = f(t.point(k));
  return t;
}

/**
 * @brief Moves a 2D trace to another boundary layout by linear interpolation in the polar angle
 * about the origin (star-shaped boundaries).
 */
inline BoundaryTrace<2> resample(const BoundaryTrace<2>& src, const BoundaryTrace<2>& layout) {
  const std::size_t n = src.size();
  std::vector<std::pair<double, double>> tab(n);
  for (std::size_t k = 0; k < n; ++k) {
    const Vec<2> p = src.point(k);
    double a = std::atan2(p[1], p[0]);
    if (a < 0) a += 2.0 * pi;
    tab[k] = {a, src.values[static_cast<Eigen::Index>(k)]};
  }
  std::sort(tab.begin(), tab.end());
  BoundaryTrace<2> out = layout;
  for (std::size_t k = 0; k < layout.size(); ++k) {
    const Vec<2> p = layout.point(k);
    double a = std::atan2(p[1], p[0]);
    if (a < 0) a += 2.0 * pi;
    auto it = std::upper_bound(tab.begin(), tab.end(), std::make_pair(a, -HUGE_VAL));
    const auto& hi = (it == tab.end()) ? tab.front() : *it;
    const auto& lo = (it == tab.begin()) ? tab.back() : *(it - 1);
    double a0 = lo.first, a1 = hi.first;
    if (a1 <= a0) a1 += 2.0 * pi;
    double aa = a;
    if (aa < a0) aa += 2.0 * pi;
    const double t = (a1 > a0) ? (aa - a0) / (a1 - a0) : 0.0;
    out.values[static_cast<Eigen::Index>(k)] = (1 - t) * lo.second + t * hi.second;
  }
  return out;
}

/// CSV with columns arc_length,value (2D) or x,y,z,value (3D).
template <int Dim>
void write_trace_csv(std::ostream& os, const BoundaryTrace<Dim>& t) {
  os.precision(17);
  if constexpr (Dim == 2) {
    os << "arc_length,value\n";
    for (std::size_t k = 0; k < t.size(); ++k) os << t.arc_length[k] << ',' << t.values[static_cast<Eigen::Index>(k)] << '\n';
  } else {
    os << "x,y,z,value\n";
    for (std::size_t k = 0; k < t.size(); ++k) {
      const auto p = t.point(k);
      os << p[0] << ',' << p[1] << ',' << p[2] << ',' << t.values[static_cast<Eigen::Index>(k)] << '\n';
    }
  }
}

enum class Normalization { boundary_mean_zero, none };

/**
 * @brief −∇·(D∇u) + q u = f in Ω, D ∂u/∂n = g on ∂Ω. `diffusion` and `potential` may be empty
 * (meaning 1 and 0). A scalar variant of the same data describes both the diffusion and the
 * Helmholtz problems.
 */
template <int Dim>
struct NeumannProblem {
  std::shared_ptr<const VolumeMesh<Dim>> mesh;
  std::function<double(const Vec<Dim>&)> diffusion;
  std::function<double(const Vec<Dim>&)> potential;
  std::function<double(const Vec<Dim>&)> flux;
  std::function<double(const Vec<Dim>&)> source;
  Normalization normalization = Normalization::boundary_mean_zero;
  int quadrature_degree = 4;  ///< on untagged cells
  int tagged_degree = 8;      ///< on cells with a nonzero tag (inclusion)
  double compatibility_tol = 1e-8;
  double geometric_tol = 1e-2;  ///< largest relative imbalance attributed to the polygonal boundary
  double positivity_floor = 1e-12;
};

template <int Dim>
struct FemSolution {
  std::shared_ptr<const VolumeMesh<Dim>> mesh;
  Eigen::VectorXd values;
  double multiplier = 0.0;
  double residual = 0.0;      ///< relative residual of the discrete weak form
  double flux_balance = 0.0;  ///< ∫g + ∫f of the discrete load (zero when compatible)
  double energy = 0.0;        ///< a(u,u)
  double load_work = 0.0;     ///< ℓ(u)
  BoundaryTrace<Dim> trace;
};

/**
 * @brief Assembled P1 operator a(u,v) = ∫D∇u·∇v + q u v with its factorization; reused for
 * several load vectors.
 */
template <int Dim>
class FemOperator {
 public:
  FemOperator(const NeumannProblem<Dim>& p) : problem_(p) {
    if (!p.mesh) throw std::invalid_argument("FemOperator: mesh missing");
    assemble();
    factor();
  }

  const NeumannProblem<Dim>& problem() const { return problem_; }
  const Eigen::SparseMatrix<double>& stiffness() const { return A_; }
  const Eigen::VectorXd& boundary_mass() const { return bmass_; }

  /// Load vector ℓ(v) = ∫_∂Ω g v + ∫_Ω f v.
  Eigen::VectorXd load(const std::function<double(const Vec<Dim>&)>& g,
                       const std::function<double(const Vec<Dim>&)>& f) const {
    const auto& m = *problem_.mesh;
    Eigen::VectorXd b = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(m.num_vertices()));
    if (g) {
      for (std::size_t fi = 0; fi < m.boundary_facets.size(); ++fi) {
        const auto& fc = m.boundary_facets[fi];
        if constexpr (Dim == 2) {
          const auto& gl = gauss_legendre01(6);
          for (std::size_t q = 0; q < gl.x.size(); ++q) {
            const double t = gl.x[q];
            const Vec<2> x = (1 - t) * m.vertices[fc[0]] + t * m.vertices[fc[1]];
            const double w = gl.w[q] * m.facet_measures[fi] * g(x);
            b[fc[0]] += w * (1 - t);
            b[fc[1]] += w * t;
          }
        } else {
          const auto& tr = simplex_rule<2>(6);
          for (std::size_t q = 0; q < tr.size(); ++q) {
            Vec<3> x = Vec<3>::Zero();
            for (int a = 0; a < 3; ++a) x += tr.bary[q][a] * m.vertices[fc[a]];
            const double w = tr.w[q] * m.facet_measures[fi] * g(x);
            for (int a = 0; a < 3; ++a) b[fc[a]] += w * tr.bary[q][a];
          }
        }
      }
    }
    if (f) {
      const auto& rule = simplex_rule<Dim>(8);
      for (std::size_t c = 0; c < m.num_cells(); ++c)
        for (std::size_t q = 0; q < rule.size(); ++q) {
          const double w = rule.w[q] * m.cell_measures[c] * f(m.map_point(c, rule.bary[q]));
          if (w == 0.0) continue;
          for (int a = 0; a <= Dim; ++a) b[m.cells[c][a]] += w * rule.bary[q][a];
        }
    }
    return b;
  }

  FemSolution<Dim> solve(const std::function<double(const Vec<Dim>&)>& g,
                         const std::function<double(const Vec<Dim>&)>& f = nullptr) const {
    return solve_load(load(g, f));
  }

  FemSolution<Dim> solve_load(Eigen::VectorXd b) const {
    const Eigen::Index N = A_.rows();
    FemSolution<Dim> s;
    s.mesh = problem_.mesh;
    s.flux_balance = b.sum();
    const bool normalized = problem_.normalization == Normalization::boundary_mean_zero;
    if (normalized && !has_potential_) {
      const double scale = b.cwiseAbs().sum() + 1e-300;
      if (std::abs(s.flux_balance) > problem_.geometric_tol * scale)
        throw std::invalid_argument("solve_diffusion: incompatible flux (∫g + ∫f = " + std::to_string(s.flux_balance) + ")");
      // Imbalance from the polygonal boundary is removed through the boundary mass.
      b -= s.flux_balance / bmass_.sum() * bmass_;
      if (std::abs(b.sum()) > problem_.compatibility_tol * scale)
        throw std::invalid_argument("solve_diffusion: flux balance failed");
    }
    if (normalized) {
      Eigen::VectorXd rhs(N + 1);
      rhs.head(N) = b;
      rhs[N] = 0.0;
      Eigen::VectorXd x = lu_.solve(rhs);
      s.values = x.head(N);
      s.multiplier = x[N];
      s.residual = (A_ * s.values + s.multiplier * bmass_ - b).norm() / std::max(b.norm(), 1e-300);
    } else {
      s.values = lu_.solve(b);
      s.residual = (A_ * s.values - b).norm() / std::max(b.norm(), 1e-300);
    }
    if (!s.values.allFinite()) throw std::runtime_error("FemOperator: singular system");
    s.energy = s.values.dot(A_ * s.values);
    s.load_work = s.values.dot(b);
    s.trace = restrict_to_boundary(problem_.mesh, s.values);
    return s;
  }

  double condition_estimate() const { return cond_; }

 private:
  void assemble() {
    const auto& m = *problem_.mesh;
    const Eigen::Index N = static_cast<Eigen::Index>(m.num_vertices());
    std::vector<Eigen::Triplet<double>> trip;
    trip.reserve(m.num_cells() * (Dim + 1) * (Dim + 1) * 2);
    has_potential_ = static_cast<bool>(problem_.potential);
    const auto& r_lo = simplex_rule<Dim>(problem_.quadrature_degree);
    const auto& r_hi = simplex_rule<Dim>(problem_.tagged_degree);
    for (std::size_t c = 0; c < m.num_cells(); ++c) {
      const auto& rule = m.cell_tags[c] != 0 ? r_hi : r_lo;
      double dint = 0.0;
      Eigen::Matrix<double, Dim + 1, Dim + 1> Mq = Eigen::Matrix<double, Dim + 1, Dim + 1>::Zero();
      for (std::size_t q = 0; q < rule.size(); ++q) {
        const Vec<Dim> x = m.map_point(c, rule.bary[q]);
        const double d = problem_.diffusion ? problem_.diffusion(x) : 1.0;
        if (!(d > problem_.positivity_floor)) throw std::invalid_argument("FemOperator: diffusion coefficient not positive");
        dint += rule.w[q] * d;
        if (has_potential_) {
          const double qv = problem_.potential(x);
          for (int a = 0; a <= Dim; ++a)
            for (int b = 0; b <= Dim; ++b) Mq(a, b) += rule.w[q] * qv * rule.bary[q][a] * rule.bary[q][b];
        }
      }
      const double vol = m.cell_measures[c];
      for (int a = 0; a <= Dim; ++a)
        for (int b = 0; b <= Dim; ++b) {
          double v = vol * dint * m.bary_grads[c][a].dot(m.bary_grads[c][b]);
          if (has_potential_) v += vol * Mq(a, b);
          trip.emplace_back(m.cells[c][a], m.cells[c][b], v);
        }
    }
    A_.resize(N, N);
    A_.setFromTriplets(trip.begin(), trip.end());
    bmass_ = Eigen::VectorXd::Zero(N);
    for (std::size_t f = 0; f < m.boundary_facets.size(); ++f)
      for (int v : m.boundary_facets[f]) bmass_[v] += m.facet_measures[f] / Dim;
  }

  void factor() {
    const Eigen::Index N = A_.rows();
    const bool normalized = problem_.normalization == Normalization::boundary_mean_zero;
    Eigen::SparseMatrix<double> S;
    if (normalized) {
      std::vector<Eigen::Triplet<double>> trip;
      for (int k = 0; k < A_.outerSize(); ++k)
        for (Eigen::SparseMatrix<double>::InnerIterator it(A_, k); it; ++it) trip.emplace_back(it.row(), it.col(), it.value());
      for (Eigen::Index v = 0; v < N; ++v)
        if (bmass_[v] != 0.0) {
          trip.emplace_back(v, N, bmass_[v]);
          trip.emplace_back(N, v, bmass_[v]);
        }
      S.resize(N + 1, N + 1);
      S.setFromTriplets(trip.begin(), trip.end());
    } else {
      S = A_;
    }
    S.makeCompressed();
    lu_.analyzePattern(S);
    lu_.factorize(S);
    if (lu_.info() != Eigen::Success) throw ConditioningErrorH1("FemOperator: factorization failed (singular system, H-1)");
    // Inverse-norm estimate from a few random solves.
    std::mt19937_64 rng(12345);
    std::normal_distribution<double> n01;
    double inv = 0.0;
    for (int k = 0; k < 3; ++k) {
      Eigen::VectorXd r(S.rows());
      for (Eigen::Index i = 0; i < r.size(); ++i) r[i] = n01(rng);
      if (normalized) r[N] = 0.0;
      Eigen::VectorXd x = lu_.solve(r);
      inv = std::max(inv, x.norm() / r.norm());
    }
    double anorm = 0.0;
    for (int k = 0; k < S.outerSize(); ++k) {
      double col = 0.0;
      for (Eigen::SparseMatrix<double>::InnerIterator it(S, k); it; ++it) col += std::abs(it.value());
      anorm = std::max(anorm, col);
    }
    cond_ = anorm * inv;
    if (!std::isfinite(cond_) || cond_ > 1e14)
      throw ConditioningErrorH1("FemOperator: near-singular system (condition estimate " + std::to_string(cond_) +
                                "); the background violates H-1");
  }

  NeumannProblem<Dim> problem_;
  Eigen::SparseMatrix<double> A_;
  Eigen::VectorXd bmass_;
  Eigen::SparseLU<Eigen::SparseMatrix<double>, Eigen::COLAMDOrdering<int>> lu_;
  bool has_potential_ = false;
  double cond_ = 0.0;
};

template <int Dim>
FemSolution<Dim> solve_diffusion(const NeumannProblem<Dim>& p) {
  if (p.potential) throw std::invalid_argument("solve_diffusion: problem carries a potential; use solve_helmholtz");
  FemOperator<Dim> op(p);
  return op.solve(p.flux, p.source);
}

template <int Dim>
FemSolution<Dim> solve_helmholtz(const NeumannProblem<Dim>& p) {
  FemOperator<Dim> op(p);
  return op.solve(p.flux, p.source);
}

/// Number of cells across the inclusion diameter 2ε (2ε over the largest cell inside x0+εB).
template <int Dim>
double inclusion_resolution(const VolumeMesh<Dim>& m, const Vec<Dim>& x0, double eps) {
  double h = 0.0;
  for (std::size_t c = 0; c < m.num_cells(); ++c)
    if ((m.centroids[c] - x0).norm() < eps) h = std::max(h, m.cell_diameters[c]);
  return h > 0.0 ? 2.0 * eps / h : 0.0;
}

template <int Dim>
void require_resolution(const VolumeMesh<Dim>& m, const Vec<Dim>& x0, double eps, double min_cells = 8.0) {
  const double r = inclusion_resolution(m, x0, eps);
  if (r < min_cells)
    throw ResolutionError("fem: only " + std::to_string(r) + " cells across the inclusion diameter (need " +
                          std::to_string(min_cells) + ")");
}

/// Diffusion D0(x) + D1((x − x0)/ε) on the validation mesh.
template <int Dim>
std::function<double(const Vec<Dim>&)> perturbed_diffusion(const std::function<double(const Vec<Dim>&)>& D0,
                                                           const InclusionProfile<Dim>& D1, const Vec<Dim>& x0, double eps) {
  return [D0, D1, x0, eps](const Vec<Dim>& x) {
    const Vec<Dim> z = (x - x0) / eps;
    const double d1 = z.squaredNorm() < 1.0 ? D1(z) : 0.0;
    return D0(x) + d1;
  };
}

/// q0(x) + ε^{η−2} q1((x − x0)/ε).
template <int Dim>
std::function<double(const Vec<Dim>&)> perturbed_potential(const std::function<double(const Vec<Dim>&)>& q0,
                                                           const InclusionProfile<Dim>& q1, const Vec<Dim>& x0, double eps,
                                                           double eta) {
  const double s = std::pow(eps, eta - 2.0);
  return [q0, q1, x0, eps, s](const Vec<Dim>& x) {
    const Vec<Dim> z = (x - x0) / eps;
    const double v = z.squaredNorm() < 1.0 ? s * q1(z) : 0.0;
    return (q0 ? q0(x) : 0.0) + v;
  };
}

/// ‖v/√D − u‖_{L²(Ω)} for the Bohm pair of a constant background D0: u from the diffusion problem
/// with flux g, v from −Δv + ε^{-2}q1((x−x0)/ε) v = 0 with flux g/√D0.
struct BohmPairCheck {
  double discrepancy = 0.0;
  double u_norm = 0.0;
  std::size_t vertices = 0;
  double relative() const { return discrepancy / std::max(u_norm, 1e-300); }
};

template <int Dim>
BohmPairCheck bohm_pair_check(std::shared_ptr<const VolumeMesh<Dim>> mesh, double D0, const InclusionProfile<Dim>& D1,
                              const InclusionProfile<Dim>& q1, const Vec<Dim>& x0, double eps,
                              const std::function<double(const Vec<Dim>&)>& g) {
  require_resolution(*mesh, x0, eps);
  auto D = perturbed_diffusion<Dim>([D0](const Vec<Dim>&) { return D0; }, D1, x0, eps);
  NeumannProblem<Dim> pu;
  pu.mesh = mesh;
  pu.diffusion = D;
  pu.flux = g;
  const auto u = solve_diffusion(pu);
  NeumannProblem<Dim> pv;
  pv.mesh = mesh;
  pv.potential = perturbed_potential<Dim>(nullptr, q1, x0, eps, 0.0);
  const double s0 = std::sqrt(D0);
  pv.flux = [g, s0](const Vec<Dim>& x) { return g(x) / s0; };
  const auto v = solve_helmholtz(pv);
  const auto& m = *mesh;
  Eigen::VectorXd lumped = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(m.num_vertices()));
  for (std::size_t c = 0; c < m.num_cells(); ++c)
    for (int a = 0; a <= Dim; ++a) lumped[m.cells[c][a]] += m.cell_measures[c] / (Dim + 1);
  BohmPairCheck r;
  r.vertices = m.num_vertices();
  for (std::size_t k = 0; k < m.num_vertices(); ++k) {
    const double d = v.values[k] / std::sqrt(D(m.vertices[k])) - u.values[k];
    r.discrepancy += lumped[k] * d * d;
    r.u_norm += lumped[k] * u.values[k] * u.values[k];
  }
  r.discrepancy = std::sqrt(r.discrepancy);
  r.u_norm = std::sqrt(r.u_norm);
  return r;
}

// ---------------------------------------------------------------------------
// Green derivative traces
// ---------------------------------------------------------------------------

enum class GreenMethod { disk_closed_form, fem_multipole };

inline std::string to_string(GreenMethod m) { return m == GreenMethod::disk_closed_form ? "disk_closed_form" : "fem_multipole"; }

/// Traces y ↦ ∂^i_x N(x0, y) on ∂Ω for each stored multi-index.
template <int Dim>
struct GreenTraceSet {
  GreenMethod method = GreenMethod::disk_closed_form;
  double sigma = 0.0;
  Vec<Dim> x0 = Vec<Dim>::Zero();
  std::map<MultiIndex, BoundaryTrace<Dim>> traces;

  const BoundaryTrace<Dim>& at(const MultiIndex& i) const {
    auto it = traces.find(i);
    if (it == traces.end()) throw std::out_of_range("GreenTraceSet: no trace for index " + i.str());
    return it->second;
  }
  bool has(const MultiIndex& i) const { return traces.count(i) > 0; }
};

namespace detail {

/// Coefficients of ((R+L)/2)^a ((R−L)/(2i))^b as a polynomial Σ c_pq R^p L^q.
inline std::map<std::pair<int, int>, std::complex<double>> derivative_polynomial(int a, int b) {
  using C = std::complex<double>;
  std::map<std::pair<int, int>, C> poly{{{0, 0}, C(1.0)}};
  auto mul = [&](C cr, C cl) {
    std::map<std::pair<int, int>, C> out;
    for (const auto& [pq, c] : poly) {
      out[{pq.first + 1, pq.second}] += c * cr;
      out[{pq.first, pq.second + 1}] += c * cl;
    }
    poly = out;
  };
  for (int k = 0; k < a; ++k) mul(C(0.5), C(0.5));
  for (int k = 0; k < b; ++k) mul(C(0.0, -0.5), C(0.0, 0.5));
  return poly;
}

}  // namespace detail

/**
 * @brief ∂^i_x N(x, y) for the unit disk, constant D0, y on the unit circle:
 * N(x, y) = −(1/(π D0)) log|x − y|.
 */
inline double disk_neumann_derivative(const MultiIndex& i, const Vec<2>& x, const Vec<2>& y, double D0) {
  using C = std::complex<double>;
  const C z(x[0], x[1]), w(y[0], y[1]);
  const int n = i.order();
  if (n == 0) return -std::log(std::abs(z - w)) / (pi * D0);
  double fact = 1.0;
  for (int k = 2; k < n; ++k) fact *= k;
  const C dn = ((n - 1) % 2 == 0 ? 1.0 : -1.0) * fact / std::pow(z - w, n);
  const C ib = std::pow(C(0.0, 1.0), i[1]);
  return -(ib * dn).real() / (pi * D0);
}

/**
 * @brief ∂^i_x N(x, y) for −ΔN + k²N = δ on the unit disk with ∂N/∂n = 0, y on the unit circle:
 * N = Σ_m ε_m I_m(k r) cos(m(θ − θ_y)) / (2π k I_m'(k)).
 */
inline double disk_helmholtz_neumann_derivative(const MultiIndex& i, const Vec<2>& x, const Vec<2>& y, double k,
                                                int max_terms = 200) {
  using C = std::complex<double>;
  const double r = x.norm(), th = std::atan2(x[1], x[0]), thy = std::atan2(y[1], y[0]);
  const auto poly = detail::derivative_polynomial(i[0], i[1]);
  auto F = [&](int m) {
    const int am = std::abs(m);
    return C(boost::math::cyl_bessel_i(am, k * r), 0.0) * std::exp(C(0.0, m * th));
  };
  double sum = 0.0;
  double tail = 0.0;
  for (int m = 0; m < max_terms; ++m) {
    const double em = m == 0 ? 1.0 : 2.0;
    const double den = 2.0 * pi * k * boost::math::cyl_bessel_i_prime(m, k);
    C d(0.0);
    for (const auto& [pq, c] : poly) d += c * std::pow(k, pq.first + pq.second) * F(m + pq.first - pq.second);
    const double term = em * (d * std::exp(C(0.0, -m * thy))).real() / den;
    sum += term;
    tail = std::abs(term);
    if (m > 8 && tail < 1e-17 * std::max(1.0, std::abs(sum))) break;
  }
  return sum;
}

/// Options for green_derivative_traces.
struct GreenOptions {
  GreenMethod method = GreenMethod::disk_closed_form;
  double h = 0.02;       ///< mesh size of the multipole mesh
  double sigma = 0.0;    ///< mollifier width (0: 3h)
  double truncation = 6.0;  ///< support radius in units of sigma
  double helmholtz_k2 = 0.0;  ///< q0 ≡ k² > 0 selects the Helmholtz Green function
};

namespace detail {

/// ∂^i of the truncated normalized Gaussian of width σ at z.
template <int Dim>
double gaussian_derivative(const MultiIndex& i, const Vec<Dim>& z, double sigma, double cut, double norm) {
  if (z.norm() >= cut * sigma) return 0.0;
  const double s2 = sigma * std::sqrt(2.0);
  double v = 1.0;
  for (int k = 0; k < Dim; ++k) {
    const double t = z[k] / s2;
    v *= ((i[k] % 2) ? -1.0 : 1.0) * std::pow(s2, -i[k]) * boost::math::hermite(static_cast<unsigned>(i[k]), t) * std::exp(-t * t);
  }
  return v / norm;
}

template <int Dim>
double truncated_gaussian_mass(double sigma, double cut) {
  if constexpr (Dim == 2)
    return 2.0 * pi * sigma * sigma * (1.0 - std::exp(-0.5 * cut * cut));
  else
    return std::pow(2.0 * pi * sigma * sigma, 1.5) *
           (boost::math::erf(cut / std::sqrt(2.0)) - std::sqrt(2.0 / pi) * cut * std::exp(-0.5 * cut * cut));
}

/// ∫ρ_σ(z) I0(k|z|) (2D) or sinh(k|z|)/(k|z|) (3D): mean of a radial Helmholtz solution over ρ.
template <int Dim>
double helmholtz_mollifier_factor(double k, double sigma, double cut) {
  const auto& g = gauss_legendre01(64);
  double num = 0.0, den = 0.0;
  const double R = cut * sigma;
  for (std::size_t q = 0; q < g.x.size(); ++q) {
    const double r = R * g.x[q];
    const double w = g.w[q] * R * std::pow(r, Dim - 1) * std::exp(-0.5 * r * r / (sigma * sigma));
    const double f = (Dim == 2) ? boost::math::cyl_bessel_i(0, k * r) : (r > 0 ? std::sinh(k * r) / (k * r) : 1.0);
    num += w * f;
    den += w;
  }
  return num / den;
}

}  // namespace detail

/**
 * @brief Traces ∂^i_x N(x0, ·)|_∂Ω, 0 <= |i| <= max_order, on the boundary layout of `target`.
 * `D0` is the (possibly variable) background; the closed form needs the unit disk and constant D0.
 */
template <int Dim>
GreenTraceSet<Dim> green_derivative_traces(std::shared_ptr<const VolumeMesh<Dim>> target,
                                           const std::function<double(const Vec<Dim>&)>& D0, bool D0_constant,
                                           const Vec<Dim>& x0, int max_order, const GreenOptions& opt = {}) {
  GreenTraceSet<Dim> set;
  set.method = opt.method;
  set.x0 = x0;
  const auto idx = multi_indices(Dim, max_order, 0);
  const BoundaryTrace<Dim> layout = boundary_layout(target);
  if (!(x0.norm() < 1.0)) throw std::invalid_argument("green_derivative_traces: x0 must be interior");
  if (opt.method == GreenMethod::disk_closed_form) {
    if constexpr (Dim != 2) {
      throw std::invalid_argument("green_derivative_traces: closed form available for the unit disk only");
    } else {
      if (!D0_constant) throw std::invalid_argument("green_derivative_traces: closed form needs constant D0");
      const double d0 = D0(x0);
      const double k = std::sqrt(opt.helmholtz_k2);
      for (const auto& i : idx) {
        BoundaryTrace<2> t = layout;
        for (std::size_t v = 0; v < t.size(); ++v) {
          const Vec<2> y = t.point(v) / t.point(v).norm();
          t.values[static_cast<Eigen::Index>(v)] =
              opt.helmholtz_k2 > 0 ? disk_helmholtz_neumann_derivative(i, x0, y, k) : disk_neumann_derivative(i, x0, y, d0);
        }
        set.traces.emplace(i, std::move(t));
      }
    }
    return set;
  }
  // FEM multipole route.
  std::shared_ptr<const VolumeMesh<Dim>> gm;
  if constexpr (Dim == 2)
    gm = std::make_shared<const VolumeMesh<2>>(hex_disk_mesh(std::max(4, static_cast<int>(std::lround(1.0 / opt.h)))));
  else
    gm = std::make_shared<const VolumeMesh<3>>(ball_mesh(opt.h));
  const double sigma = opt.sigma > 0 ? opt.sigma : 3.0 * opt.h;
  set.sigma = sigma;
  if (x0.norm() + opt.truncation * sigma >= 1.0)
    throw std::invalid_argument("green_derivative_traces: mollifier support touches the boundary");
  NeumannProblem<Dim> p;
  p.mesh = gm;
  const bool helm = opt.helmholtz_k2 > 0;
  if (helm) {
    const double k2 = opt.helmholtz_k2;
    p.potential = [k2](const Vec<Dim>&) { return k2; };
    p.normalization = Normalization::none;
  } else {
    p.diffusion = D0;
  }
  FemOperator<Dim> op(p);
  const double norm = detail::truncated_gaussian_mass<Dim>(sigma, opt.truncation);
  const double c = helm ? detail::helmholtz_mollifier_factor<Dim>(std::sqrt(opt.helmholtz_k2), sigma, opt.truncation) : 1.0;
  const double perimeter = gm->boundary_measure();
  for (const auto& i : idx) {
    const double sign = (i.order() % 2) ? -1.0 : 1.0;
    std::function<double(const Vec<Dim>&)> src = [=](const Vec<Dim>& x) {
      return sign * detail::gaussian_derivative<Dim>(i, (x - x0).eval(), sigma, opt.truncation, norm);
    };
    std::function<double(const Vec<Dim>&)> g;
    Eigen::VectorXd b = op.load(nullptr, src);
    if (!helm) {
      // D0 ∂N/∂n = −(∫source)/|∂Ω|; the discrete load is balanced exactly.
      const double total = b.sum();
      b -= total / perimeter * op.boundary_mass();
    }
    FemSolution<Dim> s = op.solve_load(b);
    BoundaryTrace<Dim> t = s.trace.scaled(1.0 / c);
    if constexpr (Dim == 2) {
      set.traces.emplace(i, resample(t, layout));
    } else {
      if (gm != target) {
        // Nearest-vertex transfer on the sphere.
        BoundaryTrace<3> out = layout;
        for (std::size_t v = 0; v < out.size(); ++v) {
          const Vec<3> y = out.point(v);
          std::size_t best = 0;
          double bd = HUGE_VAL;
          for (std::size_t u = 0; u < t.size(); ++u) {
            const double d = (t.point(u) - y).squaredNorm();
            if (d < bd) {
              bd = d;
              best = u;
            }
          }
          out.values[static_cast<Eigen::Index>(v)] = t.values[static_cast<Eigen::Index>(best)];
        }
        set.traces.emplace(i, std::move(out));
      } else {
        set.traces.emplace(i, std::move(t));
      }
    }
  }
  return set;
}

}  // namespace ptensor
