#pragma once

#include <array>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

#include "ptensor/meshgeom.hpp"
#include "ptensor/quadrature.hpp"

namespace ptensor {

template <int Dim>
double fundamental_solution(const Vec<Dim>& x) {
  const double r = x.norm();
  if (r == 0.0) throw std::domain_error("fundamental_solution: singular at the origin");
  if constexpr (Dim == 2)
    return -std::log(r) / (2.0 * pi);
  else
    return 1.0 / (4.0 * pi * r);
}

template <int Dim>
Vec<Dim> grad_fundamental_solution(const Vec<Dim>& x) {
  const double r2 = x.squaredNorm();
  if (r2 == 0.0) throw std::domain_error("grad_fundamental_solution: singular at the origin");
  if constexpr (Dim == 2)
    return -x / (2.0 * pi * r2);
  else
    return -x / (4.0 * pi * r2 * std::sqrt(r2));
}

enum class Regularization { none, subdivided_duffy };

/// Options for volume potentials with a singular target.
struct KernelEval {
  int dim = 2;
  Regularization regularization = Regularization::subdivided_duffy;
  double near_field_threshold = 1.0;  ///< in multiples of the cell diameter
  int far_degree = 4;
  int mid_degree = 8;       ///< rule used between threshold and 2*threshold
  int radial_points = 8;    ///< Gauss points along the cone axis
  int facet_points = 8;     ///< Gauss points per facet interval (2D)
  double tol = 1e-8;        ///< absolute tolerance per cell
  int max_depth = 40;
};

namespace detail {

/// Adaptive vector-valued Gauss integration on [a,b] by bisection.
template <class F>
void adaptive_line(F&& f, double a, double b, int npts, double tol, int depth, Eigen::Ref<Eigen::VectorXd> out,
                   Eigen::VectorXd& whole, bool have_whole) {
  const auto& g = gauss_legendre01(npts);
  auto rule = [&](double lo, double hi, Eigen::VectorXd& acc) {
    acc.setZero();
    for (int k = 0; k < npts; ++k) acc += (hi - lo) * g.w[k] * f(lo + (hi - lo) * g.x[k]);
  };
  if (!have_whole) {
    whole.resize(out.size());
    rule(a, b, whole);
  }
  const double m = 0.5 * (a + b);
  Eigen::VectorXd left(out.size()), right(out.size());
  rule(a, m, left);
  rule(m, b, right);
  const double err = (left + right - whole).cwiseAbs().maxCoeff();
  if (err <= tol || depth <= 0) {
    out += left + right;
    return;
  }
  adaptive_line(f, a, m, npts, 0.5 * tol, depth - 1, out, left, true);
  adaptive_line(f, m, b, npts, 0.5 * tol, depth - 1, out, right, true);
}

template <int Dim, class F>
void simplex_rule_apply(const std::array<Vec<Dim>, Dim + 1>& v, const SimplexRule<Dim>& rule, int K, F& f,
                        Eigen::VectorXd& out, Eigen::VectorXd& tmp) {
  Eigen::Matrix<double, Dim, Dim> J;
  for (int k = 0; k < Dim; ++k) J.col(k) = v[k + 1] - v[0];
  const double vol = std::abs(J.determinant()) / (Dim == 2 ? 2.0 : 6.0);
  out = Eigen::VectorXd::Zero(K);
  for (std::size_t q = 0; q < rule.size(); ++q) {
    Vec<Dim> x = Vec<Dim>::Zero();
    for (int a = 0; a <= Dim; ++a) x += rule.bary[q][a] * v[a];
    f(x, tmp);
    out += rule.w[q] * tmp;
  }
  out *= vol;
}

/// Adaptive longest-edge bisection for a target y strictly outside the simplex.
template <int Dim, class F>
void adaptive_outside_simplex(const std::array<Vec<Dim>, Dim + 1>& v, int K, F& f, const Eigen::VectorXd& whole,
                              double tol, int depth, Eigen::Ref<Eigen::VectorXd> out) {
  int ia = 0, ib = 1;
  double best = -1.0;
  for (int a = 0; a <= Dim; ++a)
    for (int b = a + 1; b <= Dim; ++b)
      if ((v[a] - v[b]).squaredNorm() > best) {
        best = (v[a] - v[b]).squaredNorm();
        ia = a;
        ib = b;
      }
  const Vec<Dim> mid = 0.5 * (v[ia] + v[ib]);
  std::array<Vec<Dim>, Dim + 1> l = v, r = v;
  l[ib] = mid;
  r[ia] = mid;
  const auto& rule = simplex_rule<Dim>(4);
  Eigen::VectorXd pl, pr, tmp(K);
  simplex_rule_apply<Dim>(l, rule, K, f, pl, tmp);
  simplex_rule_apply<Dim>(r, rule, K, f, pr, tmp);
  if ((pl + pr - whole).cwiseAbs().maxCoeff() <= tol || depth <= 0) {
    out += pl + pr;
    return;
  }
  adaptive_outside_simplex<Dim>(l, K, f, pl, 0.5 * tol, depth - 1, out);
  adaptive_outside_simplex<Dim>(r, K, f, pr, 0.5 * tol, depth - 1, out);
}

}  // namespace detail

/**
 * @brief Integrates a vector-valued integrand over a simplex whose integrand may be
 * singular like |x-y|^{1-d} at the point y.
 *
 * The simplex is split into signed cones with apex y, one per facet; each cone is
 * parameterised by x = y + s (p - y), with p on the facet, and the radial Jacobian
 * cancels the singularity. The facet parameter is integrated adaptively.
 */
template <int Dim, class F>
void integrate_singular_simplex(const std::array<Vec<Dim>, Dim + 1>& v, const Vec<Dim>& y, int K, F&& f,
                                Eigen::Ref<Eigen::VectorXd> out, const KernelEval& opt) {
  out.setZero();
  const auto& gs = gauss_legendre01(opt.radial_points);
  // Orientation of the simplex.
  Eigen::Matrix<double, Dim, Dim> J;
  for (int k = 0; k < Dim; ++k) J.col(k) = v[k + 1] - v[0];
  const double orient = J.determinant() > 0 ? 1.0 : -1.0;
  Eigen::VectorXd tmp(K), acc(K);
  if constexpr (Dim == 2) {
    for (int e = 0; e < 3; ++e) {
      const Vec<2>& a = v[(e + 1) % 3];
      const Vec<2>& b = v[(e + 2) % 3];
      const Vec<2> ay = a - y, by = b - y;
      const double det = ay[0] * by[1] - ay[1] * by[0];
      const double scale = (b - a).norm() * std::max(ay.norm(), by.norm());
      if (std::abs(det) <= 1e-14 * scale) continue;
      auto ft = [&](double t) -> Eigen::VectorXd {
        const Vec<2> w = ay + t * (b - a);
        acc.setZero();
        for (int q = 0; q < opt.radial_points; ++q) {
          // s = u^2 smooths logarithmic integrands.
          const double u = gs.x[q];
          const double s = u * u;
          const Vec<2> x = y + s * w;
          f(x, tmp);
          acc += gs.w[q] * 2.0 * u * s * tmp;
        }
        return acc;
      };
      Eigen::VectorXd part = Eigen::VectorXd::Zero(K), whole;
      const double tol = opt.tol / std::max(std::abs(det), 1e-300);
      detail::adaptive_line(ft, 0.0, 1.0, opt.facet_points, tol, opt.max_depth, part, whole, false);
      out += orient * det * part;
    }
  } else {
    const auto& tri = simplex_rule<2>(4);
    static const int faces[4][3] = {{1, 2, 3}, {0, 3, 2}, {0, 1, 3}, {0, 2, 1}};
    for (int fi = 0; fi < 4; ++fi) {
      const Vec<3>& a = v[faces[fi][0]];
      const Vec<3>& b = v[faces[fi][1]];
      const Vec<3>& c = v[faces[fi][2]];
      const double det = (a - y).dot((b - a).cross(c - a));
      const double scale = (b - a).cross(c - a).norm() * (a - y).norm();
      if (std::abs(det) <= 1e-14 * std::max(scale, 1e-300)) continue;
      auto cone_point = [&](double al, double be) -> Eigen::VectorXd {
        const Vec<3> w = (a - y) + al * (b - a) + be * (c - a);
        Eigen::VectorXd r = Eigen::VectorXd::Zero(K);
        for (int q = 0; q < opt.radial_points; ++q) {
          const double s = gs.x[q];
          const Vec<3> x = y + s * w;
          f(x, tmp);
          r += gs.w[q] * s * s * tmp;
        }
        return r;
      };
      // Integral over reference triangle (area 1/2) with recursive 4-way refinement.
      std::function<Eigen::VectorXd(const std::array<Eigen::Vector2d, 3>&)> rule_on =
          [&](const std::array<Eigen::Vector2d, 3>& P) {
            Eigen::VectorXd r = Eigen::VectorXd::Zero(K);
            const double area = 0.5 * std::abs((P[1] - P[0])[0] * (P[2] - P[0])[1] - (P[1] - P[0])[1] * (P[2] - P[0])[0]);
            for (std::size_t q = 0; q < tri.size(); ++q) {
              Eigen::Vector2d z = tri.bary[q][0] * P[0] + tri.bary[q][1] * P[1] + tri.bary[q][2] * P[2];
              r += area * tri.w[q] * cone_point(z[0], z[1]);
            }
            return r;
          };
      std::function<void(const std::array<Eigen::Vector2d, 3>&, const Eigen::VectorXd&, double, int)> refine =
          [&](const std::array<Eigen::Vector2d, 3>& P, const Eigen::VectorXd& whole, double tol, int depth) {
            Eigen::Vector2d m01 = 0.5 * (P[0] + P[1]), m12 = 0.5 * (P[1] + P[2]), m20 = 0.5 * (P[2] + P[0]);
            std::array<std::array<Eigen::Vector2d, 3>, 4> ch{{{P[0], m01, m20}, {m01, P[1], m12}, {m20, m12, P[2]}, {m01, m12, m20}}};
            std::array<Eigen::VectorXd, 4> parts;
            Eigen::VectorXd sum = Eigen::VectorXd::Zero(K);
            for (int k = 0; k < 4; ++k) {
              parts[k] = rule_on(ch[k]);
              sum += parts[k];
            }
            if ((sum - whole).cwiseAbs().maxCoeff() <= tol || depth <= 0) {
              out += orient * det * sum;
              return;
            }
            for (int k = 0; k < 4; ++k) refine(ch[k], parts[k], 0.25 * tol, depth - 1);
          };
      std::array<Eigen::Vector2d, 3> ref{Eigen::Vector2d(0, 0), Eigen::Vector2d(1, 0), Eigen::Vector2d(0, 1)};
      refine(ref, rule_on(ref), opt.tol / std::max(std::abs(det), 1e-300), std::min(opt.max_depth, 7));
    }
  }
}

/**
 * @brief Integral over cell c of f(x) (K components) where f contains a kernel singular at y.
 * Chooses the standard rule far away and cone quadrature near the target.
 */
template <int Dim, class F>
void integrate_cell(const VolumeMesh<Dim>& mesh, std::size_t c, const Vec<Dim>& y, int K, F&& f,
                    Eigen::Ref<Eigen::VectorXd> out, const KernelEval& opt) {
  const double dist = (y - mesh.centroids[c]).norm();
  const double diam = mesh.cell_diameters[c];
  if (opt.regularization == Regularization::subdivided_duffy && dist < opt.near_field_threshold * diam) {
    const auto v = mesh.cell_vertices(c);
    if constexpr (Dim == 3) {
      // Signed cones from an exterior apex cancel heavily; bisect the cell instead.
      Eigen::Matrix<double, 3, 3> J;
      for (int k = 0; k < 3; ++k) J.col(k) = v[k + 1] - v[0];
      const Vec<3> lam = J.partialPivLu().solve(Vec<3>(y - v[0]));
      const double lmin = std::min({1.0 - lam.sum(), lam[0], lam[1], lam[2]});
      if (lmin < -1e-6) {
        Eigen::VectorXd whole, tmp(K);
        detail::simplex_rule_apply<3>(v, simplex_rule<3>(4), K, f, whole, tmp);
        out.setZero();
        detail::adaptive_outside_simplex<3>(v, K, f, whole, opt.tol, 24, out);
        return;
      }
    }
    integrate_singular_simplex<Dim>(v, y, K, f, out, opt);
    return;
  }
  const auto& rule = simplex_rule<Dim>(dist < 2.0 * opt.near_field_threshold * diam ? opt.mid_degree : opt.far_degree);
  out.setZero();
  Eigen::VectorXd tmp(K);
  for (std::size_t q = 0; q < rule.size(); ++q) {
    const Vec<Dim> x = mesh.map_point(c, rule.bary[q]);
    if ((x - y).squaredNorm() == 0.0) continue;
    f(x, tmp);
    out += rule.w[q] * tmp;
  }
  out *= mesh.cell_measures[c];
}

/// Cellwise (P0) vector density F and scalar density q indexed by cell.
template <int Dim>
using CellVectorDensity = std::vector<Vec<Dim>>;

/** @brief ∫_B F(x)·∇_xΓ(x−y) dx for a cellwise constant vector density. */
template <int Dim>
double newtonian_grad_potential(const VolumeMesh<Dim>& mesh, const CellVectorDensity<Dim>& F, const Vec<Dim>& y,
                                const KernelEval& opt = {}) {
  if (F.size() != mesh.num_cells()) throw std::invalid_argument("newtonian_grad_potential: density size mismatch");
  double s = 0.0;
  Eigen::VectorXd out(1);
  for (std::size_t c = 0; c < mesh.num_cells(); ++c) {
    if (F[c].squaredNorm() == 0.0) continue;
    const Vec<Dim> Fc = F[c];
    integrate_cell<Dim>(mesh, c, y, 1,
                        [&](const Vec<Dim>& x, Eigen::VectorXd& r) { r[0] = Fc.dot(grad_fundamental_solution<Dim>(x - y)); },
                        out, opt);
    s += out[0];
  }
  return s;
}

/** @brief ∫_B F(x)·∇_xΓ(x−y) dx for a pointwise vector density. */
template <int Dim>
double newtonian_grad_potential(const VolumeMesh<Dim>& mesh, const std::function<Vec<Dim>(const Vec<Dim>&)>& F,
                                const Vec<Dim>& y, const KernelEval& opt = {}) {
  double s = 0.0;
  Eigen::VectorXd out(1);
  for (std::size_t c = 0; c < mesh.num_cells(); ++c) {
    integrate_cell<Dim>(mesh, c, y, 1,
                        [&](const Vec<Dim>& x, Eigen::VectorXd& r) { r[0] = F(x).dot(grad_fundamental_solution<Dim>(x - y)); },
                        out, opt);
    s += out[0];
  }
  return s;
}

/** @brief ∫_B q(x) Γ(x−y) dx for a cellwise constant density. */
template <int Dim>
double newtonian_potential(const VolumeMesh<Dim>& mesh, const std::vector<double>& q, const Vec<Dim>& y,
                           const KernelEval& opt = {}) {
  if (q.size() != mesh.num_cells()) throw std::invalid_argument("newtonian_potential: density size mismatch");
  double s = 0.0;
  Eigen::VectorXd out(1);
  for (std::size_t c = 0; c < mesh.num_cells(); ++c) {
    if (q[c] == 0.0) continue;
    const double qc = q[c];
    integrate_cell<Dim>(mesh, c, y, 1, [&](const Vec<Dim>& x, Eigen::VectorXd& r) { r[0] = qc * fundamental_solution<Dim>(x - y); },
                        out, opt);
    s += out[0];
  }
  return s;
}

template <int Dim>
double newtonian_potential(const VolumeMesh<Dim>& mesh, const std::function<double(const Vec<Dim>&)>& q, const Vec<Dim>& y,
                           const KernelEval& opt = {}) {
  double s = 0.0;
  Eigen::VectorXd out(1);
  for (std::size_t c = 0; c < mesh.num_cells(); ++c) {
    integrate_cell<Dim>(mesh, c, y, 1, [&](const Vec<Dim>& x, Eigen::VectorXd& r) { r[0] = q(x) * fundamental_solution<Dim>(x - y); },
                        out, opt);
    s += out[0];
  }
  return s;
}

}  // namespace ptensor
