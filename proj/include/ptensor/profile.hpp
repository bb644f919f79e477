#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "ptensor/meshgeom.hpp"
#include "ptensor/quadrature.hpp"

namespace ptensor {

enum class Regularity { smooth_compact, jump };

inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  return h;
}

/// Radial profile f(r) with first and second derivatives.
struct RadialFunction {
  std::function<std::array<double, 3>(double)> eval;  ///< {f, f', f''}
};

/**
 * @brief Inclusion coefficient (D_1 or q_1) on the reference inclusion B, given in closed form.
 * Evaluated at quadrature points; jump profiles are assumed aligned with the mesh of B.
 */
template <int Dim>
struct InclusionProfile {
  std::string description;
  Regularity regularity = Regularity::smooth_compact;
  std::function<double(const Vec<Dim>&)> value;
  std::function<Vec<Dim>(const Vec<Dim>&)> gradient;  ///< optional
  std::shared_ptr<RadialFunction> radial;             ///< set for radial families
  double sup_norm = 0.0;

  double operator()(const Vec<Dim>& x) const { return value(x); }
  bool has_gradient() const { return static_cast<bool>(gradient); }
  std::uint64_t hash() const { return fnv1a(description); }

  bool is_zero() const { return sup_norm == 0.0; }
};

namespace profiles {

template <int Dim>
InclusionProfile<Dim> zero() {
  InclusionProfile<Dim> p;
  p.description = "zero";
  p.value = [](const Vec<Dim>&) { return 0.0; };
  p.gradient = [](const Vec<Dim>&) { return Vec<Dim>::Zero().eval(); };
  p.radial = std::make_shared<RadialFunction>(RadialFunction{[](double) { return std::array<double, 3>{0, 0, 0}; }});
  p.sup_norm = 0.0;
  return p;
}

/// Builds a radial profile from f(r) supported in [0,1].
template <int Dim>
InclusionProfile<Dim> radial(const std::string& desc, Regularity reg, std::function<std::array<double, 3>(double)> f,
                             double sup) {
  InclusionProfile<Dim> p;
  p.description = desc;
  p.regularity = reg;
  auto rf = std::make_shared<RadialFunction>(RadialFunction{f});
  p.radial = rf;
  p.value = [rf](const Vec<Dim>& x) {
    double r = x.norm();
    return r < 1.0 ? rf->eval(r)[0] : 0.0;
  };
  p.gradient = [rf](const Vec<Dim>& x) {
    double r = x.norm();
    if (r >= 1.0 || r == 0.0) return Vec<Dim>::Zero().eval();
    return (rf->eval(r)[1] / r * x).eval();
  };
  p.sup_norm = sup;
  return p;
}

/// Constant value on the unit disk/ball, zero outside (jump at the boundary).
template <int Dim>
InclusionProfile<Dim> constant(double c) {
  std::ostringstream os;
  os.precision(17);
  os << "constant(" << c << ")";
  auto p = radial<Dim>(os.str(), Regularity::jump, [c](double) { return std::array<double, 3>{c, 0.0, 0.0}; },
                       std::abs(c));
  return p;
}

/// Two-layer piecewise constant: c_core for r < a, c_shell for a <= r < 1.
template <int Dim>
InclusionProfile<Dim> layered(double c_core, double c_shell, double a) {
  std::ostringstream os;
  os.precision(17);
  os << "layered(" << c_core << "," << c_shell << "," << a << ")";
  return radial<Dim>(os.str(), Regularity::jump,
                     [=](double r) { return std::array<double, 3>{r < a ? c_core : c_shell, 0.0, 0.0}; },
                     std::max(std::abs(c_core), std::abs(c_shell)));
}

/// Smooth bump amp * (1 - (r/R)^2)^k for r < R (C^{k-1}, vanishing with k-1 derivatives at R).
template <int Dim>
InclusionProfile<Dim> bump(double amp, int k = 3, double R = 1.0) {
  std::ostringstream os;
  os.precision(17);
  os << "bump(" << amp << "," << k << "," << R << ")";
  auto f = [=](double r) {
    if (r >= R) return std::array<double, 3>{0, 0, 0};
    double s = 1.0 - r * r / (R * R);
    double f0 = amp * std::pow(s, k);
    double ds = -2.0 * r / (R * R), dds = -2.0 / (R * R);
    double f1 = amp * k * std::pow(s, k - 1) * ds;
    double f2 = amp * k * ((k - 1) * std::pow(s, std::max(k - 2, 0)) * ds * ds + std::pow(s, k - 1) * dds);
    return std::array<double, 3>{f0, f1, f2};
  };
  return radial<Dim>(os.str(), Regularity::smooth_compact, f, std::abs(amp));
}

/// Smooth annular bump amp * ((r-r1)(r2-r)/w^2)^k on (r1, r2), w = (r2-r1)/2.
template <int Dim>
InclusionProfile<Dim> ring_bump(double amp, double r1, double r2, int k = 3) {
  if (!(0 <= r1 && r1 < r2 && r2 <= 1.0)) throw std::invalid_argument("ring_bump: need 0 <= r1 < r2 <= 1");
  std::ostringstream os;
  os.precision(17);
  os << "ring_bump(" << amp << "," << r1 << "," << r2 << "," << k << ")";
  const double w2 = 0.25 * (r2 - r1) * (r2 - r1);
  auto f = [=](double r) {
    if (r <= r1 || r >= r2) return std::array<double, 3>{0, 0, 0};
    double g = (r - r1) * (r2 - r) / w2;
    double dg = (r1 + r2 - 2.0 * r) / w2, ddg = -2.0 / w2;
    double f0 = amp * std::pow(g, k);
    double f1 = amp * k * std::pow(g, k - 1) * dg;
    double f2 = amp * k * ((k - 1) * std::pow(g, std::max(k - 2, 0)) * dg * dg + std::pow(g, k - 1) * ddg);
    return std::array<double, 3>{f0, f1, f2};
  };
  return radial<Dim>(os.str(), Regularity::smooth_compact, f, std::abs(amp));
}

/// Linear combination a*p + b*q of two profiles (radial data kept when both are radial).
template <int Dim>
InclusionProfile<Dim> combine(double a, const InclusionProfile<Dim>& p, double b, const InclusionProfile<Dim>& q) {
  std::ostringstream os;
  os.precision(17);
  os << "combine(" << a << "*" << p.description << "," << b << "*" << q.description << ")";
  InclusionProfile<Dim> r;
  r.description = os.str();
  r.regularity = (p.regularity == Regularity::jump || q.regularity == Regularity::jump) ? Regularity::jump
                                                                                         : Regularity::smooth_compact;
  auto pv = p.value, qv = q.value;
  r.value = [=](const Vec<Dim>& x) { return a * pv(x) + b * qv(x); };
  if (p.gradient && q.gradient) {
    auto pg = p.gradient, qg = q.gradient;
    r.gradient = [=](const Vec<Dim>& x) { return (a * pg(x) + b * qg(x)).eval(); };
  }
  if (p.radial && q.radial) {
    auto pr = p.radial, qr = q.radial;
    r.radial = std::make_shared<RadialFunction>(RadialFunction{[=](double s) {
      auto u = pr->eval(s), v = qr->eval(s);
      return std::array<double, 3>{a * u[0] + b * v[0], a * u[1] + b * v[1], a * u[2] + b * v[2]};
    }});
  }
  r.sup_norm = std::abs(a) * p.sup_norm + std::abs(b) * q.sup_norm;
  return r;
}

/**
 * @brief Random smooth (non-radial) profile (1-|x|^2)^3 * (c0 + c.x + x^T C x), scaled so
 * that its supremum over B is below `upper` and its minimum above `-lower`.
 */
template <int Dim>
InclusionProfile<Dim> random_smooth(std::uint64_t seed, double upper, double lower) {
  if (!(upper >= 0.0) || !(lower >= 0.0)) throw std::invalid_argument("random_smooth: bounds must be nonnegative magnitudes");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> U(-1.0, 1.0);
  double c0 = U(rng);
  Vec<Dim> c1;
  for (int k = 0; k < Dim; ++k) c1[k] = U(rng);
  Eigen::Matrix<double, Dim, Dim> C;
  for (int a = 0; a < Dim; ++a)
    for (int b = 0; b < Dim; ++b) C(a, b) = U(rng);
  C = 0.5 * (C + C.transpose()).eval();
  auto base = [=](const Vec<Dim>& x) {
    double s = 1.0 - x.squaredNorm();
    if (s <= 0) return 0.0;
    return s * s * s * (c0 + c1.dot(x) + x.dot(C * x));
  };
  auto base_grad = [=](const Vec<Dim>& x) -> Vec<Dim> {
    double s = 1.0 - x.squaredNorm();
    if (s <= 0) return Vec<Dim>::Zero();
    double poly = c0 + c1.dot(x) + x.dot(C * x);
    Vec<Dim> dp = c1 + 2.0 * C * x;
    return (s * s * s * dp - 6.0 * s * s * poly * x).eval();
  };
  // Scale from a sampled extremum estimate on a fine lattice.
  double mx = 0.0, mn = 0.0;
  const int n = (Dim == 2) ? 81 : 31;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      for (int k = 0; k < (Dim == 2 ? 1 : n); ++k) {
        Vec<Dim> x;
        x[0] = -1.0 + 2.0 * i / (n - 1);
        x[1] = -1.0 + 2.0 * j / (n - 1);
        if constexpr (Dim == 3) x[2] = -1.0 + 2.0 * k / (n - 1);
        double v = base(x);
        mx = std::max(mx, v);
        mn = std::min(mn, v);
      }
  double scale = 1.0;
  if (mx > 0) scale = std::min(scale, upper / mx);
  if (mn < 0) scale = std::min(scale, lower / (-mn));
  scale *= 0.95;
  std::ostringstream os;
  os << "random_smooth(" << seed << "," << upper << "," << lower << ")";
  InclusionProfile<Dim> p;
  p.description = os.str();
  p.regularity = Regularity::smooth_compact;
  p.value = [=](const Vec<Dim>& x) { return scale * base(x); };
  p.gradient = [=](const Vec<Dim>& x) { return (scale * base_grad(x)).eval(); };
  p.sup_norm = scale * std::max(mx, -mn) / 0.95 * 1.0;
  return p;
}

/**
 * @brief Mollified constant inclusion: rho_eta * (chi^eta c), where chi^eta is the indicator of
 * points at distance > eta from the unit sphere and rho is the standard C^inf bump mollifier.
 * The radial profile is evaluated by a one-dimensional integral over the mollifier radius.
 */
template <int Dim>
InclusionProfile<Dim> mollified_constant(double c, double eta, int npts = 48) {
  if (!(eta > 0 && eta < 0.5)) throw std::invalid_argument("mollified_constant: eta must lie in (0, 0.5)");
  const double R = 1.0 - eta;
  // Normalisation of the radial mollifier weight w(t) = exp(-1/(1-t^2)) on the unit ball.
  const auto& g = gauss_legendre01(npts);
  auto w = [](double t) { return t < 1.0 ? std::exp(-1.0 / (1.0 - t * t)) : 0.0; };
  double norm = 0.0;
  const double sphere = (Dim == 2) ? 2.0 * pi : 4.0 * pi;
  for (int k = 0; k < npts; ++k) {
    double t = g.x[k];
    norm += g.w[k] * w(t) * sphere * std::pow(t, Dim - 1);
  }
  auto frac = [R](double r, double rho) {
    // Fraction of the sphere of radius rho around a point at distance r lying inside radius R.
    if (rho == 0.0) return r < R ? 1.0 : 0.0;
    if (r + rho <= R) return 1.0;
    if (r == 0.0) return rho < R ? 1.0 : 0.0;
    if (r - rho >= R || rho - r >= R) return (rho - r >= R) ? 0.0 : 0.0;
    double cosa = (r * r + rho * rho - R * R) / (2.0 * r * rho);
    cosa = std::clamp(cosa, -1.0, 1.0);
    if constexpr (Dim == 2)
      return std::acos(cosa) / pi;
    else
      return 0.5 * (1.0 - cosa);
  };
  auto direct = [=](double r) {
    // Split the radial integral at the kink rho = |R - r| of the sphere fraction.
    const double tk = std::clamp(std::abs(R - r) / eta, 0.0, 1.0);
    double s = 0.0;
    for (auto [lo, hi] : {std::pair{0.0, tk}, std::pair{tk, 1.0}}) {
      if (hi <= lo) continue;
      for (int k = 0; k < npts; ++k) {
        const double t = lo + (hi - lo) * g.x[k];
        s += (hi - lo) * g.w[k] * w(t) * sphere * std::pow(t, Dim - 1) * frac(r, eta * t);
      }
    }
    return s / norm;
  };
  // Tabulated on the transition shell [R - eta, R + eta] with cubic Hermite interpolation.
  constexpr int table_size = 4000;
  auto vals = std::make_shared<std::vector<double>>(table_size + 1);
  auto ders = std::make_shared<std::vector<double>>(table_size + 1);
  const double r0 = R - eta, dr = 2.0 * eta / table_size;
  for (int k = 0; k <= table_size; ++k) (*vals)[k] = direct(r0 + k * dr);
  for (int k = 0; k <= table_size; ++k) {
    const int a = std::max(0, k - 1), b = std::min(table_size, k + 1);
    (*ders)[k] = ((*vals)[b] - (*vals)[a]) / ((b - a) * dr);
  }
  auto f = [=](double r) {
    if (r <= r0) return std::array<double, 3>{c, 0.0, 0.0};
    if (r >= R + eta) return std::array<double, 3>{0.0, 0.0, 0.0};
    const double u = (r - r0) / dr;
    const int k = std::min(table_size - 1, static_cast<int>(u));
    const double t = u - k;
    const double h00 = 2 * t * t * t - 3 * t * t + 1, h10 = t * t * t - 2 * t * t + t;
    const double h01 = -2 * t * t * t + 3 * t * t, h11 = t * t * t - t * t;
    const double v = h00 * (*vals)[k] + h10 * dr * (*ders)[k] + h01 * (*vals)[k + 1] + h11 * dr * (*ders)[k + 1];
    const double d00 = 6 * t * t - 6 * t, d10 = 3 * t * t - 4 * t + 1, d01 = -d00, d11 = 3 * t * t - 2 * t;
    const double dv = (d00 * (*vals)[k] + d01 * (*vals)[k + 1]) / dr + d10 * (*ders)[k] + d11 * (*ders)[k + 1];
    return std::array<double, 3>{c * v, c * dv, 0.0};
  };
  std::ostringstream os;
  os.precision(17);
  os << "mollified_constant(" << c << "," << eta << ")";
  return radial<Dim>(os.str(), Regularity::smooth_compact, f, std::abs(c));
}

}  // namespace profiles

/**
 * @brief Background data at the inclusion centre: D_0^{-1} as a polynomial in (x - x0)
 * (coefficients of (x-x0)^m, i.e. derivatives divided by m!), plus Helmholtz data.
 */
template <int Dim>
struct BackgroundModel {
  Vec<Dim> x0 = Vec<Dim>::Zero();
  std::vector<std::pair<MultiIndex, double>> inv_coeffs{{MultiIndex::zero(Dim), 1.0}};
  double q0 = 0.0;
  double eta = 2.0;

  static BackgroundModel constant(double D0, const Vec<Dim>& x0 = Vec<Dim>::Zero()) {
    if (!(D0 > 0)) throw std::invalid_argument("BackgroundModel: D0 must be positive");
    BackgroundModel m;
    m.x0 = x0;
    m.inv_coeffs = {{MultiIndex::zero(Dim), 1.0 / D0}};
    return m;
  }

  /// D_0^{-1}(x) = a0 + a.(x - x0).
  static BackgroundModel linear_inverse(double a0, const Vec<Dim>& a, const Vec<Dim>& x0 = Vec<Dim>::Zero()) {
    if (!(a0 > 0)) throw std::invalid_argument("BackgroundModel: D0(x0) must be positive");
    BackgroundModel m;
    m.x0 = x0;
    m.inv_coeffs = {{MultiIndex::zero(Dim), a0}};
    for (int k = 0; k < Dim; ++k)
      if (a[k] != 0.0) m.inv_coeffs.push_back({MultiIndex::unit(Dim, k), a[k]});
    return m;
  }

  bool is_constant() const {
    for (const auto& [m, c] : inv_coeffs)
      if (m.order() > 0 && c != 0.0) return false;
    return true;
  }

  double D0inv_at(const Vec<Dim>& x) const {
    double s = 0.0;
    Vec<Dim> d = x - x0;
    for (const auto& [m, c] : inv_coeffs) s += c * monomial<Dim>(m, d);
    return s;
  }
  double D0_at(const Vec<Dim>& x) const {
    double v = D0inv_at(x);
    if (!(v > 0)) throw std::domain_error("BackgroundModel: D0^{-1} not positive");
    return 1.0 / v;
  }
  double D0_center() const { return 1.0 / D0inv_at(x0); }

  /// Derivative ∂^m D_0^{-1}(x0).
  double D0inv_derivative(const MultiIndex& m) const {
    for (const auto& [k, c] : inv_coeffs)
      if (k == m) return c * m.factorial();
    return 0.0;
  }

  std::string description() const {
    std::ostringstream os;
    os.precision(17);
    os << "background(x0=";
    for (int k = 0; k < Dim; ++k) os << (k ? "," : "") << x0[k];
    os << ";inv=";
    for (const auto& [m, c] : inv_coeffs) os << m.str() << ":" << c << ";";
    os << "q0=" << q0 << ";eta=" << eta << ")";
    return os.str();
  }
};

}  // namespace ptensor
