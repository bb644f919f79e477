#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <mutex>
#include <stdexcept>
#include <vector>

#include <boost/math/special_functions/legendre.hpp>

namespace ptensor {

/** @brief 1D Gauss-Legendre rule mapped to [0,1]. */
struct LineRule {
  std::vector<double> x;
  std::vector<double> w;
};

inline const LineRule& gauss_legendre01(int n) {
  static std::mutex mtx;
  static std::map<int, LineRule> cache;
  std::lock_guard<std::mutex> lock(mtx);
  auto it = cache.find(n);
  if (it != cache.end()) return it->second;
  if (n < 1) throw std::invalid_argument("gauss_legendre01: n must be >= 1");
  LineRule r;
  auto zeros = boost::math::legendre_p_zeros<double>(n);
  std::vector<double> xs, ws;
  for (double z : zeros) {
    double dp = boost::math::legendre_p_prime(n, z);
    double w = 2.0 / ((1.0 - z * z) * dp * dp);
    if (z == 0.0) {
      xs.push_back(0.0);
      ws.push_back(w);
    } else {
      xs.push_back(z);
      ws.push_back(w);
      xs.push_back(-z);
      ws.push_back(w);
    }
  }
  std::vector<std::size_t> order(xs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return xs[a] < xs[b]; });
  for (auto i : order) {
    r.x.push_back(0.5 * (xs[i] + 1.0));
    r.w.push_back(0.5 * ws[i]);
  }
  return cache.emplace(n, std::move(r)).first->second;
}

/**
 * @brief Quadrature on the reference simplex in barycentric form.
 * Weights sum to one; multiply by the cell measure.
 */
template <int Dim>
struct SimplexRule {
  std::vector<std::array<double, Dim + 1>> bary;
  std::vector<double> w;
  int degree = 0;
  std::size_t size() const { return w.size(); }
};

namespace detail {

template <int Dim>
SimplexRule<Dim> conical_rule(int n) {
  const auto& g = gauss_legendre01(n);
  SimplexRule<Dim> r;
  if constexpr (Dim == 2) {
    for (int a = 0; a < n; ++a)
      for (int b = 0; b < n; ++b) {
        double u = g.x[a], v = g.x[b] * (1.0 - u);
        r.bary.push_back({1.0 - u - v, u, v});
        r.w.push_back(2.0 * g.w[a] * g.w[b] * (1.0 - g.x[a]));
      }
    r.degree = 2 * n - 2;
  } else {
    for (int a = 0; a < n; ++a)
      for (int b = 0; b < n; ++b)
        for (int c = 0; c < n; ++c) {
          double u = g.x[a];
          double v = g.x[b] * (1.0 - u);
          double t = g.x[c] * (1.0 - u - v);
          r.bary.push_back({1.0 - u - v - t, u, v, t});
          r.w.push_back(6.0 * g.w[a] * g.w[b] * g.w[c] * (1.0 - g.x[a]) * (1.0 - g.x[a]) *
                        (1.0 - g.x[b]));
        }
    r.degree = 2 * n - 3;
  }
  return r;
}

inline SimplexRule<2> triangle_rule(int degree) {
  SimplexRule<2> r;
  if (degree <= 1) {
    r.bary = {{1.0 / 3, 1.0 / 3, 1.0 / 3}};
    r.w = {1.0};
    r.degree = 1;
  } else if (degree == 2) {
    r.bary = {{2.0 / 3, 1.0 / 6, 1.0 / 6}, {1.0 / 6, 2.0 / 3, 1.0 / 6}, {1.0 / 6, 1.0 / 6, 2.0 / 3}};
    r.w = {1.0 / 3, 1.0 / 3, 1.0 / 3};
    r.degree = 2;
  } else if (degree <= 4) {
    const double a = 0.445948490915965, wa = 0.223381589678011;
    const double b = 0.091576213509771, wb = 0.109951743655322;
    r.bary = {{a, a, 1 - 2 * a}, {a, 1 - 2 * a, a}, {1 - 2 * a, a, a},
              {b, b, 1 - 2 * b}, {b, 1 - 2 * b, b}, {1 - 2 * b, b, b}};
    r.w = {wa, wa, wa, wb, wb, wb};
    r.degree = 4;
  } else {
    r = conical_rule<2>((degree + 3) / 2);
  }
  return r;
}

inline SimplexRule<3> tetra_rule(int degree) {
  SimplexRule<3> r;
  if (degree <= 1) {
    r.bary = {{0.25, 0.25, 0.25, 0.25}};
    r.w = {1.0};
    r.degree = 1;
  } else if (degree == 2) {
    const double a = 0.5854101966249685, b = 0.1381966011250105;
    r.bary = {{a, b, b, b}, {b, a, b, b}, {b, b, a, b}, {b, b, b, a}};
    r.w = {0.25, 0.25, 0.25, 0.25};
    r.degree = 2;
  } else if (degree <= 4) {
    // Keast 11-point rule, weights normalised to unit volume.
    const double w0 = -0.0789333333333333, w1 = 0.0457333333333333, w2 = 0.1493333333333333;
    const double a = 0.0714285714285714, b = 0.785714285714286;
    const double c = 0.399403576166799, d = 0.100596423833201;
    r.bary = {{0.25, 0.25, 0.25, 0.25},
              {b, a, a, a}, {a, b, a, a}, {a, a, b, a}, {a, a, a, b},
              {c, c, d, d}, {c, d, c, d}, {c, d, d, c}, {d, c, c, d}, {d, c, d, c}, {d, d, c, c}};
    r.w = {w0, w1, w1, w1, w1, w2, w2, w2, w2, w2, w2};
    r.degree = 4;
  } else {
    r = conical_rule<3>((degree + 4) / 2);
  }
  return r;
}

}  // namespace detail

/** @brief Rule on the reference simplex integrating polynomials of the given degree exactly. */
template <int Dim>
const SimplexRule<Dim>& simplex_rule(int degree) {
  static_assert(Dim == 2 || Dim == 3, "simplex_rule: Dim must be 2 or 3");
  static std::mutex mtx;
  static std::map<int, SimplexRule<Dim>> cache;
  std::lock_guard<std::mutex> lock(mtx);
  auto it = cache.find(degree);
  if (it != cache.end()) return it->second;
  SimplexRule<Dim> r;
  if constexpr (Dim == 2)
    r = detail::triangle_rule(degree);
  else
    r = detail::tetra_rule(degree);
  return cache.emplace(degree, std::move(r)).first->second;
}

}  // namespace ptensor
