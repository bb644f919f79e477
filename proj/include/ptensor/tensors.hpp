#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <memory>
#include <random>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "ptensor/kernels.hpp"
#include "ptensor/lippmann.hpp"
#include "ptensor/meshgeom.hpp"
#include "ptensor/profile.hpp"

namespace ptensor {

enum class TensorKind { M, M2, M_eps, layer_M, Q, Q_eta };

inline std::string to_string(TensorKind k) {
  switch (k) {
    case TensorKind::M: return "M";
    case TensorKind::M2: return "M2";
    case TensorKind::M_eps: return "M_eps";
    case TensorKind::layer_M: return "layer_M";
    case TensorKind::Q: return "Q";
    case TensorKind::Q_eta: return "Q_eta";
  }
  return "unknown";
}

struct Provenance {
  std::uint64_t profile_hash = 0;
  std::uint64_t mesh_hash = 0;
  double solver_tol = 0.0;
  double kernel_tol = 0.0;
  std::string form;  ///< which formula produced the entries
};

struct FourIndex {
  MultiIndex i, j, k;
  int l = 0;
  bool operator<(const FourIndex& o) const {
    if (i != o.i) return i < o.i;
    if (j != o.j) return j < o.j;
    if (k != o.k) return k < o.k;
    return l < o.l;
  }
};

/**
 * @brief Multi-index keyed coefficient table. Two-index tensors use `entries`
 * (rows indexed by i, columns by j); M² uses `entries4`.
 */
struct PolarizationTensor {
  TensorKind kind = TensorKind::M;
  int dim = 2;
  int max_order = 1;
  double eps = 0.0, eta = 0.0;
  std::vector<MultiIndex> rows, cols;
  Eigen::MatrixXd entries;
  std::map<FourIndex, double> entries4;
  Provenance provenance;

  int row_of(const MultiIndex& i) const {
    for (std::size_t r = 0; r < rows.size(); ++r)
      if (rows[r] == i) return static_cast<int>(r);
    throw std::out_of_range("PolarizationTensor: index " + i.str() + " not stored");
  }
  int col_of(const MultiIndex& j) const {
    for (std::size_t r = 0; r < cols.size(); ++r)
      if (cols[r] == j) return static_cast<int>(r);
    throw std::out_of_range("PolarizationTensor: index " + j.str() + " not stored");
  }
  double at(const MultiIndex& i, const MultiIndex& j) const { return entries(row_of(i), col_of(j)); }
  double at(const MultiIndex& i, const MultiIndex& j, const MultiIndex& k, int l) const {
    auto it = entries4.find({i, j, k, l});
    if (it == entries4.end()) throw std::out_of_range("PolarizationTensor: four-index entry not stored");
    return it->second;
  }
  bool has(const MultiIndex& i, const MultiIndex& j) const {
    return std::find(rows.begin(), rows.end(), i) != rows.end() && std::find(cols.begin(), cols.end(), j) != cols.end();
  }

  /// Block with |i| = |j| = 1.
  Eigen::MatrixXd first_order_block() const {
    Eigen::MatrixXd B(dim, dim);
    for (int a = 0; a < dim; ++a)
      for (int b = 0; b < dim; ++b) B(a, b) = at(MultiIndex::unit(dim, a), MultiIndex::unit(dim, b));
    return B;
  }

  bool all_finite() const {
    if (!entries.allFinite()) return false;
    for (const auto& [k, v] : entries4)
      if (!std::isfinite(v)) return false;
    return true;
  }
};

inline nlohmann::json index_json(const MultiIndex& m) {
  nlohmann::json a = nlohmann::json::array();
  for (int k = 0; k < m.dim; ++k) a.push_back(m.e[k]);
  return a;
}

inline nlohmann::json to_json(const PolarizationTensor& t) {
  nlohmann::json j;
  j["kind"] = to_string(t.kind);
  j["dimension"] = t.dim;
  j["max_order"] = t.max_order;
  if (t.kind == TensorKind::M_eps || t.kind == TensorKind::Q_eta) j["eps"] = t.eps;
  if (t.kind == TensorKind::Q_eta) j["eta"] = t.eta;
  if (t.kind == TensorKind::M2) {
    nlohmann::json e = nlohmann::json::array();
    for (const auto& [k, v] : t.entries4)
      e.push_back({{"i", index_json(k.i)}, {"j", index_json(k.j)}, {"k", index_json(k.k)}, {"l", k.l}, {"value", v}});
    j["entries"] = e;
  } else {
    nlohmann::json r = nlohmann::json::array(), c = nlohmann::json::array(), e = nlohmann::json::array();
    for (const auto& m : t.rows) r.push_back(index_json(m));
    for (const auto& m : t.cols) c.push_back(index_json(m));
    for (Eigen::Index a = 0; a < t.entries.rows(); ++a)
      for (Eigen::Index b = 0; b < t.entries.cols(); ++b) e.push_back(t.entries(a, b));
    j["row_indices"] = r;
    j["col_indices"] = c;
    j["entries_row_major"] = e;
  }
  char buf[32];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(t.provenance.profile_hash));
  j["provenance"]["profile_hash"] = buf;
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(t.provenance.mesh_hash));
  j["provenance"]["mesh_hash"] = buf;
  j["provenance"]["form"] = t.provenance.form;
  j["tolerances"]["solver"] = t.provenance.solver_tol;
  j["tolerances"]["kernel"] = t.provenance.kernel_tol;
  return j;
}

namespace detail {

template <int Dim>
Provenance provenance_of(const DiffusionCorrectors<Dim>& dc, const std::string& form) {
  Provenance p;
  p.profile_hash = dc.profile().hash() ^ fnv1a(dc.model().description());
  p.mesh_hash = dc.mesh().hash();
  p.solver_tol = dc.options().solve.tol;
  p.kernel_tol = dc.options().kernel.tol;
  p.form = form;
  return p;
}

/// ∫_c f(x) over cell c with the given rule.
template <int Dim, class F>
double cell_integral(const VolumeMesh<Dim>& m, std::size_t c, const SimplexRule<Dim>& rule, F&& f) {
  double s = 0.0;
  for (std::size_t q = 0; q < rule.size(); ++q) s += rule.w[q] * f(m.map_point(c, rule.bary[q]));
  return s * m.cell_measures[c];
}

}  // namespace detail

/// Exterior-energy settings for the symmetric form.
struct ExteriorOptions {
  double radius = 4.0;  ///< outer radius of the exterior layer (multiple of the inclusion size)
};

/// Exterior energy data for a set of correctors: Gram matrix and multipole tail.
struct ExteriorEnergy {
  Eigen::MatrixXd interior;  ///< ∫_B (D0+D1)∇φ_a·∇φ_b
  Eigen::MatrixXd layer;     ///< D0 ∫_{R>|x|>1} ∇φ_a·∇φ_b
  Eigen::MatrixXd tail;      ///< dipole tail beyond R
  double tail_bound = 0.0;   ///< reported truncation bound (magnitude of the tail)
  Eigen::MatrixXd total() const { return interior + layer + tail; }
};

/**
 * @brief Gram matrix E_ab = ∫_{R^d}(D0(x0)+D1)∇φ_a·∇φ_b of a set of correctors, with the
 * exterior field reconstructed from the integral representation on a layer mesh and a
 * dipole tail beyond the outer radius.
 */
template <int Dim>
ExteriorEnergy corrector_energy(const DiffusionCorrectors<Dim>& dc,
                                const std::vector<std::shared_ptr<const CorrectorField<Dim>>>& fields,
                                const ExteriorOptions& ext = {}) {
  const auto& m = dc.mesh();
  const int K = static_cast<int>(fields.size());
  const double D0 = dc.D0();
  ExteriorEnergy E;
  E.interior = Eigen::MatrixXd::Zero(K, K);
  const auto& rule = simplex_rule<Dim>(6);
  for (std::size_t c = 0; c < m.num_cells(); ++c) {
    const double wc = detail::cell_integral<Dim>(m, c, rule, [&](const Vec<Dim>& x) { return D0 + dc.profile()(x); });
    for (int a = 0; a < K; ++a)
      for (int b = 0; b <= a; ++b) E.interior(a, b) += wc * fields[a]->gradients[c].dot(fields[b]->gradients[c]);
  }
  // Exterior layer.
  std::vector<int> inner_ids;
  const VolumeMesh<Dim> X = exterior_mesh(m, ext.radius, Vec<Dim>::Zero().eval(), inner_ids);
  const std::size_t ni = inner_ids.size();
  std::vector<Vec<Dim>> targets(X.vertices.begin() + static_cast<std::ptrdiff_t>(ni), X.vertices.end());
  VectorSource<Dim> F = [&](std::size_t c, const Vec<Dim>& x, Eigen::Ref<Eigen::MatrixXd> o) {
    for (int a = 0; a < K; ++a) o.col(a) = fields[a]->flux ? fields[a]->flux(c, x) : Vec<Dim>::Zero().eval();
  };
  bool any_source = false;
  for (const auto& f : fields) any_source = any_source || static_cast<bool>(f->source);
  ScalarSource<Dim> S;
  if (any_source)
    S = [&](std::size_t c, const Vec<Dim>& x, Eigen::Ref<Eigen::VectorXd> o) {
      for (int a = 0; a < K; ++a) o[a] = fields[a]->source ? fields[a]->source(c, x) : 0.0;
    };
  Eigen::MatrixXd outer = collocation_rhs<Dim>(m, targets, K, F, S, dc.options().kernel);
  Eigen::MatrixXd vals(static_cast<Eigen::Index>(X.num_vertices()), K);
  for (int a = 0; a < K; ++a) {
    for (std::size_t v = 0; v < ni; ++v) vals(static_cast<Eigen::Index>(v), a) = fields[a]->values[inner_ids[v]];
    vals.col(a).tail(outer.rows()) = outer.col(a);
  }
  E.layer = Eigen::MatrixXd::Zero(K, K);
  for (std::size_t c = 0; c < X.num_cells(); ++c) {
    std::vector<Vec<Dim>> g(K);
    for (int a = 0; a < K; ++a) g[a] = X.cell_gradient(c, vals.col(a));
    for (int a = 0; a < K; ++a)
      for (int b = 0; b <= a; ++b) E.layer(a, b) += D0 * X.cell_measures[c] * g[a].dot(g[b]);
  }
  // Dipole tail: φ ≈ −P·∇Γ(−y), P = ∫_B flux.
  double Rout = 0.0;
  for (std::size_t v = ni; v < X.num_vertices(); ++v) Rout = std::max(Rout, X.vertices[v].norm());
  std::vector<Vec<Dim>> P(K, Vec<Dim>::Zero());
  for (std::size_t c = 0; c < m.num_cells(); ++c)
    for (int a = 0; a < K; ++a)
      if (fields[a]->flux)
        for (std::size_t q = 0; q < rule.size(); ++q)
          P[a] += m.cell_measures[c] * rule.w[q] * fields[a]->flux(c, m.map_point(c, rule.bary[q]));
  E.tail = Eigen::MatrixXd::Zero(K, K);
  const double tail_factor = (Dim == 2) ? D0 / (4.0 * pi * Rout * Rout) : D0 / (6.0 * pi * Rout * Rout * Rout);
  for (int a = 0; a < K; ++a)
    for (int b = 0; b <= a; ++b) E.tail(a, b) = tail_factor * P[a].dot(P[b]);
  for (int a = 0; a < K; ++a)
    for (int b = 0; b < a; ++b) {
      E.interior(b, a) = E.interior(a, b);
      E.layer(b, a) = E.layer(a, b);
      E.tail(b, a) = E.tail(a, b);
    }
  E.tail_bound = E.tail.cwiseAbs().maxCoeff();
  return E;
}

/// Both evaluations of M returned by tensor_M.
struct MTensorResult {
  PolarizationTensor canonical;   ///< symmetric form (machine-symmetric)
  PolarizationTensor definition;  ///< defining integral of the collocation solution
  double exterior_tail_bound = 0.0;
  double max_solver_residual = 0.0;
};

/**
 * @brief M_ij for 1 <= |i|,|j| <= max_order. The canonical value is the symmetric form
 * ∫D1∇x^i·∇x^j − ∫(D0+D1)∇φ_i·∇φ_j; the defining integral is returned alongside.
 */
template <int Dim>
MTensorResult tensor_M(const DiffusionCorrectors<Dim>& dc, int max_order, const ExteriorOptions& ext = {}) {
  if (max_order < 1) throw std::invalid_argument("tensor_M: max_order must be >= 1");
  const auto idx = multi_indices(Dim, max_order, 1);
  const int n = static_cast<int>(idx.size());
  const auto& m = dc.mesh();
  std::vector<std::shared_ptr<const CorrectorField<Dim>>> fields;
  MTensorResult out;
  for (const auto& j : idx) {
    fields.push_back(dc.base(j, MultiIndex::zero(Dim)));
    out.max_solver_residual = std::max(out.max_solver_residual, fields.back()->solver_residual);
  }
  Eigen::MatrixXd A = Eigen::MatrixXd::Zero(n, n), Mdef = Eigen::MatrixXd::Zero(n, n);
  const auto& rule = simplex_rule<Dim>(8);
  for (std::size_t c = 0; c < m.num_cells(); ++c)
    for (std::size_t q = 0; q < rule.size(); ++q) {
      const Vec<Dim> x = m.map_point(c, rule.bary[q]);
      const double d1 = dc.profile()(x);
      if (d1 == 0.0) continue;
      const double w = rule.w[q] * m.cell_measures[c] * d1;
      std::vector<Vec<Dim>> g(n);
      for (int a = 0; a < n; ++a) g[a] = monomial_grad<Dim>(idx[a], x);
      for (int a = 0; a < n; ++a)
        for (int b = 0; b < n; ++b) {
          A(a, b) += w * g[a].dot(g[b]);
          Mdef(a, b) += w * (g[b] + fields[b]->gradients[c]).dot(g[a]);
        }
    }
  const bool zero = dc.profile().is_zero();
  Eigen::MatrixXd Msym = A;
  if (!zero) {
    ExteriorEnergy E = corrector_energy(dc, fields, ext);
    Msym = A - E.total();
    out.exterior_tail_bound = E.tail_bound;
  }
  Msym = (0.5 * (Msym + Msym.transpose())).eval();
  for (auto* t : {&out.canonical, &out.definition}) {
    t->kind = TensorKind::M;
    t->dim = Dim;
    t->max_order = max_order;
    t->rows = idx;
    t->cols = idx;
  }
  out.canonical.entries = Msym;
  out.definition.entries = Mdef;
  out.canonical.provenance = detail::provenance_of(dc, "symmetric");
  out.definition.provenance = detail::provenance_of(dc, "definition");
  return out;
}

/// M²_ijkl = ∫_B D1 ∇φ_jk^l·∇x^i over 1<=|i|,|j|<=max_order, 0<=|k|,l<=max_order, l+|k|>0.
template <int Dim>
PolarizationTensor tensor_M2(const DiffusionCorrectors<Dim>& dc, int max_order, int max_level = -1) {
  if (max_order < 1) throw std::invalid_argument("tensor_M2: max_order must be >= 1");
  if (max_level < 0) max_level = std::min(max_order, dc.options().max_level);
  PolarizationTensor t;
  t.kind = TensorKind::M2;
  t.dim = Dim;
  t.max_order = max_order;
  t.provenance = detail::provenance_of(dc, "definition");
  const auto ij = multi_indices(Dim, max_order, 1);
  const auto ks = multi_indices(Dim, max_order, 0);
  const auto& m = dc.mesh();
  const auto& rule = simplex_rule<Dim>(8);
  for (const auto& j : ij)
    for (const auto& k : ks)
      for (int l = 0; l <= max_level; ++l) {
        if (l + k.order() == 0) continue;
        auto f = dc.hierarchy(j, k, l);
        for (const auto& i : ij) {
          double s = 0.0;
          for (std::size_t c = 0; c < m.num_cells(); ++c)
            s += detail::cell_integral<Dim>(m, c, rule, [&](const Vec<Dim>& x) {
              return dc.profile()(x) * f->gradients[c].dot(monomial_grad<Dim>(i, x));
            });
          t.entries4[{i, j, k, l}] = s;
        }
      }
  return t;
}

/// M^ε_ij = ∫_B D1∇(x^j + Ψ^ε_j)·∇x^i.
template <int Dim>
PolarizationTensor tensor_M_eps(const DiffusionCorrectors<Dim>& dc, double eps, int max_order) {
  const auto idx = multi_indices(Dim, max_order, 1);
  const int n = static_cast<int>(idx.size());
  PolarizationTensor t;
  t.kind = TensorKind::M_eps;
  t.dim = Dim;
  t.max_order = max_order;
  t.eps = eps;
  t.rows = idx;
  t.cols = idx;
  t.entries = Eigen::MatrixXd::Zero(n, n);
  t.provenance = detail::provenance_of(dc, "definition");
  const auto& m = dc.mesh();
  const auto& rule = simplex_rule<Dim>(8);
  for (int b = 0; b < n; ++b) {
    auto f = dc.psi_eps(idx[b], eps);
    for (int a = 0; a < n; ++a) {
      double s = 0.0;
      for (std::size_t c = 0; c < m.num_cells(); ++c)
        s += detail::cell_integral<Dim>(m, c, rule, [&](const Vec<Dim>& x) {
          return dc.profile()(x) * (monomial_grad<Dim>(idx[b], x) + f->gradients[c]).dot(monomial_grad<Dim>(idx[a], x));
        });
      t.entries(a, b) = s;
    }
  }
  return t;
}

/**
 * @brief Hierarchy reconstruction of M^ε:
 * M_ij + Σ_{(k,l)≠0} ε^{|k|+l} D0(x0) ∂^kD0^{-1}(x0)/k! · (1/l!) · M²_ijkl.
 */
template <int Dim>
Eigen::MatrixXd reconstruct_M_eps(const PolarizationTensor& M, const PolarizationTensor& M2, const BackgroundModel<Dim>& model,
                                  double eps) {
  Eigen::MatrixXd R = M.entries;
  const double D0 = model.D0_center();
  for (const auto& [key, v] : M2.entries4) {
    if (!M.has(key.i, key.j)) continue;
    const double dk = model.D0inv_derivative(key.k);
    double lf = 1.0;
    for (int s = 2; s <= key.l; ++s) lf *= s;
    const double coef = std::pow(eps, key.k.order() + key.l) * D0 * dk / key.k.factorial() / lf;
    R(M.row_of(key.i), M.col_of(key.j)) += coef * v;
  }
  return R;
}

/// Single-layer transmission solution on ∂B for constant coefficients.
struct TransmissionDensity {
  double D0 = 1.0, D1 = 1.0;
  Eigen::MatrixXd density;        ///< facet densities, one column per j
  Eigen::MatrixXd inner_normal;   ///< ∂φ_j/∂n|_- at facet centroids
  Eigen::MatrixXd outer_normal;   ///< ∂φ_j/∂n|_+ at facet centroids
  double residual = 0.0;
};

/// Thrown when |2D0 + D1| is below the resonance guard.
struct ConditioningError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {

/// ∫_facet n_x·∇Γ(x − y) dσ_y.
template <int Dim>
double adjoint_double_layer_entry(const VolumeMesh<Dim>& m, std::size_t f, const Vec<Dim>& x, const Vec<Dim>& nx) {
  const auto& fc = m.boundary_facets[f];
  if constexpr (Dim == 2) {
    const Vec<2> a = m.vertices[fc[0]], b = m.vertices[fc[1]];
    const double L = (b - a).norm();
    // x on the facet line gives zero.
    const Vec<2> t = (b - a) / L;
    const Vec<2> nf(t[1], -t[0]);
    if (std::abs(nf.dot(x - a)) < 1e-14 * L && (x - a).dot(t) > -1e-14 && (x - a).dot(t) < L + 1e-14) return 0.0;
    Eigen::VectorXd out = Eigen::VectorXd::Zero(1), whole;
    auto f1 = [&](double s) -> Eigen::VectorXd {
      Eigen::VectorXd r(1);
      r[0] = L * nx.dot(grad_fundamental_solution<2>(x - (a + s * (b - a))));
      return r;
    };
    adaptive_line(f1, 0.0, 1.0, 8, 1e-13, 30, out, whole, false);
    return out[0];
  } else {
    const Vec<3> a = m.vertices[fc[0]], b = m.vertices[fc[1]], c = m.vertices[fc[2]];
    const Vec<3> cr = (b - a).cross(c - a);
    const Vec<3> nf = cr.normalized();
    const double area = 0.5 * cr.norm();
    if (std::abs(nf.dot(x - a)) < 1e-13 * std::sqrt(area)) {
      // Coplanar target: the kernel n_x·(x−y) vanishes when n_x is the facet normal.
      if (std::abs(std::abs(nx.dot(nf)) - 1.0) < 1e-12) return 0.0;
    }
    const auto& tri = simplex_rule<2>(6);
    std::function<double(const Vec<3>&, const Vec<3>&, const Vec<3>&, int)> rec = [&](const Vec<3>& p, const Vec<3>& q,
                                                                                         const Vec<3>& r, int depth) {
      const Vec<3> ctr = (p + q + r) / 3.0;
      const double diam = std::max({(p - q).norm(), (q - r).norm(), (r - p).norm()});
      if ((ctr - x).norm() > 2.0 * diam || depth == 0) {
        const double ar = 0.5 * (q - p).cross(r - p).norm();
        double s = 0.0;
        for (std::size_t k = 0; k < tri.size(); ++k) {
          const Vec<3> y = tri.bary[k][0] * p + tri.bary[k][1] * q + tri.bary[k][2] * r;
          s += tri.w[k] * nx.dot(grad_fundamental_solution<3>(x - y));
        }
        return s * ar;
      }
      const Vec<3> pq = 0.5 * (p + q), qr = 0.5 * (q + r), rp = 0.5 * (r + p);
      return rec(p, pq, rp, depth - 1) + rec(pq, q, qr, depth - 1) + rec(rp, qr, r, depth - 1) + rec(pq, qr, rp, depth - 1);
    };
    return rec(a, b, c, 8);
  }
}

}  // namespace detail

/**
 * @brief Layer tensor 𝓜_ij = D1 ∫_∂B n·∇(x^j + φ_j)|_- x^i dσ for constant D0, D1, with φ_j
 * the single-layer transmission solution: (λI + K*)ψ = −∂_n x^j, λ = (2D0+D1)/(2D1).
 */
template <int Dim>
PolarizationTensor tensor_layer(double D0, double D1, const VolumeMesh<Dim>& B, int max_order,
                                TransmissionDensity* density_out = nullptr) {
  if (D1 == 0.0) throw std::invalid_argument("tensor_layer: D1 must be nonzero");
  if (!(D0 > 0.0)) throw std::invalid_argument("tensor_layer: D0 must be positive");
  if (std::abs(2.0 * D0 + D1) < 1e-6 * D0)
    throw ConditioningError("tensor_layer: |2D0 + D1| below the resonance guard");
  const std::size_t nf = B.boundary_facets.size();
  std::vector<Vec<Dim>> xc(nf);
  for (std::size_t f = 0; f < nf; ++f) {
    Vec<Dim> s = Vec<Dim>::Zero();
    for (int v : B.boundary_facets[f]) s += B.vertices[v];
    xc[f] = s / Dim;
  }
  Eigen::MatrixXd Kst(nf, nf);
#pragma omp parallel for schedule(dynamic, 8)
  for (Eigen::Index a = 0; a < static_cast<Eigen::Index>(nf); ++a)
    for (std::size_t b = 0; b < nf; ++b)
      Kst(a, b) = (static_cast<std::size_t>(a) == b) ? 0.0 : detail::adjoint_double_layer_entry<Dim>(B, b, xc[a], B.facet_normals[a]);
  const double lambda = (2.0 * D0 + D1) / (2.0 * D1);
  Eigen::MatrixXd A = Kst;
  A.diagonal().array() += lambda;
  const auto idx = multi_indices(Dim, max_order, 1);
  const int n = static_cast<int>(idx.size());
  Eigen::MatrixXd rhs(nf, n);
  for (std::size_t f = 0; f < nf; ++f)
    for (int j = 0; j < n; ++j) rhs(f, j) = -B.facet_normals[f].dot(monomial_grad<Dim>(idx[j], xc[f]));
  Eigen::PartialPivLU<Eigen::MatrixXd> lu(A);
  Eigen::MatrixXd psi = lu.solve(rhs);
  Eigen::MatrixXd inner = 0.5 * psi + Kst * psi;
  PolarizationTensor t;
  t.kind = TensorKind::layer_M;
  t.dim = Dim;
  t.max_order = max_order;
  t.rows = idx;
  t.cols = idx;
  t.entries = Eigen::MatrixXd::Zero(n, n);
  t.provenance.mesh_hash = B.hash();
  t.provenance.form = "single_layer_interior_trace";
  const auto& g = gauss_legendre01(6);
  const auto& tri = simplex_rule<2>(6);
  for (std::size_t f = 0; f < nf; ++f) {
    const auto& fc = B.boundary_facets[f];
    std::vector<std::pair<Vec<Dim>, double>> pts;
    if constexpr (Dim == 2) {
      for (std::size_t q = 0; q < g.x.size(); ++q)
        pts.push_back({((1 - g.x[q]) * B.vertices[fc[0]] + g.x[q] * B.vertices[fc[1]]).eval(), g.w[q] * B.facet_measures[f]});
    } else {
      for (std::size_t q = 0; q < tri.size(); ++q)
        pts.push_back({(tri.bary[q][0] * B.vertices[fc[0]] + tri.bary[q][1] * B.vertices[fc[1]] + tri.bary[q][2] * B.vertices[fc[2]]).eval(),
                       tri.w[q] * B.facet_measures[f]});
    }
    for (const auto& [y, w] : pts)
      for (int a = 0; a < n; ++a) {
        const double xi = monomial<Dim>(idx[a], y);
        for (int b = 0; b < n; ++b)
          t.entries(a, b) += D1 * w * xi * (B.facet_normals[f].dot(monomial_grad<Dim>(idx[b], y)) + inner(f, b));
      }
  }
  if (density_out) {
    density_out->D0 = D0;
    density_out->D1 = D1;
    density_out->density = psi;
    density_out->inner_normal = inner;
    density_out->outer_normal = -0.5 * psi + Kst * psi;
    density_out->residual = (A * psi - rhs).norm() / std::max(rhs.norm(), 1e-300);
  }
  return t;
}

/// Q_ij = ∫_B q1 x^j x^i for 0 <= |i|,|j| <= max_order.
template <int Dim>
PolarizationTensor tensor_Q(const InclusionProfile<Dim>& q1, const VolumeMesh<Dim>& B, int max_order) {
  const auto idx = multi_indices(Dim, max_order, 0);
  const int n = static_cast<int>(idx.size());
  PolarizationTensor t;
  t.kind = TensorKind::Q;
  t.dim = Dim;
  t.max_order = max_order;
  t.rows = idx;
  t.cols = idx;
  t.entries = Eigen::MatrixXd::Zero(n, n);
  t.provenance.profile_hash = q1.hash();
  t.provenance.mesh_hash = B.hash();
  t.provenance.form = "definition";
  const auto& rule = simplex_rule<Dim>(std::max(8, 2 * max_order + 4));
  for (std::size_t c = 0; c < B.num_cells(); ++c)
    for (std::size_t q = 0; q < rule.size(); ++q) {
      const Vec<Dim> x = B.map_point(c, rule.bary[q]);
      const double v = q1(x);
      if (v == 0.0) continue;
      const double w = rule.w[q] * B.cell_measures[c] * v;
      for (int a = 0; a < n; ++a) {
        const double xa = monomial<Dim>(idx[a], x);
        for (int b = 0; b <= a; ++b) t.entries(a, b) += w * xa * monomial<Dim>(idx[b], x);
      }
    }
  for (int a = 0; a < n; ++a)
    for (int b = 0; b < a; ++b) t.entries(b, a) = t.entries(a, b);
  return t;
}

/// Q^η_ij = ∫_B q1 φ^η_j x^i for 0 <= |i|,|j| <= max_order.
template <int Dim>
PolarizationTensor tensor_Q_eta(const HelmholtzCorrectors<Dim>& hc, double eta, double eps, int max_order) {
  const auto idx = multi_indices(Dim, max_order, 0);
  const int n = static_cast<int>(idx.size());
  const auto& B = hc.mesh();
  PolarizationTensor t;
  t.kind = TensorKind::Q_eta;
  t.dim = Dim;
  t.max_order = max_order;
  t.eta = eta;
  t.eps = eps;
  t.rows = idx;
  t.cols = idx;
  t.entries = Eigen::MatrixXd::Zero(n, n);
  t.provenance.profile_hash = hc.profile().hash();
  t.provenance.mesh_hash = B.hash();
  t.provenance.form = "definition";
  const auto& rule = simplex_rule<Dim>(std::max(8, max_order + 5));
  for (int b = 0; b < n; ++b) {
    auto f = hc.solve(idx[b], eta, eps);
    for (std::size_t c = 0; c < B.num_cells(); ++c)
      for (std::size_t q = 0; q < rule.size(); ++q) {
        const Vec<Dim> x = B.map_point(c, rule.bary[q]);
        const double v = hc.profile()(x);
        if (v == 0.0) continue;
        const double w = rule.w[q] * B.cell_measures[c] * v * f->interpolate(c, x);
        for (int a = 0; a < n; ++a) t.entries(a, b) += w * monomial<Dim>(idx[a], x);
      }
  }
  return t;
}

/// Structural checks on M: weighted symmetry, two-sided bounds, definiteness.
struct PropertyReport {
  double symmetry_residual = 0.0;             ///< max relative |Σα_iβ_j(M_ij − M_ji)| (canonical form)
  double collocation_symmetry_residual = 0.0; ///< same for the defining integral (if supplied)
  double bound_violation = 0.0;               ///< max over samples of max(lower − αMα, αMα − upper, 0)
  double min_lower_gap = 0.0, min_upper_gap = 0.0;
  std::vector<std::array<double, 3>> bound_samples;  ///< (lower, αMα, upper)
  bool positive_definite = false, negative_definite = false;
  bool expect_positive = false, expect_negative = false;
  Eigen::VectorXd first_order_eigenvalues;
};

template <int Dim>
PropertyReport property_report(const PolarizationTensor& M, const InclusionProfile<Dim>& D1, const BackgroundModel<Dim>& model,
                               const VolumeMesh<Dim>& B, std::uint64_t seed, int samples = 10,
                               const PolarizationTensor* definition = nullptr) {
  if (M.kind != TensorKind::M || M.max_order < 1) throw std::invalid_argument("property_report: needs an M tensor");
  PropertyReport r;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> N01;
  const int n = static_cast<int>(M.rows.size());
  const double scale = std::max(M.entries.norm(), 1e-300);
  auto sym = [&](const Eigen::MatrixXd& A) {
    double mx = 0.0;
    std::mt19937_64 g(seed ^ 0x9e3779b97f4a7c15ull);
    for (int s = 0; s < samples; ++s) {
      Eigen::VectorXd a(n), b(n);
      for (int k = 0; k < n; ++k) {
        a[k] = N01(g);
        b[k] = N01(g);
      }
      const double v = std::abs(a.dot((A - A.transpose()) * b)) / (a.norm() * b.norm() * std::max(A.norm(), 1e-300));
      mx = std::max(mx, v);
    }
    return mx;
  };
  r.symmetry_residual = sym(M.entries);
  if (definition) r.collocation_symmetry_residual = sym(definition->entries);
  const double D0 = model.D0_center();
  const auto& rule = simplex_rule<Dim>(8);
  r.min_lower_gap = r.min_upper_gap = std::numeric_limits<double>::infinity();
  for (int s = 0; s < samples; ++s) {
    Eigen::VectorXd a(n);
    for (int k = 0; k < n; ++k) a[k] = N01(rng);
    a /= a.norm();
    double lo = 0.0, up = 0.0;
    for (std::size_t c = 0; c < B.num_cells(); ++c)
      for (std::size_t q = 0; q < rule.size(); ++q) {
        const Vec<Dim> x = B.map_point(c, rule.bary[q]);
        const double d1 = D1(x);
        if (d1 == 0.0) continue;
        Vec<Dim> gu = Vec<Dim>::Zero();
        for (int k = 0; k < n; ++k) gu += a[k] * monomial_grad<Dim>(M.rows[k], x);
        const double w = rule.w[q] * B.cell_measures[c] * gu.squaredNorm();
        up += w * d1;
        lo += w * D0 * d1 / (D0 + d1);
      }
    const double q = a.dot(M.entries * a);
    r.bound_samples.push_back({lo, q, up});
    r.bound_violation = std::max({r.bound_violation, lo - q, q - up});
    r.min_lower_gap = std::min(r.min_lower_gap, q - lo);
    r.min_upper_gap = std::min(r.min_upper_gap, up - q);
  }
  Eigen::MatrixXd F = M.first_order_block();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (F + F.transpose()));
  r.first_order_eigenvalues = es.eigenvalues();
  r.positive_definite = es.eigenvalues().minCoeff() > 0.0;
  r.negative_definite = es.eigenvalues().maxCoeff() < 0.0;
  double intD1 = 0.0, intH = 0.0;
  for (std::size_t c = 0; c < B.num_cells(); ++c)
    for (std::size_t q = 0; q < rule.size(); ++q) {
      const double d1 = D1(B.map_point(c, rule.bary[q]));
      intD1 += rule.w[q] * B.cell_measures[c] * d1;
      intH += rule.w[q] * B.cell_measures[c] * d1 / (D0 + d1);
    }
  r.expect_negative = intD1 < 0.0;
  r.expect_positive = intH > 0.0;
  (void)scale;
  return r;
}

inline nlohmann::json to_json(const PropertyReport& r) {
  nlohmann::json j;
  j["symmetry_residual"] = r.symmetry_residual;
  j["collocation_symmetry_residual"] = r.collocation_symmetry_residual;
  j["bound_violation"] = r.bound_violation;
  j["min_lower_gap"] = r.min_lower_gap;
  j["min_upper_gap"] = r.min_upper_gap;
  nlohmann::json s = nlohmann::json::array();
  for (const auto& b : r.bound_samples) s.push_back({{"lower", b[0]}, {"value", b[1]}, {"upper", b[2]}});
  j["bound_samples"] = s;
  j["positive_definite"] = r.positive_definite;
  j["negative_definite"] = r.negative_definite;
  j["expect_positive"] = r.expect_positive;
  j["expect_negative"] = r.expect_negative;
  std::vector<double> ev(r.first_order_eigenvalues.data(), r.first_order_eigenvalues.data() + r.first_order_eigenvalues.size());
  j["first_order_eigenvalues"] = ev;
  return j;
}

/// Sup of |a − b| over quadrature points and vertices of B.
template <int Dim>
double sup_difference(const InclusionProfile<Dim>& a, const InclusionProfile<Dim>& b, const VolumeMesh<Dim>& B) {
  double mx = 0.0;
  const auto& rule = simplex_rule<Dim>(4);
  for (std::size_t c = 0; c < B.num_cells(); ++c)
    for (std::size_t q = 0; q < rule.size(); ++q) {
      const Vec<Dim> x = B.map_point(c, rule.bary[q]);
      mx = std::max(mx, std::abs(a(x) - b(x)));
    }
  for (const auto& v : B.vertices) mx = std::max(mx, std::abs(a(v) - b(v)));
  return mx;
}

/// Lipschitz ratio max_ij |M_ij[a] − M_ij[b]| / ‖a − b‖_∞ on the first-order block.
template <int Dim>
double continuity_probe(const InclusionProfile<Dim>& a, const InclusionProfile<Dim>& b, const BackgroundModel<Dim>& model,
                        std::shared_ptr<const VolumeMesh<Dim>> B, const CorrectorOptions& opt = {}) {
  const double d = sup_difference(a, b, *B);
  if (d == 0.0) return 0.0;
  DiffusionCorrectors<Dim> ca(B, a, model, opt), cb(B, b, model, opt);
  const Eigen::MatrixXd Ma = tensor_M(ca, 1).canonical.entries;
  const Eigen::MatrixXd Mb = tensor_M(cb, 1).canonical.entries;
  return (Ma - Mb).cwiseAbs().maxCoeff() / d;
}

/// Thrown when the vanishing search has no sign change.
struct BracketError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct VanishingResult {
  double t_star = 0.0;
  double M_ll = 0.0;               ///< canonical M_{e_l,e_l}(t*)
  double integral_abs = 0.0;       ///< ∫|D1(t*)|
  double integral = 0.0;           ///< ∫D1(t*)
  double first_order_norm = 0.0;   ///< ‖first-order block‖ at t*
  double max_off_diagonal = 0.0;   ///< max |M_12| over probed t
  double t_max = 0.0;
  int iterations = 0;
  std::vector<std::pair<double, double>> history;  ///< (t, M_ll)
};

/**
 * @brief Bisection on t for D1 = positive − t·negative such that M_{e_l,e_l} = 0.
 * The path is linear in t, so all operators are assembled once per part.
 */
template <int Dim>
VanishingResult find_vanishing_inclusion(const InclusionProfile<Dim>& positive, const InclusionProfile<Dim>& negative, int axis,
                                         const BackgroundModel<Dim>& model, std::shared_ptr<const VolumeMesh<Dim>> B,
                                         double t_max, const CorrectorOptions& opt = {}, const ExteriorOptions& ext = {},
                                         double t_tol = 1e-8) {
  if (axis < 0 || axis >= Dim) throw std::invalid_argument("find_vanishing_inclusion: bad axis");
  if (!model.is_constant()) throw std::invalid_argument("find_vanishing_inclusion: constant background required");
  const auto& m = *B;
  const double D0 = model.D0_center(), a0 = 1.0 / D0;
  KernelEval kernel = opt.kernel;
  kernel.dim = Dim;
  auto P = positive.value, Q = negative.value;
  auto profile_at = [&](double t) {
    auto p = profiles::combine<Dim>(1.0, positive, -t, negative);
    return p;
  };
  // Positivity along the whole path is checked at both ends (the path is linear).
  for (double t : {0.0, t_max}) {
    const auto p = profile_at(t);
    const auto& rule = simplex_rule<Dim>(4);
    for (std::size_t c = 0; c < m.num_cells(); ++c)
      for (std::size_t q = 0; q < rule.size(); ++q)
        if (!(D0 + p(m.map_point(c, rule.bary[q])) > 0.0))
          throw std::invalid_argument("find_vanishing_inclusion: positivity violated along the path");
  }
  std::function<double(const Vec<Dim>&)> wP = [P, a0](const Vec<Dim>& x) { return a0 * P(x); };
  std::function<double(const Vec<Dim>&)> wN = [Q, a0](const Vec<Dim>& x) { return a0 * Q(x); };
  const Eigen::MatrixXd AP = gradient_kernel_rows<Dim>(m, wP, m.vertices, kernel);
  const Eigen::MatrixXd AN = gradient_kernel_rows<Dim>(m, wN, m.vertices, kernel);
  const MultiIndex el = MultiIndex::unit(Dim, axis);
  const int other = (axis + 1) % Dim;
  const MultiIndex eo = MultiIndex::unit(Dim, other);
  auto source = [&](std::function<double(const Vec<Dim>&)> w) {
    return VectorSource<Dim>([w, el, eo](std::size_t, const Vec<Dim>& x, Eigen::Ref<Eigen::MatrixXd> o) {
      o.col(0) = w(x) * monomial_grad<Dim>(el, x);
      o.col(1) = w(x) * monomial_grad<Dim>(eo, x);
    });
  };
  const Eigen::MatrixXd bP = collocation_rhs<Dim>(m, 2, source(wP), nullptr, kernel);
  const Eigen::MatrixXd bN = collocation_rhs<Dim>(m, 2, source(wN), nullptr, kernel);
  // Exterior layer rows.
  std::vector<int> inner_ids;
  const VolumeMesh<Dim> X = exterior_mesh(m, ext.radius, Vec<Dim>::Zero().eval(), inner_ids);
  const std::size_t ni = inner_ids.size();
  std::vector<Vec<Dim>> targets(X.vertices.begin() + static_cast<std::ptrdiff_t>(ni), X.vertices.end());
  const Eigen::MatrixXd XP = gradient_kernel_rows<Dim>(m, wP, targets, kernel);
  const Eigen::MatrixXd XN = gradient_kernel_rows<Dim>(m, wN, targets, kernel);
  const Eigen::MatrixXd cP = collocation_rhs<Dim>(m, targets, 2, source(wP), nullptr, kernel);
  const Eigen::MatrixXd cN = collocation_rhs<Dim>(m, targets, 2, source(wN), nullptr, kernel);
  double Rout = 0.0;
  for (std::size_t v = ni; v < X.num_vertices(); ++v) Rout = std::max(Rout, X.vertices[v].norm());
  const auto& rule = simplex_rule<Dim>(6);
  // Per-cell integrals ∫_c P, ∫_c Q and ∫_c P ∇x^e·∇x^f (for e,f ∈ {el, eo}).
  std::vector<double> iP(m.num_cells()), iN(m.num_cells());
  Eigen::Matrix2d AAP = Eigen::Matrix2d::Zero(), AAN = Eigen::Matrix2d::Zero();
  std::vector<Vec<Dim>> mP(m.num_cells(), Vec<Dim>::Zero()), mN(m.num_cells(), Vec<Dim>::Zero());
  for (std::size_t c = 0; c < m.num_cells(); ++c) {
    iP[c] = detail::cell_integral<Dim>(m, c, rule, [&](const Vec<Dim>& x) { return P(x); });
    iN[c] = detail::cell_integral<Dim>(m, c, rule, [&](const Vec<Dim>& x) { return Q(x); });
  }
  double absint_dummy = 0.0;
  (void)absint_dummy;
  for (std::size_t c = 0; c < m.num_cells(); ++c) {
    AAP(0, 0) += iP[c];
    AAN(0, 0) += iN[c];
  }
  VanishingResult res;
  res.t_max = t_max;
  const Eigen::Index N = static_cast<Eigen::Index>(m.num_vertices());
  auto evaluate = [&](double t, Eigen::Matrix2d& Mblk) {
    Eigen::MatrixXd A = AP - t * AN;
    A.diagonal().array() += 1.0;
    Eigen::MatrixXd b = bP - t * bN;
    Eigen::MatrixXd phi = Eigen::PartialPivLU<Eigen::MatrixXd>(A).solve(b);
    Eigen::MatrixXd outer = -(XP - t * XN) * phi + (cP - t * cN);
    Eigen::MatrixXd vals(static_cast<Eigen::Index>(X.num_vertices()), 2);
    for (int a = 0; a < 2; ++a) {
      for (std::size_t v = 0; v < ni; ++v) vals(static_cast<Eigen::Index>(v), a) = phi(inner_ids[v], a);
      vals.col(a).tail(outer.rows()) = outer.col(a);
    }
    Eigen::Matrix2d E = Eigen::Matrix2d::Zero(), Aint = Eigen::Matrix2d::Zero();
    Vec<Dim> PP[2] = {Vec<Dim>::Zero(), Vec<Dim>::Zero()};
    for (std::size_t c = 0; c < m.num_cells(); ++c) {
      const double dc = iP[c] - t * iN[c];
      Vec<Dim> g[2] = {m.cell_gradient(c, phi.col(0)), m.cell_gradient(c, phi.col(1))};
      Vec<Dim> e[2] = {Vec<Dim>::Unit(axis), Vec<Dim>::Unit(other)};
      for (int a = 0; a < 2; ++a) {
        PP[a] += a0 * dc * (g[a] + e[a]);
        for (int b = 0; b < 2; ++b) {
          E(a, b) += (D0 * m.cell_measures[c] + dc) * g[a].dot(g[b]);
          Aint(a, b) += dc * e[a].dot(e[b]);
        }
      }
    }
    for (std::size_t c = 0; c < X.num_cells(); ++c) {
      Vec<Dim> g[2] = {X.cell_gradient(c, vals.col(0)), X.cell_gradient(c, vals.col(1))};
      for (int a = 0; a < 2; ++a)
        for (int b = 0; b < 2; ++b) E(a, b) += D0 * X.cell_measures[c] * g[a].dot(g[b]);
    }
    const double tf = (Dim == 2) ? D0 / (4.0 * pi * Rout * Rout) : D0 / (6.0 * pi * Rout * Rout * Rout);
    for (int a = 0; a < 2; ++a)
      for (int b = 0; b < 2; ++b) E(a, b) += tf * PP[a].dot(PP[b]);
    Mblk = Aint - E;
    Mblk = (0.5 * (Mblk + Mblk.transpose())).eval();
    res.max_off_diagonal = std::max(res.max_off_diagonal, std::abs(Mblk(0, 1)));
    res.history.push_back({t, Mblk(0, 0)});
    return Mblk(0, 0);
  };
  (void)N;
  Eigen::Matrix2d blk;
  double lo = 0.0, hi = t_max;
  double flo = evaluate(lo, blk), fhi = evaluate(hi, blk);
  if (!(flo > 0.0 && fhi < 0.0) && !(flo < 0.0 && fhi > 0.0))
    throw BracketError("find_vanishing_inclusion: no sign change of M_ll across the bracket");
  while (hi - lo > t_tol) {
    const double mid = 0.5 * (lo + hi);
    const double fm = evaluate(mid, blk);
    ++res.iterations;
    if ((fm > 0.0) == (flo > 0.0)) {
      lo = mid;
      flo = fm;
    } else {
      hi = mid;
    }
  }
  // Final value from the secant point inside the last bracket.
  res.t_star = 0.5 * (lo + hi);
  res.M_ll = evaluate(res.t_star, blk);
  res.first_order_norm = blk.norm();
  for (std::size_t c = 0; c < m.num_cells(); ++c) {
    res.integral += iP[c] - res.t_star * iN[c];
  }
  const auto prof = profile_at(res.t_star);
  const auto& r8 = simplex_rule<Dim>(8);
  for (std::size_t c = 0; c < m.num_cells(); ++c)
    res.integral_abs += detail::cell_integral<Dim>(m, c, r8, [&](const Vec<Dim>& x) { return std::abs(prof(x)); });
  return res;
}

/// Bohm potential q1 = Δ√(D0+D1)/√(D0+D1) of a twice-differentiable profile.
template <int Dim>
InclusionProfile<Dim> bohm_potential(double D0, const InclusionProfile<Dim>& D1, bool* lower_accuracy = nullptr) {
  if (!(D0 > 0)) throw std::invalid_argument("bohm_potential: D0 must be positive");
  if (D1.regularity != Regularity::smooth_compact)
    throw std::invalid_argument("bohm_potential: D1 must be smooth with compact support");
  if (lower_accuracy) *lower_accuracy = !D1.radial;
  InclusionProfile<Dim> q;
  q.description = "bohm(" + std::to_string(D0) + "," + D1.description + ")";
  q.regularity = Regularity::smooth_compact;
  if (D1.radial) {
    auto rf = D1.radial;
    q.value = [rf, D0](const Vec<Dim>& x) {
      const double r = x.norm();
      if (r >= 1.0) return 0.0;
      const auto f = rf->eval(r);
      const double D = D0 + f[0];
      if (!(D > 0)) throw std::invalid_argument("bohm_potential: D0 + D1 must be positive");
      const double s = std::sqrt(D);
      const double s1 = f[1] / (2.0 * s);
      const double s2 = f[2] / (2.0 * s) - f[1] * f[1] / (4.0 * s * s * s);
      const double lap = (r > 1e-12) ? s2 + (Dim - 1) * s1 / r : Dim * s2;
      return lap / s;
    };
  } else {
    auto v = D1.value;
    q.value = [v, D0](const Vec<Dim>& x) {
      const double h = 1e-4;
      auto s = [&](const Vec<Dim>& y) {
        const double D = D0 + v(y);
        if (!(D > 0)) throw std::invalid_argument("bohm_potential: D0 + D1 must be positive");
        return std::sqrt(D);
      };
      const double s0 = s(x);
      double lap = 0.0;
      for (int k = 0; k < Dim; ++k) {
        Vec<Dim> e = Vec<Dim>::Zero();
        e[k] = h;
        lap += (s(x + e) - 2.0 * s0 + s(x - e)) / (h * h);
      }
      return lap / s0;
    };
  }
  // Sup estimate on a lattice.
  double mx = 0.0;
  for (int i = 0; i <= 200; ++i) {
    Vec<Dim> x = Vec<Dim>::Zero();
    x[0] = i / 200.0;
    mx = std::max(mx, std::abs(q.value(x)));
  }
  q.sup_norm = mx;
  return q;
}


/// One Richardson step: (r^p·fine − coarse)/(r^p − 1) for mesh-size ratio r = h_coarse/h_fine.
inline double richardson(double coarse, double fine, double ratio, double order = 2.0) {
  const double rp = std::pow(ratio, order);
  return (rp * fine - coarse) / (rp - 1.0);
}

inline Eigen::MatrixXd richardson(const Eigen::MatrixXd& coarse, const Eigen::MatrixXd& fine, double ratio, double order = 2.0) {
  const double rp = std::pow(ratio, order);
  return (rp * fine - coarse) / (rp - 1.0);
}

/**
 * @brief Residual of the base corrector equations (I+T0)φ_j = rhs_j evaluated at cell centroids,
 * i.e. away from the collocation nodes. Returns max_j ‖defect_j‖_∞ / ‖φ_j‖_∞ over 1 <= |j| <= max_order.
 */
template <int Dim>
double collocation_midpoint_defect(const DiffusionCorrectors<Dim>& dc, int max_order) {
  if (dc.profile().is_zero()) return 0.0;
  const auto& m = dc.mesh();
  std::vector<Vec<Dim>> targets(m.centroids.begin(), m.centroids.end());
  const auto w = dc.T0().weight;
  const Eigen::MatrixXd R = gradient_kernel_rows<Dim>(m, w, targets, dc.options().kernel);
  double worst = 0.0;
  for (const auto& j : multi_indices(Dim, max_order, 1)) {
    auto f = dc.base(j, MultiIndex::zero(Dim));
    VectorSource<Dim> F = [w, j](std::size_t, const Vec<Dim>& x, Eigen::Ref<Eigen::MatrixXd> o) {
      o.col(0) = w(x) * monomial_grad<Dim>(j, x);
    };
    const Eigen::VectorXd rhs = collocation_rhs<Dim>(m, targets, 1, F, nullptr, dc.options().kernel).col(0);
    Eigen::VectorXd mid(static_cast<Eigen::Index>(targets.size()));
    for (std::size_t c = 0; c < m.num_cells(); ++c) mid[c] = f->interpolate(c, targets[c]);
    const double scale = std::max(f->values.cwiseAbs().maxCoeff(), 1e-300);
    worst = std::max(worst, (mid + R * f->values - rhs).cwiseAbs().maxCoeff() / scale);
  }
  return worst;
}

/**
 * @brief Q_00 + Q^0_00 = ∫_B q1 (1 + φ_0) for the η = 0 corrector, evaluated plainly and with the
 * adjoint residual correction ∫_B q1 v_h (1 − v_h − T v_h), where v = 1 + φ_0 solves (I+T)v = 1.
 * The correction removes the leading interpolation error of the P1 field.
 */
struct ZeroOrderIdentity {
  double plain = 0.0;
  double corrected = 0.0;
  double Q00 = 0.0;           ///< ∫ q1
  double integral_abs = 0.0;  ///< ∫ |q1|
};

template <int Dim>
ZeroOrderIdentity zero_order_identity(const HelmholtzCorrectors<Dim>& hc, int degree = 4) {
  const auto& m = hc.mesh();
  const auto q = hc.profile().value;
  auto f = hc.solve(MultiIndex::zero(Dim), 0.0, 1.0);
  const auto& rule = simplex_rule<Dim>(degree);
  std::vector<Vec<Dim>> pts;
  std::vector<double> w, vh;
  ZeroOrderIdentity out;
  for (std::size_t c = 0; c < m.num_cells(); ++c)
    for (std::size_t k = 0; k < rule.size(); ++k) {
      const Vec<Dim> x = m.map_point(c, rule.bary[k]);
      const double qw = rule.w[k] * m.cell_measures[c] * q(x);
      out.Q00 += qw;
      out.integral_abs += std::abs(qw);
      if (qw == 0.0) continue;
      pts.push_back(x);
      w.push_back(qw);
      vh.push_back(1.0 + f->interpolate(c, x));
    }
  ScalarSource<Dim> src = [&](std::size_t c, const Vec<Dim>& x, Eigen::Ref<Eigen::VectorXd> o) {
    o[0] = q(x) * (1.0 + f->interpolate(c, x));
  };
  const Eigen::VectorXd Tv = collocation_rhs<Dim>(m, pts, 1, nullptr, src).col(0);
  for (std::size_t i = 0; i < pts.size(); ++i) {
    out.plain += w[i] * vh[i];
    out.corrected += w[i] * vh[i] * (2.0 - vh[i] - Tv[static_cast<Eigen::Index>(i)]);
  }
  return out;
}

/**
 * @brief Diffusion/Helmholtz tensor correspondence for a Bohm pair (D1, q1) on the same mesh:
 * M_ij against D0 (Q + Q^0)_ij on the first-order block, and the zero-order identity.
 */
struct EquivalenceReport {
  Eigen::MatrixXd M;          ///< first-order block of M (canonical)
  Eigen::MatrixXd Q_sum;      ///< first-order block of D0 (Q + Q^0)
  double first_order_rel = 0.0;
  ZeroOrderIdentity zero;
  double D0 = 1.0;
};

template <int Dim>
EquivalenceReport equivalence_report(const DiffusionCorrectors<Dim>& dc, const HelmholtzCorrectors<Dim>& hc) {
  if (!dc.model().is_constant()) throw std::invalid_argument("equivalence_report: requires a constant background");
  EquivalenceReport r;
  r.D0 = dc.D0();
  r.M = tensor_M(dc, 1).canonical.first_order_block();
  const auto Q = tensor_Q<Dim>(hc.profile(), hc.mesh(), 1);
  const auto Q0 = tensor_Q_eta(hc, 0.0, 1.0, 1);
  const int n = static_cast<int>(r.M.rows());
  r.Q_sum.resize(n, n);
  for (int a = 0; a < n; ++a)
    for (int b = 0; b < n; ++b) {
      const auto i = MultiIndex::unit(Dim, a), j = MultiIndex::unit(Dim, b);
      r.Q_sum(a, b) = r.D0 * (Q.at(i, j) + Q0.at(i, j));
    }
  r.first_order_rel = (r.M - r.Q_sum).cwiseAbs().maxCoeff() / std::max(r.M.cwiseAbs().maxCoeff(), 1e-300);
  r.zero = zero_order_identity(hc);
  return r;
}

inline nlohmann::json to_json(const EquivalenceReport& r) {
  nlohmann::json j;
  auto mat = [](const Eigen::MatrixXd& A) {
    nlohmann::json a = nlohmann::json::array();
    for (Eigen::Index i = 0; i < A.rows(); ++i) {
      std::vector<double> row(A.cols());
      for (Eigen::Index k = 0; k < A.cols(); ++k) row[k] = A(i, k);
      a.push_back(row);
    }
    return a;
  };
  j["D0"] = r.D0;
  j["M_first_order"] = mat(r.M);
  j["D0_Q_plus_Q0_first_order"] = mat(r.Q_sum);
  j["first_order_relative_gap"] = r.first_order_rel;
  j["zero_order"] = {{"plain", r.zero.plain}, {"corrected", r.zero.corrected}, {"Q00", r.zero.Q00},
                     {"integral_abs_q1", r.zero.integral_abs}};
  return j;
}

}  // namespace ptensor
