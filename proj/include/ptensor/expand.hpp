#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <memory>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <boost/math/distributions/students_t.hpp>
#include <json.hpp>

#include "ptensor/fem.hpp"
#include "ptensor/lippmann.hpp"
#include "ptensor/meshgeom.hpp"
#include "ptensor/profile.hpp"
#include "ptensor/tensors.hpp"

namespace ptensor {

/// Derivatives ∂^jU(x0) (not divided by j!) with an error estimate per index.
template <int Dim>
struct TaylorData {
  Vec<Dim> x0 = Vec<Dim>::Zero();
  int max_order = 0;
  double radius = 0.0;
  std::map<MultiIndex, double> derivative;
  std::map<MultiIndex, double> error;

  double at(const MultiIndex& j) const {
    auto it = derivative.find(j);
    if (it == derivative.end()) throw DependencyError("TaylorData: derivative " + j.str() + " not available");
    return it->second;
  }
  /// Taylor coefficient ∂^jU(x0)/j!.
  double coefficient(const MultiIndex& j) const { return at(j) / j.factorial(); }
};

struct DerivativeFitOptions {
  double radius_factor = 5.0;  ///< patch radius in units of the local mesh size
  double radius = 0.0;         ///< explicit radius (overrides radius_factor)
  int extra_degree = 1;        ///< fit degree = max_order + extra_degree
  double inclusion_radius = 0.0;  ///< a nonzero value marks an inclusion at x0: the fit is refused
};

/**
 * @brief Least-squares polynomial fit of a P1 nodal field around x0 returning ∂^jU(x0)
 * for |j| <= max_order.
 */
template <int Dim>
TaylorData<Dim> derivatives_at(const VolumeMesh<Dim>& m, const Eigen::VectorXd& u, const Vec<Dim>& x0, int max_order,
                               const DerivativeFitOptions& opt = {}) {
  if (opt.inclusion_radius > 0.0) throw std::invalid_argument("derivatives_at: patch touches the inclusion");
  double dist_b = HUGE_VAL;
  for (const auto& f : m.boundary_facets)
    for (int v : f) dist_b = std::min(dist_b, (m.vertices[v] - x0).norm());
  double h = 0.0, best = HUGE_VAL;
  for (std::size_t c = 0; c < m.num_cells(); ++c) {
    const double d = (m.centroids[c] - x0).norm();
    if (d < best) {
      best = d;
      h = m.cell_diameters[c];
    }
  }
  const int degree = max_order + opt.extra_degree;
  const auto basis = multi_indices(Dim, degree, 0);
  double rho = opt.radius > 0 ? opt.radius : opt.radius_factor * h;
  std::vector<int> pts;
  for (int grow = 0; grow < 40; ++grow) {
    pts.clear();
    for (std::size_t v = 0; v < m.num_vertices(); ++v)
      if ((m.vertices[v] - x0).norm() <= rho) pts.push_back(static_cast<int>(v));
    if (pts.size() >= 2 * basis.size()) break;
    rho *= 1.25;
  }
  if (rho >= dist_b) throw std::invalid_argument("derivatives_at: patch touches the boundary");
  if (pts.size() < basis.size()) throw std::invalid_argument("derivatives_at: too few nodes in the patch");
  Eigen::MatrixXd A(pts.size(), basis.size());
  Eigen::VectorXd b(pts.size());
  for (std::size_t r = 0; r < pts.size(); ++r) {
    const Vec<Dim> z = (m.vertices[pts[r]] - x0) / rho;
    for (std::size_t c = 0; c < basis.size(); ++c) A(r, c) = monomial<Dim>(basis[c], z);
    b[r] = u[pts[r]];
  }
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(A);
  const Eigen::VectorXd coef = qr.solve(b);
  const double rms = std::sqrt((A * coef - b).squaredNorm() / std::max<double>(1.0, pts.size() - basis.size()));
  TaylorData<Dim> t;
  t.x0 = x0;
  t.max_order = max_order;
  t.radius = rho;
  for (std::size_t c = 0; c < basis.size(); ++c) {
    if (basis[c].order() > max_order) continue;
    const double s = basis[c].factorial() / std::pow(rho, basis[c].order());
    t.derivative[basis[c]] = coef[c] * s;
    t.error[basis[c]] = rms * s;
  }
  return t;
}

enum class ExpansionBranch { diffusion_M_M2, diffusion_M_eps, helmholtz_Q };

inline std::string to_string(ExpansionBranch b) {
  switch (b) {
    case ExpansionBranch::diffusion_M_M2: return "diffusion_M_M2";
    case ExpansionBranch::diffusion_M_eps: return "diffusion_M_eps";
    case ExpansionBranch::helmholtz_Q: return "helmholtz_Q";
  }
  return "unknown";
}

/// One term: value · ∂^iN(x0, ·), value = −ε^power · weight · tensor entry · ∂^jU(x0).
struct ExpansionTerm {
  MultiIndex i, j, k;
  int l = -1;  ///< −1 for two-index terms
  double eps_power = 0.0;
  double weight = 0.0;   ///< combinatorial weight (1/(i!j!...), background factors)
  double tensor = 0.0;   ///< tensor entry
  double derivative = 0.0;  ///< ∂^jU(x0)
  double value = 0.0;       ///< total scalar multiplying the Green trace
};

template <int Dim>
struct ExpansionPrediction {
  double eps = 0.0;
  int order = 1;
  ExpansionBranch branch = ExpansionBranch::diffusion_M_M2;
  std::vector<ExpansionTerm> terms;
  BoundaryTrace<Dim> total;

  /// Sum of the per-term traces recomputed from scratch.
  BoundaryTrace<Dim> resum(const GreenTraceSet<Dim>& green) const {
    BoundaryTrace<Dim> s = total;
    s.values.setZero();
    for (const auto& t : terms) s.values += t.value * green.at(t.i).values;
    return s;
  }
};

struct PredictionOptions {
  int order = 1;              ///< max |i|, |j| of the two-index terms
  double max_eps_power = HUGE_VAL;  ///< terms with higher ε-powers are dropped
  bool include_M2 = true;
};

namespace detail {
inline double lfact(int l) {
  double f = 1.0;
  for (int s = 2; s <= l; ++s) f *= s;
  return f;
}
}  // namespace detail

/**
 * @brief u^ε − U on ∂Ω ≈ −Σ ε^{d−2+|i|+|j|}/(i!j!) M_ij ∂^jU ∂^iN
 *        − Σ ε^{d−2+|i|+|j|+|k|+l}/(i!j!k!l!) D0(x0) ∂^kD0^{-1}(x0) M²_ijkl ∂^jU ∂^iN.
 * With the M^ε branch, `M` holds M^ε at this ε and `M2` is ignored.
 */
template <int Dim>
ExpansionPrediction<Dim> predict_diffusion(const TaylorData<Dim>& U, const PolarizationTensor& M, const PolarizationTensor* M2,
                                           const BackgroundModel<Dim>& model, const GreenTraceSet<Dim>& green, double eps,
                                           ExpansionBranch branch, const PredictionOptions& opt = {}) {
  if (branch == ExpansionBranch::helmholtz_Q) throw std::invalid_argument("predict_diffusion: helmholtz branch");
  if (branch == ExpansionBranch::diffusion_M_eps && M.kind != TensorKind::M_eps)
    throw std::invalid_argument("predict_diffusion: the M^eps branch needs an M_eps tensor");
  ExpansionPrediction<Dim> p;
  p.eps = eps;
  p.order = opt.order;
  p.branch = branch;
  const auto idx = multi_indices(Dim, opt.order, 1);
  for (const auto& i : idx) {
    if (!green.has(i)) throw DependencyError("predict_diffusion: Green trace for " + i.str() + " missing");
    for (const auto& j : idx) {
      if (!M.has(i, j)) throw DependencyError("predict_diffusion: tensor entry (" + i.str() + "," + j.str() + ") missing");
      ExpansionTerm t;
      t.i = i;
      t.j = j;
      t.eps_power = Dim - 2 + i.order() + j.order();
      if (t.eps_power > opt.max_eps_power) continue;
      t.weight = 1.0 / (i.factorial() * j.factorial());
      t.tensor = M.at(i, j);
      t.derivative = U.at(j);
      t.value = -std::pow(eps, t.eps_power) * t.weight * t.tensor * t.derivative;
      p.terms.push_back(t);
    }
  }
  if (branch == ExpansionBranch::diffusion_M_M2 && M2 && opt.include_M2) {
    const double D0 = model.D0_center();
    for (const auto& [key, v] : M2->entries4) {
      if (key.i.order() > opt.order || key.j.order() > opt.order) continue;
      ExpansionTerm t;
      t.i = key.i;
      t.j = key.j;
      t.k = key.k;
      t.l = key.l;
      t.eps_power = Dim - 2 + key.i.order() + key.j.order() + key.k.order() + key.l;
      if (t.eps_power > opt.max_eps_power) continue;
      const double dk = model.D0inv_derivative(key.k);
      if (dk == 0.0) continue;
      if (!green.has(key.i)) throw DependencyError("predict_diffusion: Green trace for " + key.i.str() + " missing");
      t.weight = D0 * dk / (key.i.factorial() * key.j.factorial() * key.k.factorial() * detail::lfact(key.l));
      t.tensor = v;
      t.derivative = U.at(key.j);
      t.value = -std::pow(eps, t.eps_power) * t.weight * t.tensor * t.derivative;
      p.terms.push_back(t);
    }
  }
  p.total = green.traces.begin()->second;
  p.total.values.setZero();
  for (const auto& t : p.terms) p.total.values += t.value * green.at(t.i).values;
  return p;
}

/**
 * @brief v^ε − V on ∂Ω ≈ −Σ ε^{d−2+η+|i|+|j|}/(i!j!) (Q_ij + ε^η Q^η_ij) ∂^jV ∂^iN, 0 <= |i|,|j| <= order.
 */
template <int Dim>
ExpansionPrediction<Dim> predict_helmholtz(const TaylorData<Dim>& V, const PolarizationTensor& Q, const PolarizationTensor* Qeta,
                                           const GreenTraceSet<Dim>& green, double eps, double eta,
                                           const PredictionOptions& opt = {}) {
  ExpansionPrediction<Dim> p;
  p.eps = eps;
  p.order = opt.order;
  p.branch = ExpansionBranch::helmholtz_Q;
  const auto idx = multi_indices(Dim, opt.order, 0);
  for (const auto& i : idx) {
    if (!green.has(i)) throw DependencyError("predict_helmholtz: Green trace for " + i.str() + " missing");
    for (const auto& j : idx) {
      if (!Q.has(i, j)) throw DependencyError("predict_helmholtz: Q entry missing");
      ExpansionTerm t;
      t.i = i;
      t.j = j;
      t.eps_power = Dim - 2 + eta + i.order() + j.order();
      if (t.eps_power > opt.max_eps_power) continue;
      t.weight = 1.0 / (i.factorial() * j.factorial());
      t.tensor = Q.at(i, j);
      if (Qeta) {
        if (!Qeta->has(i, j)) throw DependencyError("predict_helmholtz: Q^eta entry missing");
        t.tensor += std::pow(eps, eta) * Qeta->at(i, j);
      }
      t.derivative = V.at(j);
      t.value = -std::pow(eps, t.eps_power) * t.weight * t.tensor * t.derivative;
      p.terms.push_back(t);
    }
  }
  p.total = green.traces.begin()->second;
  p.total.values.setZero();
  for (const auto& t : p.terms) p.total.values += t.value * green.at(t.i).values;
  return p;
}

/// Log-log least-squares slope of residuals against ε.
struct RateFit {
  std::vector<double> eps;
  std::vector<double> residuals;
  std::vector<bool> used;
  double slope = 0.0, intercept = 0.0;
  double slope_stderr = 0.0, slope_ci95 = 0.0;
  double target = 0.0;
  double margin = 0.0;
  bool monotone = true;
  bool fitted = false;
  std::string note;

  bool passes_at_least(double lo) const { return fitted && slope >= lo; }
  bool passes_window(double center, double tol) const { return fitted && std::abs(slope - center) <= tol; }
};

inline RateFit fit_rate(const std::vector<double>& eps, const std::vector<double>& res, const std::vector<bool>& use = {},
                        double target = 0.0, double margin = 0.0) {
  if (eps.size() != res.size()) throw std::invalid_argument("fit_rate: size mismatch");
  if (eps.size() < 3) throw std::invalid_argument("fit_rate: at least three samples required");
  for (std::size_t k = 1; k < eps.size(); ++k)
    if (!(eps[k] < eps[k - 1])) throw std::invalid_argument("fit_rate: eps samples must be strictly decreasing");
  RateFit f;
  f.eps = eps;
  f.residuals = res;
  f.used = use.empty() ? std::vector<bool>(eps.size(), true) : use;
  f.target = target;
  f.margin = margin;
  for (std::size_t k = 1; k < res.size(); ++k)
    if (res[k] > res[k - 1]) f.monotone = false;
  if (!f.monotone) f.note = "non-monotone residuals (mesh error floor reached)";
  std::vector<double> X, Y;
  for (std::size_t k = 0; k < eps.size(); ++k)
    if (f.used[k] && res[k] > 0) {
      X.push_back(std::log(eps[k]));
      Y.push_back(std::log(res[k]));
    }
  if (X.size() < 2) {
    f.note += (f.note.empty() ? "" : "; ") + std::string("fewer than two usable samples");
    return f;
  }
  const double n = static_cast<double>(X.size());
  double mx = 0, my = 0;
  for (std::size_t k = 0; k < X.size(); ++k) {
    mx += X[k] / n;
    my += Y[k] / n;
  }
  double sxx = 0, sxy = 0;
  for (std::size_t k = 0; k < X.size(); ++k) {
    sxx += (X[k] - mx) * (X[k] - mx);
    sxy += (X[k] - mx) * (Y[k] - my);
  }
  f.slope = sxy / sxx;
  f.intercept = my - f.slope * mx;
  f.fitted = true;
  if (X.size() > 2) {
    double sse = 0;
    for (std::size_t k = 0; k < X.size(); ++k) {
      const double r = Y[k] - f.intercept - f.slope * X[k];
      sse += r * r;
    }
    f.slope_stderr = std::sqrt(sse / (n - 2) / sxx);
    boost::math::students_t dist(n - 2);
    f.slope_ci95 = boost::math::quantile(boost::math::complement(dist, 0.025)) * f.slope_stderr;
  }
  return f;
}

inline nlohmann::json to_json(const RateFit& f) {
  nlohmann::json j;
  j["eps"] = f.eps;
  j["residuals"] = f.residuals;
  std::vector<int> u(f.used.begin(), f.used.end());
  j["used"] = u;
  j["slope"] = f.slope;
  j["intercept"] = f.intercept;
  j["slope_stderr"] = f.slope_stderr;
  j["slope_ci95"] = f.slope_ci95;
  j["target"] = f.target;
  j["margin"] = f.margin;
  j["monotone"] = f.monotone;
  j["fitted"] = f.fitted;
  j["note"] = f.note;
  return j;
}

template <int Dim>
nlohmann::json to_json(const ExpansionPrediction<Dim>& p) {
  nlohmann::json j;
  j["eps"] = p.eps;
  j["order"] = p.order;
  j["branch"] = to_string(p.branch);
  nlohmann::json ts = nlohmann::json::array();
  for (const auto& t : p.terms) {
    nlohmann::json e{{"i", index_json(t.i)}, {"j", index_json(t.j)}, {"eps_power", t.eps_power}, {"weight", t.weight},
                     {"tensor", t.tensor},   {"derivative", t.derivative}, {"value", t.value}};
    if (t.l >= 0) {
      e["k"] = index_json(t.k);
      e["l"] = t.l;
    }
    ts.push_back(e);
  }
  j["terms"] = ts;
  return j;
}

/// One row of a residual study.
template <int Dim>
struct StudySample {
  double eps = 0.0;
  double before = 0.0;  ///< ‖u^ε − U‖
  double after = 0.0;   ///< ‖u^ε − U − prediction‖
  double floor = 0.0;   ///< discretization floor estimate
  std::size_t vertices = 0;
  BoundaryTrace<Dim> difference, prediction;
  nlohmann::json terms;
};

template <int Dim>
struct ResidualStudy {
  std::vector<StudySample<Dim>> samples;
  RateFit before, after;
};

/// Default ε grid (geometric, ratio √2).
inline std::vector<double> default_eps_grid() { return {0.2, 0.141, 0.1, 0.071, 0.05}; }

/**
 * @brief Fits both rates; points whose after-residual is within 3× of the floor are excluded
 * from the after fit.
 */
template <int Dim>
void fit_study(ResidualStudy<Dim>& s, double before_target, double after_target) {
  std::vector<double> e, b, a;
  std::vector<bool> use;
  for (const auto& r : s.samples) {
    e.push_back(r.eps);
    b.push_back(r.before);
    a.push_back(r.after);
    use.push_back(r.after > 3.0 * r.floor);
  }
  s.before = fit_rate(e, b, {}, before_target);
  s.after = fit_rate(e, a, use, after_target);
}

/// Settings of a disk residual study (unit disk Ω, disk inclusion x0 + εB).
template <int Dim>
struct DiskStudySettings {
  Vec<Dim> x0 = Vec<Dim>::Zero();
  std::vector<double> eps = default_eps_grid();
  int inclusion_rings = 8;  ///< K: hexagonal rings inside the inclusion
  int boundary_nodes = 120;
  std::function<double(const Vec<Dim>&)> flux;  ///< g on ∂Ω
  GreenOptions green;
  PredictionOptions prediction;
  DerivativeFitOptions fit;
  bool estimate_floor = true;
};

/**
 * @brief ε sweep of the diffusion problem: FEM u^ε and U on the same validation mesh, Green
 * traces at x0, and the prediction built from the supplied tensors (M^ε tensors are requested
 * per ε through `M_eps_at` for that branch).
 */
inline ResidualStudy<2> diffusion_residual_study(const DiskStudySettings<2>& st, const InclusionProfile<2>& D1,
                                                 const BackgroundModel<2>& model, const PolarizationTensor& M,
                                                 const PolarizationTensor* M2, ExpansionBranch branch,
                                                 const std::function<PolarizationTensor(double)>& M_eps_at = nullptr) {
  ResidualStudy<2> study;
  study.samples.resize(st.eps.size());
  const bool constant = model.is_constant();
  std::function<double(const Vec<2>&)> D0 = [model](const Vec<2>& x) { return model.D0_at(x); };
  for (std::size_t k = 0; k < st.eps.size(); ++k) {
    const double eps = st.eps[k];
    auto& row = study.samples[k];
    row.eps = eps;
    auto mesh = std::make_shared<const VolumeMesh<2>>(
        graded_inclusion_disk_mesh(st.x0, eps, st.inclusion_rings, st.boundary_nodes));
    require_resolution(*mesh, st.x0, eps);
    row.vertices = mesh->num_vertices();
    NeumannProblem<2> p;
    p.mesh = mesh;
    p.flux = st.flux;
    p.diffusion = D0;
    const auto U = solve_diffusion(p);
    p.diffusion = perturbed_diffusion<2>(D0, D1, st.x0, eps);
    const auto u = solve_diffusion(p);
    row.difference = u.trace - U.trace;
    row.before = row.difference.l2_norm();
    const auto taylor = derivatives_at(*mesh, U.values, st.x0, st.prediction.order, st.fit);
    const auto green = green_derivative_traces<2>(mesh, D0, constant, st.x0, st.prediction.order, st.green);
    ExpansionPrediction<2> pred;
    if (branch == ExpansionBranch::diffusion_M_eps) {
      if (!M_eps_at) throw DependencyError("diffusion_residual_study: M^eps provider missing");
      const PolarizationTensor Me = M_eps_at(eps);
      pred = predict_diffusion(taylor, Me, nullptr, model, green, eps, branch, st.prediction);
    } else {
      pred = predict_diffusion(taylor, M, M2, model, green, eps, branch, st.prediction);
    }
    row.prediction = pred.total;
    row.terms = to_json(pred);
    row.after = (row.difference - pred.total).l2_norm();
    if (st.estimate_floor) {
      // Perturbation recomputed on the refined mesh level.
      auto fine = std::make_shared<const VolumeMesh<2>>(
          graded_inclusion_disk_mesh(st.x0, eps, 2 * st.inclusion_rings, 2 * st.boundary_nodes));
      NeumannProblem<2> q = p;
      q.mesh = fine;
      q.diffusion = D0;
      const auto Uf = solve_diffusion(q);
      q.diffusion = perturbed_diffusion<2>(D0, D1, st.x0, eps);
      const auto uf = solve_diffusion(q);
      row.floor = (resample(uf.trace - Uf.trace, U.trace) - row.difference).l2_norm();
    }
  }
  return study;
}

/// Settings for the Helmholtz sweep −Δv + (q0 + ε^{η−2} q1((x−x0)/ε)) v = 0.
struct HelmholtzStudySettings {
  DiskStudySettings<2> disk;
  double q0 = 1.0;
  double eta = 2.0;
};

inline ResidualStudy<2> helmholtz_residual_study(const HelmholtzStudySettings& st, const InclusionProfile<2>& q1,
                                                 const PolarizationTensor& Q,
                                                 const std::function<PolarizationTensor(double)>& Q_eta_at = nullptr) {
  ResidualStudy<2> study;
  study.samples.resize(st.disk.eps.size());
  const double q0 = st.q0;
  std::function<double(const Vec<2>&)> Q0 = [q0](const Vec<2>&) { return q0; };
  for (std::size_t k = 0; k < st.disk.eps.size(); ++k) {
    const double eps = st.disk.eps[k];
    auto& row = study.samples[k];
    row.eps = eps;
    auto mesh = std::make_shared<const VolumeMesh<2>>(
        graded_inclusion_disk_mesh(st.disk.x0, eps, st.disk.inclusion_rings, st.disk.boundary_nodes));
    require_resolution(*mesh, st.disk.x0, eps);
    row.vertices = mesh->num_vertices();
    NeumannProblem<2> p;
    p.mesh = mesh;
    p.flux = st.disk.flux;
    p.potential = Q0;
    p.normalization = Normalization::none;
    const auto V = solve_helmholtz(p);
    p.potential = perturbed_potential<2>(Q0, q1, st.disk.x0, eps, st.eta);
    const auto v = solve_helmholtz(p);
    row.difference = v.trace - V.trace;
    row.before = row.difference.l2_norm();
    const auto taylor = derivatives_at(*mesh, V.values, st.disk.x0, st.disk.prediction.order, st.disk.fit);
    GreenOptions go = st.disk.green;
    go.helmholtz_k2 = q0;
    std::function<double(const Vec<2>&)> one = [](const Vec<2>&) { return 1.0; };
    const auto green = green_derivative_traces<2>(mesh, one, true, st.disk.x0, st.disk.prediction.order, go);
    PolarizationTensor Qe;
    if (Q_eta_at) Qe = Q_eta_at(eps);
    const auto pred = predict_helmholtz(taylor, Q, Q_eta_at ? &Qe : nullptr, green, eps, st.eta, st.disk.prediction);
    row.prediction = pred.total;
    row.terms = to_json(pred);
    row.after = (row.difference - pred.total).l2_norm();
    if (st.disk.estimate_floor) {
      auto fine = std::make_shared<const VolumeMesh<2>>(
          graded_inclusion_disk_mesh(st.disk.x0, eps, 2 * st.disk.inclusion_rings, 2 * st.disk.boundary_nodes));
      NeumannProblem<2> q;
      q.mesh = fine;
      q.flux = st.disk.flux;
      q.potential = Q0;
      q.normalization = Normalization::none;
      const auto Vf = solve_helmholtz(q);
      q.potential = perturbed_potential<2>(Q0, q1, st.disk.x0, eps, st.eta);
      const auto vf = solve_helmholtz(q);
      row.floor = (resample(vf.trace - Vf.trace, V.trace) - row.difference).l2_norm();
    }
  }
  return study;
}

/// rates.csv rows: eps, before, after, floor, used_in_after_fit.
template <int Dim>
void write_rates_csv(std::ostream& os, const ResidualStudy<Dim>& s) {
  os.precision(17);
  os << "eps,residual_before,residual_after,floor,used_in_after_fit\n";
  for (std::size_t k = 0; k < s.samples.size(); ++k) {
    const auto& r = s.samples[k];
    os << r.eps << ',' << r.before << ',' << r.after << ',' << r.floor << ',' << (s.after.used.empty() ? 1 : int(s.after.used[k]))
       << '\n';
  }
}

}  // namespace ptensor
