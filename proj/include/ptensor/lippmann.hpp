#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>
#include <unsupported/Eigen/IterativeSolvers>

#include "ptensor/kernels.hpp"
#include "ptensor/meshgeom.hpp"
#include "ptensor/profile.hpp"

namespace ptensor {

/// Thrown when a second-kind solve fails to reach its tolerance.
struct SolverError : std::runtime_error {
  std::vector<double> residual_history;
  SolverError(const std::string& msg, std::vector<double> hist)
      : std::runtime_error(msg), residual_history(std::move(hist)) {}
};

/// Thrown when a corrector is requested before its dependencies exist.
struct DependencyError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct SolveOptions {
  double tol = 1e-10;
  int dense_limit = 6000;
  int restart = 60;
  int max_iterations = 3000;
};

/**
 * @brief Factorises I + s*T once and solves for several right-hand sides.
 * Dense LU up to dense_limit unknowns, restarted GMRES above.
 */
class SecondKindSolver {
 public:
  SecondKindSolver(const Eigen::MatrixXd& T, double scale, const SolveOptions& opt = {}) : opt_(opt) {
    A_ = scale * T;
    A_.diagonal().array() += 1.0;
    if (A_.rows() <= opt_.dense_limit) {
      lu_ = std::make_unique<Eigen::PartialPivLU<Eigen::MatrixXd>>(A_);
      // Reciprocal condition estimate from the LU factors.
      const auto& U = lu_->matrixLU();
      double dmin = std::numeric_limits<double>::infinity(), dmax = 0.0;
      for (Eigen::Index k = 0; k < U.rows(); ++k) {
        dmin = std::min(dmin, std::abs(U(k, k)));
        dmax = std::max(dmax, std::abs(U(k, k)));
      }
      pivot_ratio_ = dmax > 0 ? dmin / dmax : 0.0;
    }
  }

  /// Ratio of smallest to largest LU pivot (coarse conditioning indicator; 0 if iterative).
  double pivot_ratio() const { return pivot_ratio_; }

  Eigen::MatrixXd solve(const Eigen::MatrixXd& B, std::vector<double>* rel_residuals = nullptr) const {
    Eigen::MatrixXd X(B.rows(), B.cols());
    std::vector<double> hist;
    if (lu_) {
      X = lu_->solve(B);
    } else {
      Eigen::GMRES<Eigen::MatrixXd, Eigen::IdentityPreconditioner> gm;
      gm.set_restart(opt_.restart);
      gm.setMaxIterations(opt_.max_iterations);
      gm.setTolerance(opt_.tol);
      gm.compute(A_);
      for (Eigen::Index k = 0; k < B.cols(); ++k) {
        X.col(k) = gm.solve(B.col(k));
        hist.push_back(gm.error());
      }
    }
    if (rel_residuals) rel_residuals->clear();
    for (Eigen::Index k = 0; k < B.cols(); ++k) {
      const double bn = B.col(k).norm();
      const double r = (A_ * X.col(k) - B.col(k)).norm() / (bn > 0 ? bn : 1.0);
      if (rel_residuals) rel_residuals->push_back(r);
      if (!(r <= std::max(opt_.tol, 1e-12) * 10.0))
        throw SolverError("second-kind solve did not reach tolerance (relative residual " + std::to_string(r) + ")",
                          hist.empty() ? std::vector<double>{r} : hist);
    }
    return X;
  }

  const Eigen::MatrixXd& matrix() const { return A_; }

 private:
  SolveOptions opt_;
  Eigen::MatrixXd A_;
  std::unique_ptr<Eigen::PartialPivLU<Eigen::MatrixXd>> lu_;
  double pivot_ratio_ = 0.0;
};

enum class CorrectorKind { phi_jkl, psi_eps, phi_mod, phi_eta };

inline std::string to_string(CorrectorKind k) {
  switch (k) {
    case CorrectorKind::phi_jkl: return "phi_jkl";
    case CorrectorKind::psi_eps: return "psi_eps";
    case CorrectorKind::phi_mod: return "phi_mod";
    case CorrectorKind::phi_eta: return "phi_eta";
  }
  return "unknown";
}

/// Cellwise vector source: writes a Dim x K block of source values at x in cell c.
template <int Dim>
using VectorSource = std::function<void(std::size_t, const Vec<Dim>&, Eigen::Ref<Eigen::MatrixXd>)>;
/// Cellwise scalar source: writes K values at x in cell c.
template <int Dim>
using ScalarSource = std::function<void(std::size_t, const Vec<Dim>&, Eigen::Ref<Eigen::VectorXd>)>;

/**
 * @brief A solved corrector: P1 nodal values on the mesh of B plus the data needed to
 * evaluate it anywhere through its integral representation
 *   phi(y) = -∫_B flux(x)·∇Γ(x-y) dx + ∫_B source(x) Γ(x-y) dx.
 */
template <int Dim>
struct CorrectorField {
  CorrectorKind kind = CorrectorKind::phi_jkl;
  MultiIndex j, k;
  int l = 0;
  double eps = 0.0, eta = 0.0;
  std::shared_ptr<const VolumeMesh<Dim>> mesh;
  Eigen::VectorXd values;
  std::vector<Vec<Dim>> gradients;
  double solver_residual = 0.0;
  std::function<Vec<Dim>(std::size_t, const Vec<Dim>&)> flux;
  std::function<double(std::size_t, const Vec<Dim>&)> source;
  Eigen::VectorXd rhs;  ///< collocation right-hand side

  /// Value at an arbitrary point via the integral representation.
  double evaluate(const Vec<Dim>& y, const KernelEval& opt = {}) const {
    double s = 0.0;
    Eigen::VectorXd out(1);
    for (std::size_t c = 0; c < mesh->num_cells(); ++c) {
      integrate_cell<Dim>(*mesh, c, y, 1,
                          [&](const Vec<Dim>& x, Eigen::VectorXd& r) {
                            double v = 0.0;
                            if (flux) v -= flux(c, x).dot(grad_fundamental_solution<Dim>(x - y));
                            if (source) v += source(c, x) * fundamental_solution<Dim>(x - y);
                            r[0] = v;
                          },
                          out, opt);
      s += out[0];
    }
    return s;
  }

  /// P1 value at a point inside cell c.
  double interpolate(std::size_t c, const Vec<Dim>& x) const {
    const auto& cell = mesh->cells[c];
    const Vec<Dim> d = x - mesh->vertices[cell[0]];
    double s = values[cell[0]];
    for (int a = 1; a <= Dim; ++a) s += mesh->bary_grads[c][a].dot(d) * (values[cell[a]] - values[cell[0]]);
    return s;
  }

  double gradient_l2() const {
    double s = 0.0;
    for (std::size_t c = 0; c < mesh->num_cells(); ++c) s += mesh->cell_measures[c] * gradients[c].squaredNorm();
    return std::sqrt(s);
  }

  std::string label() const {
    std::ostringstream os;
    os << to_string(kind) << "_j" << j.str() << "_k" << k.str() << "_l" << l;
    if (kind == CorrectorKind::psi_eps || kind == CorrectorKind::phi_eta) os << "_eps" << eps;
    if (kind == CorrectorKind::phi_eta) os << "_eta" << eta;
    return os.str();
  }
};

/// Exports a corrector as a plain-text mesh-field dump.
template <int Dim>
void write_corrector(std::ostream& os, const CorrectorField<Dim>& f) {
  write_mesh(os, *f.mesh, {{f.label(), f.values}});
}

namespace detail {

template <int Dim>
std::vector<Vec<Dim>> cell_gradients(const VolumeMesh<Dim>& m, const Eigen::VectorXd& u) {
  std::vector<Vec<Dim>> g(m.num_cells());
  for (std::size_t c = 0; c < m.num_cells(); ++c) g[c] = m.cell_gradient(c, u);
  return g;
}

}  // namespace detail

enum class OperatorKind { T0, T0d, T_eps, T_helmholtz };

/**
 * @brief Discretised volume integral operator acting on P1 nodal fields.
 * Gradient kind: (Tφ)(y_n) = ∫_B w(x) ∇φ(x)·∇_xΓ(x−y_n) dx.
 * Scalar kind:   (Tφ)(y_n) = ∫_B q(x) φ(x) Γ(x−y_n) dx.
 */
template <int Dim>
struct IntegralOperator {
  OperatorKind kind = OperatorKind::T0;
  std::shared_ptr<const VolumeMesh<Dim>> mesh;
  std::function<double(const Vec<Dim>&)> weight;
  KernelEval kernel;
  Eigen::MatrixXd matrix;
  double eps = 0.0;

  bool gradient_kind() const { return kind != OperatorKind::T_helmholtz; }

  Eigen::VectorXd apply(const Eigen::VectorXd& phi) const { return matrix * phi; }

  /// Matrix-free application recomputing all kernel integrals.
  Eigen::VectorXd apply_matrix_free(const Eigen::VectorXd& phi) const {
    const auto& m = *mesh;
    const Eigen::Index n = static_cast<Eigen::Index>(m.num_vertices());
    Eigen::VectorXd out = Eigen::VectorXd::Zero(n);
    const auto grads = detail::cell_gradients(m, phi);
#pragma omp parallel for schedule(dynamic, 8)
    for (Eigen::Index r = 0; r < n; ++r) {
      const Vec<Dim> y = m.vertices[r];
      Eigen::VectorXd val(1);
      double s = 0.0;
      for (std::size_t c = 0; c < m.num_cells(); ++c) {
        if (gradient_kind()) {
          const Vec<Dim> G = grads[c];
          integrate_cell<Dim>(m, c, y, 1,
                              [&](const Vec<Dim>& x, Eigen::VectorXd& o) {
                                o[0] = weight(x) * G.dot(grad_fundamental_solution<Dim>(x - y));
                              },
                              val, kernel);
        } else {
          const auto& cell = m.cells[c];
          const Vec<Dim> G = grads[c];
          const Vec<Dim> p0 = m.vertices[cell[0]];
          const double v0 = phi[cell[0]];
          integrate_cell<Dim>(m, c, y, 1,
                              [&](const Vec<Dim>& x, Eigen::VectorXd& o) {
                                o[0] = weight(x) * (v0 + G.dot(x - p0)) * fundamental_solution<Dim>(x - y);
                              },
                              val, kernel);
        }
        s += val[0];
      }
      out[r] = s;
    }
    return out;
  }
};

/**
 * @brief Rows of the gradient-kernel operator at arbitrary targets:
 * R(r, v) = Σ_c ∫_c w(x) ∇_xΓ(x − y_r) dx · ∇λ_v|_c.
 */
template <int Dim>
Eigen::MatrixXd gradient_kernel_rows(const VolumeMesh<Dim>& m, const std::function<double(const Vec<Dim>&)>& w,
                                     const std::vector<Vec<Dim>>& targets, const KernelEval& kernel = {}) {
  const Eigen::Index nt = static_cast<Eigen::Index>(targets.size());
  Eigen::MatrixXd R = Eigen::MatrixXd::Zero(nt, static_cast<Eigen::Index>(m.num_vertices()));
  // Skip cells where the weight vanishes at a degree-4 rule.
  std::vector<char> active(m.num_cells(), 0);
  const auto& rule = simplex_rule<Dim>(4);
  for (std::size_t c = 0; c < m.num_cells(); ++c)
    for (std::size_t q = 0; q < rule.size() && !active[c]; ++q)
      if (w(m.map_point(c, rule.bary[q])) != 0.0) active[c] = 1;
#pragma omp parallel for schedule(dynamic, 8)
  for (Eigen::Index r = 0; r < nt; ++r) {
    const Vec<Dim> y = targets[r];
    Eigen::VectorXd g(Dim);
    for (std::size_t c = 0; c < m.num_cells(); ++c) {
      if (!active[c]) continue;
      integrate_cell<Dim>(m, c, y, Dim,
                          [&](const Vec<Dim>& x, Eigen::VectorXd& o) { o = w(x) * grad_fundamental_solution<Dim>(x - y); },
                          g, kernel);
      const Vec<Dim> gv = g;
      for (int a = 0; a <= Dim; ++a) R(r, m.cells[c][a]) += gv.dot(m.bary_grads[c][a]);
    }
  }
  return R;
}

/// Assembles the gradient-kernel collocation operator for the weight w.
template <int Dim>
IntegralOperator<Dim> assemble_gradient_operator(std::shared_ptr<const VolumeMesh<Dim>> mesh,
                                                 std::function<double(const Vec<Dim>&)> w, OperatorKind kind,
                                                 const KernelEval& kernel = {}) {
  IntegralOperator<Dim> op;
  op.kind = kind;
  op.mesh = mesh;
  op.weight = w;
  op.kernel = kernel;
  op.matrix = gradient_kernel_rows<Dim>(*mesh, w, mesh->vertices, kernel);
  return op;
}

/// Assembles the scalar-kernel collocation operator for the potential q.
template <int Dim>
IntegralOperator<Dim> assemble_scalar_operator(std::shared_ptr<const VolumeMesh<Dim>> mesh,
                                               std::function<double(const Vec<Dim>&)> q, const KernelEval& kernel = {}) {
  IntegralOperator<Dim> op;
  op.kind = OperatorKind::T_helmholtz;
  op.mesh = mesh;
  op.weight = q;
  op.kernel = kernel;
  const auto& m = *mesh;
  const Eigen::Index n = static_cast<Eigen::Index>(m.num_vertices());
  op.matrix = Eigen::MatrixXd::Zero(n, n);
#pragma omp parallel for schedule(dynamic, 8)
  for (Eigen::Index r = 0; r < n; ++r) {
    const Vec<Dim> y = m.vertices[r];
    Eigen::VectorXd g(Dim + 1);
    for (std::size_t c = 0; c < m.num_cells(); ++c) {
      const auto& cell = m.cells[c];
      const Vec<Dim> p0 = m.vertices[cell[0]];
      const auto& bg = m.bary_grads[c];
      integrate_cell<Dim>(m, c, y, Dim + 1,
                          [&](const Vec<Dim>& x, Eigen::VectorXd& o) {
                            const double k = q(x) * fundamental_solution<Dim>(x - y);
                            double l0 = 1.0;
                            for (int a = 1; a <= Dim; ++a) {
                              o[a] = bg[a].dot(x - p0);
                              l0 -= o[a];
                            }
                            o[0] = l0;
                            o *= k;
                          },
                          g, kernel);
      for (int a = 0; a <= Dim; ++a) op.matrix(r, cell[a]) += g[a];
    }
  }
  return op;
}

/// Right-hand sides −∫_B F_k(x)·∇_xΓ(x−y_n) dx + ∫_B f_k(x)Γ(x−y_n) dx at all nodes (N x K).
template <int Dim>
Eigen::MatrixXd collocation_rhs(const VolumeMesh<Dim>& m, const std::vector<Vec<Dim>>& targets, int K,
                                const VectorSource<Dim>& F, const ScalarSource<Dim>& f, const KernelEval& kernel = {}) {
  const Eigen::Index n = static_cast<Eigen::Index>(targets.size());
  Eigen::MatrixXd R = Eigen::MatrixXd::Zero(n, K);
  // Cells where all sources vanish at the degree-4 points are skipped.
  std::vector<char> active(m.num_cells(), 0);
  {
    const auto& rule = simplex_rule<Dim>(4);
    Eigen::MatrixXd Fb(Dim, K);
    Eigen::VectorXd fb(K);
    for (std::size_t c = 0; c < m.num_cells(); ++c)
      for (std::size_t q = 0; q < rule.size() && !active[c]; ++q) {
        const Vec<Dim> x = m.map_point(c, rule.bary[q]);
        if (F) {
          F(c, x, Fb);
          if (Fb.cwiseAbs().maxCoeff() != 0.0) active[c] = 1;
        }
        if (f) {
          f(c, x, fb);
          if (fb.cwiseAbs().maxCoeff() != 0.0) active[c] = 1;
        }
      }
  }
#pragma omp parallel for schedule(dynamic, 8)
  for (Eigen::Index r = 0; r < n; ++r) {
    const Vec<Dim> y = targets[r];
    Eigen::VectorXd acc = Eigen::VectorXd::Zero(K), part(K);
    Eigen::MatrixXd Fb(Dim, K);
    Eigen::VectorXd fb(K);
    for (std::size_t c = 0; c < m.num_cells(); ++c) {
      if (!active[c]) continue;
      integrate_cell<Dim>(m, c, y, K,
                          [&](const Vec<Dim>& x, Eigen::VectorXd& o) {
                            o.setZero();
                            if (F) {
                              F(c, x, Fb);
                              o -= Fb.transpose() * grad_fundamental_solution<Dim>(x - y);
                            }
                            if (f) {
                              f(c, x, fb);
                              o += fb * fundamental_solution<Dim>(x - y);
                            }
                          },
                          part, kernel);
      acc += part;
    }
    R.row(r) = acc.transpose();
  }
  return R;
}

template <int Dim>
Eigen::MatrixXd collocation_rhs(const VolumeMesh<Dim>& m, int K, const VectorSource<Dim>& F, const ScalarSource<Dim>& f,
                                const KernelEval& kernel = {}) {
  return collocation_rhs<Dim>(m, m.vertices, K, F, f, kernel);
}

struct CorrectorOptions {
  KernelEval kernel;
  SolveOptions solve;
  int max_level = -1;  ///< hierarchy depth cap (defaults to d)
};

/**
 * @brief Corrector solver for the diffusion branch on the reference inclusion B.
 * Owns the assembled T0 and the hierarchy cache (thread-safe insert-or-get).
 */
template <int Dim>
class DiffusionCorrectors {
 public:
  using Field = CorrectorField<Dim>;
  using FieldPtr = std::shared_ptr<const Field>;

  DiffusionCorrectors(std::shared_ptr<const VolumeMesh<Dim>> mesh, InclusionProfile<Dim> D1, BackgroundModel<Dim> model,
                      CorrectorOptions opt = {})
      : mesh_(std::move(mesh)), D1_(std::move(D1)), model_(std::move(model)), opt_(opt) {
    opt_.kernel.dim = Dim;
    if (opt_.max_level < 0) opt_.max_level = Dim;
    d0_ = model_.D0_center();
    a0_ = 1.0 / d0_;
    check_positivity();
  }

  const VolumeMesh<Dim>& mesh() const { return *mesh_; }
  std::shared_ptr<const VolumeMesh<Dim>> mesh_ptr() const { return mesh_; }
  const InclusionProfile<Dim>& profile() const { return D1_; }
  const BackgroundModel<Dim>& model() const { return model_; }
  const CorrectorOptions& options() const { return opt_; }
  double D0() const { return d0_; }

  /// Minimum of D0(x0) + D1 over quadrature points and vertices.
  double positivity_margin() const {
    double mn = std::numeric_limits<double>::infinity();
    const auto& rule = simplex_rule<Dim>(4);
    for (std::size_t c = 0; c < mesh_->num_cells(); ++c)
      for (std::size_t q = 0; q < rule.size(); ++q) mn = std::min(mn, d0_ + D1_(mesh_->map_point(c, rule.bary[q])));
    for (const auto& v : mesh_->vertices) mn = std::min(mn, d0_ + D1_(v));
    return mn;
  }

  /// T0 with weight D1(x) D0^{-1}(x0).
  const IntegralOperator<Dim>& T0() const {
    std::call_once(t0_once_, [&] {
      auto prof = D1_.value;
      const double a0 = a0_;
      t0_ = std::make_unique<IntegralOperator<Dim>>(assemble_gradient_operator<Dim>(
          mesh_, [prof, a0](const Vec<Dim>& x) { return a0 * prof(x); }, OperatorKind::T0, opt_.kernel));
    });
    return *t0_;
  }

  const SecondKindSolver& T0_solver() const {
    std::call_once(s0_once_, [&] { s0_ = std::make_unique<SecondKindSolver>(T0().matrix, 1.0, opt_.solve); });
    return *s0_;
  }

  /// φ_jk^0: (I+T0)φ = −D0^{-1}(x0) ∫_B D1 x^k ∇x^j·∇Γ.
  FieldPtr base(const MultiIndex& j, const MultiIndex& k) const { return hierarchy(j, k, 0); }

  /// φ_jk^l, recursively from lower levels (cached).
  FieldPtr hierarchy(const MultiIndex& j, const MultiIndex& k, int l) const {
    if (j.order() < 1) throw std::invalid_argument("corrector: |j| must be >= 1");
    if (l < 0 || l > opt_.max_level) throw std::invalid_argument("corrector: level l out of range");
    const std::string key = "h" + j.str() + k.str() + std::to_string(l);
    if (auto f = lookup(key)) return f;
    // Dependencies: φ_jk^{l-|m|}, 1 <= |m| <= l.
    std::vector<std::pair<double, std::pair<MultiIndex, FieldPtr>>> terms;
    for (const auto& m : multi_indices(Dim, l, 1)) {
      const double c = lgamma_ratio(l, m) * model_.D0inv_derivative(m) / m.factorial();
      if (c == 0.0) continue;
      terms.push_back({c, {m, hierarchy(j, k, l - m.order())}});
    }
    auto prof = D1_.value;
    const double a0 = a0_;
    const bool delta = (l == 0);
    auto F = std::make_shared<std::function<Vec<Dim>(std::size_t, const Vec<Dim>&)>>(
        [prof, a0, delta, j, k, terms](std::size_t c, const Vec<Dim>& x) -> Vec<Dim> {
          const double d1 = prof(x);
          Vec<Dim> v = Vec<Dim>::Zero();
          if (d1 == 0.0) return v;
          if (delta) v += a0 * d1 * monomial<Dim>(k, x) * monomial_grad<Dim>(j, x);
          for (const auto& t : terms) v += t.first * d1 * monomial<Dim>(t.second.first, x) * t.second.second->gradients[c];
          return v;
        });
    auto field = solve_gradient(T0(), T0_solver(), *F, nullptr);
    auto out = std::make_shared<Field>(std::move(field));
    out->kind = CorrectorKind::phi_jkl;
    out->j = j;
    out->k = k;
    out->l = l;
    auto w = T0().weight;
    auto grads = std::make_shared<std::vector<Vec<Dim>>>(out->gradients);
    out->flux = [w, F, grads](std::size_t c, const Vec<Dim>& x) { return (w(x) * (*grads)[c] + (*F)(c, x)).eval(); };
    return insert(key, out);
  }

  /// Ψ^ε_j with the un-expanded weight D1(x) D0^{-1}(x0+εx).
  FieldPtr psi_eps(const MultiIndex& j, double eps) const {
    if (j.order() < 1) throw std::invalid_argument("psi_eps: |j| must be >= 1");
    if (!(eps >= 0)) throw std::invalid_argument("psi_eps: eps must be >= 0");
    std::ostringstream ks;
    ks.precision(17);
    ks << "p" << j.str() << eps;
    if (auto f = lookup(ks.str())) return f;
    std::shared_ptr<const IntegralOperator<Dim>> op;
    std::shared_ptr<const SecondKindSolver> solver;
    if (model_.is_constant() || eps == 0.0) {
      op = std::shared_ptr<const IntegralOperator<Dim>>(&T0(), [](auto*) {});
      solver = std::shared_ptr<const SecondKindSolver>(&T0_solver(), [](auto*) {});
    } else {
      auto w = eps_weight(eps);
      check_weight_positivity(w);
      op = std::make_shared<IntegralOperator<Dim>>(assemble_gradient_operator<Dim>(mesh_, w, OperatorKind::T_eps, opt_.kernel));
      solver = std::make_shared<SecondKindSolver>(op->matrix, 1.0, opt_.solve);
    }
    auto w = op->weight;
    auto F = std::make_shared<std::function<Vec<Dim>(std::size_t, const Vec<Dim>&)>>(
        [w, j](std::size_t, const Vec<Dim>& x) -> Vec<Dim> { return w(x) * monomial_grad<Dim>(j, x); });
    auto out = std::make_shared<Field>(solve_gradient(*op, *solver, *F, nullptr));
    out->kind = CorrectorKind::psi_eps;
    out->j = j;
    out->k = MultiIndex::zero(Dim);
    out->eps = eps;
    auto grads = std::make_shared<std::vector<Vec<Dim>>>(out->gradients);
    out->flux = [w, F, grads](std::size_t c, const Vec<Dim>& x) { return (w(x) * (*grads)[c] + (*F)(c, x)).eval(); };
    return insert(ks.str(), out);
  }

  /// Φ_j: (I+T0)Φ = ∫_B Γ(x−y) D0^{-1} ∇D1·∇x^j dx (constant D0, smooth D1).
  FieldPtr phi_modified(const MultiIndex& j) const {
    if (!model_.is_constant()) throw std::invalid_argument("phi_modified: requires a constant background");
    if (!D1_.has_gradient() || D1_.regularity != Regularity::smooth_compact)
      throw std::invalid_argument("phi_modified: requires a smooth profile with a gradient");
    const std::string key = "m" + j.str();
    if (auto f = lookup(key)) return f;
    auto grad = D1_.gradient;
    const double a0 = a0_;
    auto src = std::make_shared<std::function<double(std::size_t, const Vec<Dim>&)>>(
        [grad, a0, j](std::size_t, const Vec<Dim>& x) { return a0 * grad(x).dot(monomial_grad<Dim>(j, x)); });
    auto out = std::make_shared<Field>(solve_gradient(T0(), T0_solver(), nullptr, *src));
    out->kind = CorrectorKind::phi_mod;
    out->j = j;
    out->k = MultiIndex::zero(Dim);
    auto w = T0().weight;
    auto grads = std::make_shared<std::vector<Vec<Dim>>>(out->gradients);
    out->flux = [w, grads](std::size_t c, const Vec<Dim>& x) { return (w(x) * (*grads)[c]).eval(); };
    out->source = [src](std::size_t c, const Vec<Dim>& x) { return (*src)(c, x); };
    return insert(key, out);
  }

  /// Relative residual ‖(I+T)φ − rhs‖/‖rhs‖ recomputed with a matrix-free operator application.
  double verify_residual(const Field& f) const {
    const IntegralOperator<Dim>* op = &T0();
    std::unique_ptr<IntegralOperator<Dim>> tmp;
    if (f.kind == CorrectorKind::psi_eps && !model_.is_constant() && f.eps != 0.0) {
      tmp = std::make_unique<IntegralOperator<Dim>>(T0());
      tmp->weight = eps_weight(f.eps);
      op = tmp.get();
    } else if (f.kind == CorrectorKind::phi_eta) {
      throw std::invalid_argument("verify_residual: Helmholtz fields belong to HelmholtzCorrectors");
    }
    if (f.rhs.size() == 0 || f.rhs.norm() == 0.0) return 0.0;
    Eigen::VectorXd Tphi = op->apply_matrix_free(f.values);
    return (f.values + Tphi - f.rhs).norm() / f.rhs.norm();
  }

  std::size_t cache_size() const {
    std::lock_guard<std::mutex> lock(mtx_);
    return cache_.size();
  }

  /// Far-field probe |φ(R e)|·R^{d−1} at the given radii along direction e.
  std::vector<double> decay_probe(const Field& f, const std::vector<double>& radii, const Vec<Dim>& dir) const {
    std::vector<double> out;
    for (double R : radii) out.push_back(std::abs(f.evaluate(R * dir.normalized(), opt_.kernel)) * std::pow(R, Dim - 1));
    return out;
  }

 private:
  static double lgamma_ratio(int l, const MultiIndex& m) {
    // l! / (l - |m|)!
    double r = 1.0;
    for (int s = l - m.order() + 1; s <= l; ++s) r *= s;
    return r;
  }

  std::function<double(const Vec<Dim>&)> eps_weight(double eps) const {
    auto prof = D1_.value;
    auto mdl = model_;
    return [prof, mdl, eps](const Vec<Dim>& x) {
      const double d1 = prof(x);
      return d1 == 0.0 ? 0.0 : d1 * mdl.D0inv_at(mdl.x0 + eps * x);
    };
  }

  void check_positivity() const {
    const double mn = positivity_margin();
    if (!(mn > 0.0)) throw std::invalid_argument("inclusion profile violates D0(x0) + D1 > 0 (min " + std::to_string(mn) + ")");
  }

  template <class W>
  void check_weight_positivity(const W& w) const {
    const auto& rule = simplex_rule<Dim>(4);
    for (std::size_t c = 0; c < mesh_->num_cells(); ++c)
      for (std::size_t q = 0; q < rule.size(); ++q)
        if (!(1.0 + w(mesh_->map_point(c, rule.bary[q])) > 0.0))
          throw std::invalid_argument("inclusion profile violates 1 + D1 D0^{-1}(x0+eps x) > 0");
  }

  Field solve_gradient(const IntegralOperator<Dim>& op, const SecondKindSolver& solver,
                       const std::function<Vec<Dim>(std::size_t, const Vec<Dim>&)>& F,
                       const std::function<double(std::size_t, const Vec<Dim>&)>& f) const {
    VectorSource<Dim> Fs;
    ScalarSource<Dim> fs;
    if (F) Fs = [&F](std::size_t c, const Vec<Dim>& x, Eigen::Ref<Eigen::MatrixXd> o) { o.col(0) = F(c, x); };
    if (f) fs = [&f](std::size_t c, const Vec<Dim>& x, Eigen::Ref<Eigen::VectorXd> o) { o[0] = f(c, x); };
    Eigen::MatrixXd rhs = collocation_rhs<Dim>(*mesh_, 1, Fs, fs, opt_.kernel);
    Field out;
    out.mesh = mesh_;
    if (rhs.norm() == 0.0) {
      out.values = Eigen::VectorXd::Zero(rhs.rows());
    } else {
      std::vector<double> res;
      out.values = solver.solve(rhs, &res).col(0);
      out.solver_residual = res[0];
    }
    out.gradients = detail::cell_gradients(*mesh_, out.values);
    out.rhs = rhs.col(0);
    return out;
  }

  FieldPtr lookup(const std::string& key) const {
    std::lock_guard<std::mutex> lock(mtx_);
    auto it = cache_.find(key);
    return it == cache_.end() ? nullptr : it->second;
  }
  FieldPtr insert(const std::string& key, std::shared_ptr<Field> f) const {
    std::lock_guard<std::mutex> lock(mtx_);
    auto [it, inserted] = cache_.emplace(key, f);
    return it->second;
  }

  std::shared_ptr<const VolumeMesh<Dim>> mesh_;
  InclusionProfile<Dim> D1_;
  BackgroundModel<Dim> model_;
  CorrectorOptions opt_;
  double d0_ = 1.0, a0_ = 1.0;
  mutable std::once_flag t0_once_, s0_once_;
  mutable std::unique_ptr<IntegralOperator<Dim>> t0_;
  mutable std::unique_ptr<SecondKindSolver> s0_;
  mutable std::mutex mtx_;
  mutable std::map<std::string, FieldPtr> cache_;
};

/**
 * @brief Corrector solver for the Helmholtz branch: φ + ε^η Tφ = −T x^j with
 * (Tφ)(y) = ∫_B q1(x)φ(x)Γ(x−y)dx. T is assembled once and scaled per solve.
 */
template <int Dim>
class HelmholtzCorrectors {
 public:
  using Field = CorrectorField<Dim>;
  using FieldPtr = std::shared_ptr<const Field>;

  HelmholtzCorrectors(std::shared_ptr<const VolumeMesh<Dim>> mesh, InclusionProfile<Dim> q1, CorrectorOptions opt = {})
      : mesh_(std::move(mesh)), q1_(std::move(q1)), opt_(opt) {
    opt_.kernel.dim = Dim;
  }

  const VolumeMesh<Dim>& mesh() const { return *mesh_; }
  const InclusionProfile<Dim>& profile() const { return q1_; }

  const IntegralOperator<Dim>& T() const {
    std::call_once(once_, [&] {
      t_ = std::make_unique<IntegralOperator<Dim>>(assemble_scalar_operator<Dim>(mesh_, q1_.value, opt_.kernel));
    });
    return *t_;
  }

  /// min |λ + 1| over the eigenvalues of the discretised T.
  double spectral_margin() const {
    const auto& A = T().matrix;
    if (A.cwiseAbs().maxCoeff() == 0.0) return 1.0;
    Eigen::EigenSolver<Eigen::MatrixXd> es(A, false);
    if (es.info() != Eigen::Success) throw std::runtime_error("check_H2: eigensolver failed");
    double mn = std::numeric_limits<double>::infinity();
    for (Eigen::Index k = 0; k < es.eigenvalues().size(); ++k) mn = std::min(mn, std::abs(es.eigenvalues()[k] + 1.0));
    return mn;
  }

  /// Nodal values of T x^j (exact monomial moments, no nodal interpolation).
  Eigen::VectorXd T_monomial(const MultiIndex& j) const {
    auto q = q1_.value;
    ScalarSource<Dim> f = [q, j](std::size_t, const Vec<Dim>& x, Eigen::Ref<Eigen::VectorXd> o) {
      o[0] = q(x) * monomial<Dim>(j, x);
    };
    return collocation_rhs<Dim>(*mesh_, 1, nullptr, f, opt_.kernel).col(0);
  }

  FieldPtr solve(const MultiIndex& j, double eta, double eps) const {
    if (!(eta >= 0.0 && eta <= 2.0)) throw std::invalid_argument("helmholtz corrector: eta must lie in [0,2]");
    if (!(eps > 0.0)) throw std::invalid_argument("helmholtz corrector: eps must be positive");
    std::ostringstream ks;
    ks.precision(17);
    ks << j.str() << ":" << eta << ":" << eps;
    {
      std::lock_guard<std::mutex> lock(mtx_);
      auto it = cache_.find(ks.str());
      if (it != cache_.end()) return it->second;
    }
    const double s = std::pow(eps, eta);
    if (eta == 0.0) {
      const double margin = spectral_margin();
      if (!(margin > 1e-8))
        throw std::runtime_error("helmholtz corrector: -1 lies in the spectrum of T (margin " + std::to_string(margin) + ")");
    }
    Eigen::VectorXd rhs = -T_monomial(j);
    auto out = std::make_shared<Field>();
    out->kind = CorrectorKind::phi_eta;
    out->j = j;
    out->k = MultiIndex::zero(Dim);
    out->eta = eta;
    out->eps = eps;
    out->mesh = mesh_;
    if (rhs.norm() == 0.0) {
      out->values = Eigen::VectorXd::Zero(rhs.rows());
    } else {
      SecondKindSolver solver(T().matrix, s, opt_.solve);
      std::vector<double> res;
      out->values = solver.solve(rhs, &res).col(0);
      out->solver_residual = res[0];
    }
    out->gradients = detail::cell_gradients(*mesh_, out->values);
    auto q = q1_.value;
    auto vals = std::make_shared<Field>(*out);
    out->source = [q, vals, s, j](std::size_t c, const Vec<Dim>& x) {
      return -q(x) * (s * vals->interpolate(c, x) + monomial<Dim>(j, x));
    };
    std::lock_guard<std::mutex> lock(mtx_);
    return cache_.emplace(ks.str(), out).first->second;
  }

 private:
  std::shared_ptr<const VolumeMesh<Dim>> mesh_;
  InclusionProfile<Dim> q1_;
  CorrectorOptions opt_;
  mutable std::once_flag once_;
  mutable std::unique_ptr<IntegralOperator<Dim>> t_;
  mutable std::mutex mtx_;
  mutable std::map<std::string, FieldPtr> cache_;
};

/// Convenience: distance of the spectrum of the discretised T from −1.
template <int Dim>
double check_H2(std::shared_ptr<const VolumeMesh<Dim>> mesh, const InclusionProfile<Dim>& q1, const CorrectorOptions& opt = {}) {
  HelmholtzCorrectors<Dim> h(std::move(mesh), q1, opt);
  return h.spectral_margin();
}

}  // namespace ptensor
