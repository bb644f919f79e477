#include <gtest/gtest.h>

#include <random>

#include "ptensor/lippmann.hpp"
#include "ptensor/tensors.hpp"

using namespace ptensor;

namespace {
std::shared_ptr<const VolumeMesh<2>> disk(int K) { return std::make_shared<const VolumeMesh<2>>(hex_disk_mesh(K)); }
const MultiIndex e1 = MultiIndex::unit(2, 0);
const MultiIndex e2 = MultiIndex::unit(2, 1);
const MultiIndex zero2 = MultiIndex::zero(2);
}  // namespace

TEST(IntegralOperators, ZeroProfileGivesZeroOperatorAndCorrector) {
  DiffusionCorrectors<2> dc(disk(4), profiles::zero<2>(), BackgroundModel<2>::constant(1.0));
  EXPECT_EQ(dc.T0().matrix.cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(dc.base(e1, zero2)->values.norm(), 0.0);
  HelmholtzCorrectors<2> hc(disk(4), profiles::zero<2>());
  EXPECT_EQ(hc.solve(zero2, 2.0, 0.1)->values.norm(), 0.0);
  Eigen::VectorXd phi = Eigen::VectorXd::Zero(dc.mesh().num_vertices());
  EXPECT_EQ(dc.T0().apply(phi).norm(), 0.0);
}

TEST(IntegralOperators, MatrixAgreesWithMatrixFree) {
  // Both paths use the same adaptive cell integration, so they agree to the kernel tolerance.
  std::mt19937_64 rng(7);
  std::normal_distribution<double> N;
  CorrectorOptions opt;
  opt.kernel.tol = 1e-14;
  DiffusionCorrectors<2> dc(disk(4), profiles::bump<2>(1.5, 3, 0.9), BackgroundModel<2>::constant(2.0), opt);
  HelmholtzCorrectors<2> hc(disk(4), profiles::layered<2>(1.0, -0.5, 0.6), opt);
  for (int t = 0; t < 3; ++t) {
    Eigen::VectorXd phi(dc.mesh().num_vertices());
    for (auto& v : phi) v = N(rng);
    const Eigen::VectorXd a = dc.T0().apply(phi), b = dc.T0().apply_matrix_free(phi);
    EXPECT_LT((a - b).cwiseAbs().maxCoeff(), 1e-12 * std::max(1.0, a.cwiseAbs().maxCoeff()));
    const Eigen::VectorXd c = hc.T().apply(phi), d = hc.T().apply_matrix_free(phi);
    EXPECT_LT((c - d).cwiseAbs().maxCoeff(), 1e-12 * std::max(1.0, c.cwiseAbs().maxCoeff()));
  }
}

TEST(IntegralOperators, LinearInProfileAndYoungBound) {
  DiffusionCorrectors<2> one(disk(6), profiles::constant<2>(1.0), BackgroundModel<2>::constant(1.0));
  DiffusionCorrectors<2> two(disk(6), profiles::constant<2>(2.0), BackgroundModel<2>::constant(1.0));
  const Eigen::MatrixXd& A = one.T0().matrix;
  EXPECT_LT((two.T0().matrix - 2.0 * A).cwiseAbs().maxCoeff(), 1e-8);
  // The scalar operator obeys ‖Tφ‖∞ ≤ ‖q‖∞ ‖φ‖∞ sup_y ∫_B |Γ(x−y)|dx; for the unit disk that
  // supremum is attained at the centre and equals 1/4.
  HelmholtzCorrectors<2> hc(disk(6), profiles::constant<2>(1.0));
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> U(-1, 1);
  for (int t = 0; t < 5; ++t) {
    Eigen::VectorXd phi(hc.mesh().num_vertices());
    for (auto& v : phi) v = U(rng);
    EXPECT_LE(hc.T().apply(phi).cwiseAbs().maxCoeff(), 0.25 * phi.cwiseAbs().maxCoeff() * 1.01);
  }
}

TEST(DiffusionCorrector, UniformDiskInteriorGradient) {
  // For a disk with conductivity D0 + D1 inside D0 the interior field of x1 + φ is 2D0/(2D0 + D1) e1.
  const double D0 = 1.0, D1 = 1.0;
  DiffusionCorrectors<2> dc(disk(12), profiles::constant<2>(D1), BackgroundModel<2>::constant(D0));
  const auto f = dc.base(e1, zero2);
  const double expected = 2 * D0 / (2 * D0 + D1);
  double area = 0.0, mean1 = 0.0, mean2 = 0.0, dev = 0.0;
  for (std::size_t c = 0; c < dc.mesh().num_cells(); ++c) {
    const double w = dc.mesh().cell_measures[c];
    area += w;
    mean1 += w * (1.0 + f->gradients[c][0]);
    mean2 += w * f->gradients[c][1];
    dev += w * (Vec<2>(1.0 + f->gradients[c][0], f->gradients[c][1]) - Vec<2>(expected, 0)).squaredNorm();
  }
  EXPECT_NEAR(mean1 / area, expected, 0.01 * expected);
  EXPECT_NEAR(mean2 / area, 0.0, 1e-10);
  EXPECT_LT(std::sqrt(dev / area), 0.05 * expected);
  EXPECT_LE(f->solver_residual, 1e-10);
}

TEST(DiffusionCorrector, RadialProfileParity) {
  // The ring triangulation is not exactly symmetric, so parity holds up to the discretisation error.
  std::vector<double> mirror;
  for (int K : {8, 16}) {
    DiffusionCorrectors<2> dc(disk(K), profiles::bump<2>(2.0, 3, 1.0), BackgroundModel<2>::constant(1.0));
    const auto f = dc.base(e1, zero2);
    double worst = 0.0;
    for (const Vec<2>& y : {Vec<2>(0.3, 0.2), Vec<2>(0.55, -0.4), Vec<2>(1.7, 0.6)}) {
      const double v = f->evaluate(y);
      worst = std::max(worst, std::abs(f->evaluate(Vec<2>(-y)) + v));
      worst = std::max(worst, std::abs(f->evaluate(Vec<2>(-y[0], y[1])) + v));
      worst = std::max(worst, std::abs(f->evaluate(Vec<2>(y[0], -y[1])) - v));
    }
    worst = std::max(worst, std::abs(f->evaluate(Vec<2>(0.0, 0.5))));
    mirror.push_back(worst);
  }
  EXPECT_LT(mirror[1], 1e-5);
  EXPECT_LT(mirror[1], 0.25 * mirror[0]);
}

TEST(DiffusionCorrector, ResidualReverifiedIndependently) {
  DiffusionCorrectors<2> dc(disk(8), profiles::random_smooth<2>(4, 1.0, 0.4), BackgroundModel<2>::linear_inverse(1.0, Vec<2>(0.2, -0.1)));
  for (const auto& f : {dc.base(e1, zero2), dc.base(e2, e1), dc.hierarchy(e1, zero2, 1), dc.psi_eps(e2, 0.1)}) {
    EXPECT_LE(f->solver_residual, 1e-10);
    EXPECT_LE(dc.verify_residual(*f), 1e-9) << f->label();
  }
}

TEST(DiffusionCorrector, FarFieldDecay) {
  DiffusionCorrectors<2> dc(disk(6), profiles::constant<2>(1.0), BackgroundModel<2>::constant(1.0));
  const auto f = dc.base(e1, zero2);
  const auto p = dc.decay_probe(*f, {5.0, 10.0}, Vec<2>(1, 0.3));
  ASSERT_EQ(p.size(), 2u);
  EXPECT_GT(p[0], 0.0);
  EXPECT_LT(std::abs(p[1] - p[0]), 0.5 * p[0]);
}

TEST(DiffusionCorrector, WeakFormAgainstInteriorTestFields) {
  // ∫_B (D0 + D1)∇φ·∇v = −∫_B D1 ∇x^j·∇v for v vanishing to second order on ∂B.
  const double D0 = 1.0;
  const auto prof = profiles::bump<2>(1.5, 3, 1.0);
  std::uniform_real_distribution<double> U(-1, 1);
  std::vector<double> rel;
  for (int K : {8, 16}) {
    DiffusionCorrectors<2> dc(disk(K), prof, BackgroundModel<2>::constant(D0));
    const auto f = dc.base(e1, zero2);
    const auto& m = dc.mesh();
    const auto& rule = simplex_rule<2>(6);
    std::mt19937_64 r2(13);
    double worst = 0.0;
    for (int t = 0; t < 10; ++t) {
      const double a = U(r2), b = U(r2), c = U(r2);
      auto grad_v = [&](const Vec<2>& x) {
        const double s = 1.0 - x.squaredNorm();
        const double p = a + b * x[0] + c * x[1];
        return Vec<2>(2 * s * (-2 * x) * p + s * s * Vec<2>(b, c));
      };
      double lhs = 0.0, rhs = 0.0, scale = 0.0;
      for (std::size_t cell = 0; cell < m.num_cells(); ++cell)
        for (std::size_t q = 0; q < rule.w.size(); ++q) {
          const Vec<2> x = m.map_point(cell, rule.bary[q]);
          const double w = rule.w[q] * m.cell_measures[cell];
          const Vec<2> gv = grad_v(x);
          lhs += w * (D0 + prof(x)) * f->gradients[cell].dot(gv);
          rhs -= w * prof(x) * gv[0];
          scale += w * prof(x) * std::abs(gv[0]);
        }
      worst = std::max(worst, std::abs(lhs - rhs) / scale);
    }
    rel.push_back(worst);
  }
  EXPECT_LT(rel[1], 5e-3);
  EXPECT_LT(rel[1], rel[0]);
}

TEST(DiffusionCorrector, ConstantBackgroundHierarchyVanishes) {
  DiffusionCorrectors<2> dc(disk(6), profiles::bump<2>(1.0, 3, 1.0), BackgroundModel<2>::constant(1.5));
  EXPECT_EQ(dc.base(e1, zero2), dc.hierarchy(e1, zero2, 0));
  for (int l : {1, 2}) EXPECT_EQ(dc.hierarchy(e1, e2, l)->values.norm(), 0.0);
  EXPECT_THROW(dc.hierarchy(e1, zero2, 3), std::invalid_argument);
  EXPECT_THROW(dc.base(zero2, zero2), std::invalid_argument);
}

TEST(DiffusionCorrector, HierarchyGrowsWithProfileAmplitude) {
  // Level l is of order ‖D1‖^{l+1} for small amplitudes.
  const auto model = BackgroundModel<2>::linear_inverse(1.0, Vec<2>(0.5, 0.25));
  std::vector<std::array<double, 3>> norms;
  for (double amp : {0.05, 0.1}) {
    DiffusionCorrectors<2> dc(disk(6), profiles::bump<2>(amp, 3, 1.0), model);
    norms.push_back({dc.hierarchy(e1, zero2, 0)->gradient_l2(), dc.hierarchy(e1, zero2, 1)->gradient_l2(),
                     dc.hierarchy(e1, zero2, 2)->gradient_l2()});
  }
  for (int l = 0; l < 3; ++l) {
    ASSERT_GT(norms[0][l], 0.0);
    const double slope = std::log2(norms[1][l] / norms[0][l]);
    EXPECT_NEAR(slope, l + 1.0, 0.25) << "level " << l;
  }
}

TEST(DiffusionCorrector, EpsilonCorrectorReducesToBaseForConstantBackground) {
  DiffusionCorrectors<2> dc(disk(6), profiles::bump<2>(1.0, 3, 1.0), BackgroundModel<2>::constant(1.0));
  EXPECT_LT((dc.psi_eps(e1, 0.1)->values - dc.base(e1, zero2)->values).norm(), 1e-14);
  EXPECT_LT((dc.psi_eps(e2, 0.0)->values - dc.base(e2, zero2)->values).norm(), 1e-14);
  EXPECT_THROW(dc.psi_eps(e1, -0.1), std::invalid_argument);
}

TEST(DiffusionCorrector, EpsilonCorrectorMatchesTaylorReconstruction) {
  // Ψ^ε_j ≈ Σ_{k,l} ε^{|k|+l} c_k/c_0 φ_jk^l/l! with c_k the Taylor coefficients of D0^{-1};
  // truncation at total order 2 leaves an O(ε³) defect.
  const auto model = BackgroundModel<2>::linear_inverse(1.0, Vec<2>(0.4, -0.3));
  DiffusionCorrectors<2> dc(disk(6), profiles::bump<2>(0.8, 3, 1.0), model);
  const double c0 = model.D0inv_derivative(zero2);
  std::vector<double> err;
  for (double eps : {0.1, 0.05}) {
    Eigen::VectorXd rec = Eigen::VectorXd::Zero(dc.mesh().num_vertices());
    for (int l = 0; l <= 2; ++l)
      for (const auto& k : multi_indices(2, 2 - l)) {
        const double ck = model.D0inv_derivative(k) / k.factorial() / c0;
        if (ck == 0.0) continue;
        rec += std::pow(eps, k.order() + l) * ck / std::tgamma(l + 1.0) * dc.hierarchy(e1, k, l)->values;
      }
    const Eigen::VectorXd psi = dc.psi_eps(e1, eps)->values;
    err.push_back((psi - rec).norm() / psi.norm());
  }
  EXPECT_LT(err[0], 1e-3);
  EXPECT_GE(std::log2(err[0] / err[1]), 2.5);
}

TEST(DiffusionCorrector, ModifiedCorrectorCoincidesForLinearMonomials) {
  DiffusionCorrectors<2> dc(disk(10), profiles::bump<2>(1.0, 3, 1.0), BackgroundModel<2>::constant(1.0));
  const auto a = dc.phi_modified(e1), b = dc.base(e1, zero2);
  EXPECT_LT((a->values - b->values).norm() / b->values.norm(), 1e-3);
  DiffusionCorrectors<2> jump(disk(4), profiles::constant<2>(1.0), BackgroundModel<2>::constant(1.0));
  EXPECT_THROW(jump.phi_modified(e1), std::invalid_argument);
}

TEST(DiffusionCorrector, PositivityViolationRejected) {
  EXPECT_THROW(DiffusionCorrectors<2>(disk(4), profiles::constant<2>(-1.5), BackgroundModel<2>::constant(1.0)),
               std::invalid_argument);
  DiffusionCorrectors<2> dc(disk(4), profiles::constant<2>(-0.5), BackgroundModel<2>::constant(1.0));
  EXPECT_NEAR(dc.positivity_margin(), 0.5, 1e-12);
}

TEST(DiffusionCorrector, SolverFailureCarriesHistory) {
  CorrectorOptions opt;
  opt.solve.dense_limit = 0;
  opt.solve.max_iterations = 1;
  opt.solve.restart = 1;
  DiffusionCorrectors<2> dc(disk(6), profiles::constant<2>(50.0), BackgroundModel<2>::constant(1.0), opt);
  try {
    dc.base(e1, zero2);
    FAIL() << "expected a solver error";
  } catch (const SolverError& e) {
    EXPECT_FALSE(e.residual_history.empty());
  }
}

TEST(HelmholtzCorrector, SmallScaleLimitIsMinusT1) {
  HelmholtzCorrectors<2> hc(disk(8), profiles::bump<2>(1.0, 2, 1.0));
  const Eigen::VectorXd T1 = hc.T_monomial(zero2);
  std::vector<double> d;
  for (double eps : {0.1, 0.05}) d.push_back((hc.solve(zero2, 2.0, eps)->values + T1).norm() / T1.norm());
  EXPECT_LT(d[0], 0.1 * 0.1);
  EXPECT_NEAR(std::log2(d[0] / d[1]), 2.0, 0.1);
  EXPECT_THROW(hc.solve(zero2, 2.5, 0.1), std::invalid_argument);
  EXPECT_THROW(hc.solve(zero2, 1.0, 0.0), std::invalid_argument);
}

TEST(HelmholtzCorrector, BohmPotentialFlattensField) {
  // With q1 = Δ√D/√D and D = D0 + D1, v = 1 + φ0 solves v + Tv = 1 and equals √(D/D0).
  const double D0 = 1.0;
  const auto D1 = profiles::bump<2>(1.0, 4, 1.0);
  const auto q1 = bohm_potential<2>(D0, D1);
  std::vector<double> err;
  for (int K : {8, 16}) {
    HelmholtzCorrectors<2> hc(disk(K), q1);
    const auto f = hc.solve(zero2, 0.0, 1.0);
    const auto& m = hc.mesh();
    Eigen::VectorXd w(m.num_vertices());
    for (std::size_t v = 0; v < m.num_vertices(); ++v) w[v] = (1.0 + f->values[v]) / std::sqrt(D0 + D1(m.vertices[v]));
    double s = 0.0;
    for (std::size_t c = 0; c < m.num_cells(); ++c) s += m.cell_measures[c] * m.cell_gradient(c, w).squaredNorm();
    err.push_back(std::sqrt(s));
  }
  EXPECT_LT(err[1], 0.02);
  EXPECT_GE(std::log2(err[0] / err[1]), 0.9);
}

TEST(HelmholtzCorrector, SpectralMargin) {
  EXPECT_EQ(check_H2<2>(disk(4), profiles::zero<2>()), 1.0);
  const double a = check_H2<2>(disk(8), profiles::constant<2>(1.0));
  const double b = check_H2<2>(disk(16), profiles::constant<2>(1.0));
  EXPECT_GT(a, 0.0);
  EXPECT_NEAR(b, a, 0.1 * a);
}
