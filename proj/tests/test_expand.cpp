#include <gtest/gtest.h>

#include <sstream>

#include "ptensor/expand.hpp"

using namespace ptensor;

namespace {
using Fn = std::function<double(const Vec<2>&)>;

const auto e1 = MultiIndex::unit(2, 0);
const auto e2 = MultiIndex::unit(2, 1);
const auto zero2 = MultiIndex::zero(2);
const Fn one = [](const Vec<2>&) { return 1.0; };
const Fn cos_theta = [](const Vec<2>& x) { return x[0] / x.norm(); };

std::shared_ptr<const VolumeMesh<2>> disk(int K) { return std::make_shared<const VolumeMesh<2>>(hex_disk_mesh(K)); }

Eigen::VectorXd nodal(const VolumeMesh<2>& m, const Fn& f) {
  Eigen::VectorXd u(m.num_vertices());
  for (std::size_t k = 0; k < m.num_vertices(); ++k) u[k] = f(m.vertices[k]);
  return u;
}
}  // namespace

TEST(DerivativeFit, RecoversPolynomialsExactly) {
  const auto m = hex_disk_mesh(16);
  const Vec<2> x0(0.2, 0.1);
  const Fn p = [](const Vec<2>& x) { return 1.0 + 2 * x[0] - x[1] + 0.5 * x[0] * x[0] + 3 * x[0] * x[1] - x[1] * x[1]; };
  const auto t = derivatives_at(m, nodal(m, p), x0, 2);
  const Vec<2> z = x0;
  EXPECT_NEAR(t.at(zero2), p(z), 1e-10);
  EXPECT_NEAR(t.at(e1), 2 + z[0] + 3 * z[1], 1e-9);
  EXPECT_NEAR(t.at(e2), -1 + 3 * z[0] - 2 * z[1], 1e-9);
  EXPECT_NEAR(t.at(MultiIndex(2, {2, 0, 0})), 1.0, 1e-8);
  EXPECT_NEAR(t.at(MultiIndex(2, {1, 1, 0})), 3.0, 1e-8);
  EXPECT_NEAR(t.coefficient(MultiIndex(2, {0, 2, 0})), -1.0, 1e-8);
  for (const auto& [j, e] : t.error) EXPECT_LT(e, 1e-8);
  EXPECT_THROW(t.at(MultiIndex(2, {3, 0, 0})), DependencyError);
}

TEST(DerivativeFit, SmoothFieldConverges) {
  const Fn f = [](const Vec<2>& x) { return std::exp(x[0]) * std::cos(x[1]); };
  const Vec<2> x0(-0.1, 0.1);
  std::vector<double> err;
  for (int K : {12, 24, 48}) {
    const auto m = hex_disk_mesh(K);
    const auto t = derivatives_at(m, nodal(m, f), x0, 1);
    err.push_back(std::abs(t.at(e1) - f(x0)));
  }
  EXPECT_LT(err.back(), 1e-4);
  EXPECT_GT(err[0], err[2]);
}

TEST(DerivativeFit, PatchLimitsEnforced) {
  const auto m = hex_disk_mesh(8);
  const auto u = nodal(m, one);
  EXPECT_THROW(derivatives_at(m, u, Vec<2>(0.9, 0.0), 1), std::invalid_argument);
  DerivativeFitOptions o;
  o.inclusion_radius = 0.1;
  EXPECT_THROW(derivatives_at(m, u, Vec<2>(0.0, 0.0), 1, o), std::invalid_argument);
}

class ExpansionFixture : public ::testing::Test {
 protected:
  void SetUp() override {
    mesh = disk(12);
    taylor = derivatives_at(*mesh, nodal(*mesh, [](const Vec<2>& x) { return x[0] + 0.3 * x[1] * x[0]; }), x0, 2);
    green = green_derivative_traces<2>(mesh, one, true, x0, 2);
  }
  Vec<2> x0 = Vec<2>(0.2, 0.1);
  std::shared_ptr<const VolumeMesh<2>> mesh;
  TaylorData<2> taylor;
  GreenTraceSet<2> green;
  BackgroundModel<2> model = BackgroundModel<2>::constant(1.0, Vec<2>(0.2, 0.1));
};

TEST_F(ExpansionFixture, ZeroContrastGivesZeroCorrection) {
  DiffusionCorrectors<2> dc(disk(4), profiles::zero<2>(), model);
  const auto M = tensor_M(dc, 2).canonical;
  const auto p = predict_diffusion(taylor, M, nullptr, model, green, 0.1, ExpansionBranch::diffusion_M_M2, {2});
  EXPECT_EQ(p.total.values.cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(p.terms.size(), 25u);
}

TEST_F(ExpansionFixture, TermsFollowScalingAndResum) {
  DiffusionCorrectors<2> dc(disk(6), profiles::constant<2>(1.0), model);
  const auto M = tensor_M(dc, 2).canonical;
  const double eps = 0.1;
  const auto p = predict_diffusion(taylor, M, nullptr, model, green, eps, ExpansionBranch::diffusion_M_M2, {2});
  for (const auto& t : p.terms) {
    EXPECT_EQ(t.eps_power, t.i.order() + t.j.order());
    EXPECT_NEAR(t.weight, 1.0 / (t.i.factorial() * t.j.factorial()), 1e-15);
    EXPECT_NEAR(t.value, -std::pow(eps, t.eps_power) * t.weight * M.at(t.i, t.j) * taylor.at(t.j), 1e-15);
  }
  EXPECT_LT((p.resum(green) - p.total).l2_norm(), 1e-14);
  // Leading term: −ε² Σ M_ab ∂_bU ∂_aN.
  const auto first = predict_diffusion(taylor, M, nullptr, model, green, eps, ExpansionBranch::diffusion_M_M2, {1});
  BoundaryTrace<2> lead = green.at(e1).scaled(0.0);
  for (const auto& a : {e1, e2})
    for (const auto& b : {e1, e2}) lead.values -= eps * eps * M.at(a, b) * taylor.at(b) * green.at(a).values;
  EXPECT_LT((first.total - lead).l2_norm(), 1e-14 * lead.l2_norm());
  PredictionOptions cut{2, 3.0, true};
  const auto trimmed = predict_diffusion(taylor, M, nullptr, model, green, eps, ExpansionBranch::diffusion_M_M2, cut);
  for (const auto& t : trimmed.terms) EXPECT_LE(t.eps_power, 3.0);
  EXPECT_EQ(trimmed.terms.size(), 4u + 12u);
}

TEST_F(ExpansionFixture, ConstantBackgroundBranchesAgree) {
  DiffusionCorrectors<2> dc(disk(6), profiles::bump<2>(1.0, 3, 1.0), model);
  const auto M = tensor_M(dc, 1).definition;
  const auto M2 = tensor_M2(dc, 1);
  const double eps = 0.1;
  const auto a = predict_diffusion(taylor, M, &M2, model, green, eps, ExpansionBranch::diffusion_M_M2);
  const auto b = predict_diffusion(taylor, M, nullptr, model, green, eps, ExpansionBranch::diffusion_M_M2);
  EXPECT_LT((a.total - b.total).l2_norm(), 1e-14 * b.total.l2_norm());
  const auto Me = tensor_M_eps(dc, eps, 1);
  const auto c = predict_diffusion(taylor, Me, nullptr, model, green, eps, ExpansionBranch::diffusion_M_eps);
  EXPECT_LT((c.total - b.total).l2_norm(), 1e-10 * b.total.l2_norm());
}

TEST_F(ExpansionFixture, MissingDependenciesReported) {
  DiffusionCorrectors<2> dc(disk(4), profiles::constant<2>(1.0), model);
  const auto M1 = tensor_M(dc, 1).canonical;
  EXPECT_THROW(predict_diffusion(taylor, M1, nullptr, model, green, 0.1, ExpansionBranch::diffusion_M_M2, {2}),
               DependencyError);
  const auto g1 = green_derivative_traces<2>(mesh, one, true, x0, 1);
  const auto M2t = tensor_M(dc, 2).canonical;
  EXPECT_THROW(predict_diffusion(taylor, M2t, nullptr, model, g1, 0.1, ExpansionBranch::diffusion_M_M2, {2}),
               DependencyError);
  EXPECT_THROW(predict_diffusion(taylor, M1, nullptr, model, green, 0.1, ExpansionBranch::diffusion_M_eps), std::invalid_argument);
  EXPECT_THROW(predict_diffusion(taylor, M1, nullptr, model, green, 0.1, ExpansionBranch::helmholtz_Q), std::invalid_argument);
  const auto Q1 = tensor_Q<2>(profiles::constant<2>(1.0), *disk(4), 1);
  EXPECT_THROW(predict_helmholtz(taylor, Q1, nullptr, green, 0.1, 2.0, {2}), DependencyError);
}

TEST_F(ExpansionFixture, HelmholtzTermsIncludeOrderZero) {
  const auto Q = tensor_Q<2>(profiles::constant<2>(1.0), *disk(8), 1);
  const double eps = 0.1, eta = 1.5;
  const auto p = predict_helmholtz(taylor, Q, nullptr, green, eps, eta, {1});
  ASSERT_EQ(p.terms.size(), 9u);
  for (const auto& t : p.terms) EXPECT_NEAR(t.eps_power, eta + t.i.order() + t.j.order(), 1e-15);
  // The (0,0) term carries |B| U(x0) N(x0, ·).
  const auto& t00 = p.terms.front();
  EXPECT_EQ(t00.i, zero2);
  EXPECT_NEAR(t00.value, -std::pow(eps, eta) * Q.at(zero2, zero2) * taylor.at(zero2), 1e-15);
  const auto z = tensor_Q<2>(profiles::zero<2>(), *disk(4), 1);
  EXPECT_EQ(predict_helmholtz(taylor, z, nullptr, green, eps, eta, {1}).total.values.cwiseAbs().maxCoeff(), 0.0);
}

TEST(RateFit, ExactPowerLaw) {
  const std::vector<double> e{0.2, 0.1, 0.05, 0.025};
  std::vector<double> r;
  for (double x : e) r.push_back(3.0 * x * x * x);
  const auto f = fit_rate(e, r, {}, 3.0, 0.2);
  EXPECT_NEAR(f.slope, 3.0, 1e-12);
  EXPECT_NEAR(std::exp(f.intercept), 3.0, 1e-10);
  EXPECT_NEAR(f.slope_stderr, 0.0, 1e-10);
  EXPECT_TRUE(f.monotone);
  EXPECT_TRUE(f.passes_at_least(2.9));
  EXPECT_TRUE(f.passes_window(3.0, 0.2));
  EXPECT_FALSE(f.passes_window(2.0, 0.2));
}

TEST(RateFit, MaskNoiseAndValidation) {
  const std::vector<double> e{0.2, 0.1, 0.05, 0.025};
  const std::vector<double> r{0.04 * 1.05, 0.01 * 0.97, 0.0025 * 1.02, 0.01};
  const auto f = fit_rate(e, r);
  EXPECT_FALSE(f.monotone);
  EXPECT_FALSE(f.note.empty());
  const auto g = fit_rate(e, r, {true, true, true, false});
  EXPECT_NEAR(g.slope, 2.0, 0.1);
  EXPECT_GT(g.slope_ci95, g.slope_stderr);
  const auto h = fit_rate(e, r, {true, false, false, false});
  EXPECT_FALSE(h.fitted);
  EXPECT_FALSE(h.passes_at_least(-100.0));
  EXPECT_THROW(fit_rate({0.1, 0.2, 0.05}, {1, 1, 1}), std::invalid_argument);
  EXPECT_THROW(fit_rate({0.2, 0.1}, {1, 1}), std::invalid_argument);
  EXPECT_THROW(fit_rate({0.2, 0.1, 0.05}, {1, 1}), std::invalid_argument);
  const auto j = to_json(g);
  EXPECT_EQ(j["used"].size(), 4u);
  EXPECT_DOUBLE_EQ(j["slope"].get<double>(), g.slope);
}

TEST(ResidualStudy, FirstOrderCorrectionRaisesRate) {
  DiskStudySettings<2> st;
  st.x0 = Vec<2>(0.2, 0.1);
  st.eps = {0.2, 0.141, 0.1};
  st.flux = [](const Vec<2>& x) { return (x[0] + x[1]) / x.norm(); };
  const auto model = BackgroundModel<2>::constant(1.0, st.x0);
  const auto D1 = profiles::constant<2>(1.0);
  DiffusionCorrectors<2> dc(disk(12), D1, model);
  const auto M = tensor_M(dc, 1).canonical;
  auto s = diffusion_residual_study(st, D1, model, M, nullptr, ExpansionBranch::diffusion_M_M2);
  fit_study(s, 2.0, 3.0);
  ASSERT_EQ(s.samples.size(), 3u);
  for (const auto& r : s.samples) {
    EXPECT_LT(r.after, 0.5 * r.before);
    EXPECT_GT(r.floor, 0.0);
  }
  EXPECT_NEAR(s.before.slope, 2.0, 0.3);
  EXPECT_GT(s.after.slope, s.before.slope + 0.5);
  std::ostringstream os;
  write_rates_csv(os, s);
  EXPECT_EQ(os.str().substr(0, 4), "eps,");
}
