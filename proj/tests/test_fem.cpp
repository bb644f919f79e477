#include <gtest/gtest.h>

#include <sstream>

#include "ptensor/fem.hpp"
#include "ptensor/tensors.hpp"

using namespace ptensor;

namespace {
using Fn = std::function<double(const Vec<2>&)>;

std::shared_ptr<const VolumeMesh<2>> disk(int K) { return std::make_shared<const VolumeMesh<2>>(hex_disk_mesh(K)); }

NeumannProblem<2> problem(std::shared_ptr<const VolumeMesh<2>> m, Fn g) {
  NeumannProblem<2> p;
  p.mesh = std::move(m);
  p.flux = std::move(g);
  return p;
}

double max_nodal_error(const FemSolution<2>& s, const Fn& exact) {
  double e = 0.0;
  for (std::size_t k = 0; k < s.mesh->num_vertices(); ++k) e = std::max(e, std::abs(s.values[k] - exact(s.mesh->vertices[k])));
  return e;
}

const Fn cos_theta = [](const Vec<2>& x) { return x[0] / x.norm(); };
}  // namespace

TEST(NeumannSolve, ZeroFluxGivesZero) {
  const auto s = solve_diffusion(problem(disk(6), [](const Vec<2>&) { return 0.0; }));
  EXPECT_EQ(s.values.cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(s.energy, 0.0);
}

TEST(NeumannSolve, CosineFluxRecoversLinearSolution) {
  // u = x1 solves −Δu = 0 with ∂u/∂n = cos θ and has zero boundary mean.
  std::vector<double> err;
  for (int K : {8, 16, 32}) {
    const auto s = solve_diffusion(problem(disk(K), cos_theta));
    err.push_back(max_nodal_error(s, [](const Vec<2>& x) { return x[0]; }));
    EXPECT_LT(s.residual, 1e-10);
  }
  EXPECT_LT(err.back(), 2e-3);
  EXPECT_GE(std::log2(err[0] / err[1]), 1.7);
  EXPECT_GE(std::log2(err[1] / err[2]), 1.7);
}

TEST(NeumannSolve, ConstantDiffusionScalesSolution) {
  auto p = problem(disk(8), cos_theta);
  const auto a = solve_diffusion(p);
  p.diffusion = [](const Vec<2>&) { return 4.0; };
  const auto b = solve_diffusion(p);
  EXPECT_LT((4.0 * b.values - a.values).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(NeumannSolve, EnergyEqualsLoadWork) {
  auto p = problem(disk(10), [](const Vec<2>& x) { return x[0] * x[1] / x.squaredNorm(); });
  p.diffusion = [](const Vec<2>& x) { return 1.0 + 0.5 * std::exp(-4 * x.squaredNorm()); };
  const auto s = solve_diffusion(p);
  EXPECT_GT(s.energy, 0.0);
  EXPECT_NEAR(s.energy, s.load_work, 1e-10 * s.energy);
  // Boundary mean zero normalization.
  EXPECT_NEAR(s.trace.integral(), 0.0, 1e-10);
}

TEST(NeumannSolve, SolutionLinearInFlux) {
  const auto m = disk(8);
  const Fn g1 = cos_theta;
  const Fn g2 = [](const Vec<2>& x) { return x[1] * x[1] / x.squaredNorm() - 0.5; };
  const auto a = solve_diffusion(problem(m, g1));
  const auto b = solve_diffusion(problem(m, g2));
  const auto c = solve_diffusion(problem(m, [&](const Vec<2>& x) { return 2 * g1(x) - 3 * g2(x); }));
  EXPECT_LT((c.values - 2 * a.values + 3 * b.values).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(NeumannSolve, IncompatibleFluxAndBadDataRejected) {
  EXPECT_THROW(solve_diffusion(problem(disk(6), [](const Vec<2>&) { return 1.0; })), std::invalid_argument);
  auto p = problem(disk(6), cos_theta);
  p.diffusion = [](const Vec<2>& x) { return x[0]; };
  EXPECT_THROW(solve_diffusion(p), std::invalid_argument);
  NeumannProblem<2> none;
  EXPECT_THROW(FemOperator<2>{none}, std::invalid_argument);
  auto q = problem(disk(6), cos_theta);
  q.potential = [](const Vec<2>&) { return 1.0; };
  EXPECT_THROW(solve_diffusion(q), std::invalid_argument);
}

TEST(HelmholtzSolve, ZeroFluxGivesZero) {
  auto p = problem(disk(6), [](const Vec<2>&) { return 0.0; });
  p.potential = [](const Vec<2>&) { return 1.0; };
  p.normalization = Normalization::none;
  EXPECT_EQ(solve_helmholtz(p).values.cwiseAbs().maxCoeff(), 0.0);
}

TEST(HelmholtzSolve, ExponentialSolutionConverges) {
  // u = exp(x1) solves −Δu + u = 0; ∂u/∂n = exp(x1) n1.
  const Fn u = [](const Vec<2>& x) { return std::exp(x[0]); };
  std::vector<double> err;
  for (int K : {8, 16, 32}) {
    auto p = problem(disk(K), [](const Vec<2>& x) { return std::exp(x[0]) * x[0] / x.norm(); });
    p.potential = [](const Vec<2>&) { return 1.0; };
    p.normalization = Normalization::none;
    err.push_back(max_nodal_error(solve_helmholtz(p), u));
  }
  // The polygonal boundary carries the exact normal flux, which costs a little of the nodal rate.
  EXPECT_LT(err.back(), 5e-3);
  EXPECT_GE(std::log2(err[0] / err[1]), 1.5);
  EXPECT_GE(std::log2(err[1] / err[2]), 1.5);
}

TEST(HelmholtzSolve, SingularBackgroundRejected) {
  // −Δ − k² with k² at a Neumann eigenvalue of the discrete disk is singular.
  auto p = problem(disk(4), [](const Vec<2>&) { return 0.0; });
  p.potential = [](const Vec<2>&) { return 0.0; };
  p.normalization = Normalization::none;
  EXPECT_THROW(FemOperator<2>{p}, ConditioningErrorH1);
}

TEST(BoundaryTrace, LayoutNormsAndCsv) {
  const auto m = disk(6);
  const auto one = sample_on_boundary<2>(m, [](const Vec<2>&) { return 1.0; });
  EXPECT_NEAR(one.integral(), m->boundary_measure(), 1e-12);
  EXPECT_NEAR(one.l2_norm(), std::sqrt(m->boundary_measure()), 1e-12);
  for (std::size_t k = 1; k < one.size(); ++k) EXPECT_GT(one.arc_length[k], one.arc_length[k - 1]);
  // Counter-clockwise order.
  const Vec<2> a = one.point(0), b = one.point(1);
  EXPECT_GT(a[0] * b[1] - a[1] * b[0], 0.0);
  EXPECT_THROW(one - sample_on_boundary<2>(disk(4), [](const Vec<2>&) { return 1.0; }), std::invalid_argument);
  std::ostringstream os;
  write_trace_csv(os, one);
  const std::string csv = os.str();
  EXPECT_EQ(csv.substr(0, 17), "arc_length,value\n");
  EXPECT_EQ(static_cast<std::size_t>(std::count(csv.begin(), csv.end(), '\n')), one.size() + 1);
}

TEST(BoundaryTrace, ResampleReproducesSmoothTrace) {
  const auto fine = disk(32), coarse = disk(8);
  const auto src = sample_on_boundary<2>(fine, cos_theta);
  const auto r = resample(src, boundary_layout(coarse));
  const auto direct = sample_on_boundary<2>(coarse, cos_theta);
  EXPECT_LT((r - direct).l2_norm(), 1e-3);
}

TEST(Resolution, CoarseMeshRejected) {
  const auto coarse = disk(8);
  EXPECT_THROW(require_resolution(*coarse, Vec<2>(0.2, 0.1), 0.05), ResolutionError);
  const auto g = graded_inclusion_disk_mesh(Vec<2>(0.2, 0.1), 0.05, 8, 60);
  EXPECT_GE(inclusion_resolution(g, Vec<2>(0.2, 0.1), 0.05), 8.0);
  EXPECT_NO_THROW(require_resolution(g, Vec<2>(0.2, 0.1), 0.05));
}

TEST(PerturbedCoefficients, InclusionScaling) {
  const auto D1 = profiles::constant<2>(2.0);
  const Vec<2> x0(0.1, 0.0);
  const auto D = perturbed_diffusion<2>([](const Vec<2>&) { return 1.0; }, D1, x0, 0.1);
  EXPECT_DOUBLE_EQ(D(Vec<2>(0.15, 0.0)), 3.0);
  EXPECT_DOUBLE_EQ(D(Vec<2>(0.25, 0.0)), 1.0);
  const auto q = perturbed_potential<2>(nullptr, D1, x0, 0.1, 1.0);
  EXPECT_NEAR(q(Vec<2>(0.1, 0.05)), 2.0 / 0.1, 1e-12);
  EXPECT_EQ(q(Vec<2>(0.5, 0.0)), 0.0);
}

TEST(BohmPair, DiscrepancyConvergesUnderRefinement) {
  const auto D1 = profiles::bump<2>(1.0, 4, 1.0);
  const auto q1 = bohm_potential<2>(1.0, D1);
  const Vec<2> x0(0.1, -0.2);
  const double eps = 0.2;
  std::vector<double> rel;
  for (int L : {1, 2}) {
    auto m = std::make_shared<const VolumeMesh<2>>(graded_inclusion_disk_mesh(x0, eps, 8 * L, 48 * L));
    rel.push_back(bohm_pair_check<2>(m, 1.0, D1, q1, x0, eps, cos_theta).relative());
  }
  EXPECT_LT(rel.back(), 1e-2);
  EXPECT_GE(std::log2(rel[0] / rel[1]), 1.5);
}

TEST(GreenTraces, ClosedFormMatchesFiniteDifferenceInSource) {
  const auto m = disk(8);
  const Vec<2> x0(0.2, 0.1);
  const auto set = green_derivative_traces<2>(m, [](const Vec<2>&) { return 1.0; }, true, x0, 2);
  EXPECT_EQ(set.traces.size(), 6u);
  const double h = 1e-4;
  for (std::size_t v = 0; v < set.at(MultiIndex::zero(2)).size(); ++v) {
    const Vec<2> y = set.at(MultiIndex::zero(2)).point(v).normalized();
    const double fd1 = (disk_neumann_derivative(MultiIndex::zero(2), Vec<2>(x0 + Vec<2>(h, 0)), y, 1.0) -
                        disk_neumann_derivative(MultiIndex::zero(2), Vec<2>(x0 - Vec<2>(h, 0)), y, 1.0)) /
                       (2 * h);
    EXPECT_NEAR(set.at(MultiIndex::unit(2, 0)).values[v], fd1, 1e-6);
    const double fd11 = (disk_neumann_derivative(MultiIndex::unit(2, 1), Vec<2>(x0 + Vec<2>(h, 0)), y, 1.0) -
                         disk_neumann_derivative(MultiIndex::unit(2, 1), Vec<2>(x0 - Vec<2>(h, 0)), y, 1.0)) /
                        (2 * h);
    EXPECT_NEAR(set.at(MultiIndex(2, {1, 1, 0})).values[v], fd11, 1e-5);
  }
  EXPECT_THROW(set.at(MultiIndex(2, {3, 0, 0})), std::out_of_range);
  EXPECT_THROW(green_derivative_traces<2>(m, [](const Vec<2>&) { return 1.0; }, false, x0, 1), std::invalid_argument);
  EXPECT_THROW(green_derivative_traces<2>(m, [](const Vec<2>&) { return 1.0; }, true, Vec<2>(1.2, 0), 1),
               std::invalid_argument);
}

TEST(GreenTraces, HelmholtzSeriesApproachesLaplaceShape) {
  // As k → 0, N_k − 1/(πk²) tends to the Neumann function of −ΔN = δ_x − 1/π, whose boundary
  // trace is the closed-form one plus |x|²/(4π) up to a constant.
  const Vec<2> x0(0.3, -0.1);
  const Vec<2> y(std::cos(0.7), std::sin(0.7));
  const auto e1 = MultiIndex::unit(2, 0);
  EXPECT_NEAR(disk_helmholtz_neumann_derivative(e1, x0, y, 1e-3), disk_neumann_derivative(e1, x0, y, 1.0) + x0[0] / (2 * pi),
              1e-5);
  // The series obeys the same reflection as the disk: x0 → conj(x0), y → conj(y) flips ∂_2.
  const auto e2 = MultiIndex::unit(2, 1);
  const Vec<2> xc(x0[0], -x0[1]), yc(y[0], -y[1]);
  EXPECT_NEAR(disk_helmholtz_neumann_derivative(e2, x0, y, 1.5), -disk_helmholtz_neumann_derivative(e2, xc, yc, 1.5), 1e-12);
}

class GreenTraceMethods : public ::testing::TestWithParam<double> {};

TEST_P(GreenTraceMethods, MultipoleMatchesClosedForm) {
  const double k2 = GetParam();
  const auto m = disk(16);
  const Vec<2> x0(0.2, 0.1);
  const Fn one = [](const Vec<2>&) { return 1.0; };
  GreenOptions cf;
  cf.helmholtz_k2 = k2;
  GreenOptions mp = cf;
  mp.method = GreenMethod::fem_multipole;
  mp.h = 1.0 / 48;
  const auto a = green_derivative_traces<2>(m, one, true, x0, 2, cf);
  const auto b = green_derivative_traces<2>(m, one, true, x0, 2, mp);
  for (const auto& [i, t] : a.traces) {
    BoundaryTrace<2> d = t - b.at(i);
    if (k2 == 0.0) d.values.array() -= d.integral() / m->boundary_measure();  // additive constant of N
    EXPECT_LT(d.l2_norm(), 0.02 * t.l2_norm()) << i.str();
  }
}

INSTANTIATE_TEST_SUITE_P(Backgrounds, GreenTraceMethods, ::testing::Values(0.0, 1.0));
