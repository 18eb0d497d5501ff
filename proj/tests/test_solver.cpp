#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "support.hpp"

using namespace gee;
using gee::testing::Gen;
using gee::testing::max_rel_err;

namespace {

const LinkFunction kIdentity{LinkKind::identity};
const LinkFunction kLog{LinkKind::log};

Dataset linear_data(Gen& gen, std::size_t n, Eigen::Index p, Eigen::Index m_max) {
  const Vector beta = gen.vector(p);
  return gen.dataset(n, p, m_max, [beta](const Matrix& x, Gen& g) {
    Vector y = x * beta;
    for (Eigen::Index j = 0; j < y.size(); ++j) y(j) += g.normal();
    return y;
  });
}

Dataset count_data(Gen& gen, std::size_t n, Eigen::Index p, Eigen::Index m_max) {
  return gen.dataset(n, p, m_max, [](const Matrix& x, Gen& g) {
    Vector y(x.rows());
    for (Eigen::Index j = 0; j < y.size(); ++j) y(j) = std::max(0.0, std::exp(0.3 * x.row(j).sum()) + 0.5 * g.normal());
    return y;
  }, 0.5);
}

Dataset reversed(const Dataset& d) {
  Dataset out = d;
  std::reverse(out.clusters.begin(), out.clusters.end());
  for (std::size_t i = 0; i < out.n(); ++i) out.clusters[i].index = i + 1;
  return out;
}

void expect_monotone_per_stage(const GeeFit& fit) {
  for (std::size_t k = 1; k < fit.trace.size(); ++k) {
    if (fit.trace[k].stage == fit.trace[k - 1].stage) EXPECT_LE(fit.trace[k].residual_norm, fit.trace[k - 1].residual_norm);
  }
}

}  // namespace

TEST(Solve, MatchesClosedForm) {
  Gen gen(91);
  for (int trial = 0; trial < 20; ++trial) {
    const Eigen::Index p = gen.integer(1, 4);
    const Eigen::Index m = gen.integer(1, 5);
    const Dataset d = linear_data(gen, static_cast<std::size_t>(gen.integer(20, 120)), p, m);
    const Matrix r = gen.correlation(m);
    const GeeFit fit = solve_gee(d, GeeStar{WorkingCorrelationSpec::fixed(r)}, kIdentity);
    ASSERT_TRUE(fit.converged);
    EXPECT_LT(max_rel_err(fit.beta_hat, linear_closed_form(d, r)), 1e-8);
    EXPECT_LT(fit.final_residual_norm, SolverConfig{}.tol_g);
  }
}

TEST(Solve, ScalarLogarithm) {
  Dataset d;
  d.p = 1;
  d.m_max = 1;
  d.clusters.push_back(Cluster{1, Vector::Constant(1, std::exp(1.0)), Matrix::Ones(1, 1)});
  const GeeFit fit = solve_gee(d, GeeStar{WorkingCorrelationSpec::identity(1)}, kLog, {}, Vector::Zero(1));
  ASSERT_TRUE(fit.converged);
  EXPECT_NEAR(fit.beta_hat(0), 1.0, 1e-12);
}

TEST(Solve, ExactRootAtIterationZero) {
  Gen gen(92);
  Dataset d = count_data(gen, 30, 2, 3);
  const Vector init = gen.vector(2, 0.3);
  for (Cluster& c : d.clusters) c.y = conditional_moments(c, init, kLog).mean;
  const GeeFit fit = solve_gee(d, Independence{}, kLog, {}, init);
  EXPECT_TRUE(fit.converged);
  EXPECT_EQ(fit.iterations, 0);
  EXPECT_LT(fit.final_residual_norm, 1e-14);
  EXPECT_EQ(fit.beta_hat, init);
}

TEST(Solve, RootSatisfiesTolerance) {
  Gen gen(93);
  for (int trial = 0; trial < 10; ++trial) {
    const Dataset d = count_data(gen, 100, 2, 4);
    for (const EstimatingFunction& kind : {EstimatingFunction{Independence{}},
                                           EstimatingFunction{GeeStar{WorkingCorrelationSpec::exchangeable(0.3, 4)}},
                                           EstimatingFunction{GeeStar{WorkingCorrelationSpec::pseudo_likelihood(4)}}}) {
      const GeeFit fit = solve_gee(d, kind, kLog);
      ASSERT_TRUE(fit.converged) << estimating_function_name(kind);
      EXPECT_LT(fit.final_residual_norm, SolverConfig{}.tol_g);
      expect_monotone_per_stage(fit);
      if (!std::holds_alternative<GeeStar>(kind) || !std::get<GeeStar>(kind).spec.beta_dependent()) {
        EXPECT_LT(eval_g(kind, d, fit.beta_hat, kLog).cwiseAbs().maxCoeff(), SolverConfig{}.tol_g);
      }
    }
  }
}

TEST(Solve, PseudoLikelihoodStages) {
  Gen gen(94);
  const Dataset d = count_data(gen, 80, 2, 3);
  SolverConfig cfg;
  cfg.correlation_refreshes = 2;
  const GeeFit fit = solve_gee(d, GeeStar{WorkingCorrelationSpec::pseudo_likelihood(3)}, kLog, cfg);
  EXPECT_TRUE(fit.converged);
  EXPECT_EQ(fit.stages, 3);
  EXPECT_EQ(fit.trace.front().stage, 1);
  EXPECT_EQ(fit.trace.back().stage, 3);
  // The last stage starts from the previous stage's root, where its correlation was frozen.
  const auto start = std::find_if(fit.trace.begin(), fit.trace.end(), [](const TraceEntry& e) { return e.stage == 3; });
  ASSERT_NE(start, fit.trace.end());
  const FrozenCorrelation frozen = FrozenCorrelation::build(WorkingCorrelationSpec::pseudo_likelihood(3), d, start->beta, kLog);
  EXPECT_LT(eval_g(GeeStar{WorkingCorrelationSpec::pseudo_likelihood(3)}, d, fit.beta_hat, kLog, &frozen).cwiseAbs().maxCoeff(),
            1e-8);
}

TEST(Solve, NonConvergenceRetainsTrace) {
  Gen gen(95);
  const Dataset d = count_data(gen, 50, 2, 3);
  SolverConfig cfg;
  cfg.max_iter = 1;
  const GeeFit fit = solve_gee(d, Independence{}, kLog, cfg, Vector::Constant(2, 2.0));
  EXPECT_FALSE(fit.converged);
  EXPECT_EQ(fit.trace.size(), 1u);
}

TEST(Solve, ConfigValidation) {
  Gen gen(96);
  const Dataset d = count_data(gen, 5, 1, 2);
  SolverConfig cfg;
  cfg.tol_g = 0.0;
  EXPECT_THROW(solve_gee(d, Independence{}, kLog, cfg), ConfigError);
  cfg = {};
  cfg.max_iter = 0;
  EXPECT_THROW(solve_gee(d, Independence{}, kLog, cfg), ConfigError);
}

TEST(Solve, SingularJacobian) {
  Dataset d;
  d.p = 2;
  d.m_max = 1;
  for (std::size_t i = 1; i <= 4; ++i) {
    Matrix x(1, 2);
    x << 1.0, 0.0;
    d.clusters.push_back(Cluster{i, Vector::Constant(1, static_cast<double>(i)), x});
  }
  // Rank one: the ridge rescues the step and the unidentified coordinate stays put.
  const GeeFit fit = solve_gee(d, Independence{}, kIdentity, {}, Vector::Zero(2));
  EXPECT_TRUE(fit.converged);
  EXPECT_TRUE(fit.trace.front().ridge);
  EXPECT_NEAR(fit.beta_hat(0), 2.5, 1e-12);
  EXPECT_EQ(fit.beta_hat(1), 0.0);
  for (Cluster& c : d.clusters) c.x.setZero();
  EXPECT_THROW(solve_gee(d, Independence{}, kIdentity, {}, Vector::Zero(2)), SingularMatrix);
}

TEST(Solve, Deterministic) {
  Gen gen(97);
  const Dataset d = count_data(gen, 60, 2, 3);
  const auto a = solve_gee(d, GeeStar{WorkingCorrelationSpec::pseudo_likelihood(3)}, kLog);
  const auto b = solve_gee(d, GeeStar{WorkingCorrelationSpec::pseudo_likelihood(3)}, kLog);
  ASSERT_EQ(a.trace.size(), b.trace.size());
  for (std::size_t k = 0; k < a.trace.size(); ++k) {
    EXPECT_EQ(a.trace[k].beta, b.trace[k].beta);
    EXPECT_EQ(a.trace[k].residual_norm, b.trace[k].residual_norm);
  }
  EXPECT_EQ(a.beta_hat, b.beta_hat);
}

TEST(Solve, ScalingLeavesRootUnchanged) {
  Gen gen(98);
  const Dataset d = count_data(gen, 80, 2, 3);
  const Matrix r = gen.correlation(3);
  const Vector base = solve_gee(d, GeeStar{WorkingCorrelationSpec::fixed(r)}, kLog).beta_hat;
  for (double c : {0.5, 2.0, 10.0}) {
    const auto fit = solve_gee(d, GeeStar{WorkingCorrelationSpec::fixed(c * r)}, kLog);
    ASSERT_TRUE(fit.converged);
    EXPECT_LT(max_rel_err(fit.beta_hat, base), 1e-8);
  }
}

TEST(Solve, PermutationInvariantFixedR) {
  Gen gen(99);
  const Dataset d = count_data(gen, 60, 2, 3);
  const auto spec = WorkingCorrelationSpec::exchangeable(0.4, 3);
  const Vector a = solve_gee(d, GeeStar{spec}, kLog).beta_hat;
  const Vector b = solve_gee(reversed(d), GeeStar{spec}, kLog).beta_hat;
  EXPECT_LT(max_rel_err(a, b), 1e-8);
}

TEST(Solve, FiniteDifferenceJacobianAgrees) {
  Gen gen(100);
  const Dataset d = count_data(gen, 60, 2, 3);
  SolverConfig fd;
  fd.jacobian_method = JacobianMethod::finite_difference;
  const auto spec = WorkingCorrelationSpec::ar1(0.5, 3);
  EXPECT_LT(max_rel_err(solve_gee(d, GeeStar{spec}, kLog, fd).beta_hat, solve_gee(d, GeeStar{spec}, kLog).beta_hat), 1e-8);
}

TEST(ClosedForm, IdentityDesign) {
  Dataset d;
  d.p = 3;
  d.m_max = 3;
  Vector y(3);
  y << 1.5, -2.0, 0.25;
  d.clusters.push_back(Cluster{1, y, Matrix::Identity(3, 3)});
  EXPECT_LT((linear_closed_form(d, Matrix(Matrix::Identity(3, 3))) - y).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(ClosedForm, ScalingCancels) {
  Gen gen(101);
  const Dataset d = linear_data(gen, 40, 3, 4);
  const Matrix r = gen.correlation(4);
  const Vector base = linear_closed_form(d, r);
  for (double c : {0.5, 2.0, 10.0}) EXPECT_LT(max_rel_err(linear_closed_form(d, Matrix(c * r)), base), 1e-12);
}

TEST(ClosedForm, TwoClusterNormalEquations) {
  Dataset d;
  d.p = 2;
  d.m_max = 2;
  Matrix x1(2, 2), x2(2, 2);
  x1 << 1, 0.5, 1, -1;
  x2 << 1, 2, 1, 0;
  Vector y1(2), y2(2);
  y1 << 1.0, 0.2;
  y2 << 3.0, 0.7;
  d.clusters.push_back(Cluster{1, y1, x1});
  d.clusters.push_back(Cluster{2, y2, x2});
  Matrix r1(2, 2), r2(2, 2);
  r1 << 1, 0.3, 0.3, 1;
  r2 << 2, -0.5, -0.5, 1;
  // 2x2 normal equations by Cramer's rule.
  const Matrix w1 = r1.inverse(), w2 = r2.inverse();
  const Matrix a = x1.transpose() * w1 * x1 + x2.transpose() * w2 * x2;
  const Vector b = x1.transpose() * w1 * y1 + x2.transpose() * w2 * y2;
  const double det = a(0, 0) * a(1, 1) - a(0, 1) * a(1, 0);
  Vector oracle(2);
  oracle << (b(0) * a(1, 1) - a(0, 1) * b(1)) / det, (a(0, 0) * b(1) - b(0) * a(1, 0)) / det;
  EXPECT_LT(max_rel_err(linear_closed_form(d, std::vector<Matrix>{r1, r2}), oracle), 1e-12);
}

TEST(ClosedForm, SingularDesign) {
  Dataset d;
  d.p = 2;
  d.m_max = 1;
  Matrix x(1, 2);
  x << 1.0, 2.0;
  d.clusters.push_back(Cluster{1, Vector::Ones(1), x});
  try {
    linear_closed_form(d, Matrix(Matrix::Identity(1, 1)));
    FAIL() << "expected SingularMatrix";
  } catch (const SingularMatrix& e) {
    EXPECT_LT(std::abs(e.lambda_min()), 1e-12);
  }
}

TEST(ClosedForm, PermutationInvariant) {
  Gen gen(102);
  const Dataset d = linear_data(gen, 50, 3, 3);
  const Matrix r = gen.correlation(3);
  EXPECT_LT(max_rel_err(linear_closed_form(d, r), linear_closed_form(reversed(d), r)), 1e-12);
  const auto spec = WorkingCorrelationSpec::fixed(r);
  EXPECT_LT(max_rel_err(solve_gee(d, GeeStar{spec}, kIdentity).beta_hat, solve_gee(reversed(d), GeeStar{spec}, kIdentity).beta_hat),
            1e-8);
}
