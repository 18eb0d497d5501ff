#include <gtest/gtest.h>

#include <cmath>

#include "support.hpp"

using namespace gee;
using gee::testing::Gen;

namespace {

const LinkFunction kIdentity{LinkKind::identity};
const LinkFunction kLog{LinkKind::log};

Matrix exchangeable_matrix(Eigen::Index m, double rho) {
  Matrix r = Matrix::Constant(m, m, rho);
  r.diagonal().setOnes();
  return r;
}

// n clusters with X_i = I_p and unit-variance identity link, so H'_n = n I.
Dataset orthonormal_design(std::size_t n, Eigen::Index p, Gen& gen) {
  Dataset d;
  d.p = p;
  d.m_max = p;
  for (std::size_t i = 1; i <= n; ++i) d.clusters.push_back(Cluster{i, gen.vector(p), Matrix::Identity(p, p)});
  return d;
}

Dataset scalar_ones(std::size_t n, Gen& gen) {
  Dataset d;
  d.p = 1;
  d.m_max = 1;
  for (std::size_t i = 1; i <= n; ++i) d.clusters.push_back(Cluster{i, gen.vector(1), Matrix::Ones(1, 1)});
  return d;
}

ConditionParams quick_params() {
  ConditionParams p;
  p.derivative_conditions = false;
  return p;
}

}  // namespace

TEST(Lattice, PointCountAndRadii) {
  for (Eigen::Index p = 1; p <= 4; ++p) {
    const Vector c = Vector::Constant(p, 0.3);
    const auto pts = ball_lattice(c, 0.2);
    ASSERT_EQ(pts.size(), static_cast<std::size_t>(2 * p + (1 << p) + 1));
    EXPECT_EQ(pts[0], c);
    for (std::size_t k = 1; k < pts.size(); ++k) EXPECT_NEAR((pts[k] - c).norm(), 0.2, 1e-15);
  }
}

TEST(Conditions, IdentityLinkCurvatureZero) {
  Gen gen(111);
  const Dataset d = gen.dataset(40, 2, 3, [](const Matrix& x, Gen& g) { return Vector(g.vector(x.rows())); });
  const auto rep = condition_trajectories(d, Parameter{Vector::Zero(2), {}}, kIdentity, WorkingCorrelationSpec::pseudo_likelihood(3),
                                          nullptr, ConditionParams{});
  for (const auto& rt : rep.radii) {
    for (double v : rt.k2) EXPECT_EQ(v, 0.0);
    for (double v : rt.k3) EXPECT_EQ(v, 0.0);
    for (double v : rt.eta) EXPECT_EQ(v, 0.0);
  }
}

TEST(Conditions, OrthonormalDesignRatio) {
  Gen gen(112);
  const Dataset d = orthonormal_design(60, 2, gen);
  ConditionParams params = quick_params();
  params.delta = 0.2;
  const auto rep = condition_trajectories(d, Parameter{Vector::Zero(2), {}}, kIdentity, WorkingCorrelationSpec::identity(2), nullptr, params);
  for (std::size_t g = 0; g < rep.n_grid.size(); ++g) {
    const double n = static_cast<double>(rep.n_grid[g]);
    EXPECT_NEAR(rep.s_ratio[g], std::pow(n, 0.5 - 0.2), 1e-12 * std::pow(n, 0.3));
    EXPECT_NEAR(rep.h_min[g], n, 1e-12 * n);
  }
  EXPECT_NEAR(rep.s_ratio_running_min.back(), 1.0, 1e-12);
}

TEST(Conditions, ScalarOnesGamma) {
  Gen gen(113);
  const Dataset d = scalar_ones(50, gen);
  const auto rep = condition_trajectories(d, Parameter{Vector::Zero(1), {}}, kIdentity, WorkingCorrelationSpec::identity(1), nullptr, quick_params());
  for (std::size_t g = 0; g < rep.n_grid.size(); ++g) {
    const double n = static_cast<double>(rep.n_grid[g]);
    EXPECT_NEAR(rep.h_max[g], n, 1e-12 * n);
    EXPECT_NEAR(rep.gamma[g], 1.0 / n, 1e-12);
    EXPECT_NEAR(rep.a[g], 1.0, 1e-12);
  }
}

TEST(Conditions, SingularEarlyHprimeMarked) {
  Gen gen(114);
  Dataset d = orthonormal_design(10, 2, gen);
  Matrix x(2, 2);
  x << 1, 0, 1, 0;
  d.clusters[0].x = x;
  const auto rep = condition_trajectories(d, Parameter{Vector::Zero(2), {}}, kIdentity, WorkingCorrelationSpec::identity(2), nullptr, quick_params());
  EXPECT_TRUE(std::isinf(rep.gamma[0]));
  EXPECT_TRUE(std::isnan(rep.s_ratio_running_min[0]));
  EXPECT_TRUE(std::isfinite(rep.gamma[1]));
  EXPECT_TRUE(std::isfinite(rep.s_ratio_running_min[1]));
}

TEST(Conditions, ReportInvariants) {
  Gen gen(115);
  ScenarioConfig cfg;
  cfg.link = LinkKind::log;
  cfg.n = 60;
  cfg.sizes.kind = SizeScheduleKind::cyclic;
  cfg.sizes.cycle = {2, 3, 4};
  const Dataset d = simulate_scenario(cfg);
  const TruthCorrelation truth = scenario_truth(cfg);
  ConditionParams params;
  params.n_grid = {10, 30, 60};
  const auto spec = WorkingCorrelationSpec::pseudo_likelihood(4);
  const auto rep = condition_trajectories(d, Parameter{cfg.beta0, {}}, kLog, spec, &truth, params);
  const auto again = condition_trajectories(d, Parameter{cfg.beta0, {}}, kLog, spec, &truth, params);
  EXPECT_EQ(to_json(rep).dump(), to_json(again).dump());
  for (std::size_t g = 0; g < 3; ++g) {
    EXPECT_LE(rep.h_min[g], rep.h_max[g]);
    EXPECT_LE(rep.rstar_min[g], rep.rstar_max[g]);
    EXPECT_LE(rep.rbar_min[g], rep.rbar_max[g]);
    EXPECT_LE(rep.rbar_max[g], static_cast<double>(d.clusters[rep.n_grid[g] - 1].size()) + 1e-12);
    if (g > 0) EXPECT_GE(rep.h_min[g], rep.h_min[g - 1] - 1e-12);
  }
  ASSERT_EQ(rep.radii.size(), 3u);
  for (const auto& rt : rep.radii) {
    for (std::size_t g = 0; g < 3; ++g) {
      EXPECT_TRUE(std::isfinite(rt.c4[g]));
      EXPECT_TRUE(std::isfinite(rt.c5[g]));
      EXPECT_GE(rt.pi[g], 1.0 - 1e-12);
      EXPECT_GE(rt.eta[g], 0.0);
      EXPECT_TRUE(std::isfinite(rt.s_i[g]));
      EXPECT_TRUE(std::isfinite(rt.s_ii[g]));
      if (g > 0) EXPECT_GE(rt.k2[g], rt.k2[g - 1]);
    }
    // Log link: mu''/mu' = mu'''/mu' = 1.
    EXPECT_NEAR(rt.k2.back(), 1.0, 1e-15);
    EXPECT_NEAR(rt.k3.back(), 1.0, 1e-15);
  }
  EXPECT_GE(rep.radii[0].eta.back(), rep.radii[2].eta.back());
}

TEST(Conditions, StructuredSpecEigenConstants) {
  Gen gen(116);
  const Dataset d = gen.dataset(30, 2, 3, [](const Matrix& x, Gen& g) { return Vector(g.vector(x.rows())); });
  const auto rep = condition_trajectories(d, Parameter{Vector::Zero(2), {}}, kIdentity, WorkingCorrelationSpec::exchangeable(0.3, 3),
                                          nullptr, quick_params());
  for (std::size_t g = 0; g < rep.n_grid.size(); ++g) {
    EXPECT_NEAR(rep.rstar_min[g], 0.7, 1e-12);
    EXPECT_NEAR(rep.rstar_max[g], 1.6, 1e-12);
  }
}

TEST(Conditions, ParamValidation) {
  Gen gen(117);
  const Dataset d = scalar_ones(5, gen);
  ConditionParams p;
  p.delta = 0.6;
  EXPECT_THROW(condition_trajectories(d, Parameter{Vector::Zero(1), {}}, kIdentity, WorkingCorrelationSpec::identity(1), nullptr, p), ConfigError);
  p = {};
  p.r_grid = {0.1, 0.2};
  EXPECT_THROW(condition_trajectories(d, Parameter{Vector::Zero(1), {}}, kIdentity, WorkingCorrelationSpec::identity(1), nullptr, p), ConfigError);
}

TEST(Slln, DirectSubstitution) {
  Gen gen(118);
  const Dataset d = scalar_ones(100, gen);
  const auto mt = martingale_trace(Independence{}, d, Vector::Zero(1), kIdentity, nullptr);
  const auto s = slln_monitor(mt, 0.25);
  double sum = 0.0;
  for (std::size_t i = 0; i < d.n(); ++i) {
    sum += d.clusters[i].y(0);
    const double n = static_cast<double>(i + 1);
    EXPECT_NEAR(s.ratio[i], std::abs(sum) / std::pow(n, 0.75), 1e-12);
    EXPECT_NEAR(s.v_lambda_min[i], n, 1e-12);
  }
}

TEST(Slln, ZeroResidualsAndZeroVariance) {
  Gen gen(119);
  Dataset d = scalar_ones(10, gen);
  for (Cluster& c : d.clusters) c.y.setZero();
  const auto s = slln_monitor(martingale_trace(Independence{}, d, Vector::Zero(1), kIdentity, nullptr), 0.25);
  for (double r : s.ratio) EXPECT_EQ(r, 0.0);
  for (Cluster& c : d.clusters) c.x.setZero();
  const auto z = slln_monitor(martingale_trace(Independence{}, d, Vector::Zero(1), kIdentity, nullptr), 0.25);
  for (double r : z.ratio) EXPECT_TRUE(std::isnan(r));
}

// |S_n| / n^{3/4} scales like n^{-1/4}, so the median drops by about 100^{-1/4}.
TEST(Slln, MonteCarloDecayRate) {
  std::vector<double> at50, at5000;
  for (std::uint64_t r = 0; r < 200; ++r) {
    random::Stream s(random::replication_seed(2024, r), 1, 3);
    double sum = 0.0;
    for (int i = 1; i <= 5000; ++i) {
      sum += s.normal();
      if (i == 50) at50.push_back(std::abs(sum) / std::pow(50.0, 0.75));
    }
    at5000.push_back(std::abs(sum) / std::pow(5000.0, 0.75));
  }
  const double ratio = median(at5000) / median(at50);
  EXPECT_GT(ratio, 0.2);
  EXPECT_LT(ratio, 0.5);
}

TEST(A1Gap, FixedTruthIsZero) {
  ScenarioConfig cfg;
  cfg.n = 50;
  const Dataset d = simulate_scenario(cfg);
  const TruthCorrelation truth = scenario_truth(cfg);
  for (double g : a1_gap_path(d, cfg.beta0, kIdentity, WorkingCorrelationSpec::fixed(truth.rbar_template), truth)) EXPECT_EQ(g, 0.0);
  for (double g : a1_gap_path(d, cfg.beta0, kIdentity, WorkingCorrelationSpec::identity(3), truth)) EXPECT_NEAR(g, 0.4, 1e-12);
}

TEST(A1Gap, PseudoLikelihoodShrinks) {
  ScenarioConfig cfg;
  std::vector<double> early, late;
  for (std::size_t r = 0; r < 40; ++r) {
    const Dataset d = simulate_scenario(cfg, random::replication_seed(cfg.seed, r), 1000);
    const auto gaps = a1_gap_path(d, cfg.beta0, kIdentity, WorkingCorrelationSpec::pseudo_likelihood(3), scenario_truth(cfg));
    early.push_back(gaps[49]);
    late.push_back(gaps[999]);
  }
  EXPECT_LT(median(late), median(early));
}

TEST(Summary, QuantileType7) {
  EXPECT_DOUBLE_EQ(quantile({1, 2, 3, 4}, 0.25), 1.75);
  EXPECT_DOUBLE_EQ(median({5, 1, 3}), 3.0);
  EXPECT_DOUBLE_EQ(median({1, kNaN, 3}), 2.0);
  EXPECT_TRUE(std::isnan(median({kNaN})));
  EXPECT_TRUE(json_number(kInf).is_null());
  EXPECT_EQ(json_number(0.5).get<double>(), 0.5);
}

TEST(Optimality, TruthSpecRatiosAreOne) {
  ScenarioConfig cfg;
  const auto study = optimality_study(cfg, {"truth"}, true, 5, {20, 80});
  ASSERT_EQ(study.rows.size(), 2u);
  for (const auto& row : study.rows) {
    EXPECT_NEAR(row.ratio_h, 1.0, 1e-10);
    EXPECT_NEAR(row.ratio_m, 1.0, 1e-10);
    EXPECT_NEAR(row.ratio_h_perturbed, 1.0, 1e-10);
    EXPECT_NEAR(row.ratio_m_perturbed, 1.0, 1e-10);
  }
  EXPECT_TRUE(study.failures.empty());
}

TEST(Optimality, JobsIndependent) {
  ScenarioConfig cfg;
  const auto a = optimality_study(cfg, {"pseudo_likelihood", "identity"}, false, 6, {30, 60}, 1);
  const auto b = optimality_study(cfg, {"pseudo_likelihood", "identity"}, false, 6, {30, 60}, 3);
  for (std::size_t k = 0; k < a.rows.size(); ++k) {
    EXPECT_EQ(a.rows[k].ratio_h, b.rows[k].ratio_h);
    EXPECT_EQ(a.rows[k].ratio_m, b.rows[k].ratio_m);
  }
}

TEST(Optimality, IndependenceMisspecified) {
  ScenarioConfig cfg;
  const auto study = optimality_study(cfg, {"identity"}, false, 40, {400});
  EXPECT_GT(std::abs(study.rows[0].ratio_m - 1.0), 0.05);
}

TEST(Consistency, RowsAndSurrogate) {
  ScenarioConfig cfg;
  const auto study = consistency_study(cfg, {"independence", "pseudo_likelihood"}, 6, {50, 200});
  ASSERT_EQ(study.rows.size(), 4u);
  for (const auto& row : study.rows) {
    EXPECT_EQ(row.attempted, 6u);
    EXPECT_LE(row.q1, row.median);
    EXPECT_LE(row.median, row.q3);
  }
  ASSERT_EQ(study.n0_surrogate.size(), 6u);
  for (const auto& per : study.n0_surrogate) EXPECT_EQ(per[0], 50u);
}
