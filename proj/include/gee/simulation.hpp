#pragma once

// Seeded generation of clustered data with predictable regressors, and the
// Monte-Carlo replication harness.
//
// Cluster i is generated from the counter-based streams (seed, i, tag), so
// datasets for different n within one replication are nested prefixes.

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <boost/math/distributions/poisson.hpp>

#include "gee/correlation.hpp"
#include "gee/error.hpp"
#include "gee/estimating.hpp"
#include "gee/model.hpp"
#include "gee/parallel.hpp"
#include "gee/random.hpp"
#include "gee/solver.hpp"

namespace gee {

enum class SizeScheduleKind { constant, cyclic, random_range };
enum class RegressorKind { iid, exogenous_ar1, feedback };
enum class TruthKind { independence, exchangeable, ar1 };
enum class ResponseFamily { gaussian_link_moments, poisson_log, bernoulli_probit_flagged };

struct SizeSchedule {
  SizeScheduleKind kind = SizeScheduleKind::constant;
  Eigen::Index m = 3;
  std::vector<Eigen::Index> cycle;
  Eigen::Index lo = 1;
  Eigen::Index hi = 3;

  Eigen::Index largest() const {
    switch (kind) {
      case SizeScheduleKind::constant: return m;
      case SizeScheduleKind::cyclic: return cycle.empty() ? 0 : *std::max_element(cycle.begin(), cycle.end());
      case SizeScheduleKind::random_range: return hi;
    }
    return m;
  }
};

// Stochastic covariate columns (all columns but the optional intercept):
//   iid            x = mean + scale * e
//   exogenous_ar1  x_{i,slot} = phi * x_{i-1,slot} + scale * e, one chain per (row slot, column)
//   feedback       x = kappa * mean(y_{i-1}) + scale * e
struct RegressorProcess {
  RegressorKind kind = RegressorKind::iid;
  double mean = 0.0;
  double scale = 1.0;
  double phi = 0.5;
  double kappa = 0.5;
  bool intercept = false;
};

struct TruthSpec {
  TruthKind kind = TruthKind::exchangeable;
  double rho = 0.4;

  Matrix matrix(Eigen::Index m) const {
    switch (kind) {
      case TruthKind::independence: return Matrix::Identity(m, m);
      case TruthKind::exchangeable: return WorkingCorrelationSpec::exchangeable(rho, m).structured_template();
      case TruthKind::ar1: return WorkingCorrelationSpec::ar1(rho, m).structured_template();
    }
    return Matrix::Identity(m, m);
  }
};

struct ScenarioConfig {
  LinkKind link = LinkKind::identity;
  Vector beta0 = (Vector(2) << 0.5, -0.3).finished();
  std::size_t n = 200;
  SizeSchedule sizes;
  Eigen::Index m_max = 0;  // 0 = largest scheduled size
  RegressorProcess regressors;
  TruthSpec truth;
  ResponseFamily family = ResponseFamily::gaussian_link_moments;
  std::uint64_t seed = 20240917;

  Eigen::Index p() const { return beta0.size(); }
  Eigen::Index resolved_m_max() const { return m_max > 0 ? m_max : sizes.largest(); }
  bool misspecified() const { return family == ResponseFamily::bernoulli_probit_flagged; }

  void validate() const {
    if (n < 1) throw ConfigError("n", "must be >= 1");
    if (beta0.size() < 1) throw ConfigError("beta0", "must have at least one entry");
    if (!beta0.allFinite()) throw ConfigError("beta0", "entries must be finite");
    switch (sizes.kind) {
      case SizeScheduleKind::constant:
        if (sizes.m < 1) throw ConfigError("sizes.m", "must be >= 1");
        break;
      case SizeScheduleKind::cyclic:
        if (sizes.cycle.empty()) throw ConfigError("sizes.cycle", "must list at least one size");
        for (Eigen::Index v : sizes.cycle)
          if (v < 1) throw ConfigError("sizes.cycle", "sizes must be >= 1");
        break;
      case SizeScheduleKind::random_range:
        if (sizes.lo < 1) throw ConfigError("sizes.lo", "must be >= 1");
        if (sizes.hi < sizes.lo) throw ConfigError("sizes.hi", "must be >= sizes.lo");
        break;
    }
    if (m_max < 0) throw ConfigError("m_max", "must be >= 0");
    if (m_max > 0 && m_max < sizes.largest()) throw ConfigError("m_max", "smaller than the largest scheduled size");
    if (!(regressors.scale > 0.0) || !std::isfinite(regressors.scale)) throw ConfigError("regressors.scale", "must be positive");
    if (!std::isfinite(regressors.mean)) throw ConfigError("regressors.mean", "must be finite");
    if (!(std::abs(regressors.phi) < 1.0)) throw ConfigError("regressors.phi", "must satisfy |phi| < 1");
    if (!std::isfinite(regressors.kappa)) throw ConfigError("regressors.kappa", "must be finite");
    const Eigen::Index mm = resolved_m_max();
    if (truth.kind == TruthKind::exchangeable) {
      const double lower = mm > 1 ? -1.0 / static_cast<double>(mm - 1) : -1.0;
      if (!(truth.rho > lower && truth.rho < 1.0)) throw ConfigError("truth.rho", "outside the positive-definite range for exchangeable");
    }
    if (truth.kind == TruthKind::ar1 && !(std::abs(truth.rho) < 1.0)) throw ConfigError("truth.rho", "must satisfy |rho| < 1");
    if (family == ResponseFamily::poisson_log && link != LinkKind::log) throw ConfigError("family", "poisson_log requires link = log");
    if (family == ResponseFamily::bernoulli_probit_flagged && link != LinkKind::probit) {
      throw ConfigError("family", "bernoulli_probit_flagged requires link = probit");
    }
  }
};

namespace stream_tag {
inline constexpr std::uint32_t size = 1;
inline constexpr std::uint32_t regressor = 2;
inline constexpr std::uint32_t response = 3;
inline constexpr std::uint32_t oracle = 4;
}  // namespace stream_tag

inline Eigen::Index cluster_size(const ScenarioConfig& cfg, std::uint64_t seed, std::size_t i) {
  switch (cfg.sizes.kind) {
    case SizeScheduleKind::constant: return cfg.sizes.m;
    case SizeScheduleKind::cyclic: return cfg.sizes.cycle[(i - 1) % cfg.sizes.cycle.size()];
    case SizeScheduleKind::random_range: {
      random::Stream s(seed, i, stream_tag::size);
      const auto span = static_cast<std::uint64_t>(cfg.sizes.hi - cfg.sizes.lo + 1);
      return cfg.sizes.lo + static_cast<Eigen::Index>(s.next_u64() % span);
    }
  }
  return cfg.sizes.m;
}

// Sequential regressor generator. draw(i, history) must be called for
// i = 1, 2, ... in order; history holds clusters 1..i-1.
class RegressorGenerator {
 public:
  RegressorGenerator(const ScenarioConfig& cfg, std::uint64_t seed) : cfg_(cfg), seed_(seed) {
    const Eigen::Index q = stochastic_columns();
    state_ = Matrix::Zero(cfg.resolved_m_max(), q);
  }

  Matrix draw(std::size_t i, Eigen::Index m, std::span<const Cluster> history) {
    const Eigen::Index q = stochastic_columns();
    const Eigen::Index mm = cfg_.resolved_m_max();
    random::Stream s(seed_, i, stream_tag::regressor);
    // Always draw a full m_max x q block so slot chains stay aligned.
    Matrix e(mm, q);
    for (Eigen::Index j = 0; j < mm; ++j)
      for (Eigen::Index k = 0; k < q; ++k) e(j, k) = s.normal();
    Matrix z(mm, q);
    const RegressorProcess& rp = cfg_.regressors;
    switch (rp.kind) {
      case RegressorKind::iid:
        z = (rp.mean + rp.scale * e.array()).matrix();
        break;
      case RegressorKind::exogenous_ar1:
        if (i == 1) {
          state_ = (rp.scale / std::sqrt(1.0 - rp.phi * rp.phi)) * e;
        } else {
          state_ = rp.phi * state_ + rp.scale * e;
        }
        z = (rp.mean + state_.array()).matrix();
        break;
      case RegressorKind::feedback: {
        const double prev = history.empty() ? 0.0 : history.back().y.mean();
        z = (rp.kappa * prev + rp.scale * e.array()).matrix();
        break;
      }
    }
    Matrix x(m, cfg_.p());
    if (rp.intercept) x.col(0).setOnes();
    x.rightCols(q) = z.topRows(m);
    return x;
  }

 private:
  Eigen::Index stochastic_columns() const { return cfg_.p() - (cfg_.regressors.intercept ? 1 : 0); }

  const ScenarioConfig& cfg_;
  std::uint64_t seed_;
  Matrix state_;
};

namespace detail {

// Smallest k with P(Poisson(mu) <= k) >= u.
inline double poisson_quantile(double mu, double u) {
  if (mu > 200.0) {
    using Policy = boost::math::policies::policy<boost::math::policies::discrete_quantile<boost::math::policies::integer_round_up>>;
    return boost::math::quantile(boost::math::poisson_distribution<double, Policy>(mu), u);
  }
  double pmf = std::exp(-mu);
  double cdf = pmf;
  double k = 0.0;
  const double cap = mu + 60.0 * std::sqrt(mu) + 60.0;
  while (cdf < u && k < cap) {
    k += 1.0;
    pmf *= mu / k;
    cdf += pmf;
  }
  return k;
}

}  // namespace detail

// y_i given X_i, on stream (seed, i, response).
inline Vector draw_response(const ScenarioConfig& cfg, std::uint64_t seed, std::size_t i, const Matrix& x,
                            const Matrix& chol_full) {
  const LinkFunction link{cfg.link};
  const ConditionalMoments mom = conditional_moments(x, cfg.beta0, link);
  const Eigen::Index m = x.rows();
  random::Stream s(seed, i, stream_tag::response);
  Vector e(m);
  for (Eigen::Index j = 0; j < m; ++j) e(j) = s.normal();
  const Vector z = chol_full.topLeftCorner(m, m).triangularView<Eigen::Lower>() * e;
  Vector y(m);
  switch (cfg.family) {
    case ResponseFamily::gaussian_link_moments:
      y = mom.mean + mom.variance.cwiseSqrt().cwiseProduct(z);
      break;
    case ResponseFamily::poisson_log:
      for (Eigen::Index j = 0; j < m; ++j) y(j) = detail::poisson_quantile(mom.mean(j), normal_cdf(z(j)));
      break;
    case ResponseFamily::bernoulli_probit_flagged:
      for (Eigen::Index j = 0; j < m; ++j) y(j) = normal_cdf(z(j)) < mom.mean(j) ? 1.0 : 0.0;
      break;
  }
  return y;
}

inline Matrix truth_cholesky(const ScenarioConfig& cfg) {
  const Matrix r = cfg.truth.matrix(cfg.resolved_m_max());
  Eigen::LLT<Matrix> llt(r);
  if (llt.info() != Eigen::Success) throw ConfigError("truth.rho", "truth correlation is not positive definite");
  return llt.matrixL();
}

inline Dataset simulate_scenario(const ScenarioConfig& cfg, std::optional<std::uint64_t> seed_override = std::nullopt,
                                 std::optional<std::size_t> n_override = std::nullopt) {
  cfg.validate();
  const std::uint64_t seed = seed_override.value_or(cfg.seed);
  const std::size_t n = n_override.value_or(cfg.n);
  const Matrix chol = truth_cholesky(cfg);
  Dataset data;
  data.p = cfg.p();
  data.m_max = cfg.resolved_m_max();
  data.clusters.reserve(n);
  RegressorGenerator gen(cfg, seed);
  for (std::size_t i = 1; i <= n; ++i) {
    Cluster c;
    c.index = i;
    const Eigen::Index m = cluster_size(cfg, seed, i);
    c.x = gen.draw(i, m, std::span<const Cluster>(data.clusters));
    c.y = draw_response(cfg, seed, i, c.x, chol);
    data.clusters.push_back(std::move(c));
  }
  return data;
}

// X_{k+1} rebuilt from scratch out of the stored history (clusters 1..k).
inline Matrix replay_regressors(const ScenarioConfig& cfg, std::uint64_t seed, std::span<const Cluster> history) {
  RegressorGenerator gen(cfg, seed);
  Matrix x;
  for (std::size_t i = 1; i <= history.size() + 1; ++i) {
    x = gen.draw(i, cluster_size(cfg, seed, i), history.first(i - 1));
  }
  return x;
}

// Per-pair correlation of Gaussian-copula Poisson vectors at a common mean,
// estimated from `samples` draws. The common mean is exp of the average
// linear predictor over a pilot run of the scenario.
inline Matrix poisson_copula_correlation(const ScenarioConfig& cfg, std::size_t samples = 100000) {
  const Eigen::Index mm = cfg.resolved_m_max();
  ScenarioConfig pilot = cfg;
  pilot.family = ResponseFamily::gaussian_link_moments;
  double eta_sum = 0.0;
  std::size_t count = 0;
  {
    const Dataset d = simulate_scenario(pilot, random::splitmix64(cfg.seed ^ 0x6f7261636c65ull), std::min<std::size_t>(cfg.n, 500));
    for (const Cluster& c : d.clusters) {
      eta_sum += (c.x * cfg.beta0).sum();
      count += static_cast<std::size_t>(c.size());
    }
  }
  const double mu = std::exp(eta_sum / static_cast<double>(count));
  const Matrix chol = truth_cholesky(cfg);
  Matrix sum = Matrix::Zero(mm, mm);
  Vector mean = Vector::Zero(mm);
  for (std::size_t k = 0; k < samples; ++k) {
    random::Stream s(cfg.seed, k, stream_tag::oracle);
    Vector e(mm);
    for (Eigen::Index j = 0; j < mm; ++j) e(j) = s.normal();
    const Vector z = chol.triangularView<Eigen::Lower>() * e;
    Vector y(mm);
    for (Eigen::Index j = 0; j < mm; ++j) y(j) = detail::poisson_quantile(mu, normal_cdf(z(j)));
    mean += y;
    sum.noalias() += y * y.transpose();
  }
  mean /= static_cast<double>(samples);
  Matrix cov = sum / static_cast<double>(samples) - mean * mean.transpose();
  const Vector inv_sd = cov.diagonal().cwiseSqrt().cwiseInverse();
  Matrix r = inv_sd.asDiagonal() * cov * inv_sd.asDiagonal();
  r.diagonal().setOnes();
  return regularize_correlation(r);
}

// R-bar^(c) for the scenario: exact for the Gaussian family, the copula
// oracle for Poisson, and the latent correlation for the flagged Bernoulli
// family (which is not the correlation of the binary responses).
inline TruthCorrelation scenario_truth(const ScenarioConfig& cfg) {
  cfg.validate();
  if (cfg.family == ResponseFamily::poisson_log) return TruthCorrelation{poisson_copula_correlation(cfg)};
  return TruthCorrelation{cfg.truth.matrix(cfg.resolved_m_max())};
}

// ---------------------------------------------------------------------------
// Estimator names
//
//   independence | quasi_score | truth | pseudo_likelihood | identity
//   exchangeable:<rho> | ar1:<rho>
// "truth" is g* with the true correlation supplied as a fixed working matrix.

inline EstimatingFunction make_estimator(const std::string& name, Eigen::Index m_max, const TruthCorrelation& truth) {
  auto rho_of = [&](std::size_t prefix) {
    const std::string tail = name.substr(prefix);
    char* end = nullptr;
    const double v = std::strtod(tail.c_str(), &end);
    if (tail.empty() || end != tail.c_str() + tail.size()) throw ConfigError("estimator", "bad parameter in '" + name + "'");
    return v;
  };
  try {
    if (name == "independence") return Independence{};
    if (name == "quasi_score") return QuasiScore{truth};
    if (name == "truth") return GeeStar{WorkingCorrelationSpec::fixed(truth.rbar_template)};
    if (name == "pseudo_likelihood") return GeeStar{WorkingCorrelationSpec::pseudo_likelihood(m_max)};
    if (name == "identity") return GeeStar{WorkingCorrelationSpec::identity(m_max)};
    if (name.rfind("exchangeable:", 0) == 0) return GeeStar{WorkingCorrelationSpec::exchangeable(rho_of(13), m_max)};
    if (name.rfind("ar1:", 0) == 0) return GeeStar{WorkingCorrelationSpec::ar1(rho_of(4), m_max)};
  } catch (const InvalidArgument& e) {
    throw ConfigError("estimator", e.what());
  }
  throw ConfigError("estimator", "unknown estimator '" + name + "'");
}

// Working-correlation spec behind a g* estimator name (for the optimality study).
inline WorkingCorrelationSpec make_working_spec(const std::string& name, Eigen::Index m_max, const TruthCorrelation& truth) {
  const EstimatingFunction f = make_estimator(name, m_max, truth);
  if (const GeeStar* s = std::get_if<GeeStar>(&f)) return s->spec;
  if (std::holds_alternative<Independence>(f)) return WorkingCorrelationSpec::identity(m_max);
  if (std::holds_alternative<QuasiScore>(f)) return WorkingCorrelationSpec::fixed(truth.rbar_template);
  throw ConfigError("estimator", "'" + name + "' has no working correlation");
}

// ---------------------------------------------------------------------------
// Replications

inline std::uint64_t dataset_digest(const Dataset& d) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  auto mix = [&](const void* p, std::size_t bytes) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t k = 0; k < bytes; ++k) {
      h ^= b[k];
      h *= 0x100000001b3ull;
    }
  };
  for (const Cluster& c : d.clusters) {
    mix(c.y.data(), sizeof(double) * static_cast<std::size_t>(c.y.size()));
    mix(c.x.data(), sizeof(double) * static_cast<std::size_t>(c.x.size()));
  }
  return h;
}

struct FitOutcome {
  std::size_t n = 0;
  Vector beta_hat;
  bool converged = false;
  int iterations = 0;
  double residual_norm = 0.0;
  std::optional<std::string> error;
};

struct EstimatorFits {
  std::string estimator;
  std::vector<FitOutcome> per_n;
};

struct ReplicationResult {
  std::size_t id = 0;
  std::uint64_t seed = 0;
  std::uint64_t digest = 0;
  std::vector<EstimatorFits> fits;
  std::optional<std::string> failure;
};

inline void validate_n_grid(const std::vector<std::size_t>& grid) {
  if (grid.empty()) throw ConfigError("n_grid", "must not be empty");
  for (std::size_t k = 0; k < grid.size(); ++k) {
    if (grid[k] < 1) throw ConfigError("n_grid", "entries must be >= 1");
    if (k > 0 && grid[k] < grid[k - 1]) throw ConfigError("n_grid", "must be nondecreasing");
  }
}

inline ReplicationResult run_replication(const ScenarioConfig& cfg, std::size_t id, const std::vector<std::string>& estimators,
                                         const std::vector<std::size_t>& n_grid, const TruthCorrelation& truth,
                                         const SolverConfig& solver) {
  ReplicationResult out;
  out.id = id;
  out.seed = random::replication_seed(cfg.seed, id);
  try {
    const Dataset full = simulate_scenario(cfg, out.seed, n_grid.back());
    out.digest = dataset_digest(full);
    const LinkFunction link{cfg.link};
    for (const std::string& name : estimators) {
      EstimatorFits ef;
      ef.estimator = name;
      const EstimatingFunction kind = make_estimator(name, full.m_max, truth);
      for (std::size_t n : n_grid) {
        FitOutcome fo;
        fo.n = n;
        try {
          const GeeFit fit = solve_gee(full.prefix(n), kind, link, solver);
          fo.beta_hat = fit.beta_hat;
          fo.converged = fit.converged;
          fo.iterations = fit.iterations;
          fo.residual_norm = fit.final_residual_norm;
        } catch (const Error& e) {
          fo.error = e.what();
        }
        ef.per_n.push_back(std::move(fo));
      }
      out.fits.push_back(std::move(ef));
    }
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    out.failure = e.what();
  }
  return out;
}

inline std::vector<ReplicationResult> run_replications(const ScenarioConfig& cfg, std::size_t reps,
                                                       const std::vector<std::string>& estimators,
                                                       const std::vector<std::size_t>& n_grid, unsigned jobs = 1,
                                                       const SolverConfig& solver = {},
                                                       std::optional<TruthCorrelation> truth = std::nullopt) {
  cfg.validate();
  if (reps < 1) throw ConfigError("reps", "must be >= 1");
  validate_n_grid(n_grid);
  const TruthCorrelation tr = truth ? *truth : scenario_truth(cfg);
  for (const std::string& e : estimators) make_estimator(e, cfg.resolved_m_max(), tr);
  std::vector<ReplicationResult> results(reps);
  parallel_for(reps, jobs, [&](std::size_t r) {
    try {
      results[r] = run_replication(cfg, r, estimators, n_grid, tr, solver);
    } catch (const std::exception& e) {
      results[r].id = r;
      results[r].failure = e.what();
    }
  });
  return results;
}

}  // namespace gee
