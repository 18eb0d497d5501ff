#pragma once

// Root finding for q_n(beta) = 0: damped Newton with a residual-norm line
// search, plus the explicit weighted least-squares root for the identity link.

#include <cmath>
#include <limits>
#include <optional>
#include <vector>

#include <Eigen/LU>
#include <Eigen/SVD>
#include <boost/math/special_functions/erf.hpp>

#include "gee/correlation.hpp"
#include "gee/error.hpp"
#include "gee/estimating.hpp"
#include "gee/linalg.hpp"
#include "gee/model.hpp"

namespace gee {

struct SolverConfig {
  double tol_g = 1e-10;
  double tol_x = 1e-12;
  int max_iter = 100;
  int max_halvings = 30;
  JacobianMethod jacobian_method = JacobianMethod::automatic;
  // Pseudo-likelihood fits: independence fit, then this many refits with R*
  // frozen at the previous estimate.
  int correlation_refreshes = 1;

  void validate() const {
    if (!(tol_g > 0.0)) throw ConfigError("tol_g", "must be positive");
    if (!(tol_x > 0.0)) throw ConfigError("tol_x", "must be positive");
    if (max_iter < 1) throw ConfigError("max_iter", "must be >= 1");
    if (max_halvings < 0) throw ConfigError("max_halvings", "must be >= 0");
    if (correlation_refreshes < 1) throw ConfigError("correlation_refreshes", "must be >= 1");
  }
};

struct TraceEntry {
  Vector beta;
  double residual_norm = 0.0;  // ||q_n(beta)||_inf at the start of the iteration
  double step_norm = 0.0;      // ||accepted step||_inf
  int halvings = 0;
  bool ridge = false;
  int stage = 1;  // outer stage of a pseudo-likelihood fit
};

struct GeeFit {
  Vector beta_hat;
  bool converged = false;
  int iterations = 0;
  double final_residual_norm = 0.0;
  std::vector<TraceEntry> trace;
  int stages = 1;
};

namespace detail {

inline double inf_norm(const Vector& v) { return v.size() == 0 ? 0.0 : v.cwiseAbs().maxCoeff(); }

// ||q(beta)||_inf, or +inf when beta leaves the link domain.
template <class G>
double safe_norm(G&& g, const Vector& beta, Vector* out = nullptr) {
  try {
    Vector v = g(beta);
    if (!v.allFinite()) return std::numeric_limits<double>::infinity();
    const double n = inf_norm(v);
    if (out) *out = std::move(v);
    return n;
  } catch (const NumericalError&) {
    return std::numeric_limits<double>::infinity();
  }
}

// Solves D s = g, adding ridge 1e-8 tr(D)/p I once when D is numerically singular.
inline Vector newton_step(const Matrix& d, const Vector& g, bool& ridge) {
  auto attempt = [&](const Matrix& a, Vector& s) {
    Eigen::FullPivLU<Matrix> lu(a);
    if (!lu.isInvertible() || lu.rcond() < 1e-14) return false;
    s = lu.solve(g);
    return s.allFinite();
  };
  Vector s;
  ridge = false;
  if (d.allFinite() && attempt(d, s)) return s;
  ridge = true;
  Matrix r = d;
  const double shift = 1e-8 * d.trace() / static_cast<double>(d.rows());
  r.diagonal().array() += shift;
  if (d.allFinite() && shift != 0.0 && attempt(r, s)) return s;
  double lambda_min = std::numeric_limits<double>::quiet_NaN();
  if (d.allFinite()) lambda_min = Eigen::JacobiSVD<Matrix>(d).singularValues().minCoeff();
  throw SingularMatrix("singular Jacobian after ridge regularization", lambda_min);
}

template <class G, class J>
GeeFit newton(G&& g_of, J&& jac_of, const Vector& init, const SolverConfig& config) {
  GeeFit fit;
  Vector beta = init;
  Vector g;
  double g_norm = safe_norm(g_of, beta, &g);
  if (!std::isfinite(g_norm)) throw InvalidInput("initial value outside the link domain");

  for (int iter = 0; iter < config.max_iter; ++iter) {
    TraceEntry entry;
    entry.beta = beta;
    entry.residual_norm = g_norm;
    fit.iterations = iter;

    const Matrix d = jac_of(beta);
    const Vector step = newton_step(d, g, entry.ridge);
    const double full_norm = inf_norm(step);
    if (g_norm < config.tol_g && full_norm < config.tol_x) {
      fit.trace.push_back(entry);
      fit.converged = true;
      break;
    }

    double t = 1.0;
    Vector g_trial;
    double trial_norm = safe_norm(g_of, Vector(beta + step), &g_trial);
    int halvings = 0;
    while (!(trial_norm <= g_norm) && halvings < config.max_halvings) {
      t *= 0.5;
      ++halvings;
      trial_norm = safe_norm(g_of, Vector(beta + t * step), &g_trial);
    }
    entry.halvings = halvings;
    if (!(trial_norm <= g_norm)) {
      // No non-increasing step along the Newton direction: stop here.
      entry.step_norm = 0.0;
      fit.trace.push_back(entry);
      fit.converged = g_norm < config.tol_g;
      break;
    }
    beta += t * step;
    g = std::move(g_trial);
    g_norm = trial_norm;
    entry.step_norm = t * full_norm;
    fit.trace.push_back(entry);
    fit.iterations = iter + 1;
    if (g_norm < config.tol_g && entry.step_norm < config.tol_x) {
      fit.converged = true;
      break;
    }
  }
  fit.beta_hat = beta;
  fit.final_residual_norm = g_norm;
  return fit;
}

}  // namespace detail

// Working-independence closed form on link-transformed responses; zero when
// some response lies outside the range of the link.
inline Vector default_initial_value(const Dataset& data, const LinkFunction& link) {
  Matrix xtx = Matrix::Zero(data.p, data.p);
  Vector xtz = Vector::Zero(data.p);
  for (const Cluster& c : data.clusters) {
    Vector z(c.size());
    for (Eigen::Index j = 0; j < c.size(); ++j) {
      const double y = c.y(j);
      switch (link.kind) {
        case LinkKind::identity: z(j) = y; break;
        case LinkKind::log:
          if (!(y > 0.0)) return Vector::Zero(data.p);
          z(j) = std::log(y);
          break;
        case LinkKind::probit:
          if (!(y > 0.0 && y < 1.0)) return Vector::Zero(data.p);
          z(j) = -std::sqrt(2.0) * boost::math::erfc_inv(2.0 * y);
          break;
      }
    }
    xtx.noalias() += c.x.transpose() * c.x;
    xtz.noalias() += c.x.transpose() * z;
  }
  Eigen::FullPivLU<Matrix> lu(xtx);
  if (!lu.isInvertible()) return Vector::Zero(data.p);
  const Vector beta = lu.solve(xtz);
  return beta.allFinite() ? beta : Vector::Zero(data.p);
}

inline GeeFit solve_gee(const Dataset& data, const EstimatingFunction& kind, const LinkFunction& link,
                        const SolverConfig& config = {}, std::optional<Vector> init = std::nullopt) {
  config.validate();
  data.validate();
  Vector start = init ? *init : default_initial_value(data, link);
  if (start.size() != data.p) throw InvalidInput("initial value has wrong dimension");

  auto run = [&](const EstimatingFunction& k, const FrozenCorrelation* frozen, const Vector& from) {
    return detail::newton([&](const Vector& b) { return eval_g(k, data, b, link, frozen); },
                          [&](const Vector& b) { return jacobian(k, data, b, link, frozen, config.jacobian_method); }, from,
                          config);
  };

  const GeeStar* star = std::get_if<GeeStar>(&kind);
  if (!star || !star->spec.beta_dependent()) return run(kind, nullptr, start);

  GeeFit fit = run(Independence{}, nullptr, start);
  int stages = 1;
  for (int s = 0; s < config.correlation_refreshes; ++s) {
    const FrozenCorrelation frozen = FrozenCorrelation::build(star->spec, data, fit.beta_hat, link);
    GeeFit next = run(kind, &frozen, fit.beta_hat);
    for (TraceEntry& e : next.trace) e.stage = stages + 1;
    next.trace.insert(next.trace.begin(), fit.trace.begin(), fit.trace.end());
    fit = std::move(next);
    ++stages;
  }
  fit.stages = stages;
  return fit;
}

// beta = (sum X_i^T R_i^{-1} X_i)^{-1} sum X_i^T R_i^{-1} y_i, one SPD R_i per cluster.
inline Vector linear_closed_form(const Dataset& data, const std::vector<Matrix>& r_sequence) {
  if (r_sequence.size() != data.n()) throw InvalidInput("need one working matrix per cluster");
  Matrix normal = Matrix::Zero(data.p, data.p);
  Vector rhs = Vector::Zero(data.p);
  for (std::size_t i = 0; i < data.n(); ++i) {
    const Cluster& c = data.clusters[i];
    if (r_sequence[i].rows() != c.size()) throw InvalidInput("working matrix size does not match cluster " + std::to_string(c.index));
    const Matrix w_x = linalg::spd_solve(r_sequence[i], c.x);
    normal.noalias() += c.x.transpose() * w_x;
    rhs.noalias() += w_x.transpose() * c.y;
  }
  normal = (0.5 * (normal + normal.transpose())).eval();
  const double lambda_min = linalg::sym_eigen_extremes(normal).lambda_min;
  if (!(lambda_min > linalg::kSpdMinEigenvalue)) {
    throw SingularMatrix("singular normal matrix (lambda_min = " + std::to_string(lambda_min) + ")", lambda_min);
  }
  return linalg::spd_solve(normal, rhs);
}

// Same with the leading block of one m_max x m_max template for every cluster.
inline Vector linear_closed_form(const Dataset& data, const Matrix& r_template) {
  std::vector<Matrix> seq;
  seq.reserve(data.n());
  for (const Cluster& c : data.clusters) {
    if (c.size() > r_template.rows()) throw InvalidInput("working template smaller than cluster");
    seq.push_back(r_template.topLeftCorner(c.size(), c.size()));
  }
  return linear_closed_form(data, seq);
}

}  // namespace gee
