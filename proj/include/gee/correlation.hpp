#pragma once

// Working-correlation proxies R*_n(beta) and true conditional correlations.
//
// Every working correlation is kept as an m_max x m_max template; cluster i of
// size m_i uses the leading m_i x m_i block of the template built from
// clusters 1..i-1 only, so the matrix applied to cluster i is predictable.

#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <string>

#include "gee/error.hpp"
#include "gee/linalg.hpp"
#include "gee/model.hpp"

namespace gee {

enum class CorrelationKind { identity, exchangeable, ar1, pseudo_likelihood, fixed };

inline constexpr double kCorrelationFloor = 1e-6;

class WorkingCorrelationSpec {
 public:
  static WorkingCorrelationSpec identity(Eigen::Index m_max) {
    return WorkingCorrelationSpec(CorrelationKind::identity, m_max, 0.0);
  }

  static WorkingCorrelationSpec exchangeable(double rho, Eigen::Index m_max) {
    const double lower = m_max > 1 ? -1.0 / static_cast<double>(m_max - 1) : -1.0;
    if (!(rho > lower && rho < 1.0)) {
      throw InvalidArgument("exchangeable rho=" + std::to_string(rho) + " outside (" + std::to_string(lower) + ", 1)");
    }
    return WorkingCorrelationSpec(CorrelationKind::exchangeable, m_max, rho);
  }

  static WorkingCorrelationSpec ar1(double rho, Eigen::Index m_max) {
    if (!(std::abs(rho) < 1.0)) throw InvalidArgument("ar1 rho=" + std::to_string(rho) + " outside (-1, 1)");
    return WorkingCorrelationSpec(CorrelationKind::ar1, m_max, rho);
  }

  // Running average of standardized residual outer products, shrunk toward
  // the identity by `prior_weight` pseudo-observations per entry. A negative
  // prior weight selects the default of m_max pseudo-observations.
  static WorkingCorrelationSpec pseudo_likelihood(Eigen::Index m_max, double prior_weight = -1.0) {
    WorkingCorrelationSpec s(CorrelationKind::pseudo_likelihood, m_max, 0.0);
    s.prior_weight_ = prior_weight < 0.0 ? static_cast<double>(m_max) : prior_weight;
    return s;
  }

  static WorkingCorrelationSpec fixed(const Matrix& r) {
    const Matrix sym = linalg::symmetrized(r);
    const auto ext = linalg::sym_eigen_extremes(sym);
    if (!(ext.lambda_min > 0.0)) throw NotPositiveDefinite(ext.lambda_min, "in fixed working correlation");
    WorkingCorrelationSpec s(CorrelationKind::fixed, sym.rows(), 0.0);
    s.fixed_ = sym;
    return s;
  }

  CorrelationKind kind() const noexcept { return kind_; }
  Eigen::Index template_dim() const noexcept { return m_max_; }
  double rho() const noexcept { return rho_; }
  double prior_weight() const noexcept { return prior_weight_; }
  const Matrix& fixed_matrix() const noexcept { return fixed_; }
  bool beta_dependent() const noexcept { return kind_ == CorrelationKind::pseudo_likelihood; }

  // Template for the data-free kinds (identity, exchangeable, ar1, fixed).
  Matrix structured_template() const {
    const Eigen::Index m = m_max_;
    switch (kind_) {
      case CorrelationKind::identity:
      case CorrelationKind::pseudo_likelihood:
        return Matrix::Identity(m, m);
      case CorrelationKind::exchangeable: {
        Matrix r = Matrix::Constant(m, m, rho_);
        r.diagonal().setOnes();
        return r;
      }
      case CorrelationKind::ar1: {
        Matrix r(m, m);
        for (Eigen::Index a = 0; a < m; ++a)
          for (Eigen::Index b = 0; b < m; ++b) r(a, b) = std::pow(rho_, static_cast<double>(std::abs(a - b)));
        return r;
      }
      case CorrelationKind::fixed:
        return fixed_;
    }
    return Matrix::Identity(m, m);
  }

  std::string name() const {
    switch (kind_) {
      case CorrelationKind::identity: return "identity";
      case CorrelationKind::exchangeable: return "exchangeable:" + format_rho();
      case CorrelationKind::ar1: return "ar1:" + format_rho();
      case CorrelationKind::pseudo_likelihood: return "pseudo_likelihood";
      case CorrelationKind::fixed: return "fixed";
    }
    return "unknown";
  }

 private:
  WorkingCorrelationSpec(CorrelationKind kind, Eigen::Index m_max, double rho) : kind_(kind), m_max_(m_max), rho_(rho) {
    if (m_max < 1) throw InvalidArgument("working correlation template dimension must be >= 1");
  }

  std::string format_rho() const {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%g", rho_);
    return buf;
  }

  CorrelationKind kind_;
  Eigen::Index m_max_;
  double rho_;
  double prior_weight_ = 0.0;
  Matrix fixed_;
};

// Accumulated standardized residual outer products. Clusters smaller than
// m_max only touch their leading principal block; `entry_counts` records how
// many clusters contributed to each entry.
struct PseudoLikelihoodState {
  std::size_t count = 0;
  Matrix running_sum;
  Eigen::MatrixXi entry_counts;

  explicit PseudoLikelihoodState(Eigen::Index m_max = 1)
      : running_sum(Matrix::Zero(m_max, m_max)), entry_counts(Eigen::MatrixXi::Zero(m_max, m_max)) {}

  Eigen::Index dim() const { return running_sum.rows(); }

  // Entrywise average shrunk toward the identity by `prior_weight` pseudo-counts.
  // Entries no cluster has reached yet come from the identity.
  Matrix average(double prior_weight = 0.0) const {
    const Eigen::Index m = dim();
    Matrix out(m, m);
    for (Eigen::Index a = 0; a < m; ++a) {
      for (Eigen::Index b = 0; b < m; ++b) {
        const double target = a == b ? 1.0 : 0.0;
        const double denom = entry_counts(a, b) + prior_weight;
        out(a, b) = denom > 0.0 ? (running_sum(a, b) + prior_weight * target) / denom : target;
      }
    }
    return out;
  }
};

// Standardized residual A^{-1/2}(y - mu) for one cluster.
inline Vector standardized_residual(const Cluster& cluster, const Vector& beta, const LinkFunction& link) {
  const ConditionalMoments mom = conditional_moments(cluster, beta, link);
  return (cluster.y - mom.mean).cwiseQuotient(mom.variance.cwiseSqrt());
}

inline void accumulate(PseudoLikelihoodState& state, const Vector& e) {
  const Eigen::Index m = e.size();
  if (m > state.dim()) throw InvalidArgument("cluster larger than the pseudo-likelihood template");
  state.running_sum.topLeftCorner(m, m).noalias() += e * e.transpose();
  state.entry_counts.topLeftCorner(m, m).array() += 1;
  ++state.count;
}

inline PseudoLikelihoodState pseudo_likelihood_update(const PseudoLikelihoodState& state, const Cluster& cluster,
                                                      const Vector& beta, const LinkFunction& link) {
  PseudoLikelihoodState next = state;
  accumulate(next, standardized_residual(cluster, beta, link));
  return next;
}

inline PseudoLikelihoodState pseudo_likelihood_state(std::span<const Cluster> history, Eigen::Index m_max,
                                                     const Vector& beta, const LinkFunction& link) {
  PseudoLikelihoodState state(m_max);
  for (const Cluster& c : history) accumulate(state, standardized_residual(c, beta, link));
  return state;
}

// Shrinks toward the identity, R <- (1 - eps) R + eps I, with the smallest eps
// that lifts lambda_min to `floor`.
inline Matrix regularize_correlation(const Matrix& r, double floor = kCorrelationFloor) {
  Matrix sym = 0.5 * (r + r.transpose());
  const double lambda_min = linalg::sym_eigen_extremes(sym).lambda_min;
  if (lambda_min >= floor) return sym;
  const double eps = (floor - lambda_min) / (1.0 - lambda_min);
  sym *= (1.0 - eps);
  sym.diagonal().array() += eps;
  return sym;
}

// Full m_max x m_max working template; `state` is only consulted for the
// pseudo-likelihood kind (count 0 or missing falls back to the identity).
inline Matrix working_template(const WorkingCorrelationSpec& spec, const PseudoLikelihoodState* state) {
  if (spec.kind() != CorrelationKind::pseudo_likelihood) return spec.structured_template();
  if (state == nullptr || state->count == 0) return Matrix::Identity(spec.template_dim(), spec.template_dim());
  return regularize_correlation(state->average(spec.prior_weight()));
}

inline Matrix working_corr(const WorkingCorrelationSpec& spec, const PseudoLikelihoodState* state, Eigen::Index target_size) {
  if (target_size < 1 || target_size > spec.template_dim()) {
    throw InvalidArgument("target size " + std::to_string(target_size) + " outside 1..template_dim");
  }
  return working_template(spec, state).topLeftCorner(target_size, target_size);
}

// The conditional covariance together with the implied correlation
// A^{-1/2} Sigma A^{-1/2} and its eigen extremes.
struct TrueCorrelation {
  Matrix sigma;
  Matrix rbar;
  linalg::EigenExtremes extremes;
};

inline TrueCorrelation true_correlation(const Matrix& sigma, const Vector& variance_diag) {
  const Matrix sym = linalg::symmetrized(sigma);
  if (variance_diag.size() != sym.rows()) throw InvalidInput("variance vector length does not match sigma");
  if (!(variance_diag.array() > 0.0).all()) throw InvalidVariance("variance diagonal must be positive");
  for (Eigen::Index j = 0; j < sym.rows(); ++j) {
    if (std::abs(sym(j, j) - variance_diag(j)) > 1e-8 * variance_diag(j)) {
      throw InconsistentMoments("sigma diagonal entry " + std::to_string(j) + " does not match the model variance");
    }
  }
  const Vector inv_sd = variance_diag.cwiseSqrt().cwiseInverse();
  TrueCorrelation out;
  out.sigma = sym;
  out.rbar = inv_sd.asDiagonal() * sym * inv_sd.asDiagonal();
  out.extremes = linalg::sym_eigen_extremes(out.rbar);
  return out;
}

// Source of the true conditional correlation R-bar_i^(c), available in
// simulation mode. The template is m_max x m_max; cluster i uses its leading
// block. Sigma_i^(c)(beta) = A_i^{1/2} R-bar_i A_i^{1/2}.
struct TruthCorrelation {
  Matrix rbar_template;

  Matrix rbar(Eigen::Index size) const { return rbar_template.topLeftCorner(size, size); }

  Matrix sigma(const ConditionalMoments& mom) const {
    const Vector sd = mom.variance.cwiseSqrt();
    return sd.asDiagonal() * rbar(sd.size()) * sd.asDiagonal();
  }
};

inline double default_fd_step(double value) {
  return std::cbrt(std::numeric_limits<double>::epsilon()) * std::max(1.0, std::abs(value));
}

// dR*_{i-1}(beta)/d beta_l by central differences, where the working matrix is
// built from `history` (clusters 1..i-1). Data-free kinds give zero.
inline Matrix corr_beta_derivative(const WorkingCorrelationSpec& spec, std::span<const Cluster> history, Eigen::Index size,
                                   const Vector& beta, Eigen::Index l, const LinkFunction& link, double step = 0.0) {
  if (l < 0 || l >= beta.size()) throw InvalidArgument("coordinate index out of range");
  if (size < 1 || size > spec.template_dim()) throw InvalidArgument("size outside 1..template_dim");
  if (!spec.beta_dependent()) return Matrix::Zero(size, size);
  const double h = step > 0.0 ? step : default_fd_step(beta(l));
  Vector up = beta;
  Vector down = beta;
  up(l) += h;
  down(l) -= h;
  const auto state_up = pseudo_likelihood_state(history, spec.template_dim(), up, link);
  const auto state_down = pseudo_likelihood_state(history, spec.template_dim(), down, link);
  const Matrix d = (working_corr(spec, &state_up, size) - working_corr(spec, &state_down, size)) / (up(l) - down(l));
  return 0.5 * (d + d.transpose());
}

}  // namespace gee
