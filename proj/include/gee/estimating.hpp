#pragma once

// Estimating functions q_n(beta) = sum_i C_i(beta) (y_i - mu_i(beta)) and the
// matrices used to compare them against the quasi-score.
//
//   gee_star     C_i = X_i^T A_i^{1/2} R*_{i-1}^{-1} A_i^{-1/2}
//   quasi_score  same with the true correlation R-bar_i in place of R*
//   independence C_i = X_i^T
//   general      C_i supplied by a callback that only sees the history

#include <functional>
#include <optional>
#include <span>
#include <variant>
#include <vector>

#include "gee/correlation.hpp"
#include "gee/error.hpp"
#include "gee/linalg.hpp"
#include "gee/model.hpp"
#include "gee/random.hpp"

namespace gee {

struct Independence {};

struct GeeStar {
  WorkingCorrelationSpec spec;
};

struct QuasiScore {
  TruthCorrelation truth;
};

// Receives clusters 1..i-1 and X_i only; must return a p x m_i matrix.
using CoefficientCallback =
    std::function<Matrix(std::span<const Cluster> history, const Matrix& x_current, const Vector& beta)>;

struct General {
  CoefficientCallback coefficients;
};

using EstimatingFunction = std::variant<Independence, GeeStar, QuasiScore, General>;

inline std::string estimating_function_name(const EstimatingFunction& kind) {
  struct {
    std::string operator()(const Independence&) const { return "independence"; }
    std::string operator()(const GeeStar& g) const { return "gee_star:" + g.spec.name(); }
    std::string operator()(const QuasiScore&) const { return "quasi_score"; }
    std::string operator()(const General&) const { return "general"; }
  } visitor;
  return std::visit(visitor, kind);
}

// Working templates R*_0, ..., R*_{n-1} evaluated once at a fixed beta and then
// held constant, so they no longer depend on the beta being evaluated.
class FrozenCorrelation {
 public:
  static FrozenCorrelation build(const WorkingCorrelationSpec& spec, const Dataset& data, const Vector& beta,
                                 const LinkFunction& link) {
    FrozenCorrelation out;
    out.at_beta_ = beta;
    if (!spec.beta_dependent()) {
      out.templates_.push_back(spec.structured_template());
      out.constant_ = true;
      return out;
    }
    PseudoLikelihoodState state(spec.template_dim());
    out.templates_.reserve(data.n());
    for (const Cluster& c : data.clusters) {
      out.templates_.push_back(working_template(spec, &state));
      accumulate(state, standardized_residual(c, beta, link));
    }
    return out;
  }

  // Template applied to cluster i (1-based), i.e. R*_{i-1}.
  const Matrix& before(std::size_t i) const {
    if (constant_) return templates_.front();
    if (i < 1 || i > templates_.size()) throw InvalidArgument("frozen correlation has no entry for cluster " + std::to_string(i));
    return templates_[i - 1];
  }

  const Vector& evaluated_at() const { return at_beta_; }

 private:
  std::vector<Matrix> templates_;
  Vector at_beta_;
  bool constant_ = false;
};

namespace detail {

// Walks the clusters in filtration order and hands every callback the working
// matrix applied to that cluster (empty matrix = identity).
template <class F>
void for_each_working(const EstimatingFunction& kind, const Dataset& data, const Vector& beta, const LinkFunction& link,
                      const FrozenCorrelation* frozen, F&& f) {
  if (std::holds_alternative<General>(kind)) throw InvalidArgument("general estimating functions have no working matrix");
  const GeeStar* star = std::get_if<GeeStar>(&kind);
  const QuasiScore* quasi = std::get_if<QuasiScore>(&kind);
  const bool live = star && star->spec.beta_dependent() && frozen == nullptr;
  const bool identity = std::holds_alternative<Independence>(kind) ||
                        (star && star->spec.kind() == CorrelationKind::identity && frozen == nullptr);
  std::optional<PseudoLikelihoodState> state;
  if (live) state.emplace(star->spec.template_dim());
  Matrix structured;
  if (star && !live && frozen == nullptr) structured = star->spec.structured_template();

  Matrix empty;
  for (const Cluster& c : data.clusters) {
    const ConditionalMoments mom = conditional_moments(c, beta, link);
    const Eigen::Index m = c.size();
    if (identity) {
      f(c, mom, empty);
    } else {
      Matrix r;
      if (quasi) {
        r = quasi->truth.rbar(m);
      } else if (frozen) {
        r = frozen->before(c.index).topLeftCorner(m, m);
      } else if (live) {
        r = working_corr(star->spec, &*state, m);
      } else {
        r = structured.topLeftCorner(m, m);
      }
      f(c, mom, r);
    }
    if (live) accumulate(*state, (c.y - mom.mean).cwiseQuotient(mom.variance.cwiseSqrt()));
  }
}

// A^{1/2} R^{-1} A^{-1/2} v with an empty R meaning the identity.
inline Vector weighted(const Matrix& r, const Vector& sd, const Vector& v) {
  if (r.size() == 0) return v;
  return sd.cwiseProduct(linalg::spd_solve(r, Vector(v.cwiseQuotient(sd))));
}

}  // namespace detail

// Coefficient matrix C_i(beta) (p x m_i) for every cluster.
inline std::vector<Matrix> coefficient_matrices(const EstimatingFunction& kind, const Dataset& data, const Vector& beta,
                                                const LinkFunction& link, const FrozenCorrelation* frozen = nullptr) {
  std::vector<Matrix> out;
  out.reserve(data.n());
  if (const General* general = std::get_if<General>(&kind)) {
    const std::span<const Cluster> all(data.clusters);
    for (std::size_t i = 0; i < data.n(); ++i) {
      Matrix c = general->coefficients(all.first(i), data.clusters[i].x, beta);
      if (c.rows() != data.p || c.cols() != data.clusters[i].size()) throw InvalidInput("coefficient callback returned wrong shape");
      out.push_back(std::move(c));
    }
    return out;
  }
  detail::for_each_working(kind, data, beta, link, frozen, [&](const Cluster& c, const ConditionalMoments& mom, const Matrix& r) {
    if (r.size() == 0) {
      out.push_back(c.x.transpose());
      return;
    }
    const Vector sd = mom.variance.cwiseSqrt();
    const Matrix inner = linalg::spd_solve(r, Matrix(sd.cwiseInverse().asDiagonal()));
    out.push_back(c.x.transpose() * sd.asDiagonal() * inner);
  });
  return out;
}

// Per-cluster summands C_i(beta)(y_i - mu_i(beta)) in filtration order.
inline std::vector<Vector> cluster_contributions(const EstimatingFunction& kind, const Dataset& data, const Vector& beta,
                                                 const LinkFunction& link, const FrozenCorrelation* frozen = nullptr) {
  if (beta.size() != data.p) throw InvalidInput("parameter dimension does not match dataset");
  std::vector<Vector> out;
  out.reserve(data.n());
  if (std::holds_alternative<General>(kind)) {
    const auto coeffs = coefficient_matrices(kind, data, beta, link, frozen);
    for (std::size_t i = 0; i < data.n(); ++i) {
      const ConditionalMoments mom = conditional_moments(data.clusters[i], beta, link);
      out.push_back(coeffs[i] * (data.clusters[i].y - mom.mean));
    }
    return out;
  }
  detail::for_each_working(kind, data, beta, link, frozen, [&](const Cluster& c, const ConditionalMoments& mom, const Matrix& r) {
    try {
      out.push_back(c.x.transpose() * detail::weighted(r, mom.variance.cwiseSqrt(), c.y - mom.mean));
    } catch (const NotPositiveDefinite& e) {
      throw NotPositiveDefinite(e.lambda_min(), "in working correlation for cluster " + std::to_string(c.index));
    }
  });
  return out;
}

inline Vector eval_g(const EstimatingFunction& kind, const Dataset& data, const Vector& beta, const LinkFunction& link,
                     const FrozenCorrelation* frozen = nullptr) {
  Vector g = Vector::Zero(data.p);
  for (const Vector& u : cluster_contributions(kind, data, beta, link, frozen)) g += u;
  return g;
}

// ---------------------------------------------------------------------------
// Perturbed regressors

// delta_i (p x m_i) for every cluster; the perturbed regressor rows are
// x_ij + delta_i.col(j).
struct Perturbation {
  std::vector<Matrix> deltas;
  double bound = 0.0;
  std::vector<bool> a2_verified;

  Matrix perturbed_x(const Cluster& c) const { return c.x + deltas.at(c.index - 1).transpose(); }
};

inline Perturbation zero_perturbation(const Dataset& data) {
  Perturbation p;
  for (const Cluster& c : data.clusters) p.deltas.push_back(Matrix::Zero(data.p, c.size()));
  p.a2_verified.assign(data.n(), true);
  return p;
}

namespace detail {

// Both the unperturbed and perturbed pseudo-likelihood histories, advanced in lockstep.
struct PerturbedWalker {
  const WorkingCorrelationSpec& spec;
  std::optional<PseudoLikelihoodState> plain;
  std::optional<PseudoLikelihoodState> shifted;
  Matrix structured;

  explicit PerturbedWalker(const WorkingCorrelationSpec& s) : spec(s) {
    if (spec.beta_dependent()) {
      plain.emplace(spec.template_dim());
      shifted.emplace(spec.template_dim());
    } else {
      structured = spec.structured_template();
    }
  }

  Matrix plain_corr(Eigen::Index m) const {
    return plain ? working_corr(spec, &*plain, m) : Matrix(structured.topLeftCorner(m, m));
  }
  Matrix shifted_corr(Eigen::Index m) const {
    return shifted ? working_corr(spec, &*shifted, m) : Matrix(structured.topLeftCorner(m, m));
  }

  void advance(const Cluster& c, const Matrix& x_shifted, const Vector& beta, const LinkFunction& link) {
    if (!plain) return;
    const ConditionalMoments a = conditional_moments(c.x, beta, link);
    const ConditionalMoments b = conditional_moments(x_shifted, beta, link);
    accumulate(*plain, (c.y - a.mean).cwiseQuotient(a.variance.cwiseSqrt()));
    accumulate(*shifted, (c.y - b.mean).cwiseQuotient(b.variance.cwiseSqrt()));
  }
};

}  // namespace detail

// Builds delta_i with ||delta_i|| <= 2^-i: uniform(-1, 1) entries rescaled to
// spectral norm 2^-i, then halved (at most 40 times) until
//   ||R*_{i-1}(beta, delta)^{-1} - R*_{i-1}(beta)^{-1}|| <= 2^-i  and
//   ||Y_i(beta, delta_i) - Y_i(beta)|| <= 2^-i.
// a2_verified[i] records whether both inequalities hold for the final delta_i.
inline Perturbation a2_schedule(const Dataset& data, const Vector& beta, const LinkFunction& link,
                                const WorkingCorrelationSpec& spec, std::uint64_t seed) {
  constexpr std::uint32_t kPerturbationStream = 7;
  Perturbation out;
  out.bound = 0.5;
  detail::PerturbedWalker walker(spec);
  for (const Cluster& c : data.clusters) {
    const Eigen::Index m = c.size();
    const double limit = std::ldexp(1.0, -static_cast<int>(std::min<std::size_t>(c.index, 2000)));
    random::Stream stream(seed, c.index, kPerturbationStream);
    Matrix delta(data.p, m);
    for (Eigen::Index a = 0; a < delta.rows(); ++a)
      for (Eigen::Index b = 0; b < delta.cols(); ++b) delta(a, b) = stream.uniform(-1.0, 1.0);
    const double norm = linalg::spectral_norm(delta);
    delta = norm > 0.0 ? Matrix(delta * (limit / norm)) : Matrix::Zero(data.p, m);

    const ConditionalMoments mom = conditional_moments(c.x, beta, link);
    const Matrix y_plain = mom.variance.cwiseSqrt().asDiagonal() * c.x;
    const Matrix inv_plain = linalg::spd_inverse(walker.plain_corr(m));
    const Matrix inv_shifted = linalg::spd_inverse(walker.shifted_corr(m));
    const bool corr_ok = linalg::spectral_norm(inv_shifted - inv_plain) <= limit;

    bool ok = false;
    for (int halving = 0; halving <= 40; ++halving) {
      const Matrix xs = c.x + delta.transpose();
      const ConditionalMoments ms = conditional_moments(xs, beta, link);
      const Matrix y_shifted = ms.variance.cwiseSqrt().asDiagonal() * xs;
      ok = corr_ok && linalg::spectral_norm(y_shifted - y_plain) <= limit;
      if (ok || halving == 40) break;
      delta *= 0.5;
    }
    out.a2_verified.push_back(ok);
    walker.advance(c, c.x + delta.transpose(), beta, link);
    out.deltas.push_back(std::move(delta));
  }
  return out;
}

// g*_n(beta, delta): Y_i and R* are built from perturbed regressors while the
// residuals keep the unperturbed means mu_i(beta).
inline Vector eval_g_perturbed(const Dataset& data, const Vector& beta, const Perturbation& perturbation,
                               const LinkFunction& link, const WorkingCorrelationSpec& spec,
                               const FrozenCorrelation* frozen = nullptr) {
  if (perturbation.deltas.size() < data.n()) throw InvalidInput("perturbation schedule shorter than dataset");
  Vector g = Vector::Zero(data.p);
  detail::PerturbedWalker walker(spec);
  for (const Cluster& c : data.clusters) {
    const Eigen::Index m = c.size();
    const Matrix xs = perturbation.perturbed_x(c);
    const ConditionalMoments plain = conditional_moments(c.x, beta, link);
    const ConditionalMoments shifted = conditional_moments(xs, beta, link);
    const Vector sd = shifted.variance.cwiseSqrt();
    Matrix r;
    if (frozen) {
      r = frozen->before(c.index).topLeftCorner(m, m);
    } else if (spec.kind() != CorrelationKind::identity) {
      r = walker.shifted_corr(m);
    }
    const Vector u = xs.transpose() * detail::weighted(r, sd, c.y - plain.mean);
    g += u;
    walker.advance(c, xs, beta, link);
  }
  return g;
}

// ---------------------------------------------------------------------------
// Jacobian D_n(beta) = -dq_n/dbeta^T

enum class JacobianMethod { automatic, analytic, finite_difference };

inline bool analytic_jacobian_available(const EstimatingFunction& kind, const LinkFunction& link,
                                        const FrozenCorrelation* frozen) {
  if (link.kind == LinkKind::probit) return false;
  if (std::holds_alternative<General>(kind)) return false;
  if (const GeeStar* star = std::get_if<GeeStar>(&kind)) return frozen != nullptr || !star->spec.beta_dependent();
  return true;
}

inline Matrix jacobian_fd(const EstimatingFunction& kind, const Dataset& data, const Vector& beta,
                          const LinkFunction& link, const FrozenCorrelation* frozen = nullptr) {
  Matrix d(data.p, data.p);
  for (Eigen::Index l = 0; l < data.p; ++l) {
    Vector up = beta;
    Vector down = beta;
    const double h = default_fd_step(beta(l));
    up(l) += h;
    down(l) -= h;
    d.col(l) = -(eval_g(kind, data, up, link, frozen) - eval_g(kind, data, down, link, frozen)) / (up(l) - down(l));
  }
  return d;
}

// Exact derivative for working matrices that do not move with beta.
inline Matrix jacobian_analytic(const EstimatingFunction& kind, const Dataset& data, const Vector& beta,
                                const LinkFunction& link, const FrozenCorrelation* frozen = nullptr) {
  Matrix d = Matrix::Zero(data.p, data.p);
  detail::for_each_working(kind, data, beta, link, frozen, [&](const Cluster& c, const ConditionalMoments& mom, const Matrix& r) {
    const Vector eta = c.x * beta;
    const Eigen::Index m = c.size();
    Vector sd = mom.variance.cwiseSqrt();
    Vector d_sd(m);
    Vector d_inv_sd(m);
    for (Eigen::Index j = 0; j < m; ++j) {
      const double second = link.eval(2, eta(j));
      d_sd(j) = 0.5 * second / sd(j);
      d_inv_sd(j) = -0.5 * second / (sd(j) * mom.variance(j));
    }
    const Vector resid = c.y - mom.mean;
    const Matrix w = r.size() == 0 ? Matrix::Identity(m, m) : linalg::spd_inverse(r);
    const Vector u = w * resid.cwiseQuotient(sd);
    for (Eigen::Index l = 0; l < data.p; ++l) {
      const Vector xl = c.x.col(l);
      const Vector t1 = d_sd.cwiseProduct(xl).cwiseProduct(u);
      const Vector t2 = sd.cwiseProduct(w * d_inv_sd.cwiseProduct(xl).cwiseProduct(resid));
      const Vector t3 = sd.cwiseProduct(w * sd.cwiseProduct(xl));
      d.col(l).noalias() -= c.x.transpose() * (t1 + t2 - t3);
    }
  });
  return d;
}

inline Matrix jacobian(const EstimatingFunction& kind, const Dataset& data, const Vector& beta, const LinkFunction& link,
                       const FrozenCorrelation* frozen = nullptr, JacobianMethod method = JacobianMethod::automatic) {
  const bool analytic_ok = analytic_jacobian_available(kind, link, frozen);
  if (method == JacobianMethod::analytic && !analytic_ok) {
    throw UnsupportedMethod("analytic Jacobian requires identity or log link with a beta-independent working correlation");
  }
  if (method == JacobianMethod::analytic || (method == JacobianMethod::automatic && analytic_ok)) {
    return jacobian_analytic(kind, data, beta, link, frozen);
  }
  return jacobian_fd(kind, data, beta, link, frozen);
}

// ---------------------------------------------------------------------------
// Optimality matrices

// Per-cluster summands, Y_i = A_i^{1/2} X_i:
//   h_ind  = Y^T Y                    (X^T A X)
//   k_star = Y^T R*^{-1} Y            (K*_i)
//   l_bar  = Y^T R-bar^{-1} Y         (L-bar_i)
//   m_star = Y^T R*^{-1} R-bar R*^{-1} Y
struct OptimalityTerms {
  Matrix h_ind;
  Matrix k_star;
  Matrix l_bar;
  Matrix m_star;
};

struct OptimalitySums {
  Matrix h_ind;
  Matrix h_star;
  Matrix m_bar;
  Matrix m_star;

  static OptimalitySums zero(Eigen::Index p) {
    return {Matrix::Zero(p, p), Matrix::Zero(p, p), Matrix::Zero(p, p), Matrix::Zero(p, p)};
  }
  OptimalitySums& operator+=(const OptimalityTerms& t) {
    h_ind += t.h_ind;
    h_star += t.k_star;
    m_bar += t.l_bar;
    m_star += t.m_star;
    return *this;
  }
  OptimalitySums& operator+=(const OptimalitySums& s) {
    h_ind += s.h_ind;
    h_star += s.h_star;
    m_bar += s.m_bar;
    m_star += s.m_star;
    return *this;
  }
  OptimalitySums& operator*=(double f) {
    h_ind *= f;
    h_star *= f;
    m_bar *= f;
    m_star *= f;
    return *this;
  }
};

// One sample path. `perturbed` is filled when a perturbation was supplied.
struct PathOptimality {
  Eigen::Index p = 0;
  std::vector<OptimalityTerms> terms;
  std::vector<OptimalityTerms> perturbed;

  // Sums over clusters first..last (1-based, inclusive).
  static OptimalitySums sum_range(const std::vector<OptimalityTerms>& t, Eigen::Index p, std::size_t first, std::size_t last) {
    if (first < 1 || last > t.size() || first > last + 1) throw InvalidArgument("invalid cluster range");
    OptimalitySums s = OptimalitySums::zero(p);
    for (std::size_t i = first; i <= last; ++i) s += t[i - 1];
    return s;
  }
  OptimalitySums cumulative(std::size_t n) const { return sum_range(terms, p, 1, n); }
  // H*_{n0,n} = H*_n - H*_{n0-1}, and likewise for the other sums.
  OptimalitySums partial(std::size_t n0, std::size_t n) const { return sum_range(terms, p, n0, n); }
  OptimalitySums cumulative_perturbed(std::size_t n) const { return sum_range(perturbed, p, 1, n); }
};

namespace detail {

inline OptimalityTerms optimality_terms(const Matrix& y, const Matrix& r_star, const Matrix& r_bar) {
  OptimalityTerms t;
  const Matrix w_y = linalg::spd_solve(r_star, y);
  t.h_ind = y.transpose() * y;
  t.k_star = y.transpose() * w_y;
  t.l_bar = y.transpose() * linalg::spd_solve(r_bar, y);
  t.m_star = w_y.transpose() * r_bar * w_y;
  t.h_ind = (0.5 * (t.h_ind + t.h_ind.transpose())).eval();
  t.k_star = (0.5 * (t.k_star + t.k_star.transpose())).eval();
  t.l_bar = (0.5 * (t.l_bar + t.l_bar.transpose())).eval();
  t.m_star = (0.5 * (t.m_star + t.m_star.transpose())).eval();
  return t;
}

}  // namespace detail

inline PathOptimality optimality_path(const Dataset& data, const Vector& beta, const LinkFunction& link,
                                      const WorkingCorrelationSpec& spec, const TruthCorrelation& truth,
                                      const Perturbation* perturbation = nullptr) {
  PathOptimality out;
  out.p = data.p;
  out.terms.reserve(data.n());
  detail::PerturbedWalker walker(spec);
  for (const Cluster& c : data.clusters) {
    const Eigen::Index m = c.size();
    const Matrix r_bar = truth.rbar(m);
    const ConditionalMoments mom = conditional_moments(c.x, beta, link);
    out.terms.push_back(detail::optimality_terms(mom.variance.cwiseSqrt().asDiagonal() * c.x, walker.plain_corr(m), r_bar));
    Matrix xs = c.x;
    if (perturbation) {
      xs = perturbation->perturbed_x(c);
      const ConditionalMoments ms = conditional_moments(xs, beta, link);
      out.perturbed.push_back(
          detail::optimality_terms(ms.variance.cwiseSqrt().asDiagonal() * xs, walker.shifted_corr(m), r_bar));
    }
    walker.advance(c, xs, beta, link);
  }
  return out;
}

// Ensemble means of the cumulative sums at n (all clusters when n == 0); the
// per-path sums are kept for single-replication diagnostics.
struct OptimalityMatrices {
  OptimalitySums mean;
  std::vector<OptimalitySums> per_path;
};

inline OptimalityMatrices optimality_matrices(std::span<const Dataset> ensemble, const Vector& beta, const LinkFunction& link,
                                              const WorkingCorrelationSpec& spec, const TruthCorrelation& truth,
                                              std::size_t n = 0) {
  if (ensemble.empty()) throw InvalidArgument("optimality_matrices: empty ensemble");
  OptimalityMatrices out;
  out.mean = OptimalitySums::zero(ensemble.front().p);
  for (const Dataset& d : ensemble) {
    const PathOptimality path = optimality_path(d, beta, link, spec, truth);
    out.per_path.push_back(path.cumulative(n == 0 ? d.n() : n));
    out.mean += out.per_path.back();
  }
  out.mean *= 1.0 / static_cast<double>(ensemble.size());
  return out;
}

// ---------------------------------------------------------------------------
// Conditional variance V_n = sum_i C_i Sigma_i C_i^T

struct ConditionalVariance {
  Matrix v_n;
  std::vector<Matrix> increments;
  bool plug_in = false;  // Sigma_i replaced by A_i because no truth was supplied
};

inline ConditionalVariance conditional_variance(const EstimatingFunction& kind, const Dataset& data, const Vector& beta,
                                                const LinkFunction& link, const TruthCorrelation* truth,
                                                const FrozenCorrelation* frozen = nullptr) {
  ConditionalVariance out;
  out.plug_in = truth == nullptr;
  out.v_n = Matrix::Zero(data.p, data.p);
  const auto coeffs = coefficient_matrices(kind, data, beta, link, frozen);
  for (std::size_t i = 0; i < data.n(); ++i) {
    const ConditionalMoments mom = conditional_moments(data.clusters[i], beta, link);
    const Matrix sigma = truth ? truth->sigma(mom) : Matrix(mom.variance.asDiagonal());
    Matrix inc = coeffs[i] * sigma * coeffs[i].transpose();
    inc = (0.5 * (inc + inc.transpose())).eval();
    out.v_n += inc;
    out.increments.push_back(std::move(inc));
  }
  return out;
}

// (q_n, V_n) after every cluster, for the martingale strong-law monitor.
struct MartingaleTrace {
  std::vector<Vector> q;
  std::vector<Matrix> v;
};

inline MartingaleTrace martingale_trace(const EstimatingFunction& kind, const Dataset& data, const Vector& beta,
                                        const LinkFunction& link, const TruthCorrelation* truth,
                                        const FrozenCorrelation* frozen = nullptr) {
  MartingaleTrace out;
  const auto coeffs = coefficient_matrices(kind, data, beta, link, frozen);
  Vector q = Vector::Zero(data.p);
  Matrix v = Matrix::Zero(data.p, data.p);
  for (std::size_t i = 0; i < data.n(); ++i) {
    const Cluster& c = data.clusters[i];
    const ConditionalMoments mom = conditional_moments(c, beta, link);
    const Matrix sigma = truth ? truth->sigma(mom) : Matrix(mom.variance.asDiagonal());
    q += coeffs[i] * (c.y - mom.mean);
    const Matrix inc = coeffs[i] * sigma * coeffs[i].transpose();
    v += 0.5 * (inc + inc.transpose());
    out.q.push_back(q);
    out.v.push_back(v);
  }
  return out;
}

// det(numerator) / det(denominator) from LU factorizations.
inline double det_ratio(const Matrix& numerator, const Matrix& denominator) {
  if (numerator.rows() != denominator.rows() || numerator.cols() != denominator.cols()) {
    throw InvalidInput("det_ratio: shape mismatch");
  }
  const auto den = linalg::log_determinant(denominator);
  if (den.sign == 0 || den.log_abs < std::log(1e-300)) throw SingularMatrix("det_ratio: denominator is numerically singular");
  const auto num = linalg::log_determinant(numerator);
  if (num.sign == 0) return 0.0;
  return num.sign * den.sign * std::exp(num.log_abs - den.log_abs);
}

// ---------------------------------------------------------------------------
// Finite-sample surrogates for the integrability conditions of the class H_n:
// ensemble means of |c^{jk}|, |dc^{jk}/dbeta_l (y_j - mu_j)| and
// |c^{jk} c^{rl} v^{kr}|, each maximised over its index set.

struct IntegrabilityMoments {
  double coefficient = 0.0;
  double derivative_residual = 0.0;
  double cross_variance = 0.0;
};

inline IntegrabilityMoments integrability_moments(std::span<const Dataset> ensemble, const EstimatingFunction& kind,
                                                  const Vector& beta, const LinkFunction& link, const TruthCorrelation& truth) {
  if (ensemble.empty()) throw InvalidArgument("integrability_moments: empty ensemble");
  const Eigen::Index p = ensemble.front().p;
  const Eigen::Index m = ensemble.front().m_max;
  Matrix sum_c = Matrix::Zero(p, m);
  Matrix count_c = Matrix::Zero(p, m);
  std::vector<Matrix> sum_d(static_cast<std::size_t>(p), Matrix::Zero(p, m));
  Matrix sum_cross = Matrix::Zero(p * m, p * m);
  Matrix count_cross = Matrix::Zero(p * m, p * m);
  for (const Dataset& d : ensemble) {
    const auto coeffs = coefficient_matrices(kind, d, beta, link);
    std::vector<std::vector<Matrix>> shifted(static_cast<std::size_t>(p));
    std::vector<double> steps(static_cast<std::size_t>(p));
    for (Eigen::Index l = 0; l < p; ++l) {
      Vector up = beta;
      Vector down = beta;
      steps[static_cast<std::size_t>(l)] = default_fd_step(beta(l));
      up(l) += steps[static_cast<std::size_t>(l)];
      down(l) -= steps[static_cast<std::size_t>(l)];
      const auto cu = coefficient_matrices(kind, d, up, link);
      const auto cd = coefficient_matrices(kind, d, down, link);
      for (std::size_t i = 0; i < d.n(); ++i) shifted[static_cast<std::size_t>(l)].push_back((cu[i] - cd[i]) / (up(l) - down(l)));
    }
    for (std::size_t i = 0; i < d.n(); ++i) {
      const Cluster& c = d.clusters[i];
      const Eigen::Index mi = c.size();
      const ConditionalMoments mom = conditional_moments(c, beta, link);
      const Vector resid = c.y - mom.mean;
      const Matrix sigma = truth.sigma(mom);
      sum_c.leftCols(mi) += coeffs[i].cwiseAbs();
      count_c.leftCols(mi).array() += 1.0;
      for (Eigen::Index l = 0; l < p; ++l) {
        const Matrix& dc = shifted[static_cast<std::size_t>(l)][i];
        sum_d[static_cast<std::size_t>(l)].leftCols(mi) += (dc * resid.asDiagonal()).cwiseAbs();
      }
      for (Eigen::Index j = 0; j < p; ++j)
        for (Eigen::Index k = 0; k < mi; ++k)
          for (Eigen::Index l = 0; l < p; ++l)
            for (Eigen::Index r = 0; r < mi; ++r) {
              sum_cross(j * m + k, l * m + r) += std::abs(coeffs[i](j, k) * coeffs[i](l, r) * sigma(k, r));
              count_cross(j * m + k, l * m + r) += 1.0;
            }
    }
  }
  IntegrabilityMoments out;
  for (Eigen::Index a = 0; a < p; ++a)
    for (Eigen::Index b = 0; b < m; ++b) {
      if (count_c(a, b) == 0.0) continue;
      out.coefficient = std::max(out.coefficient, sum_c(a, b) / count_c(a, b));
      for (Eigen::Index l = 0; l < p; ++l)
        out.derivative_residual = std::max(out.derivative_residual, sum_d[static_cast<std::size_t>(l)](a, b) / count_c(a, b));
    }
  for (Eigen::Index a = 0; a < sum_cross.rows(); ++a)
    for (Eigen::Index b = 0; b < sum_cross.cols(); ++b)
      if (count_cross(a, b) > 0.0) out.cross_variance = std::max(out.cross_variance, sum_cross(a, b) / count_cross(a, b));
  return out;
}

}  // namespace gee
