#pragma once

// Marginal model layer: link functions, clusters, datasets and the
// conditional moments mu(x^T beta), Var = mu'(x^T beta).

#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "gee/error.hpp"
#include "gee/linalg.hpp"

namespace gee {

enum class LinkKind { identity, log, probit };

inline std::string to_string(LinkKind kind) {
  switch (kind) {
    case LinkKind::identity: return "identity";
    case LinkKind::log: return "log";
    case LinkKind::probit: return "probit";
  }
  return "unknown";
}

inline std::optional<LinkKind> parse_link(std::string_view name) {
  if (name == "identity") return LinkKind::identity;
  if (name == "log") return LinkKind::log;
  if (name == "probit") return LinkKind::probit;
  return std::nullopt;
}

namespace detail {
inline constexpr double kInvSqrt2Pi = 0.39894228040143267794;
inline constexpr double kInvSqrt2 = 0.70710678118654752440;
}  // namespace detail

// Standard normal CDF through the complementary error function,
// Phi(u) = erfc(-u / sqrt 2) / 2; erfc is accurate to a few ulp, which keeps
// the absolute error far below 1e-12 over the whole real line.
inline double normal_cdf(double u) { return 0.5 * std::erfc(-u * detail::kInvSqrt2); }

inline double normal_pdf(double u) { return detail::kInvSqrt2Pi * std::exp(-0.5 * u * u); }

struct LinkFunction {
  LinkKind kind = LinkKind::identity;

  // mu and its first three derivatives at u.
  double eval(int order, double u) const {
    if (order < 0 || order > 3) throw InvalidArgument("link derivative order must be in 0..3, got " + std::to_string(order));
    switch (kind) {
      case LinkKind::identity:
        return order == 0 ? u : (order == 1 ? 1.0 : 0.0);
      case LinkKind::log:
        return std::exp(u);
      case LinkKind::probit: {
        if (order == 0) return normal_cdf(u);
        const double phi = normal_pdf(u);
        if (order == 1) return phi;
        if (order == 2) return -u * phi;
        return (u * u - 1.0) * phi;
      }
    }
    return 0.0;
  }

  double mean(double u) const { return eval(0, u); }
  double derivative(double u) const { return eval(1, u); }
};

inline double link_eval(const LinkFunction& link, int order, double u) { return link.eval(order, u); }

// One cluster (y_i, X_i). Rows of `x` are the regressor vectors x_ij.
struct Cluster {
  std::size_t index = 0;  // 1-based filtration position
  Vector y;
  Matrix x;

  Eigen::Index size() const { return y.size(); }
};

// Optional axis-aligned box describing the parameter region; absent means R^p.
struct Box {
  Vector lower;
  Vector upper;

  bool contains(const Vector& beta) const {
    return (beta.array() >= lower.array()).all() && (beta.array() <= upper.array()).all();
  }
  Vector project(const Vector& beta) const { return beta.cwiseMax(lower).cwiseMin(upper); }
};

struct Parameter {
  Vector beta;
  std::optional<Box> bounds;

  bool valid() const { return beta.allFinite() && (!bounds || bounds->contains(beta)); }
};

// Ordered clusters; the order is the filtration order.
struct Dataset {
  std::vector<Cluster> clusters;
  Eigen::Index p = 0;
  Eigen::Index m_max = 0;

  std::size_t n() const { return clusters.size(); }

  // Checks the structural invariants, throwing InvalidInput on the first violation.
  void validate() const {
    if (p <= 0) throw InvalidInput("dataset parameter dimension p must be positive");
    if (m_max <= 0) throw InvalidInput("dataset m_max must be positive");
    for (std::size_t i = 0; i < clusters.size(); ++i) {
      const Cluster& c = clusters[i];
      if (c.index != i + 1) throw InvalidInput("non-consecutive cluster index " + std::to_string(c.index));
      if (c.size() < 1 || c.size() > m_max) {
        throw InvalidInput("cluster " + std::to_string(c.index) + " has size " + std::to_string(c.size()) +
                           " outside 1..m_max=" + std::to_string(m_max));
      }
      if (c.x.rows() != c.size() || c.x.cols() != p) {
        throw InvalidInput("cluster " + std::to_string(c.index) + " regressor matrix has wrong shape");
      }
      if (!c.y.allFinite() || !c.x.allFinite()) {
        throw InvalidInput("cluster " + std::to_string(c.index) + " has non-finite entries");
      }
    }
  }

  // The first `count` clusters (the history up to F_count).
  Dataset prefix(std::size_t count) const {
    Dataset out;
    out.p = p;
    out.m_max = m_max;
    out.clusters.assign(clusters.begin(), clusters.begin() + static_cast<std::ptrdiff_t>(std::min(count, n())));
    return out;
  }
};

struct ConditionalMoments {
  Vector mean;
  Vector variance;  // diagonal of A_i(beta)
};

inline ConditionalMoments conditional_moments(const Matrix& x, const Vector& beta, const LinkFunction& link) {
  if (x.cols() != beta.size()) throw InvalidInput("regressor width does not match parameter dimension");
  const Vector eta = x * beta;
  ConditionalMoments out;
  out.mean.resize(eta.size());
  out.variance.resize(eta.size());
  for (Eigen::Index j = 0; j < eta.size(); ++j) {
    out.mean(j) = link.mean(eta(j));
    out.variance(j) = link.derivative(eta(j));
    if (!(out.variance(j) > 0.0) || !std::isfinite(out.variance(j))) {
      throw InvalidVariance("non-positive conditional variance mu'(" + std::to_string(eta(j)) + ")");
    }
  }
  return out;
}

inline ConditionalMoments conditional_moments(const Cluster& cluster, const Vector& beta, const LinkFunction& link) {
  return conditional_moments(cluster.x, beta, link);
}

}  // namespace gee
