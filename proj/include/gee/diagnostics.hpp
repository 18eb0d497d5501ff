#pragma once

// Finite-n evaluation of the regularity conditions, the martingale strong-law
// monitor, the (A1) gap, and the optimality / consistency studies.
//
// Suprema over B_r(beta_ref) are taken over a fixed lattice: the center,
// 2p axis points at distance r and 2^p corners at r/sqrt(p) per coordinate.

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "gee/correlation.hpp"
#include "gee/error.hpp"
#include "gee/estimating.hpp"
#include "gee/linalg.hpp"
#include "gee/model.hpp"
#include "gee/parallel.hpp"
#include "gee/simulation.hpp"
#include "gee/solver.hpp"

namespace gee {

inline constexpr double kInf = std::numeric_limits<double>::infinity();
inline constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

inline std::vector<Vector> ball_lattice(const Vector& center, double r) {
  const Eigen::Index p = center.size();
  std::vector<Vector> pts;
  pts.push_back(center);
  for (Eigen::Index k = 0; k < p; ++k) {
    for (double sign : {1.0, -1.0}) {
      Vector b = center;
      b(k) += sign * r;
      pts.push_back(b);
    }
  }
  const double c = r / std::sqrt(static_cast<double>(p));
  for (unsigned long mask = 0; mask < (1ul << p); ++mask) {
    Vector b = center;
    for (Eigen::Index k = 0; k < p; ++k) b(k) += ((mask >> k) & 1ul) ? -c : c;
    pts.push_back(b);
  }
  return pts;
}

inline std::string ball_lattice_description(Eigen::Index p) {
  return "center + " + std::to_string(2 * p) + " axis points at radius r + " + std::to_string(1ul << p) +
         " corners at r/sqrt(p) per coordinate";
}

// R*_0(beta), ..., R*_n(beta): entry i is the m_max template built from clusters 1..i.
inline std::vector<Matrix> working_templates(const WorkingCorrelationSpec& spec, const Dataset& data, const Vector& beta,
                                             const LinkFunction& link) {
  std::vector<Matrix> out;
  out.reserve(data.n() + 1);
  if (!spec.beta_dependent()) {
    out.assign(data.n() + 1, spec.structured_template());
    return out;
  }
  PseudoLikelihoodState state(spec.template_dim());
  out.push_back(working_template(spec, &state));
  for (const Cluster& c : data.clusters) {
    accumulate(state, standardized_residual(c, beta, link));
    out.push_back(working_template(spec, &state));
  }
  return out;
}

// ---------------------------------------------------------------------------
// (A1) gap

// max |R*_{n-1} - R-bar_n| entrywise, both truncated to their common leading block.
inline std::vector<double> a1_gap(const std::vector<Matrix>& rstar_before, const std::vector<Matrix>& rbar) {
  if (rstar_before.size() != rbar.size()) throw InvalidInput("a1_gap: trajectories differ in length");
  std::vector<double> out;
  out.reserve(rbar.size());
  for (std::size_t k = 0; k < rbar.size(); ++k) {
    const Eigen::Index m = std::min(rstar_before[k].rows(), rbar[k].rows());
    out.push_back((rstar_before[k].topLeftCorner(m, m) - rbar[k].topLeftCorner(m, m)).cwiseAbs().maxCoeff());
  }
  return out;
}

// Gap trajectory for n = 1..N at beta.
inline std::vector<double> a1_gap_path(const Dataset& data, const Vector& beta, const LinkFunction& link,
                                       const WorkingCorrelationSpec& spec, const TruthCorrelation& truth) {
  const auto templates = working_templates(spec, data, beta, link);
  std::vector<Matrix> before;
  std::vector<Matrix> bar;
  for (const Cluster& c : data.clusters) {
    before.push_back(templates[c.index - 1].topLeftCorner(c.size(), c.size()));
    bar.push_back(truth.rbar(c.size()));
  }
  return a1_gap(before, bar);
}

// ---------------------------------------------------------------------------
// Strong-law monitor

struct SllnTrajectory {
  std::vector<double> ratio;  // NaN where lambda_max(V_n) = 0
  std::vector<double> v_lambda_min;
  std::vector<double> v_lambda_max;
};

inline SllnTrajectory slln_monitor(const MartingaleTrace& trace, double delta) {
  if (!(delta > 0.0)) throw InvalidArgument("slln_monitor: delta must be positive");
  if (trace.q.size() != trace.v.size()) throw InvalidInput("slln_monitor: q and V trajectories differ in length");
  SllnTrajectory out;
  for (std::size_t k = 0; k < trace.q.size(); ++k) {
    const auto ext = linalg::sym_eigen_extremes(linalg::symmetrized(trace.v[k], 1e-8 * (1.0 + trace.v[k].cwiseAbs().maxCoeff())));
    out.v_lambda_min.push_back(ext.lambda_min);
    out.v_lambda_max.push_back(ext.lambda_max);
    out.ratio.push_back(ext.lambda_max > 0.0 ? trace.q[k].norm() / std::pow(ext.lambda_max, 0.5 + delta) : kNaN);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Condition report

struct ConditionParams {
  double delta = 0.25;
  std::vector<double> r_grid{0.2, 0.1, 0.05};
  std::vector<std::size_t> n_grid;  // empty: every n
  bool derivative_conditions = true;  // (S)(i)/(S)(ii) need finite-difference Jacobians on the lattice

  void validate() const {
    if (!(delta > 0.0 && delta <= 0.5)) throw ConfigError("delta", "must lie in (0, 1/2]");
    if (r_grid.empty()) throw ConfigError("r_grid", "must not be empty");
    for (std::size_t k = 0; k < r_grid.size(); ++k) {
      if (!(r_grid[k] > 0.0)) throw ConfigError("r_grid", "entries must be positive");
      if (k > 0 && !(r_grid[k] < r_grid[k - 1])) throw ConfigError("r_grid", "must be strictly decreasing");
    }
    validate_n_grid_optional();
  }

 private:
  void validate_n_grid_optional() const {
    if (!n_grid.empty()) validate_n_grid(n_grid);
  }
};

struct RadiusTrajectories {
  double r = 0.0;
  std::vector<double> k2, k3, eta, pi, d;
  std::vector<double> c3, c4, c5;  // (C3'), (C4), (C5) finite-n values
  std::vector<double> s_i, s_ii;   // (S)(i) lattice minimum, (S)(ii) lattice maximum (NaN when skipped)
};

struct ConditionReport {
  std::vector<std::size_t> n_grid;
  double delta = 0.25;
  std::string lattice;
  bool has_truth = false;
  std::vector<double> h_min, h_max;          // H'_n
  std::vector<double> rstar_min, rstar_max;  // R*_n(beta_ref)
  std::vector<double> rbar_min, rbar_max;    // R-bar_n (NaN without truth)
  std::vector<double> gamma, a, a_tilde, gamma_h;
  std::vector<double> s_ratio, s_ratio_running_min;
  std::vector<double> a1_gap;
  std::vector<double> slln_ratio, v_min;
  std::vector<double> det_h_mbar, det_mstar_mbar;
  std::vector<RadiusTrajectories> radii;
};

namespace detail {

inline double definite_part(const Matrix& d) {
  // min over unit lambda of |lambda^T D lambda|: zero unless the symmetric part is definite.
  const auto ext = linalg::sym_eigen_extremes(0.5 * (d + d.transpose()));
  if (ext.lambda_min > 0.0) return ext.lambda_min;
  if (ext.lambda_max < 0.0) return -ext.lambda_max;
  return 0.0;
}

// -dq_n/dbeta at every n = 1..N by central differences of the per-cluster summands.
inline std::vector<Matrix> jacobian_path(const EstimatingFunction& kind, const Dataset& data, const Vector& beta,
                                         const LinkFunction& link) {
  const Eigen::Index p = data.p;
  std::vector<Matrix> out(data.n(), Matrix::Zero(p, p));
  for (Eigen::Index l = 0; l < p; ++l) {
    Vector up = beta;
    Vector down = beta;
    const double h = default_fd_step(beta(l));
    up(l) += h;
    down(l) -= h;
    const auto cu = cluster_contributions(kind, data, up, link);
    const auto cd = cluster_contributions(kind, data, down, link);
    Vector acc = Vector::Zero(p);
    for (std::size_t i = 0; i < data.n(); ++i) {
      acc += (cu[i] - cd[i]) / (up(l) - down(l));
      out[i].col(l) = -acc;
    }
  }
  return out;
}

inline std::vector<std::size_t> resolve_grid(const std::vector<std::size_t>& grid, std::size_t n) {
  std::vector<std::size_t> out;
  if (grid.empty()) {
    for (std::size_t k = 1; k <= n; ++k) out.push_back(k);
  } else {
    for (std::size_t k : grid)
      if (k > n) throw ConfigError("n_grid", "entry " + std::to_string(k) + " exceeds dataset size " + std::to_string(n));
    out = grid;
  }
  return out;
}

}  // namespace detail

inline ConditionReport condition_trajectories(const Dataset& data, const Parameter& beta_ref, const LinkFunction& link,
                                              const WorkingCorrelationSpec& spec, const TruthCorrelation* truth,
                                              const ConditionParams& params = {}) {
  params.validate();
  data.validate();
  if (!beta_ref.valid()) throw InvalidInput("reference parameter is not valid");
  const Vector& beta = beta_ref.beta;
  const Eigen::Index p = data.p;
  const std::size_t n_total = data.n();

  ConditionReport rep;
  rep.n_grid = detail::resolve_grid(params.n_grid, n_total);
  rep.delta = params.delta;
  rep.lattice = ball_lattice_description(p);
  rep.has_truth = truth != nullptr;
  const double delta = params.delta;

  // Per-cluster quantities at beta_ref.
  std::vector<Matrix> h_cum(n_total);
  {
    Matrix h = Matrix::Zero(p, p);
    for (std::size_t i = 0; i < n_total; ++i) {
      const Cluster& c = data.clusters[i];
      const ConditionalMoments mom = conditional_moments(c, beta, link);
      h.noalias() += c.x.transpose() * mom.variance.asDiagonal() * c.x;
      h_cum[i] = 0.5 * (h + h.transpose());
    }
  }
  const auto templates = working_templates(spec, data, beta, link);
  const GeeStar star{spec};
  const MartingaleTrace mt = martingale_trace(star, data, beta, link, truth);
  const SllnTrajectory slln = slln_monitor(mt, delta);
  std::optional<PathOptimality> path;
  if (truth) path = optimality_path(data, beta, link, spec, *truth);
  std::vector<double> gaps;
  if (truth) gaps = a1_gap_path(data, beta, link, spec, *truth);

  double running = kInf;
  bool nonsingular_seen = false;
  for (std::size_t n : rep.n_grid) {
    const Matrix& h = h_cum[n - 1];
    const auto he = linalg::sym_eigen_extremes(h);
    rep.h_min.push_back(he.lambda_min);
    rep.h_max.push_back(he.lambda_max);
    const auto re = linalg::sym_eigen_extremes(templates[n]);
    rep.rstar_min.push_back(re.lambda_min);
    rep.rstar_max.push_back(re.lambda_max);
    if (truth) {
      const auto be = linalg::sym_eigen_extremes(truth->rbar(data.clusters[n - 1].size()));
      rep.rbar_min.push_back(be.lambda_min);
      rep.rbar_max.push_back(be.lambda_max);
      rep.a1_gap.push_back(gaps[n - 1]);
      const OptimalitySums s = path->cumulative(n);
      rep.det_h_mbar.push_back(det_ratio(s.h_star, s.m_bar));
      rep.det_mstar_mbar.push_back(det_ratio(s.m_star, s.m_bar));
    } else {
      rep.rbar_min.push_back(kNaN);
      rep.rbar_max.push_back(kNaN);
      rep.a1_gap.push_back(kNaN);
      rep.det_h_mbar.push_back(kNaN);
      rep.det_mstar_mbar.push_back(kNaN);
    }

    double gamma = kInf;
    if (he.lambda_min > linalg::kSpdMinEigenvalue) {
      Eigen::LLT<Matrix> llt(h);
      gamma = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const Cluster& c = data.clusters[i];
        const Matrix sol = llt.solve(c.x.transpose());
        gamma = std::max(gamma, (c.x.transpose().cwiseProduct(sol)).colwise().sum().maxCoeff());
      }
    }
    const double a = he.lambda_max * gamma;
    rep.gamma.push_back(gamma);
    rep.a.push_back(a);
    rep.a_tilde.push_back(std::max(a, a * a));
    rep.gamma_h.push_back(std::sqrt(gamma) * std::pow(he.lambda_max, 1.0 - delta));

    const double ratio = he.lambda_max > 0.0 ? he.lambda_min / std::pow(he.lambda_max, 0.5 + delta) : kNaN;
    rep.s_ratio.push_back(ratio);
    if (he.lambda_min > linalg::kSpdMinEigenvalue) nonsingular_seen = true;
    if (nonsingular_seen) running = std::min(running, ratio);
    rep.s_ratio_running_min.push_back(nonsingular_seen ? running : kNaN);

    rep.slln_ratio.push_back(slln.ratio[n - 1]);
    rep.v_min.push_back(slln.v_lambda_min[n - 1]);
  }

  std::vector<Matrix> d_ref;
  if (params.derivative_conditions) d_ref = detail::jacobian_path(star, data, beta, link);

  for (double r : params.r_grid) {
    RadiusTrajectories rt;
    rt.r = r;
    const auto pts = ball_lattice(beta, r);
    // Running maxima over clusters, then sampled at the grid.
    std::vector<double> k2(n_total, 0.0), k3(n_total, 0.0), eta(n_total, 0.0), pi(n_total, 0.0), dd(n_total, 0.0);
    std::vector<double> vmin_obs, vmax_obs;
    for (std::size_t i = 0; i < n_total; ++i) {
      const Cluster& c = data.clusters[i];
      double kk2 = 0.0, kk3 = 0.0, ee = 0.0;
      for (Eigen::Index j = 0; j < c.size(); ++j) {
        double lo = kInf, hi = 0.0;
        for (const Vector& b : pts) {
          const double u = c.x.row(j).dot(b);
          const double d1 = link.eval(1, u);
          kk2 = std::max(kk2, std::abs(link.eval(2, u) / d1));
          kk3 = std::max(kk3, std::abs(link.eval(3, u) / d1));
          lo = std::min(lo, d1);
          hi = std::max(hi, d1);
        }
        ee = std::max(ee, std::sqrt(hi / lo) - 1.0);
      }
      k2[i] = kk2;
      k3[i] = kk3;
      eta[i] = ee;
    }
    if (spec.beta_dependent()) {
      std::vector<Matrix> half(n_total);
      for (std::size_t i = 0; i < n_total; ++i) {
        const Eigen::Index m = data.clusters[i].size();
        half[i] = linalg::sym_sqrt(templates[i].topLeftCorner(m, m));
      }
      for (const Vector& b : pts) {
        const auto tb = working_templates(spec, data, b, link);
        for (std::size_t i = 0; i < n_total; ++i) {
          const Eigen::Index m = data.clusters[i].size();
          const Matrix q = half[i] * linalg::spd_solve(tb[i].topLeftCorner(m, m), half[i]);
          pi[i] = std::max(pi[i], linalg::sym_eigen_extremes(0.5 * (q + q.transpose())).lambda_max);
        }
        for (Eigen::Index l = 0; l < p; ++l) {
          Vector up = b;
          Vector down = b;
          const double h = default_fd_step(b(l));
          up(l) += h;
          down(l) -= h;
          const auto tu = working_templates(spec, data, up, link);
          const auto td = working_templates(spec, data, down, link);
          for (std::size_t i = 0; i < n_total; ++i) {
            const Eigen::Index m = data.clusters[i].size();
            const Matrix der = (tu[i] - td[i]).topLeftCorner(m, m) / (up(l) - down(l));
            const auto ext = linalg::sym_eigen_extremes(0.5 * (der + der.transpose()));
            dd[i] = std::max({dd[i], std::abs(ext.lambda_min), std::abs(ext.lambda_max)});
          }
        }
      }
    } else {
      std::fill(pi.begin(), pi.end(), 1.0);
    }
    for (std::size_t i = 1; i < n_total; ++i) {
      k2[i] = std::max(k2[i], k2[i - 1]);
      k3[i] = std::max(k3[i], k3[i - 1]);
      eta[i] = std::max(eta[i], eta[i - 1]);
      pi[i] = std::max(pi[i], pi[i - 1]);
      dd[i] = std::max(dd[i], dd[i - 1]);
    }

    std::vector<double> s_i(n_total, kInf), s_ii(n_total, 0.0);
    if (params.derivative_conditions) {
      for (const Vector& b : pts) {
        const auto db = detail::jacobian_path(star, data, b, link);
        for (std::size_t i = 0; i < n_total; ++i) {
          s_i[i] = std::min(s_i[i], detail::definite_part(db[i]));
          s_ii[i] = std::max(s_ii[i], linalg::numerical_radius(db[i] - d_ref[i]));
        }
      }
    }

    for (std::size_t g = 0; g < rep.n_grid.size(); ++g) {
      const std::size_t n = rep.n_grid[g];
      const double lmax = rep.h_max[g];
      rt.k2.push_back(k2[n - 1]);
      rt.k3.push_back(k3[n - 1]);
      rt.eta.push_back(eta[n - 1]);
      rt.pi.push_back(pi[n - 1]);
      rt.d.push_back(dd[n - 1]);
      rt.c3.push_back(r * dd[n - 1] * std::pow(lmax, 0.5 - delta));
      rt.c4.push_back(static_cast<double>(n) * pi[n - 1] * pi[n - 1] * rep.a_tilde[g] * lmax);
      rt.c5.push_back(static_cast<double>(n) * std::pow(pi[n - 1], 4) * dd[n - 1] * dd[n - 1] * lmax);
      if (params.derivative_conditions) {
        rt.s_i.push_back(s_i[n - 1]);
        rt.s_ii.push_back(lmax > 0.0 ? s_ii[n - 1] / std::pow(lmax, 0.5 + delta) : kNaN);
      } else {
        rt.s_i.push_back(kNaN);
        rt.s_ii.push_back(kNaN);
      }
    }
    rep.radii.push_back(std::move(rt));
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Summaries

inline double quantile(std::vector<double> v, double q) {
  v.erase(std::remove_if(v.begin(), v.end(), [](double x) { return std::isnan(x); }), v.end());
  if (v.empty()) return kNaN;
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  if (frac == 0.0) return v[lo];
  return v[lo] + frac * (v[hi] - v[lo]);
}

inline double median(std::vector<double> v) { return quantile(std::move(v), 0.5); }

inline nlohmann::json json_number(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }

inline nlohmann::json json_series(const std::vector<double>& v) {
  nlohmann::json a = nlohmann::json::array();
  for (double x : v) a.push_back(json_number(x));
  return a;
}

inline nlohmann::json to_json(const ConditionReport& r) {
  nlohmann::json j;
  j["n_grid"] = r.n_grid;
  j["delta"] = r.delta;
  j["lattice"] = r.lattice;
  j["has_truth"] = r.has_truth;
  nlohmann::json t;
  t["h_lambda_min"] = json_series(r.h_min);
  t["h_lambda_max"] = json_series(r.h_max);
  t["rstar_lambda_min"] = json_series(r.rstar_min);
  t["rstar_lambda_max"] = json_series(r.rstar_max);
  t["rbar_lambda_min"] = json_series(r.rbar_min);
  t["rbar_lambda_max"] = json_series(r.rbar_max);
  t["gamma"] = json_series(r.gamma);
  t["a"] = json_series(r.a);
  t["a_tilde"] = json_series(r.a_tilde);
  t["gamma_h"] = json_series(r.gamma_h);
  t["s_ratio"] = json_series(r.s_ratio);
  t["s_ratio_running_min"] = json_series(r.s_ratio_running_min);
  t["a1_gap"] = json_series(r.a1_gap);
  t["slln_ratio"] = json_series(r.slln_ratio);
  t["v_lambda_min"] = json_series(r.v_min);
  t["det_h_star_over_m_bar"] = json_series(r.det_h_mbar);
  t["det_m_star_over_m_bar"] = json_series(r.det_mstar_mbar);
  j["trajectories"] = t;
  nlohmann::json radii = nlohmann::json::array();
  for (const RadiusTrajectories& rt : r.radii) {
    nlohmann::json x;
    x["r"] = rt.r;
    x["k2"] = json_series(rt.k2);
    x["k3"] = json_series(rt.k3);
    x["eta"] = json_series(rt.eta);
    x["pi"] = json_series(rt.pi);
    x["d"] = json_series(rt.d);
    x["c3"] = json_series(rt.c3);
    x["c4"] = json_series(rt.c4);
    x["c5"] = json_series(rt.c5);
    x["s_i"] = json_series(rt.s_i);
    x["s_ii"] = json_series(rt.s_ii);
    radii.push_back(x);
  }
  j["radii"] = radii;
  return j;
}

// Median and quartiles of every top-level trajectory across reports sharing one n-grid.
inline nlohmann::json ensemble_summary(const std::vector<ConditionReport>& reports) {
  nlohmann::json out = nlohmann::json::object();
  if (reports.empty()) return out;
  const std::vector<std::pair<std::string, std::vector<double> ConditionReport::*>> fields{
      {"h_lambda_min", &ConditionReport::h_min}, {"h_lambda_max", &ConditionReport::h_max},
      {"gamma", &ConditionReport::gamma},        {"s_ratio", &ConditionReport::s_ratio},
      {"a1_gap", &ConditionReport::a1_gap},      {"slln_ratio", &ConditionReport::slln_ratio},
      {"v_lambda_min", &ConditionReport::v_min}, {"det_h_star_over_m_bar", &ConditionReport::det_h_mbar},
      {"det_m_star_over_m_bar", &ConditionReport::det_mstar_mbar}};
  for (const auto& [name, member] : fields) {
    nlohmann::json q1 = nlohmann::json::array(), med = nlohmann::json::array(), q3 = nlohmann::json::array();
    for (std::size_t g = 0; g < reports.front().n_grid.size(); ++g) {
      std::vector<double> vals;
      for (const ConditionReport& r : reports) vals.push_back((r.*member)[g]);
      q1.push_back(json_number(quantile(vals, 0.25)));
      med.push_back(json_number(quantile(vals, 0.5)));
      q3.push_back(json_number(quantile(vals, 0.75)));
    }
    out[name] = {{"q1", q1}, {"median", med}, {"q3", q3}};
  }
  return out;
}

// ---------------------------------------------------------------------------
// Optimality study: det ratios from ensemble-mean matrices at beta0.

struct OptimalityRow {
  std::string spec;
  std::size_t n = 0;
  double ratio_h = kNaN;  // det H* / det M-bar
  double ratio_m = kNaN;  // det M* / det M-bar
  double ratio_h_perturbed = kNaN;
  double ratio_m_perturbed = kNaN;
  double a2_verified_fraction = kNaN;
};

struct OptimalityStudy {
  std::vector<OptimalityRow> rows;
  std::vector<std::pair<std::size_t, std::string>> failures;
  std::size_t replications = 0;
};

inline OptimalityStudy optimality_study(const ScenarioConfig& cfg, const std::vector<std::string>& specs, bool perturb,
                                        std::size_t reps, const std::vector<std::size_t>& n_grid, unsigned jobs = 1,
                                        std::optional<TruthCorrelation> truth_in = std::nullopt) {
  cfg.validate();
  if (reps < 1) throw ConfigError("reps", "must be >= 1");
  validate_n_grid(n_grid);
  const TruthCorrelation truth = truth_in ? *truth_in : scenario_truth(cfg);
  const Eigen::Index m_max = cfg.resolved_m_max();
  std::vector<WorkingCorrelationSpec> wspecs;
  for (const std::string& s : specs) wspecs.push_back(make_working_spec(s, m_max, truth));
  const LinkFunction link{cfg.link};

  struct RepOut {
    // [spec][grid] sums, plain and perturbed
    std::vector<std::vector<OptimalitySums>> plain, pert;
    std::vector<double> verified;  // per spec: fraction of verified clusters
    std::optional<std::string> failure;
  };
  std::vector<RepOut> outs(reps);
  parallel_for(reps, jobs, [&](std::size_t r) {
    RepOut& o = outs[r];
    try {
      const std::uint64_t seed = random::replication_seed(cfg.seed, r);
      const Dataset data = simulate_scenario(cfg, seed, n_grid.back());
      for (const WorkingCorrelationSpec& ws : wspecs) {
        std::optional<Perturbation> pt;
        if (perturb) pt = a2_schedule(data, cfg.beta0, link, ws, seed);
        const PathOptimality path = optimality_path(data, cfg.beta0, link, ws, truth, pt ? &*pt : nullptr);
        std::vector<OptimalitySums> a, b;
        OptimalitySums acc = OptimalitySums::zero(data.p);
        OptimalitySums acc_p = OptimalitySums::zero(data.p);
        std::size_t next = 0;
        for (std::size_t i = 1; i <= data.n() && next < n_grid.size(); ++i) {
          acc += path.terms[i - 1];
          if (perturb) acc_p += path.perturbed[i - 1];
          while (next < n_grid.size() && n_grid[next] == i) {
            a.push_back(acc);
            b.push_back(acc_p);
            ++next;
          }
        }
        o.plain.push_back(std::move(a));
        o.pert.push_back(std::move(b));
        if (pt) {
          const auto ok = static_cast<double>(std::count(pt->a2_verified.begin(), pt->a2_verified.end(), true));
          o.verified.push_back(ok / static_cast<double>(pt->a2_verified.size()));
        } else {
          o.verified.push_back(kNaN);
        }
      }
    } catch (const std::exception& e) {
      o.failure = e.what();
    }
  });

  OptimalityStudy study;
  study.replications = reps;
  for (std::size_t s = 0; s < specs.size(); ++s) {
    for (std::size_t g = 0; g < n_grid.size(); ++g) {
      OptimalitySums mean = OptimalitySums::zero(cfg.p());
      OptimalitySums mean_p = OptimalitySums::zero(cfg.p());
      double verified = 0.0;
      std::size_t used = 0;
      for (const RepOut& o : outs) {
        if (o.failure) continue;
        mean += o.plain[s][g];
        mean_p += o.pert[s][g];
        verified += o.verified[s];
        ++used;
      }
      OptimalityRow row;
      row.spec = specs[s];
      row.n = n_grid[g];
      if (used > 0) {
        mean *= 1.0 / static_cast<double>(used);
        row.ratio_h = det_ratio(mean.h_star, mean.m_bar);
        row.ratio_m = det_ratio(mean.m_star, mean.m_bar);
        if (perturb) {
          mean_p *= 1.0 / static_cast<double>(used);
          row.ratio_h_perturbed = det_ratio(mean_p.h_star, mean_p.m_bar);
          row.ratio_m_perturbed = det_ratio(mean_p.m_star, mean_p.m_bar);
          row.a2_verified_fraction = verified / static_cast<double>(used);
        }
      }
      study.rows.push_back(row);
    }
  }
  for (std::size_t r = 0; r < reps; ++r)
    if (outs[r].failure) study.failures.emplace_back(r, *outs[r].failure);
  return study;
}

// ---------------------------------------------------------------------------
// Consistency study: distribution of ||beta_hat - beta0|| across replications.

struct ConsistencyRow {
  std::string estimator;
  std::size_t n = 0;
  double q1 = kNaN, median = kNaN, q3 = kNaN;
  double converged_fraction = 0.0;
  std::size_t converged = 0;
  std::size_t attempted = 0;
};

struct ConsistencyStudy {
  std::vector<ConsistencyRow> rows;
  std::vector<ReplicationResult> replications;
  // Per replication and estimator: first grid n from which every later fit converged (0 = never).
  std::vector<std::vector<std::size_t>> n0_surrogate;
};

inline ConsistencyStudy consistency_study(const ScenarioConfig& cfg, const std::vector<std::string>& estimators,
                                          std::size_t reps, const std::vector<std::size_t>& n_grid, unsigned jobs = 1,
                                          const SolverConfig& solver = {}) {
  ConsistencyStudy study;
  study.replications = run_replications(cfg, reps, estimators, n_grid, jobs, solver);
  for (std::size_t e = 0; e < estimators.size(); ++e) {
    for (std::size_t g = 0; g < n_grid.size(); ++g) {
      ConsistencyRow row;
      row.estimator = estimators[e];
      row.n = n_grid[g];
      std::vector<double> err;
      for (const ReplicationResult& r : study.replications) {
        ++row.attempted;
        if (r.failure) continue;
        const FitOutcome& fo = r.fits[e].per_n[g];
        if (fo.error || !fo.converged) continue;
        ++row.converged;
        err.push_back((fo.beta_hat - cfg.beta0).norm());
      }
      row.converged_fraction = static_cast<double>(row.converged) / static_cast<double>(row.attempted);
      row.q1 = quantile(err, 0.25);
      row.median = quantile(err, 0.5);
      row.q3 = quantile(err, 0.75);
      study.rows.push_back(row);
    }
  }
  for (const ReplicationResult& r : study.replications) {
    std::vector<std::size_t> per;
    for (std::size_t e = 0; e < estimators.size(); ++e) {
      std::size_t n0 = 0;
      if (!r.failure) {
        for (std::size_t g = n_grid.size(); g-- > 0;) {
          const FitOutcome& fo = r.fits[e].per_n[g];
          if (fo.error || !fo.converged) break;
          n0 = n_grid[g];
        }
      }
      per.push_back(n0);
    }
    study.n0_surrogate.push_back(std::move(per));
  }
  return study;
}

}  // namespace gee
