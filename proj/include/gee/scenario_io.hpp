#pragma once

// Scenario files: INI-style key/value text with sections
//
//   [model]       link, beta0, n, seed, family
//   [sizes]       kind, m, cycle, lo, hi, m_max
//   [regressors]  process, mean, scale, phi, kappa, intercept
//   [truth]       kind, rho
//   [estimators]  names
//   [study]       n_grid, reps, delta, r_grid
//
// Lists are comma separated. Every key is optional; `to_ini(RunSettings{})`
// prints the defaults. Unknown sections or keys are rejected.

#include <charconv>
#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <json.hpp>

#include "gee/dataset_io.hpp"
#include "gee/error.hpp"
#include "gee/simulation.hpp"

namespace gee {

struct RunSettings {
  ScenarioConfig scenario;
  std::vector<std::string> estimators{"pseudo_likelihood", "independence"};
  std::vector<std::size_t> n_grid{100, 400, 1000};
  std::size_t reps = 100;
  double delta = 0.25;
  std::vector<double> r_grid{0.2, 0.1, 0.05};

  void validate() const {
    scenario.validate();
    if (estimators.empty()) throw ConfigError("estimators.names", "must list at least one estimator");
    validate_n_grid(n_grid);
    if (reps < 1) throw ConfigError("study.reps", "must be >= 1");
    if (!(delta > 0.0 && delta <= 0.5)) throw ConfigError("study.delta", "must lie in (0, 1/2]");
    for (std::size_t k = 0; k < r_grid.size(); ++k) {
      if (!(r_grid[k] > 0.0)) throw ConfigError("study.r_grid", "entries must be positive");
      if (k > 0 && !(r_grid[k] < r_grid[k - 1])) throw ConfigError("study.r_grid", "must be strictly decreasing");
    }
    if (r_grid.empty()) throw ConfigError("study.r_grid", "must not be empty");
  }
};

namespace detail {

inline std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

inline double to_real(const std::string& field, const std::string& v) {
  double out = 0.0;
  const std::string t = trim(v);
  const auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), out);
  if (t.empty() || ec != std::errc() || ptr != t.data() + t.size() || !std::isfinite(out)) {
    throw ConfigError(field, "expected a real number, got '" + v + "'");
  }
  return out;
}

template <class Int>
Int to_integer(const std::string& field, const std::string& v) {
  Int out{};
  const std::string t = trim(v);
  const auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), out);
  if (t.empty() || ec != std::errc() || ptr != t.data() + t.size()) {
    throw ConfigError(field, "expected a non-negative integer, got '" + v + "'");
  }
  return out;
}

inline bool to_bool(const std::string& field, const std::string& v) {
  const std::string t = trim(v);
  if (t == "true" || t == "1" || t == "yes") return true;
  if (t == "false" || t == "0" || t == "no") return false;
  throw ConfigError(field, "expected true or false, got '" + v + "'");
}

inline std::string join(const std::vector<std::string>& v) {
  std::string out;
  for (std::size_t k = 0; k < v.size(); ++k) out += (k ? ", " : "") + v[k];
  return out;
}

template <class T>
std::string join_numbers(const std::vector<T>& v) {
  std::vector<std::string> s;
  for (const T& x : v) {
    if constexpr (std::is_floating_point_v<T>) {
      s.push_back(format_double(x));
    } else {
      s.push_back(std::to_string(x));
    }
  }
  return join(s);
}

}  // namespace detail

inline std::string to_string(ResponseFamily f) {
  switch (f) {
    case ResponseFamily::gaussian_link_moments: return "gaussian_link_moments";
    case ResponseFamily::poisson_log: return "poisson_log";
    case ResponseFamily::bernoulli_probit_flagged: return "bernoulli_probit_flagged";
  }
  return "unknown";
}

inline std::string to_string(SizeScheduleKind k) {
  switch (k) {
    case SizeScheduleKind::constant: return "constant";
    case SizeScheduleKind::cyclic: return "cyclic";
    case SizeScheduleKind::random_range: return "random";
  }
  return "unknown";
}

inline std::string to_string(RegressorKind k) {
  switch (k) {
    case RegressorKind::iid: return "iid";
    case RegressorKind::exogenous_ar1: return "exogenous_ar1";
    case RegressorKind::feedback: return "feedback";
  }
  return "unknown";
}

inline std::string to_string(TruthKind k) {
  switch (k) {
    case TruthKind::independence: return "independence";
    case TruthKind::exchangeable: return "exchangeable";
    case TruthKind::ar1: return "ar1";
  }
  return "unknown";
}

inline RunSettings parse_settings(std::istream& in, RunSettings base = {}) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  try {
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ParseError(e.line(), "scenario file: " + e.message());
  }
  RunSettings s = std::move(base);
  ScenarioConfig& c = s.scenario;
  for (const auto& [section, body] : tree) {
    if (body.empty() && !body.data().empty()) throw ConfigError(section, "keys must appear inside a section");
    for (const auto& [key, node] : body) {
      const std::string field = section + "." + key;
      const std::string v = node.data();
      if (section == "model") {
        if (key == "link") {
          const auto l = parse_link(detail::trim(v));
          if (!l) throw ConfigError(field, "unknown link '" + v + "'");
          c.link = *l;
        } else if (key == "beta0") {
          const auto items = detail::split_list(v);
          if (items.empty()) throw ConfigError(field, "must list at least one value");
          c.beta0.resize(static_cast<Eigen::Index>(items.size()));
          for (std::size_t k = 0; k < items.size(); ++k) c.beta0(static_cast<Eigen::Index>(k)) = detail::to_real(field, items[k]);
        } else if (key == "n") {
          c.n = detail::to_integer<std::size_t>(field, v);
        } else if (key == "seed") {
          c.seed = detail::to_integer<std::uint64_t>(field, v);
        } else if (key == "family") {
          const std::string t = detail::trim(v);
          if (t == "gaussian_link_moments") c.family = ResponseFamily::gaussian_link_moments;
          else if (t == "poisson_log") c.family = ResponseFamily::poisson_log;
          else if (t == "bernoulli_probit_flagged") c.family = ResponseFamily::bernoulli_probit_flagged;
          else throw ConfigError(field, "unknown response family '" + v + "'");
        } else {
          throw ConfigError(field, "unknown key");
        }
      } else if (section == "sizes") {
        if (key == "kind") {
          const std::string t = detail::trim(v);
          if (t == "constant") c.sizes.kind = SizeScheduleKind::constant;
          else if (t == "cyclic") c.sizes.kind = SizeScheduleKind::cyclic;
          else if (t == "random") c.sizes.kind = SizeScheduleKind::random_range;
          else throw ConfigError(field, "unknown size schedule '" + v + "'");
        } else if (key == "m") {
          c.sizes.m = detail::to_integer<Eigen::Index>(field, v);
        } else if (key == "cycle") {
          c.sizes.cycle.clear();
          for (const std::string& item : detail::split_list(v)) c.sizes.cycle.push_back(detail::to_integer<Eigen::Index>(field, item));
        } else if (key == "lo") {
          c.sizes.lo = detail::to_integer<Eigen::Index>(field, v);
        } else if (key == "hi") {
          c.sizes.hi = detail::to_integer<Eigen::Index>(field, v);
        } else if (key == "m_max") {
          c.m_max = detail::to_integer<Eigen::Index>(field, v);
        } else {
          throw ConfigError(field, "unknown key");
        }
      } else if (section == "regressors") {
        if (key == "process") {
          const std::string t = detail::trim(v);
          if (t == "iid") c.regressors.kind = RegressorKind::iid;
          else if (t == "exogenous_ar1") c.regressors.kind = RegressorKind::exogenous_ar1;
          else if (t == "feedback") c.regressors.kind = RegressorKind::feedback;
          else throw ConfigError(field, "unknown regressor process '" + v + "'");
        } else if (key == "mean") {
          c.regressors.mean = detail::to_real(field, v);
        } else if (key == "scale") {
          c.regressors.scale = detail::to_real(field, v);
        } else if (key == "phi") {
          c.regressors.phi = detail::to_real(field, v);
        } else if (key == "kappa") {
          c.regressors.kappa = detail::to_real(field, v);
        } else if (key == "intercept") {
          c.regressors.intercept = detail::to_bool(field, v);
        } else {
          throw ConfigError(field, "unknown key");
        }
      } else if (section == "truth") {
        if (key == "kind") {
          const std::string t = detail::trim(v);
          if (t == "independence") c.truth.kind = TruthKind::independence;
          else if (t == "exchangeable") c.truth.kind = TruthKind::exchangeable;
          else if (t == "ar1") c.truth.kind = TruthKind::ar1;
          else throw ConfigError(field, "unknown truth correlation '" + v + "'");
        } else if (key == "rho") {
          c.truth.rho = detail::to_real(field, v);
        } else {
          throw ConfigError(field, "unknown key");
        }
      } else if (section == "estimators") {
        if (key == "names") {
          s.estimators = detail::split_list(v);
        } else {
          throw ConfigError(field, "unknown key");
        }
      } else if (section == "study") {
        if (key == "n_grid") {
          s.n_grid.clear();
          for (const std::string& item : detail::split_list(v)) s.n_grid.push_back(detail::to_integer<std::size_t>(field, item));
        } else if (key == "reps") {
          s.reps = detail::to_integer<std::size_t>(field, v);
        } else if (key == "delta") {
          s.delta = detail::to_real(field, v);
        } else if (key == "r_grid") {
          s.r_grid.clear();
          for (const std::string& item : detail::split_list(v)) s.r_grid.push_back(detail::to_real(field, item));
        } else {
          throw ConfigError(field, "unknown key");
        }
      } else {
        throw ConfigError(section, "unknown section");
      }
    }
  }
  return s;
}

inline RunSettings load_settings(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("scenario", "cannot open '" + path + "'");
  return parse_settings(in);
}

inline std::string to_ini(const RunSettings& s) {
  const ScenarioConfig& c = s.scenario;
  std::vector<double> beta(c.beta0.data(), c.beta0.data() + c.beta0.size());
  std::ostringstream o;
  o << "[model]\n"
    << "link = " << to_string(c.link) << '\n'
    << "beta0 = " << detail::join_numbers(beta) << '\n'
    << "n = " << c.n << '\n'
    << "seed = " << c.seed << '\n'
    << "family = " << to_string(c.family) << '\n'
    << "\n[sizes]\n"
    << "kind = " << to_string(c.sizes.kind) << '\n'
    << "m = " << c.sizes.m << '\n'
    << "cycle = " << detail::join_numbers(c.sizes.cycle) << '\n'
    << "lo = " << c.sizes.lo << '\n'
    << "hi = " << c.sizes.hi << '\n'
    << "m_max = " << c.m_max << '\n'
    << "\n[regressors]\n"
    << "process = " << to_string(c.regressors.kind) << '\n'
    << "mean = " << format_double(c.regressors.mean) << '\n'
    << "scale = " << format_double(c.regressors.scale) << '\n'
    << "phi = " << format_double(c.regressors.phi) << '\n'
    << "kappa = " << format_double(c.regressors.kappa) << '\n'
    << "intercept = " << (c.regressors.intercept ? "true" : "false") << '\n'
    << "\n[truth]\n"
    << "kind = " << to_string(c.truth.kind) << '\n'
    << "rho = " << format_double(c.truth.rho) << '\n'
    << "\n[estimators]\n"
    << "names = " << detail::join(s.estimators) << '\n'
    << "\n[study]\n"
    << "n_grid = " << detail::join_numbers(s.n_grid) << '\n'
    << "reps = " << s.reps << '\n'
    << "delta = " << format_double(s.delta) << '\n'
    << "r_grid = " << detail::join_numbers(s.r_grid) << '\n';
  return o.str();
}

inline nlohmann::json to_json(const RunSettings& s) {
  const ScenarioConfig& c = s.scenario;
  nlohmann::json j;
  j["model"] = {{"link", to_string(c.link)},
                {"beta0", std::vector<double>(c.beta0.data(), c.beta0.data() + c.beta0.size())},
                {"n", c.n},
                {"seed", c.seed},
                {"family", to_string(c.family)}};
  j["sizes"] = {{"kind", to_string(c.sizes.kind)}, {"m", c.sizes.m}, {"cycle", c.sizes.cycle},
                {"lo", c.sizes.lo},                {"hi", c.sizes.hi}, {"m_max", c.m_max}};
  j["regressors"] = {{"process", to_string(c.regressors.kind)}, {"mean", c.regressors.mean},
                     {"scale", c.regressors.scale},             {"phi", c.regressors.phi},
                     {"kappa", c.regressors.kappa},             {"intercept", c.regressors.intercept}};
  j["truth"] = {{"kind", to_string(c.truth.kind)}, {"rho", c.truth.rho}};
  j["estimators"] = {{"names", s.estimators}};
  j["study"] = {{"n_grid", s.n_grid}, {"reps", s.reps}, {"delta", s.delta}, {"r_grid", s.r_grid}};
  return j;
}

// The resolved config as '#'-prefixed lines for CSV outputs.
inline std::vector<std::string> config_comment_lines(const RunSettings& s) {
  std::vector<std::string> out;
  std::istringstream in(to_ini(s));
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) out.push_back(line);
  return out;
}

}  // namespace gee
