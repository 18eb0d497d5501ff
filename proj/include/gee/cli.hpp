#pragma once

// Command-line front end. run_cli is the whole program minus main(), so tests
// can drive it in-process.
//
// Exit codes: 0 success, 2 configuration or parse error, 3 numerical failure.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "gee/dataset_io.hpp"
#include "gee/diagnostics.hpp"
#include "gee/error.hpp"
#include "gee/random.hpp"
#include "gee/scenario_io.hpp"
#include "gee/simulation.hpp"
#include "gee/solver.hpp"

namespace gee::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitNumerical = 3;

struct Options {
  std::string scenario;
  std::optional<std::uint64_t> seed;
  std::string out = ".";
  std::string n_grid;
  std::optional<std::size_t> reps;
  std::vector<std::string> estimators;
  std::optional<double> delta;
  unsigned jobs = default_jobs();
  std::string data;
};

namespace detail {

inline RunSettings resolve(const Options& o) {
  RunSettings s = o.scenario.empty() ? RunSettings{} : load_settings(o.scenario);
  if (o.seed) s.scenario.seed = *o.seed;
  if (!o.n_grid.empty()) {
    s.n_grid.clear();
    for (const std::string& item : gee::detail::split_list(o.n_grid))
      s.n_grid.push_back(gee::detail::to_integer<std::size_t>("n_grid", item));
  }
  if (o.reps) s.reps = *o.reps;
  if (!o.estimators.empty()) s.estimators = o.estimators;
  if (o.delta) s.delta = *o.delta;
  s.validate();
  if (o.jobs < 1) throw ConfigError("jobs", "must be >= 1");
  return s;
}

inline nlohmann::json provenance(const RunSettings& s) {
  nlohmann::json j;
  j["config"] = to_json(s);
  j["seed"] = s.scenario.seed;
  j["rng"] = std::string(random::kAlgorithmId);
  if (s.scenario.misspecified()) {
    j["warnings"] = {"response family bernoulli_probit_flagged has Var(y) = mu(1 - mu) != mu'; the variance model is misspecified"};
  }
  return j;
}

inline std::filesystem::path prepare_out(const Options& o) {
  std::filesystem::path dir(o.out);
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw ConfigError("out", "cannot create directory '" + o.out + "': " + ec.message());
  return dir;
}

inline void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  std::ofstream f(path);
  if (!f) throw ConfigError("out", "cannot write " + path.string());
  f << j.dump(2) << '\n';
}

inline std::vector<double> to_vec(const Vector& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

inline std::string csv_number(double v) { return std::isfinite(v) ? format_double(v) : std::string("nan"); }

inline void warn_misspecified(const RunSettings& s, std::ostream& err) {
  if (s.scenario.misspecified()) err << "warning: bernoulli_probit_flagged violates Var = mu'; results are for a misspecified model\n";
}

}  // namespace detail

inline int cmd_simulate(const Options& o, std::ostream& out, std::ostream& err) {
  const RunSettings s = detail::resolve(o);
  detail::warn_misspecified(s, err);
  const auto dir = detail::prepare_out(o);
  const Dataset data = simulate_scenario(s.scenario);
  DatasetMeta meta;
  meta.link = s.scenario.link;
  meta.beta0 = s.scenario.beta0;
  meta.extra = detail::provenance(s);
  meta.extra["digest"] = dataset_digest(data);
  const auto csv = dir / "dataset.csv";
  {
    std::ofstream f(csv);
    if (!f) throw ConfigError("out", "cannot write " + csv.string());
    write_dataset_csv(f, data, config_comment_lines(s));
  }
  detail::write_json(sidecar_path(csv), metadata_json(data, meta));
  out << "wrote " << csv.string() << " (" << data.n() << " clusters)\n";
  return kExitOk;
}

inline nlohmann::json fit_json(const std::string& name, const GeeFit& fit) {
  nlohmann::json j;
  j["estimator"] = name;
  j["beta_hat"] = detail::to_vec(fit.beta_hat);
  j["converged"] = fit.converged;
  j["iterations"] = fit.iterations;
  j["final_residual_norm"] = json_number(fit.final_residual_norm);
  j["stages"] = fit.stages;
  nlohmann::json trace = nlohmann::json::array();
  for (const TraceEntry& t : fit.trace) {
    trace.push_back({{"stage", t.stage},
                     {"beta", detail::to_vec(t.beta)},
                     {"residual_norm", json_number(t.residual_norm)},
                     {"step_norm", json_number(t.step_norm)},
                     {"halvings", t.halvings},
                     {"ridge", t.ridge}});
  }
  j["trace"] = trace;
  return j;
}

inline int cmd_fit(const Options& o, std::ostream& out, std::ostream& err) {
  RunSettings s = detail::resolve(o);
  const auto dir = detail::prepare_out(o);
  Dataset data;
  LinkFunction link{s.scenario.link};
  std::optional<TruthCorrelation> truth;
  nlohmann::json report = detail::provenance(s);
  if (!o.data.empty()) {
    DatasetFile file = read_dataset_file(o.data);
    data = std::move(file.data);
    if (file.meta.link) link.kind = *file.meta.link;
    report["data"] = o.data;
    report["link"] = to_string(link.kind);
    if (!o.scenario.empty()) truth = scenario_truth(s.scenario);
  } else {
    detail::warn_misspecified(s, err);
    data = simulate_scenario(s.scenario);
    truth = scenario_truth(s.scenario);
    report["link"] = to_string(link.kind);
    report["digest"] = dataset_digest(data);
  }
  data.validate();
  const TruthCorrelation tr = truth ? *truth : TruthCorrelation{Matrix::Identity(data.m_max, data.m_max)};
  nlohmann::json fits = nlohmann::json::array();
  bool any_converged = false;
  for (const std::string& name : s.estimators) {
    if (!truth && (name == "quasi_score" || name == "truth")) {
      throw ConfigError("estimator", "'" + name + "' needs the true correlation; pass --scenario");
    }
    const EstimatingFunction kind = make_estimator(name, data.m_max, tr);
    try {
      const GeeFit fit = solve_gee(data, kind, link);
      any_converged = any_converged || fit.converged;
      fits.push_back(fit_json(name, fit));
    } catch (const NumericalError& e) {
      fits.push_back({{"estimator", name}, {"error", e.what()}, {"converged", false}});
    }
  }
  report["fits"] = fits;
  detail::write_json(dir / "fit.json", report);
  out << "wrote " << (dir / "fit.json").string() << '\n';
  if (!any_converged) {
    err << "error: no estimator converged\n";
    return kExitNumerical;
  }
  return kExitOk;
}

inline int cmd_diagnose(const Options& o, std::ostream& out, std::ostream& err) {
  RunSettings s = detail::resolve(o);
  const auto dir = detail::prepare_out(o);
  const LinkFunction link{s.scenario.link};
  ConditionParams params;
  params.delta = s.delta;
  params.r_grid = s.r_grid;
  nlohmann::json report = detail::provenance(s);
  const std::string spec_name = s.estimators.front();
  report["working_correlation"] = spec_name;

  if (!o.data.empty()) {
    DatasetFile file = read_dataset_file(o.data);
    const LinkFunction dlink{file.meta.link.value_or(s.scenario.link)};
    const Vector beta_ref = file.meta.beta0.value_or(s.scenario.beta0);
    std::optional<TruthCorrelation> truth;
    if (!o.scenario.empty()) truth = scenario_truth(s.scenario);
    const TruthCorrelation tr = truth.value_or(TruthCorrelation{Matrix::Identity(file.data.m_max, file.data.m_max)});
    params.n_grid.clear();
    for (std::size_t n : s.n_grid)
      if (n <= file.data.n()) params.n_grid.push_back(n);
    const auto spec = make_working_spec(spec_name, file.data.m_max, tr);
    const ConditionReport r = condition_trajectories(file.data, Parameter{beta_ref, std::nullopt}, dlink, spec,
                                                     truth ? &*truth : nullptr, params);
    report["data"] = o.data;
    report["report"] = to_json(r);
    detail::write_json(dir / "diagnostics.json", report);
    out << "wrote " << (dir / "diagnostics.json").string() << '\n';
    return kExitOk;
  }

  detail::warn_misspecified(s, err);
  const std::size_t reps = o.reps.value_or(1);
  params.n_grid = s.n_grid;
  const TruthCorrelation truth = scenario_truth(s.scenario);
  const auto spec = make_working_spec(spec_name, s.scenario.resolved_m_max(), truth);
  std::vector<std::optional<ConditionReport>> reports(reps);
  std::vector<std::string> failures(reps);
  parallel_for(reps, o.jobs, [&](std::size_t r) {
    try {
      const Dataset d = simulate_scenario(s.scenario, random::replication_seed(s.scenario.seed, r), s.n_grid.back());
      reports[r] = condition_trajectories(d, Parameter{s.scenario.beta0, std::nullopt}, link, spec, &truth, params);
    } catch (const std::exception& e) {
      failures[r] = e.what();
    }
  });
  std::vector<ConditionReport> ok;
  nlohmann::json fail = nlohmann::json::array();
  for (std::size_t r = 0; r < reps; ++r) {
    if (reports[r]) ok.push_back(*reports[r]);
    else fail.push_back({{"replication", r}, {"error", failures[r]}});
  }
  report["replications"] = reps;
  report["failures"] = fail;
  if (ok.empty()) {
    detail::write_json(dir / "diagnostics.json", report);
    err << "error: every replication failed\n";
    return kExitNumerical;
  }
  report["report"] = to_json(ok.front());
  report["ensemble"] = ensemble_summary(ok);
  detail::write_json(dir / "diagnostics.json", report);
  out << "wrote " << (dir / "diagnostics.json").string() << '\n';
  return kExitOk;
}

inline int cmd_study_consistency(const Options& o, std::ostream& out, std::ostream& err) {
  RunSettings s = detail::resolve(o);
  detail::warn_misspecified(s, err);
  const auto dir = detail::prepare_out(o);
  const ConsistencyStudy study = consistency_study(s.scenario, s.estimators, s.reps, s.n_grid, o.jobs);
  {
    std::ofstream f(dir / "consistency.csv");
    if (!f) throw ConfigError("out", "cannot write consistency.csv");
    for (const std::string& line : config_comment_lines(s)) f << "# " << line << '\n';
    f << "# rng = " << random::kAlgorithmId << '\n';
    f << "estimator,n,q1,median,q3,converged_fraction,converged,attempted\n";
    for (const ConsistencyRow& r : study.rows) {
      f << r.estimator << ',' << r.n << ',' << detail::csv_number(r.q1) << ',' << detail::csv_number(r.median) << ','
        << detail::csv_number(r.q3) << ',' << detail::csv_number(r.converged_fraction) << ',' << r.converged << ','
        << r.attempted << '\n';
    }
  }
  nlohmann::json j = detail::provenance(s);
  nlohmann::json fails = nlohmann::json::array();
  std::size_t converged_total = 0;
  for (const ReplicationResult& r : study.replications) {
    if (r.failure) fails.push_back({{"replication", r.id}, {"error", *r.failure}});
    for (std::size_t e = 0; e < r.fits.size(); ++e)
      for (const FitOutcome& fo : r.fits[e].per_n) {
        if (fo.converged) ++converged_total;
        if (fo.error) fails.push_back({{"replication", r.id}, {"estimator", r.fits[e].estimator}, {"n", fo.n}, {"error", *fo.error}});
      }
  }
  j["failures"] = fails;
  j["n0_surrogate"] = study.n0_surrogate;
  detail::write_json(dir / "consistency.json", j);
  out << "wrote " << (dir / "consistency.csv").string() << '\n';
  if (converged_total == 0) {
    err << "error: no solver run converged\n";
    return kExitNumerical;
  }
  return kExitOk;
}

inline int cmd_study_optimality(const Options& o, std::ostream& out, std::ostream& err) {
  RunSettings s = detail::resolve(o);
  detail::warn_misspecified(s, err);
  const auto dir = detail::prepare_out(o);
  const OptimalityStudy study = optimality_study(s.scenario, s.estimators, true, s.reps, s.n_grid, o.jobs);
  {
    std::ofstream f(dir / "optimality.csv");
    if (!f) throw ConfigError("out", "cannot write optimality.csv");
    for (const std::string& line : config_comment_lines(s)) f << "# " << line << '\n';
    f << "# rng = " << random::kAlgorithmId << '\n';
    f << "spec,n,det_h_star_over_m_bar,det_m_star_over_m_bar,det_h_star_over_m_bar_perturbed,"
         "det_m_star_over_m_bar_perturbed,a2_verified_fraction\n";
    for (const OptimalityRow& r : study.rows) {
      f << r.spec << ',' << r.n << ',' << detail::csv_number(r.ratio_h) << ',' << detail::csv_number(r.ratio_m) << ','
        << detail::csv_number(r.ratio_h_perturbed) << ',' << detail::csv_number(r.ratio_m_perturbed) << ','
        << detail::csv_number(r.a2_verified_fraction) << '\n';
    }
  }
  nlohmann::json j = detail::provenance(s);
  nlohmann::json fails = nlohmann::json::array();
  for (const auto& [id, msg] : study.failures) fails.push_back({{"replication", id}, {"error", msg}});
  j["failures"] = fails;
  detail::write_json(dir / "optimality.json", j);
  out << "wrote " << (dir / "optimality.csv").string() << '\n';
  if (study.failures.size() == study.replications) {
    err << "error: every replication failed\n";
    return kExitNumerical;
  }
  return kExitOk;
}

inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Generalized estimating equations with stochastic regressors"};
  app.require_subcommand(0, 1);
  bool print_defaults = false;
  app.add_flag("--print-defaults", print_defaults, "Print the default scenario file and exit");

  Options o;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--scenario", o.scenario, "Scenario file");
    sub->add_option("--seed", o.seed, "Seed override");
    sub->add_option("--out", o.out, "Output directory");
    sub->add_option("--n-grid", o.n_grid, "Comma-separated cluster counts");
    sub->add_option("--reps", o.reps, "Replication count");
    sub->add_option("--estimator", o.estimators, "Estimator name (repeatable)")->allow_extra_args(false);
    sub->add_option("--delta", o.delta, "Exponent delta in (0, 1/2]");
    sub->add_option("--jobs", o.jobs, "Worker threads");
    sub->add_flag("--print-defaults", print_defaults, "Print the default scenario file and exit");
  };
  CLI::App* simulate = app.add_subcommand("simulate", "Simulate a scenario and write the dataset");
  CLI::App* fit = app.add_subcommand("fit", "Fit the estimators to a dataset or a simulated scenario");
  CLI::App* diagnose = app.add_subcommand("diagnose", "Write the condition report");
  CLI::App* consistency = app.add_subcommand("study-consistency", "Median estimation error across replications");
  CLI::App* optimality = app.add_subcommand("study-optimality", "Determinant ratios against the quasi-score");
  for (CLI::App* sub : {simulate, fit, diagnose, consistency, optimality}) add_common(sub);
  fit->add_option("--data", o.data, "Dataset CSV");
  diagnose->add_option("--data", o.data, "Dataset CSV");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return kExitConfig;
  }

  try {
    if (print_defaults) {
      out << to_ini(RunSettings{});
      return kExitOk;
    }
    if (simulate->parsed()) return cmd_simulate(o, out, err);
    if (fit->parsed()) return cmd_fit(o, out, err);
    if (diagnose->parsed()) return cmd_diagnose(o, out, err);
    if (consistency->parsed()) return cmd_study_consistency(o, out, err);
    if (optimality->parsed()) return cmd_study_optimality(o, out, err);
    out << app.help();
    return kExitConfig;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const ParseError& e) {
    err << "error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const InvalidInput& e) {
    err << "error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const NumericalError& e) {
    err << "numerical failure: " << e.what() << '\n';
    return kExitNumerical;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return kExitConfig;
  }
}

}  // namespace gee::cli
