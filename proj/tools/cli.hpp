#pragma once

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "kom/all.hpp"

namespace kom::cli {

using nlohmann::json;

inline constexpr int schema_version = 1;

enum ExitCode : int {
  exit_ok = 0,
  exit_data = 2,
  exit_tuning = 3,
  exit_solver = 4,
  exit_simulation = 5,
};

inline constexpr const char* exit_help =
    "Exit codes: 0 success, 2 data error (bad CSV, missing column, invalid indicator), 3 hyperparameter tuning "
    "failure, 4 solver failure (every kernel in the ladder failed), 5 simulation cell with no successful replicate.";

enum class Stage { data, tuning, solve, simulate };

inline int exit_code_for(const Error& e, Stage stage) {
  switch (e.code()) {
    case ErrorCode::all_degrees_failed:
    case ErrorCode::infeasible:
      return exit_solver;
    case ErrorCode::arm_too_small:
      return exit_tuning;
    default:
      break;
  }
  switch (stage) {
    case Stage::tuning: return e.code() == ErrorCode::not_positive_definite ? exit_tuning : exit_data;
    case Stage::solve:
      return e.code() == ErrorCode::not_positive_definite || e.code() == ErrorCode::asymmetric_input ? exit_solver
                                                                                                      : exit_data;
    case Stage::simulate: return exit_simulation;
    case Stage::data: break;
  }
  return exit_data;
}

/// NaN and infinities become null.
inline json num(double x) { return std::isfinite(x) ? json(x) : json(nullptr); }

inline LambdaPolicy parse_lambda(const std::string& s) {
  LambdaPolicy p;
  if (s == "gp_tuned" || s == "gp-tuned" || s == "tuned") return p;
  if (s == "zero") {
    p.kind = LambdaPolicyKind::zero;
    return p;
  }
  try {
    std::size_t used = 0;
    p.value = std::stod(s, &used);
    if (used != s.size() || !(p.value >= 0.0)) throw std::invalid_argument(s);
  } catch (const std::exception&) {
    throw Error(ErrorCode::invalid_argument, "--lambda expects gp_tuned, zero or a nonnegative number, got '" + s + "'");
  }
  p.kind = LambdaPolicyKind::fixed;
  return p;
}

/// Options shared by tune, weights and estimate.
struct ModelArgs {
  std::string input;
  std::string output;
  std::string estimand = "sate";
  double alpha = 0.1;
  long subset_size = 0;
  std::string kernel;  // empty: default ladder
  int degree = 0;      // 0: default ladder
  std::string lambda = "gp_tuned";
  std::string convention = "sigma2_over_gamma_sq";
  std::string hyper_path;
  int propensity_degree = 4;
  double eps = 1e-6;
  int max_iter = 100000;
  long subsample_cap = 500;
  double v_penalty = 0.0;
};

inline void add_model_options(CLI::App* app, ModelArgs& a, bool estimand_options) {
  app->add_option("-i,--input", a.input, "CSV with columns id,t,s,y,x1..xp")->required();
  app->add_option("-o,--output", a.output, "output path (default: stdout)");
  app->add_option("--kernel", a.kernel, "kernel family: poly_mahalanobis | product_poly | gaussian");
  app->add_option("--degree", a.degree, "polynomial degree; with --kernel replaces the fallback ladder");
  app->add_option("--subsample-cap", a.subsample_cap, "largest arm size used for tuning");
  if (!estimand_options) return;
  app->add_option("-e,--estimand", a.estimand, "sate | satt | tate | owate | osate | kowate | kosate");
  app->add_option("--alpha", a.alpha, "truncation level for osate and the default kosate subset size");
  app->add_option("--subset-size", a.subset_size, "kosate target size n'");
  app->add_option("--lambda", a.lambda, "variance penalty: gp_tuned | zero | <value>");
  app->add_option("--lambda-convention", a.convention, "sigma2_over_gamma_sq | sigma2_over_gamma");
  app->add_option("--hyper", a.hyper_path, "hyperparameter JSON written by `kom tune`");
  app->add_option("--propensity-degree", a.propensity_degree, "degree of the polynomial logistic propensity model");
  app->add_option("--eps", a.eps, "solver tolerance (primal and dual)");
  app->add_option("--max-iter", a.max_iter, "solver iteration cap");
  app->add_option("--v-penalty", a.v_penalty, "ridge on V in the variable-V problems (default off)");
}

inline json model_config(const ModelArgs& a, std::string_view command) {
  json c;
  c["command"] = command;
  c["input"] = a.input;
  c["output"] = a.output;
  c["estimand"] = a.estimand;
  c["alpha"] = a.alpha;
  c["subset_size"] = a.subset_size;
  c["kernel"] = a.kernel.empty() ? json("ladder") : json(a.kernel);
  c["degree"] = a.degree;
  c["lambda"] = a.lambda;
  c["lambda_convention"] = a.convention;
  c["hyper"] = a.hyper_path;
  c["propensity_degree"] = a.propensity_degree;
  c["eps"] = a.eps;
  c["max_iter"] = a.max_iter;
  c["subsample_cap"] = a.subsample_cap;
  c["v_penalty"] = a.v_penalty;
  return c;
}

inline json hyper_json(const GPHyperparams& h, LambdaConvention conv) {
  return json{{"arm", h.arm},           {"gamma", h.gamma},
              {"theta", h.theta},       {"sigma2", h.sigma2},
              {"lambda", lambda_from(h, conv)}, {"lml", num(h.lml)},
              {"outcome_mean", h.outcome_mean}, {"units_used", h.units_used},
              {"evaluations", h.evaluations}};
}

inline LambdaConvention parse_convention(const std::string& s) {
  if (s == "sigma2_over_gamma_sq") return LambdaConvention::sigma2_over_gamma_sq;
  if (s == "sigma2_over_gamma") return LambdaConvention::sigma2_over_gamma;
  throw Error(ErrorCode::invalid_argument, "unknown lambda convention '" + s + "'");
}

inline Dataset load(const std::string& path) { return validate_dataset(read_dataset_csv(path)); }

/// Writes to the file if a path is given, else to the stream.
inline void emit(const std::string& path, std::ostream& fallback, const std::string& text) {
  if (path.empty()) {
    fallback << text;
    return;
  }
  std::ofstream f(path);
  if (!f) throw Error(ErrorCode::invalid_argument, "cannot write '" + path + "'");
  f << text;
}

struct LoadedHyper {
  std::array<GPHyperparams, 2> hyper;
  KernelRung rung;
};

inline LoadedHyper read_hyper(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw Error(ErrorCode::parse_error, "cannot open '" + path + "'");
  LoadedHyper out;
  try {
    const json j = json::parse(f);
    out.rung.family = parse_kernel_family(j.at("kernel").get<std::string>());
    out.rung.degree = j.at("degree").get<int>();
    for (const auto& a : j.at("arms")) {
      const int arm = a.at("arm").get<int>();
      if (arm != 0 && arm != 1) throw Error(ErrorCode::parse_error, "hyper arm must be 0 or 1");
      auto& h = out.hyper[static_cast<std::size_t>(arm)];
      h.arm = arm;
      h.gamma = a.at("gamma").get<double>();
      h.theta = a.at("theta").get<double>();
      h.sigma2 = a.at("sigma2").get<double>();
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::parse_error, "hyperparameter file '" + path + "': " + e.what());
  }
  return out;
}

inline KomOptions kom_options(const ModelArgs& a) {
  KomOptions o;
  o.lambda = parse_lambda(a.lambda);
  o.lambda.convention = parse_convention(a.convention);
  o.propensity_degree = a.propensity_degree;
  o.qp.eps_primal = o.qp.eps_dual = a.eps;
  o.qp.max_iter = a.max_iter;
  o.tune_options.subsample_cap = a.subsample_cap;
  o.v_penalty = a.v_penalty;
  if (!a.hyper_path.empty()) {
    const auto h = read_hyper(a.hyper_path);
    o.hyper = h.hyper;
    o.ladder = {h.rung};
  }
  if (!a.kernel.empty() || a.degree > 0) {
    KernelRung r;
    r.family = a.kernel.empty() ? KernelFamily::poly_mahalanobis : parse_kernel_family(a.kernel);
    r.degree = a.degree > 0 ? a.degree : 2;
    o.ladder = {r};
  }
  return o;
}

inline EstimandSpec estimand_spec(const ModelArgs& a) {
  EstimandSpec s;
  s.kind = parse_estimand(a.estimand);
  s.alpha = a.alpha;
  s.subset_size = a.subset_size;
  if (!(s.alpha > 0.0 && s.alpha < 0.5)) throw Error(ErrorCode::invalid_argument, "--alpha must lie in (0, 0.5)");
  if (s.subset_size < 0) throw Error(ErrorCode::invalid_argument, "--subset-size must be positive");
  return s;
}

inline json ladder_json(const std::vector<RungReport>& reports) {
  json arr = json::array();
  for (const auto& r : reports)
    arr.push_back({{"kernel", to_string(r.rung.family)}, {"degree", r.rung.degree}, {"outcome", r.outcome}});
  return arr;
}

inline json weights_diagnostics(const KomWeights& w, const Dataset& d) {
  const auto neff = effective_sample_sizes(w.W, d);
  json j{{"delta1_sq", w.delta1_sq},
         {"delta0_sq", w.delta0_sq},
         {"objective", w.objective},
         {"variance_penalty", w.variance_penalty},
         {"lambda0", w.lambda0},
         {"lambda1", w.lambda1},
         {"degree_used", w.degree_used},
         {"kernel_used", to_string(w.family_used)},
         {"solver_status", qp::to_string(w.status)},
         {"solver_iterations", w.iterations},
         {"primal_residual", w.primal_residual},
         {"dual_residual", w.dual_residual},
         {"polished", w.polished},
         {"jitter_used", w.jitter_used},
         {"fallbacks", w.fallbacks},
         {"n_effective", {{"control", neff[0]}, {"treated", neff[1]}}},
         {"relaxation_bound", num(w.relaxation_bound)}};
  return j;
}

// ---------------------------------------------------------------------------

inline int cmd_tune(const ModelArgs& a, std::ostream& out, std::ostream& err) {
  Dataset d;
  try {
    d = load(a.input);
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return exit_code_for(e, Stage::data);
  }
  try {
    const KernelFamily family = a.kernel.empty() ? KernelFamily::product_poly : parse_kernel_family(a.kernel);
    const int degree = a.degree > 0 ? a.degree : 2;
    TuneOptions opt;
    opt.subsample_cap = a.subsample_cap;
    const Standardizer st = Standardizer::fit(d.X);
    const auto conv = parse_convention(a.convention);
    json j{{"schema_version", schema_version}, {"config", model_config(a, "tune")}};
    j["kernel"] = to_string(family);
    j["degree"] = degree;
    j["lambda_convention"] = a.convention;
    j["arms"] = json::array();
    for (int arm = 0; arm < 2; ++arm) j["arms"].push_back(hyper_json(tune(d, arm, family, degree, st, opt), conv));
    emit(a.output, out, j.dump(2) + "\n");
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return exit_code_for(e, Stage::tuning);
  }
  return exit_ok;
}

inline int cmd_weights(const ModelArgs& a, const std::string& report_path, std::ostream& out, std::ostream& err) {
  Dataset d;
  EstimandSpec spec;
  KomOptions opt;
  try {
    d = load(a.input);
    spec = estimand_spec(a);
    opt = kom_options(a);
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return exit_code_for(e, Stage::data);
  }
  try {
    const KomWeights w = solve_kom(d, spec, opt);
    const Vector v = TargetWeights{w.V_used, Normalization::unit_mean}.to_simplex().V;
    std::ostringstream csv;
    csv << "id,w,v\n";
    for (Eigen::Index i = 0; i < d.n(); ++i)
      csv << d.ids[static_cast<std::size_t>(i)] << ',' << format_number(w.W(i)) << ',' << format_number(v(i)) << '\n';
    emit(a.output, out, csv.str());

    json j{{"schema_version", schema_version}, {"config", model_config(a, "weights")}};
    j["estimand"] = to_string(spec.kind);
    j["diagnostics"] = weights_diagnostics(w, d);
    j["hyperparameters"] = json::array({hyper_json(w.hyper[0], opt.lambda.convention),
                                        hyper_json(w.hyper[1], opt.lambda.convention)});
    emit(report_path, err, j.dump(2) + "\n");
  } catch (const LadderError& e) {
    json j{{"error", e.what()}, {"ladder", ladder_json(e.reports())}};
    err << "error: " << e.what() << '\n' << j.dump(2) << '\n';
    return exit_solver;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return exit_code_for(e, Stage::solve);
  }
  return exit_ok;
}

inline json report_json(const EstimateReport& r) {
  json j{{"method", r.method},
         {"estimand", r.estimand},
         {"tau_hat", r.tau_hat},
         {"se_conditional", r.se_conditional},
         {"se_naive", r.se_naive},
         {"se_sandwich", r.se_sandwich},
         {"ci_lower", r.ci_lower},
         {"ci_upper", r.ci_upper},
         {"n_effective", {{"control", r.n_effective[0]}, {"treated", r.n_effective[1]}}}};
  return j;
}

struct EstimateArgs {
  std::string weights_path;
  std::string method = "kom";
  std::string compare;
  std::string se = "sandwich";
};

/// Reads an `id,w[,v]` file and aligns it to the dataset rows by id.
inline Vector read_weights_csv(const std::string& path, const Dataset& d) {
  std::ifstream f(path);
  if (!f) throw Error(ErrorCode::parse_error, "cannot open '" + path + "'");
  std::string line;
  if (!std::getline(f, line)) throw Error(ErrorCode::parse_error, "empty weights file");
  const auto header = detail::split_csv_line(line);
  std::optional<std::size_t> id_col, w_col;
  for (std::size_t j = 0; j < header.size(); ++j) {
    if (header[j] == "id") id_col = j;
    if (header[j] == "w") w_col = j;
  }
  if (!id_col) throw Error(ErrorCode::parse_error, "weights file: missing required column 'id'");
  if (!w_col) throw Error(ErrorCode::parse_error, "weights file: missing required column 'w'");
  std::map<std::string, double> by_id;
  std::size_t row = 1;
  while (std::getline(f, line)) {
    ++row;
    if (line.empty() || line == "\r") continue;
    const auto cells = detail::split_csv_line(line);
    if (cells.size() < header.size()) throw Error(ErrorCode::parse_error, "weights row " + std::to_string(row) + " is short");
    by_id[cells[*id_col]] = detail::parse_cell(cells[*w_col], "w", row);
  }
  Vector W(d.n());
  for (Eigen::Index i = 0; i < d.n(); ++i) {
    const auto it = by_id.find(d.ids[static_cast<std::size_t>(i)]);
    if (it == by_id.end())
      throw Error(ErrorCode::parse_error, "weights file has no row for id '" + d.ids[static_cast<std::size_t>(i)] + "'");
    W(i) = it->second;
  }
  return W;
}

inline SeChoice parse_se(const std::string& s) {
  if (s == "sandwich") return SeChoice::sandwich;
  if (s == "naive") return SeChoice::naive;
  if (s == "conditional") return SeChoice::conditional;
  throw Error(ErrorCode::invalid_argument, "--se expects sandwich, naive or conditional");
}

inline int cmd_estimate(const ModelArgs& a, const EstimateArgs& ea, std::ostream& out, std::ostream& err) {
  Dataset d;
  EstimandSpec spec;
  KomOptions opt;
  SeChoice se;
  try {
    d = load(a.input);
    spec = estimand_spec(a);
    opt = kom_options(a);
    se = parse_se(ea.se);
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return exit_code_for(e, Stage::data);
  }
  const std::string label(to_string(spec.kind));
  json j{{"schema_version", schema_version}, {"config", model_config(a, "estimate")}};
  j["config"]["method"] = ea.method;
  j["config"]["compare"] = ea.compare;
  j["config"]["se"] = ea.se;
  j["config"]["weights"] = ea.weights_path;
  j["estimand"] = label;

  if (!ea.weights_path.empty()) {
    try {
      const Vector W = read_weights_csv(ea.weights_path, d);
      j["report"] = report_json(estimate_report(W, d, label, "weights-file", std::nullopt, se));
      emit(a.output, out, j.dump(2) + "\n");
    } catch (const Error& e) {
      err << "error: " << e.what() << '\n';
      return exit_code_for(e, Stage::data);
    }
    return exit_ok;
  }

  std::vector<std::string> methods;
  if (ea.compare == "all") methods = {"kom", "ipw", "outcome-regression"};
  else if (!ea.compare.empty()) {
    std::stringstream ss(ea.compare);
    for (std::string m; std::getline(ss, m, ',');) methods.push_back(m);
  } else {
    methods = {ea.method};
  }

  std::optional<Vector> phi;
  auto propensity = [&]() -> const Vector& {
    if (!phi) phi = fit_treatment_model(d, a.propensity_degree).predict(d.X);
    return *phi;
  };
  std::optional<KomWeights> kom_w;
  auto kom_weights = [&]() -> const KomWeights& {
    if (!kom_w) {
      KomOptions o = opt;
      if (spec.needs_propensity() || spec.kind == EstimandKind::kosate) o.propensity = propensity();
      kom_w = solve_kom(d, spec, o);
    }
    return *kom_w;
  };

  json reports = json::array();
  int exit = exit_ok;
  for (const auto& m : methods) {
    try {
      if (m == "kom") {
        const KomWeights& w = kom_weights();
        auto r = estimate_report(w.W, d, label, "kom", std::array<double, 2>{w.hyper[0].sigma2, w.hyper[1].sigma2}, se);
        json rj = report_json(r);
        rj["diagnostics"] = weights_diagnostics(w, d);
        reports.push_back(rj);
      } else if (m == "ipw" || m == "overlap" || m == "truncated") {
        EstimandSpec s = spec;
        if (m == "overlap") s.kind = EstimandKind::owate;
        if (m == "truncated") s.kind = EstimandKind::osate;
        if (s.variable_v())
          throw Error(ErrorCode::invalid_argument, "no inverse-probability form for " + std::string(to_string(s.kind)));
        std::optional<Vector> psi;
        if (s.kind == EstimandKind::tate) psi = fit_sampling_model(d, a.propensity_degree).predict(d.X);
        const IpwWeights w = ipw_weights(s, propensity(), psi, d);
        const std::string name = s.kind == EstimandKind::owate ? "overlap" : s.kind == EstimandKind::osate ? "truncated" : "ipw";
        reports.push_back(report_json(estimate_report(w.W, d, std::string(to_string(s.kind)), name, std::nullopt, se)));
      } else if (m == "outcome-regression") {
        TargetWeights V = spec.variable_v() ? TargetWeights{kom_weights().V_used, Normalization::unit_mean}
                                            : fixed_target_weights(spec, d, spec.needs_propensity()
                                                                                ? std::optional<Vector>(propensity())
                                                                                : std::nullopt);
        const double tau = outcome_regression_estimate(d, 4, V);
        reports.push_back({{"method", "outcome-regression"}, {"estimand", label}, {"tau_hat", tau},
                           {"se_conditional", nullptr}, {"se_naive", nullptr}, {"se_sandwich", nullptr}});
      } else {
        throw Error(ErrorCode::invalid_argument, "unknown method '" + m + "'");
      }
    } catch (const LadderError& e) {
      err << "error: " << e.what() << '\n' << ladder_json(e.reports()).dump(2) << '\n';
      reports.push_back({{"method", m}, {"estimand", label}, {"error", e.what()}});
      exit = exit_solver;
    } catch (const Error& e) {
      err << "error: " << m << ": " << e.what() << '\n';
      reports.push_back({{"method", m}, {"estimand", label}, {"error", e.what()}});
      if (exit == exit_ok) exit = exit_code_for(e, Stage::solve);
    }
  }
  if (methods.size() == 1 && reports.size() == 1 && !reports[0].contains("error")) j["report"] = reports[0];
  j["reports"] = reports;
  emit(a.output, out, j.dump(2) + "\n");
  return exit;
}

// ---------------------------------------------------------------------------

struct SimulateArgs {
  std::vector<double> alphas = sim::default_alpha_grid();
  std::vector<double> gammas = sim::default_gamma_levels();
  long n = 400;
  int reps = 200;
  std::vector<std::string> methods;
  std::uint64_t seed = 20240501;
  unsigned jobs = 0;
  bool tune_once = false;
  std::string check;
  std::vector<long> n_grid{100, 200, 400, 800};
  std::string output;  // prefix
  std::string lambda = "gp_tuned";
};

inline unsigned default_jobs() {
  if (const char* env = std::getenv("KOM_JOBS")) {
    try {
      const long v = std::stol(env);
      if (v > 0) return static_cast<unsigned>(v);
    } catch (const std::exception&) {
    }
  }
  return sim::resolve_jobs(0);
}

inline json cell_json(const sim::CellSummary& c) {
  return json{{"n", c.scenario.n},
              {"alpha", c.scenario.alpha},
              {"gamma_mis", c.scenario.gamma_mis},
              {"method", sim::to_string(c.method)},
              {"tau", c.tau},
              {"ok", c.ok},
              {"failed", c.failed},
              {"fallbacks", c.fallbacks},
              {"mean_estimate", num(c.mean_estimate)},
              {"abs_bias", num(c.abs_bias)},
              {"rmse", num(c.rmse)},
              {"empirical_se", num(c.empirical_se)},
              {"mean_se_conditional", num(c.mean_se_conditional)},
              {"mean_se_naive", num(c.mean_se_naive)},
              {"mean_se_sandwich", num(c.mean_se_sandwich)},
              {"coverage_sandwich", num(c.coverage_sandwich)},
              {"coverage_naive", num(c.coverage_naive)},
              {"coverage_conditional", num(c.coverage_conditional)},
              {"mean_runtime", c.mean_runtime},
              {"mean_pi_min", c.mean_pi_min},
              {"mean_pi_max", c.mean_pi_max}};
}

inline int cmd_simulate(const SimulateArgs& a, std::ostream& out, std::ostream& err) {
  sim::SweepSettings st;
  sim::Scenario base;
  try {
    if (!a.methods.empty()) {
      st.methods.clear();
      for (const auto& m : a.methods) st.methods.push_back(sim::parse_method(m));
    }
    st.jobs = a.jobs > 0 ? a.jobs : default_jobs();
    st.tune_once = a.tune_once;
    st.method_settings.kom.lambda = parse_lambda(a.lambda);
    base.n = a.n;
    base.replicates = a.reps;
    base.seed = a.seed;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return exit_data;
  }

  json config{{"command", "simulate"}, {"alpha_grid", a.alphas}, {"gamma_levels", a.gammas}, {"n", a.n},
              {"reps", a.reps},         {"seed", a.seed},        {"jobs", st.jobs},          {"tune_once", a.tune_once},
              {"check", a.check},       {"lambda", a.lambda},    {"output", a.output}};
  json methods = json::array();
  for (auto m : st.methods) methods.push_back(sim::to_string(m));
  config["methods"] = methods;

  try {
    if (a.check == "consistency") {
      sim::Scenario s = base;
      s.alpha = 0.5;
      s.gamma_mis = 1.0;
      std::vector<Eigen::Index> ns(a.n_grid.begin(), a.n_grid.end());
      config["n_grid"] = a.n_grid;
      const auto method = a.methods.empty() ? sim::Method::kom_sate : st.methods.front();
      const auto r = sim::consistency_check(ns, s, method, st);
      json j{{"schema_version", schema_version}, {"config", config}, {"method", sim::to_string(method)},
             {"n", r.ns},                       {"rmse", r.rmse},   {"slope", num(r.slope)},
             {"band", {-0.65, -0.35}},          {"monotone", r.monotone}, {"pass", r.pass}};
      out << "consistency slope " << format_number(r.slope) << " band [-0.65, -0.35] " << (r.pass ? "PASS" : "FAIL")
          << '\n';
      if (!a.output.empty()) emit(a.output + ".json", out, j.dump(2) + "\n");
      return exit_ok;
    }
    if (!a.check.empty()) throw Error(ErrorCode::invalid_argument, "unknown --check '" + a.check + "'");

    const auto scenarios = sim::grid(a.alphas, a.gammas, base);
    const auto res = sim::run_sweep(scenarios, st);

    std::ostringstream summary, longf;
    sim::write_summary_csv(summary, res);
    sim::write_long_csv(longf, res);
    if (a.output.empty()) {
      out << summary.str();
    } else {
      emit(a.output + "_summary.csv", out, summary.str());
      emit(a.output + "_long.csv", out, longf.str());
      json j{{"schema_version", schema_version}, {"config", config}};
      j["cells"] = json::array();
      j["replicates"] = json::array();
      for (const auto& sc : res.scenarios) {
        for (const auto& c : sc.cells) j["cells"].push_back(cell_json(c));
        for (const auto& r : sc.replicates)
          for (const auto& rec : r.records)
            j["replicates"].push_back({{"n", sc.scenario.n},
                                       {"alpha", sc.scenario.alpha},
                                       {"gamma_mis", sc.scenario.gamma_mis},
                                       {"replicate", rec.replicate},
                                       {"method", sim::to_string(rec.method)},
                                       {"ok", rec.ok},
                                       {"error", rec.error},
                                       {"tau_hat", num(rec.tau_hat)},
                                       {"se_sandwich", rec.has_se ? num(rec.se_sandwich) : json(nullptr)},
                                       {"se_naive", rec.has_se ? num(rec.se_naive) : json(nullptr)},
                                       {"se_conditional", rec.has_se ? num(rec.se_conditional) : json(nullptr)},
                                       {"runtime", rec.runtime},
                                       {"fallbacks", rec.fallbacks},
                                       {"degree_used", rec.degree_used}});
      }
      emit(a.output + ".json", out, j.dump(2) + "\n");
    }
    for (const auto& sc : res.scenarios)
      for (const auto& c : sc.cells)
        if (c.ok == 0) {
          err << "error: every replicate failed for " << sim::to_string(c.method) << " at n=" << c.scenario.n
              << " alpha=" << c.scenario.alpha << " gamma=" << c.scenario.gamma_mis << '\n';
          return exit_simulation;
        }
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return exit_code_for(e, Stage::simulate);
  }
  return exit_ok;
}

// ---------------------------------------------------------------------------

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Kernel optimal matching weights for generalized average treatment effects", "kom"};
  app.footer(exit_help);
  app.set_config("--config", "", "TOML/INI file with option defaults (flags take precedence)");
  app.require_subcommand(1);

  ModelArgs tune_args, weights_args, estimate_args;
  std::string report_path;
  EstimateArgs ea;
  SimulateArgs sa;

  auto* tune_cmd = app.add_subcommand("tune", "tune kernel hyperparameters per arm by GP marginal likelihood");
  add_model_options(tune_cmd, tune_args, false);
  tune_cmd->add_option("--lambda-convention", tune_args.convention, "sigma2_over_gamma_sq | sigma2_over_gamma");

  auto* weights_cmd = app.add_subcommand("weights", "compute KOM weights; CSV id,w,v plus a diagnostics JSON");
  add_model_options(weights_cmd, weights_args, true);
  weights_cmd->add_option("--report", report_path, "diagnostics JSON path (default: stderr)");

  auto* estimate_cmd = app.add_subcommand("estimate", "estimate the effect with three standard errors");
  add_model_options(estimate_cmd, estimate_args, true);
  estimate_cmd->add_option("--weights", ea.weights_path, "use precomputed weights (CSV id,w)");
  estimate_cmd->add_option("--method", ea.method, "kom | ipw | overlap | truncated | outcome-regression");
  estimate_cmd->add_option("--compare", ea.compare, "'all' or a comma list of methods");
  estimate_cmd->add_option("--se", ea.se, "standard error behind the interval: sandwich | naive | conditional");

  auto* sim_cmd = app.add_subcommand("simulate", "run the simulation sweep");
  sim_cmd->add_option("--alpha-grid", sa.alphas, "positivity levels")->delimiter(',');
  sim_cmd->add_option("--gamma-levels", sa.gammas, "misspecification levels (1 = correct)")->delimiter(',');
  sim_cmd->add_option("--n", sa.n, "units per replicate");
  sim_cmd->add_option("--reps", sa.reps, "replicates per cell");
  sim_cmd->add_option("--methods", sa.methods,
                      "kom-sate, kom-kowate, kom-kosate, ipw, truncated, overlap, outcome-regression, dim")
      ->delimiter(',');
  sim_cmd->add_option("--seed", sa.seed, "base seed; replicate r uses stream r");
  sim_cmd->add_option("--jobs", sa.jobs, "worker threads (default: KOM_JOBS or logical cores)");
  sim_cmd->add_flag("--tune-once", sa.tune_once, "tune kernels on replicate 0 and reuse them");
  sim_cmd->add_option("--check", sa.check, "'consistency': log-RMSE slope over --n-grid");
  sim_cmd->add_option("--n-grid", sa.n_grid, "sample sizes for --check consistency")->delimiter(',');
  sim_cmd->add_option("--lambda", sa.lambda, "variance penalty: gp_tuned | zero | <value>");
  sim_cmd->add_option("-o,--output", sa.output, "output prefix: <prefix>_summary.csv, <prefix>_long.csv, <prefix>.json");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err);
  }

  if (*tune_cmd) return cmd_tune(tune_args, out, err);
  if (*weights_cmd) return cmd_weights(weights_args, report_path, out, err);
  if (*estimate_cmd) return cmd_estimate(estimate_args, ea, out, err);
  if (*sim_cmd) return cmd_simulate(sa, out, err);
  return exit_ok;
}

}  // namespace kom::cli
