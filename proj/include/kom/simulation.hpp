#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <ostream>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "kom/baselines.hpp"
#include "kom/core_model.hpp"
#include "kom/error.hpp"
#include "kom/estimate.hpp"
#include "kom/kom.hpp"
#include "kom/rng.hpp"

namespace kom::sim {

struct Scenario {
  Eigen::Index n = 400;
  double alpha = 0.1;      // positivity strength, 0 = randomized
  double gamma_mis = 1.0;  // 1 = covariates observed as generated
  double delta = 4.0;
  std::uint64_t seed = 20240501;
  int replicates = 200;

  void check() const {
    if (n < 20) throw Error(ErrorCode::invalid_argument, "scenario needs n >= 20");
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw Error(ErrorCode::invalid_argument, "alpha must lie in [0, 1]");
    if (!(gamma_mis >= 0.0 && gamma_mis <= 1.0)) throw Error(ErrorCode::invalid_argument, "gamma must lie in [0, 1]");
    if (replicates < 1) throw Error(ErrorCode::invalid_argument, "replicates must be >= 1");
  }
};

struct Simulated {
  Dataset data;  // observed covariates
  Matrix X_true;
  Vector pi;
  Vector Y0;
  Vector Y1;
  double tau = 0.0;  // constant effect, so every target weighting gives delta
};

inline double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

/// (gamma X1 + (1-gamma) Z1, gamma X2 + (1-gamma) Z2) with Z1 = X2/exp(X1) and
/// Z2 = log|X2|.
inline Matrix misspecify(const Matrix& X, double gamma) {
  if (X.cols() != 2) throw Error(ErrorCode::dimension_mismatch, "misspecify expects two covariates");
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw Error(ErrorCode::invalid_argument, "gamma must lie in [0, 1]");
  Matrix out(X.rows(), 2);
  for (Eigen::Index i = 0; i < X.rows(); ++i) {
    const double x1 = X(i, 0), x2 = X(i, 1);
    const double z1 = x2 / std::exp(x1);
    const double z2 = std::log(std::max(std::abs(x2), 1e-300));
    out(i, 0) = gamma * x1 + (1.0 - gamma) * z1;
    out(i, 1) = gamma * x2 + (1.0 - gamma) * z2;
  }
  return out;
}

inline Simulated generate(const Scenario& s, std::uint64_t replicate) {
  s.check();
  Rng rng = Rng::stream(s.seed, replicate);
  const Eigen::Index n = s.n;
  Simulated out;
  out.X_true.resize(n, 2);
  out.pi.resize(n);
  out.Y0.resize(n);
  out.Y1.resize(n);
  Dataset& d = out.data;
  d.T.resize(n);
  d.S = Vector::Ones(n);
  d.Y.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double x1 = rng.normal(0.5, 1.0);
    const double x2 = rng.normal(0.5, 1.0);
    out.X_true(i, 0) = x1;
    out.X_true(i, 1) = x2;
    out.pi(i) = logistic(s.alpha * (-1.5 + 1.5 * x1 + 1.5 * x2));
    d.T(i) = rng.bernoulli(out.pi(i)) ? 1.0 : 0.0;
    out.Y0(i) = 3.0 * (x1 + x2) + rng.normal();
    out.Y1(i) = out.Y0(i) + s.delta;
    d.Y(i) = d.T(i) == 1.0 ? out.Y1(i) : out.Y0(i);
  }
  d.X = s.gamma_mis == 1.0 ? out.X_true : misspecify(out.X_true, s.gamma_mis);
  d.ids.resize(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) d.ids[static_cast<std::size_t>(i)] = std::to_string(i + 1);
  out.tau = s.delta;
  return out;
}

// ---------------------------------------------------------------------------

enum class Method {
  kom_sate,
  kom_kowate,
  kom_kosate,
  ipw_sate,
  osate_truncated,
  owate_overlap,
  outcome_regression,
  difference_in_means,
};

inline std::string_view to_string(Method m) {
  switch (m) {
    case Method::kom_sate: return "KOM-SATE";
    case Method::kom_kowate: return "KOM-KOWATE";
    case Method::kom_kosate: return "KOM-KOSATE";
    case Method::ipw_sate: return "IPW-SATE";
    case Method::osate_truncated: return "OSATE-truncated";
    case Method::owate_overlap: return "OWATE-overlap";
    case Method::outcome_regression: return "outcome-regression";
    case Method::difference_in_means: return "difference-in-means";
  }
  return "?";
}

inline std::vector<Method> default_methods() {
  return {Method::kom_sate,        Method::kom_kowate,    Method::kom_kosate,        Method::ipw_sate,
          Method::osate_truncated, Method::owate_overlap, Method::outcome_regression};
}

inline Method parse_method(std::string_view s) {
  std::string k(s);
  for (auto& c : k) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  if (k == "kom-sate" || k == "kom") return Method::kom_sate;
  if (k == "kom-kowate" || k == "kowate") return Method::kom_kowate;
  if (k == "kom-kosate" || k == "kosate") return Method::kom_kosate;
  if (k == "ipw-sate" || k == "ipw") return Method::ipw_sate;
  if (k == "osate-truncated" || k == "truncated" || k == "osate") return Method::osate_truncated;
  if (k == "owate-overlap" || k == "overlap" || k == "owate") return Method::owate_overlap;
  if (k == "outcome-regression" || k == "or" || k == "regression") return Method::outcome_regression;
  if (k == "difference-in-means" || k == "dim") return Method::difference_in_means;
  throw Error(ErrorCode::invalid_argument, "unknown method '" + std::string(s) + "'");
}

inline bool is_kom(Method m) {
  return m == Method::kom_sate || m == Method::kom_kowate || m == Method::kom_kosate;
}

struct MethodSettings {
  KomOptions kom;
  int propensity_degree = 4;
  int outcome_degree = 4;
  double truncation_alpha = 0.1;
};

struct ReplicateRecord {
  std::uint64_t replicate = 0;
  Method method = Method::kom_sate;
  bool ok = false;
  std::string error;
  double tau_hat = std::numeric_limits<double>::quiet_NaN();
  bool has_se = false;
  double se_conditional = 0.0;
  double se_naive = 0.0;
  double se_sandwich = 0.0;
  double runtime = 0.0;  // seconds
  int fallbacks = 0;
  int degree_used = 0;
};

struct ReplicateOutcome {
  std::vector<ReplicateRecord> records;  // one per method, roster order
  double pi_min = 0.0, pi_max = 0.0;          // true propensities
  double phi_hat_min = std::numeric_limits<double>::quiet_NaN();
  double phi_hat_max = std::numeric_limits<double>::quiet_NaN();
};

namespace detail {

inline EstimateReport kom_report(const Dataset& d, EstimandKind kind, const MethodSettings& ms, const Vector& phi,
                                 ReplicateRecord& rec) {
  KomOptions opt = ms.kom;
  opt.propensity = phi;
  EstimandSpec spec{kind, ms.truncation_alpha, 0};
  const KomWeights w = solve_kom(d, spec, opt);
  rec.fallbacks = w.fallbacks;
  rec.degree_used = w.degree_used;
  std::optional<std::array<double, 2>> s2;
  if (opt.lambda.kind == LambdaPolicyKind::gp_tuned || opt.tune_kernel || opt.hyper)
    s2 = std::array<double, 2>{w.hyper[0].sigma2, w.hyper[1].sigma2};
  return estimate_report(w.W, d, std::string(to_string(kind)), "kom", s2);
}

inline EstimateReport ipw_report(const Dataset& d, EstimandKind kind, const MethodSettings& ms, const Vector& phi) {
  EstimandSpec spec{kind, ms.truncation_alpha, 0};
  const IpwWeights w = ipw_weights(spec, phi, std::nullopt, d);
  return estimate_report(w.W, d, std::string(to_string(kind)), "ipw");
}

}  // namespace detail

/// Runs every method on one dataset. Failures are recorded, not thrown.
/// `cache` carries tuned kernel hyperparameters shared by the KOM methods.
inline ReplicateOutcome run_methods(const Simulated& sim, std::uint64_t replicate, const std::vector<Method>& methods,
                                    const MethodSettings& ms, HyperCache cache = {}) {
  ReplicateOutcome out;
  out.pi_min = sim.pi.minCoeff();
  out.pi_max = sim.pi.maxCoeff();
  const Dataset& d = sim.data;

  std::optional<Vector> phi;
  std::string phi_error;
  auto need_phi = [&]() -> const Vector& {
    if (!phi && phi_error.empty()) {
      try {
        phi = fit_treatment_model(d, ms.propensity_degree).predict(d.X);
        out.phi_hat_min = phi->minCoeff();
        out.phi_hat_max = phi->maxCoeff();
      } catch (const Error& e) {
        phi_error = e.what();
      }
    }
    if (!phi) throw Error(ErrorCode::single_class, phi_error);
    return *phi;
  };

  MethodSettings local = ms;
  local.kom.cache = &cache;
  for (const Method m : methods) {
    ReplicateRecord rec;
    rec.replicate = replicate;
    rec.method = m;
    const auto start = std::chrono::steady_clock::now();
    try {
      std::optional<EstimateReport> rep;
      switch (m) {
        case Method::kom_sate:
          rep = detail::kom_report(d, EstimandKind::sate, local, need_phi(), rec);
          break;
        case Method::kom_kowate:
          rep = detail::kom_report(d, EstimandKind::kowate, local, need_phi(), rec);
          break;
        case Method::kom_kosate:
          rep = detail::kom_report(d, EstimandKind::kosate, local, need_phi(), rec);
          break;
        case Method::ipw_sate:
          rep = detail::ipw_report(d, EstimandKind::sate, ms, need_phi());
          break;
        case Method::osate_truncated:
          rep = detail::ipw_report(d, EstimandKind::osate, ms, need_phi());
          break;
        case Method::owate_overlap:
          rep = detail::ipw_report(d, EstimandKind::owate, ms, need_phi());
          break;
        case Method::outcome_regression: {
          const TargetWeights V = fixed_target_weights(EstimandSpec{EstimandKind::sate}, d);
          rec.tau_hat = outcome_regression_estimate(d, ms.outcome_degree, V);
          break;
        }
        case Method::difference_in_means: {
          const auto roles = count_roles(d.T, d.S);
          Vector W = Vector::Zero(d.n());
          for (Eigen::Index i = 0; i < d.n(); ++i)
            if (d.in_study(i))
              W(i) = static_cast<double>(d.n()) / static_cast<double>(d.T(i) == 1.0 ? roles.treated : roles.control);
          rep = estimate_report(W, d, "sate", "difference-in-means");
          break;
        }
      }
      if (rep) {
        rec.tau_hat = rep->tau_hat;
        rec.has_se = true;
        rec.se_conditional = rep->se_conditional;
        rec.se_naive = rep->se_naive;
        rec.se_sandwich = rep->se_sandwich;
      }
      rec.ok = std::isfinite(rec.tau_hat);
      if (!rec.ok) rec.error = "non-finite estimate";
    } catch (const std::exception& e) {
      rec.ok = false;
      rec.error = e.what();
    }
    rec.runtime = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    out.records.push_back(std::move(rec));
  }
  return out;
}

// ---------------------------------------------------------------------------

struct CellSummary {
  Scenario scenario;
  Method method = Method::kom_sate;
  double tau = 0.0;
  int ok = 0;
  int failed = 0;
  int fallbacks = 0;  // replicates that left the first kernel rung
  double mean_estimate = std::numeric_limits<double>::quiet_NaN();
  double abs_bias = std::numeric_limits<double>::quiet_NaN();
  double rmse = std::numeric_limits<double>::quiet_NaN();
  double empirical_se = std::numeric_limits<double>::quiet_NaN();
  bool has_se = false;
  double mean_se_conditional = std::numeric_limits<double>::quiet_NaN();
  double mean_se_naive = std::numeric_limits<double>::quiet_NaN();
  double mean_se_sandwich = std::numeric_limits<double>::quiet_NaN();
  double coverage_sandwich = std::numeric_limits<double>::quiet_NaN();
  double coverage_naive = std::numeric_limits<double>::quiet_NaN();
  double coverage_conditional = std::numeric_limits<double>::quiet_NaN();
  double mean_runtime = 0.0;
  double mean_pi_min = 0.0, mean_pi_max = 0.0;
  double median_phi_hat_min = std::numeric_limits<double>::quiet_NaN();
  double median_phi_hat_max = std::numeric_limits<double>::quiet_NaN();
};

struct ScenarioResult {
  Scenario scenario;
  std::vector<ReplicateOutcome> replicates;  // by replicate index
  std::vector<CellSummary> cells;            // by method
};

struct SweepSettings {
  std::vector<Method> methods = default_methods();
  MethodSettings method_settings;
  unsigned jobs = 0;  // 0 = hardware concurrency
  bool tune_once = false;
};

struct SweepResult {
  std::vector<ScenarioResult> scenarios;
};

inline double median(std::vector<double> v) {
  v.erase(std::remove_if(v.begin(), v.end(), [](double x) { return !std::isfinite(x); }), v.end());
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

/// Aggregates in replicate order so the reduction is independent of threading.
inline CellSummary summarize(const Scenario& s, Method m, std::size_t method_index,
                             const std::vector<ReplicateOutcome>& reps, double tau) {
  CellSummary c;
  c.scenario = s;
  c.method = m;
  c.tau = tau;
  std::vector<double> est, pmin, pmax;
  double se_c = 0, se_n = 0, se_s = 0, cov_c = 0, cov_n = 0, cov_s = 0, runtime = 0;
  int with_se = 0;
  for (const auto& r : reps) {
    const auto& rec = r.records[method_index];
    c.mean_pi_min += r.pi_min / static_cast<double>(reps.size());
    c.mean_pi_max += r.pi_max / static_cast<double>(reps.size());
    pmin.push_back(r.phi_hat_min);
    pmax.push_back(r.phi_hat_max);
    runtime += rec.runtime;
    if (!rec.ok) {
      ++c.failed;
      continue;
    }
    ++c.ok;
    if (rec.fallbacks > 0) ++c.fallbacks;
    est.push_back(rec.tau_hat);
    if (rec.has_se) {
      ++with_se;
      se_c += rec.se_conditional;
      se_n += rec.se_naive;
      se_s += rec.se_sandwich;
      auto covers = [&](double se) { return std::abs(rec.tau_hat - tau) <= z975 * se ? 1.0 : 0.0; };
      cov_c += covers(rec.se_conditional);
      cov_n += covers(rec.se_naive);
      cov_s += covers(rec.se_sandwich);
    }
  }
  c.mean_runtime = reps.empty() ? 0.0 : runtime / static_cast<double>(reps.size());
  c.median_phi_hat_min = median(pmin);
  c.median_phi_hat_max = median(pmax);
  if (!est.empty()) {
    const double r = static_cast<double>(est.size());
    double mean = 0.0;
    for (double e : est) mean += e;
    mean /= r;
    double ss = 0.0, sq = 0.0;
    for (double e : est) {
      ss += (e - mean) * (e - mean);
      sq += (e - tau) * (e - tau);
    }
    c.mean_estimate = mean;
    c.abs_bias = std::abs(mean - tau);
    c.rmse = std::sqrt(sq / r);
    c.empirical_se = est.size() > 1 ? std::sqrt(ss / (r - 1.0)) : 0.0;
  }
  if (with_se > 0) {
    const double w = static_cast<double>(with_se);
    c.has_se = true;
    c.mean_se_conditional = se_c / w;
    c.mean_se_naive = se_n / w;
    c.mean_se_sandwich = se_s / w;
    c.coverage_conditional = cov_c / w;
    c.coverage_naive = cov_n / w;
    c.coverage_sandwich = cov_s / w;
  }
  return c;
}

/// Kernel hyperparameters tuned on replicate 0 for the first ladder rung.
inline HyperCache tune_on_first_replicate(const Scenario& s, const MethodSettings& ms) {
  HyperCache cache;
  const Simulated sim = generate(s, 0);
  const auto& ladder = ms.kom.ladder;
  if (ladder.empty()) return cache;
  const KernelRung rung = ladder.front();
  const Standardizer st = Standardizer::fit(sim.data.X);
  std::array<GPHyperparams, 2> h;
  for (int arm = 0; arm < 2; ++arm)
    h[static_cast<std::size_t>(arm)] = tune(sim.data, arm, rung.family, rung.degree, st, ms.kom.tune_options);
  cache[{static_cast<int>(rung.family), rung.degree}] = h;
  return cache;
}

inline unsigned resolve_jobs(unsigned jobs) {
  if (jobs > 0) return jobs;
  const unsigned hw = std::thread::hardware_concurrency();
  return hw > 0 ? hw : 1;
}

inline ScenarioResult run_scenario(const Scenario& s, const SweepSettings& settings) {
  s.check();
  ScenarioResult res;
  res.scenario = s;
  res.replicates.resize(static_cast<std::size_t>(s.replicates));

  HyperCache shared;
  const bool any_kom = std::any_of(settings.methods.begin(), settings.methods.end(), is_kom);
  if (settings.tune_once && any_kom && settings.method_settings.kom.tune_kernel && !settings.method_settings.kom.hyper) {
    try {
      shared = tune_on_first_replicate(s, settings.method_settings);
    } catch (const Error&) {
      // every replicate then tunes for itself
    }
  }

  std::atomic<int> next{0};
  auto worker = [&]() {
    for (int r = next++; r < s.replicates; r = next++) {
      const auto rep = static_cast<std::uint64_t>(r);
      const Simulated sim = generate(s, rep);
      res.replicates[static_cast<std::size_t>(r)] = run_methods(sim, rep, settings.methods, settings.method_settings, shared);
    }
  };
  const unsigned jobs = std::min<unsigned>(resolve_jobs(settings.jobs), static_cast<unsigned>(s.replicates));
  if (jobs <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (unsigned j = 0; j < jobs; ++j) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (std::size_t k = 0; k < settings.methods.size(); ++k)
    res.cells.push_back(summarize(s, settings.methods[k], k, res.replicates, s.delta));
  return res;
}

inline SweepResult run_sweep(const std::vector<Scenario>& scenarios, const SweepSettings& settings) {
  SweepResult out;
  for (const auto& s : scenarios) out.scenarios.push_back(run_scenario(s, settings));
  return out;
}

/// Cartesian product of positivity and misspecification levels.
inline std::vector<Scenario> grid(const std::vector<double>& alphas, const std::vector<double>& gammas,
                                  const Scenario& base) {
  std::vector<Scenario> out;
  for (double g : gammas)
    for (double a : alphas) {
      Scenario s = base;
      s.alpha = a;
      s.gamma_mis = g;
      out.push_back(s);
    }
  return out;
}

inline std::vector<double> default_alpha_grid() { return {0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0}; }
inline std::vector<double> default_gamma_levels() { return {1.0, 0.5, 0.0}; }

// ---------------------------------------------------------------------------

struct ConsistencyResult {
  std::vector<Eigen::Index> ns;
  std::vector<double> rmse;
  double slope = std::numeric_limits<double>::quiet_NaN();
  bool monotone = false;
  bool pass = false;  // slope in [lo, hi]
};

/// Least-squares slope of y on x.
inline double ls_slope(const std::vector<double>& x, const std::vector<double>& y) {
  const double m = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i] / m;
    my += y[i] / m;
  }
  double sxy = 0, sxx = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
  }
  return sxy / sxx;
}

inline ConsistencyResult consistency_check(const std::vector<Eigen::Index>& ns, Scenario base, Method method,
                                           SweepSettings settings, double lo = -0.65, double hi = -0.35) {
  settings.methods = {method};
  ConsistencyResult out;
  std::vector<double> lx, ly;
  for (const auto n : ns) {
    base.n = n;
    const auto res = run_scenario(base, settings);
    const double r = res.cells.front().rmse;
    out.ns.push_back(n);
    out.rmse.push_back(r);
    lx.push_back(std::log(static_cast<double>(n)));
    ly.push_back(std::log(r));
  }
  out.slope = ls_slope(lx, ly);
  out.monotone = true;
  for (std::size_t i = 1; i < out.rmse.size(); ++i) out.monotone = out.monotone && out.rmse[i] < out.rmse[i - 1];
  out.pass = out.slope >= lo && out.slope <= hi;
  return out;
}

// ---------------------------------------------------------------------------
// CSV output. Numbers use the shortest representation that round-trips.

inline std::string fmt(double x) { return format_number(x); }

inline void write_summary_csv(std::ostream& os, const SweepResult& res) {
  os << "n,alpha,gamma_mis,delta,replicates,method,ok,failed,fallbacks,mean_estimate,abs_bias,rmse,empirical_se,"
        "mean_se_conditional,mean_se_naive,mean_se_sandwich,coverage_sandwich,coverage_naive,coverage_conditional,"
        "mean_runtime,mean_pi_min,mean_pi_max,median_phi_hat_min,median_phi_hat_max\n";
  for (const auto& sc : res.scenarios)
    for (const auto& c : sc.cells) {
      const auto& s = c.scenario;
      os << s.n << ',' << fmt(s.alpha) << ',' << fmt(s.gamma_mis) << ',' << fmt(s.delta) << ',' << s.replicates << ','
         << to_string(c.method) << ',' << c.ok << ',' << c.failed << ',' << c.fallbacks << ',' << fmt(c.mean_estimate)
         << ',' << fmt(c.abs_bias) << ',' << fmt(c.rmse) << ',' << fmt(c.empirical_se) << ','
         << fmt(c.mean_se_conditional) << ',' << fmt(c.mean_se_naive) << ',' << fmt(c.mean_se_sandwich) << ','
         << fmt(c.coverage_sandwich) << ',' << fmt(c.coverage_naive) << ',' << fmt(c.coverage_conditional) << ','
         << fmt(c.mean_runtime) << ',' << fmt(c.mean_pi_min) << ',' << fmt(c.mean_pi_max) << ','
         << fmt(c.median_phi_hat_min) << ',' << fmt(c.median_phi_hat_max) << '\n';
    }
}

/// Long format (scenario, method, metric, value) for plotting; metrics that do
/// not apply to a method are omitted rather than written as NaN.
inline void write_long_csv(std::ostream& os, const SweepResult& res) {
  os << "n,alpha,gamma_mis,method,metric,value\n";
  for (const auto& sc : res.scenarios)
    for (const auto& c : sc.cells) {
      const auto& s = c.scenario;
      auto row = [&](std::string_view metric, double v) {
        if (std::isnan(v)) return;
        os << s.n << ',' << fmt(s.alpha) << ',' << fmt(s.gamma_mis) << ',' << to_string(c.method) << ',' << metric
           << ',' << fmt(v) << '\n';
      };
      row("abs_bias", c.abs_bias);
      row("rmse", c.rmse);
      row("empirical_se", c.empirical_se);
      row("mean_se_sandwich", c.mean_se_sandwich);
      row("coverage_sandwich", c.coverage_sandwich);
      row("mean_runtime", c.mean_runtime);
      row("failed", c.failed);
    }
}

}  // namespace kom::sim
