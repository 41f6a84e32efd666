#pragma once

#include <array>
#include <cmath>
#include <optional>
#include <string>

#include "kom/core_model.hpp"
#include "kom/error.hpp"
#include "kom/linalg.hpp"

namespace kom {

namespace detail {

inline void check_weights(const Vector& W, const Dataset& d, double rel_tol = 1e-4) {
  if (W.size() != d.n()) throw Error(ErrorCode::dimension_mismatch, "weight vector length differs from n");
  const double n = static_cast<double>(d.n());
  std::array<double, 2> sums{0.0, 0.0};
  for (Eigen::Index i = 0; i < d.n(); ++i) {
    if (!std::isfinite(W(i))) throw Error(ErrorCode::non_finite_value, "weight " + std::to_string(i) + " is not finite");
    if (!d.in_study(i)) {
      if (std::abs(W(i)) > rel_tol * n)
        throw Error(ErrorCode::weight_constraint_violated, "nonzero weight on row " + std::to_string(i) + " outside the study");
      continue;
    }
    if (W(i) < -rel_tol * n)
      throw Error(ErrorCode::weight_constraint_violated, "negative weight on row " + std::to_string(i));
    sums[d.T(i) == 1.0 ? 1 : 0] += W(i);
  }
  for (int t = 0; t < 2; ++t)
    if (std::abs(sums[static_cast<std::size_t>(t)] - n) > rel_tol * n)
      throw Error(ErrorCode::weight_constraint_violated,
                  "arm " + std::to_string(t) + " weights sum to " + std::to_string(sums[static_cast<std::size_t>(t)]) +
                      ", expected " + std::to_string(d.n()));
}

}  // namespace detail

/// (1/n) sum over study units of W_i (+Y_i if treated, -Y_i if control).
inline double weighted_estimate(const Vector& W, const Dataset& d) {
  detail::check_weights(W, d);
  double acc = 0.0;
  for (Eigen::Index i = 0; i < d.n(); ++i)
    if (d.in_study(i)) acc += (d.T(i) == 1.0 ? 1.0 : -1.0) * W(i) * d.Y(i);
  return acc / static_cast<double>(d.n());
}

struct WlsFit {
  double tau_hat = 0.0;
  double intercept = 0.0;
  double se_naive = 0.0;
  double se_sandwich = 0.0;
};

/// Weighted least squares of Y on (1, T) over the study units.
inline WlsFit wls_sandwich(const Vector& W, const Dataset& d) {
  detail::check_weights(W, d);
  Eigen::Matrix2d XtWX = Eigen::Matrix2d::Zero();
  Eigen::Vector2d XtWy = Eigen::Vector2d::Zero();
  Eigen::Index positive = 0;
  for (Eigen::Index i = 0; i < d.n(); ++i) {
    if (!d.in_study(i) || !(W(i) > 0.0)) continue;
    ++positive;
    const Eigen::Vector2d x(1.0, d.T(i));
    XtWX += W(i) * x * x.transpose();
    XtWy += W(i) * d.Y(i) * x;
  }
  const Eigen::Matrix2d bread = XtWX.inverse();
  const Eigen::Vector2d beta = bread * XtWy;

  Eigen::Matrix2d meat = Eigen::Matrix2d::Zero();
  double weighted_ss = 0.0;
  for (Eigen::Index i = 0; i < d.n(); ++i) {
    if (!d.in_study(i) || !(W(i) > 0.0)) continue;
    const Eigen::Vector2d x(1.0, d.T(i));
    const double e = d.Y(i) - x.dot(beta);
    meat += (W(i) * e) * (W(i) * e) * x * x.transpose();
    weighted_ss += W(i) * e * e;
  }
  WlsFit f;
  f.intercept = beta(0);
  f.tau_hat = beta(1);
  const double df = static_cast<double>(positive - 2);
  const double s2 = df > 0 ? weighted_ss / df : 0.0;
  f.se_naive = std::sqrt(std::max(0.0, s2 * bread(1, 1)));
  const Eigen::Matrix2d V = bread * meat * bread;
  f.se_sandwich = std::sqrt(std::max(0.0, V(1, 1)));
  return f;
}

/// sqrt((1/n^2) sum S_i W_i^2 sigma^2_{T_i}).
inline double conditional_se(const Vector& W, double sigma2_control, double sigma2_treated, const Vector& S,
                             const Vector& T) {
  if (W.size() != S.size() || W.size() != T.size())
    throw Error(ErrorCode::dimension_mismatch, "conditional_se: sizes disagree");
  if (sigma2_control < 0.0 || sigma2_treated < 0.0) throw Error(ErrorCode::invalid_argument, "sigma2 must be >= 0");
  const double n = static_cast<double>(W.size());
  double acc = 0.0;
  for (Eigen::Index i = 0; i < W.size(); ++i)
    if (S(i) == 1.0) acc += W(i) * W(i) * (T(i) == 1.0 ? sigma2_treated : sigma2_control);
  return std::sqrt(acc / (n * n));
}

/// Residual variance around the arm mean; the plug-in used when no tuned
/// noise variance is available.
inline std::array<double, 2> residual_variance_by_arm(const Dataset& d) {
  std::array<double, 2> out{0.0, 0.0};
  for (int t = 0; t < 2; ++t) {
    double sum = 0.0, sq = 0.0;
    Eigen::Index m = 0;
    for (Eigen::Index i = 0; i < d.n(); ++i)
      if (d.in_arm(i, t)) {
        sum += d.Y(i);
        ++m;
      }
    if (m < 2) continue;
    const double mean = sum / static_cast<double>(m);
    for (Eigen::Index i = 0; i < d.n(); ++i)
      if (d.in_arm(i, t)) sq += (d.Y(i) - mean) * (d.Y(i) - mean);
    out[static_cast<std::size_t>(t)] = sq / static_cast<double>(m - 1);
  }
  return out;
}

inline std::array<double, 2> effective_sample_sizes(const Vector& W, const Dataset& d) {
  std::array<double, 2> out{0.0, 0.0};
  for (int t = 0; t < 2; ++t) {
    double s = 0.0, s2 = 0.0;
    for (Eigen::Index i = 0; i < d.n(); ++i)
      if (d.in_arm(i, t)) {
        s += W(i);
        s2 += W(i) * W(i);
      }
    out[static_cast<std::size_t>(t)] = s2 > 0.0 ? s * s / s2 : 0.0;
  }
  return out;
}

enum class SeChoice { sandwich, naive, conditional };

struct KomDiagnostics {
  double delta1_sq = 0.0;
  double delta0_sq = 0.0;
  double objective = 0.0;
  double variance_penalty = 0.0;
  int degree_used = 0;
};

struct EstimateReport {
  std::string estimand;
  std::string method;
  double tau_hat = 0.0;
  double se_conditional = 0.0;
  double se_naive = 0.0;
  double se_sandwich = 0.0;
  double ci_lower = 0.0;
  double ci_upper = 0.0;
  std::array<double, 2> n_effective{0.0, 0.0};  // [control, treated]
  std::optional<KomDiagnostics> kom;
};

inline constexpr double z975 = 1.959963984540054;

/// Point estimate, all three standard errors and a 95% Wald interval on the
/// chosen one. `sigma2` is [control, treated]; the residual plug-in is used
/// when it is absent.
inline EstimateReport estimate_report(const Vector& W, const Dataset& d, std::string estimand, std::string method,
                                      const std::optional<std::array<double, 2>>& sigma2 = std::nullopt,
                                      SeChoice choice = SeChoice::sandwich) {
  EstimateReport r;
  r.estimand = std::move(estimand);
  r.method = std::move(method);
  r.tau_hat = weighted_estimate(W, d);
  const WlsFit f = wls_sandwich(W, d);
  r.se_naive = f.se_naive;
  r.se_sandwich = f.se_sandwich;
  const auto s2 = sigma2 ? *sigma2 : residual_variance_by_arm(d);
  r.se_conditional = conditional_se(W, s2[0], s2[1], d.S, d.T);
  const double se = choice == SeChoice::sandwich ? r.se_sandwich
                    : choice == SeChoice::naive  ? r.se_naive
                                                 : r.se_conditional;
  r.ci_lower = r.tau_hat - z975 * se;
  r.ci_upper = r.tau_hat + z975 * se;
  r.n_effective = effective_sample_sizes(W, d);
  return r;
}

}  // namespace kom
