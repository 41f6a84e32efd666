#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <limits>
#include <numbers>
#include <vector>

#include "kom/core_model.hpp"
#include "kom/error.hpp"
#include "kom/kernels.hpp"
#include "kom/linalg.hpp"

namespace kom {

struct GPHyperparams {
  double gamma = 1.0;
  double theta = 1.0;
  double sigma2 = 1.0;
  double lml = 0.0;
  int arm = 1;
  double outcome_mean = 0.0;  // removed before fitting, kept for diagnostics
  int evaluations = 0;
  Eigen::Index units_used = 0;
};

enum class LambdaConvention {
  sigma2_over_gamma_sq,  // lambda = sigma^2 / gamma^2 (default)
  sigma2_over_gamma,     // lambda = sigma^2 / gamma
};

inline double lambda_from(const GPHyperparams& h,
                          LambdaConvention convention = LambdaConvention::sigma2_over_gamma_sq) {
  return convention == LambdaConvention::sigma2_over_gamma_sq ? h.sigma2 / (h.gamma * h.gamma)
                                                              : h.sigma2 / h.gamma;
}

/// GP log evidence of y under N(0, K + sigma2 I).
inline double log_marginal_likelihood(const Matrix& K, const Vector& y, double sigma2) {
  if (K.rows() != K.cols() || K.rows() != y.size())
    throw Error(ErrorCode::dimension_mismatch, "log_marginal_likelihood: K and y disagree");
  if (!(sigma2 > 0.0)) throw Error(ErrorCode::invalid_argument, "noise variance must be positive");
  Matrix A = K;
  A.diagonal().array() += sigma2;
  const auto f = linalg::cholesky(A, 1e-8 * std::max(1.0, A.diagonal().mean()));
  const Vector alpha = f.solve_lower(y);
  const double m = static_cast<double>(y.size());
  return -0.5 * alpha.squaredNorm() - 0.5 * f.log_det() - 0.5 * m * std::log(2.0 * std::numbers::pi);
}

inline double log_marginal_likelihood(const GramMatrix& K, const Vector& y, double sigma2) {
  return log_marginal_likelihood(K.K, y, sigma2);
}

struct TuneOptions {
  Eigen::Index subsample_cap = 500;
  int grid_points = 7;        // per dimension
  double grid_span = 1e3;     // grid covers anchor * [1/span, span]
  int max_evaluations = 500;  // Nelder-Mead budget after the grid
};

namespace detail {

/// Bounded Nelder-Mead on a box; points are clamped into the box.
struct NelderMead {
  using Point = std::array<double, 3>;
  std::function<double(const Point&)> f;
  Point lo, hi;
  int budget = 500;
  int used = 0;

  Point clamp(Point x) const {
    for (std::size_t k = 0; k < 3; ++k) x[k] = std::clamp(x[k], lo[k], hi[k]);
    return x;
  }

  double eval(const Point& x) {
    ++used;
    return f(x);
  }

  std::pair<Point, double> run(Point start, double fstart, double step) {
    std::array<Point, 4> s;
    std::array<double, 4> fv;
    s[0] = clamp(start);
    fv[0] = fstart;
    for (std::size_t k = 0; k < 3; ++k) {
      Point p = s[0];
      p[k] += (p[k] + step <= hi[k]) ? step : -step;
      s[k + 1] = clamp(p);
      fv[k + 1] = eval(s[k + 1]);
    }

    while (used < budget) {
      std::array<std::size_t, 4> idx{0, 1, 2, 3};
      std::sort(idx.begin(), idx.end(), [&](auto a, auto b) { return fv[a] < fv[b]; });
      std::array<Point, 4> s2;
      std::array<double, 4> f2;
      for (std::size_t k = 0; k < 4; ++k) {
        s2[k] = s[idx[k]];
        f2[k] = fv[idx[k]];
      }
      s = s2;
      fv = f2;

      double diameter = 0.0;
      for (std::size_t k = 1; k < 4; ++k)
        for (std::size_t j = 0; j < 3; ++j) diameter = std::max(diameter, std::abs(s[k][j] - s[0][j]));
      if (std::abs(fv[3] - fv[0]) <= 1e-10 * (1.0 + std::abs(fv[0])) && diameter < 1e-6) break;

      Point centroid{0, 0, 0};
      for (std::size_t k = 0; k < 3; ++k)
        for (std::size_t j = 0; j < 3; ++j) centroid[j] += s[k][j] / 3.0;

      auto along = [&](double t) {
        Point p;
        for (std::size_t j = 0; j < 3; ++j) p[j] = centroid[j] + t * (s[3][j] - centroid[j]);
        return clamp(p);
      };

      const Point xr = along(-1.0);
      const double fr = eval(xr);
      if (fr < fv[0]) {
        const Point xe = along(-2.0);
        const double fe = eval(xe);
        if (fe < fr) {
          s[3] = xe;
          fv[3] = fe;
        } else {
          s[3] = xr;
          fv[3] = fr;
        }
        continue;
      }
      if (fr < fv[2]) {
        s[3] = xr;
        fv[3] = fr;
        continue;
      }
      const bool outside = fr < fv[3];
      const Point xc = along(outside ? -0.5 : 0.5);
      const double fc = eval(xc);
      if (fc < std::min(fr, fv[3])) {
        s[3] = xc;
        fv[3] = fc;
        continue;
      }
      for (std::size_t k = 1; k < 4; ++k) {
        for (std::size_t j = 0; j < 3; ++j) s[k][j] = s[0][j] + 0.5 * (s[k][j] - s[0][j]);
        fv[k] = eval(s[k]);
      }
    }
    std::size_t best = 0;
    for (std::size_t k = 1; k < 4; ++k)
      if (fv[k] < fv[best]) best = k;
    return {s[best], fv[best]};
  }
};

}  // namespace detail

/// Rows of arm t inside the study, thinned by a stable stride when the arm
/// exceeds `cap`.
inline std::vector<Eigen::Index> arm_rows(const Dataset& d, int arm, Eigen::Index cap) {
  std::vector<Eigen::Index> rows;
  for (Eigen::Index i = 0; i < d.n(); ++i)
    if (d.in_arm(i, arm)) rows.push_back(i);
  const auto m = static_cast<Eigen::Index>(rows.size());
  if (cap > 0 && m > cap) {
    const Eigen::Index stride = (m + cap - 1) / cap;
    std::vector<Eigen::Index> thinned;
    for (Eigen::Index k = 0; k < m; k += stride) thinned.push_back(rows[static_cast<std::size_t>(k)]);
    rows = std::move(thinned);
  }
  return rows;
}

/// Tunes (gamma, theta, sigma2) for one arm by maximizing the GP marginal
/// likelihood: a log-spaced grid around data-scaled anchors, then bounded
/// Nelder-Mead in log space from the best grid point.
inline GPHyperparams tune_on_coordinates(const Matrix& Z_arm, Vector y, KernelFamily family, int degree, int arm,
                                         const TuneOptions& opt = {}) {
  const Eigen::Index m = y.size();
  if (m < 5) throw Error(ErrorCode::arm_too_small, "arm " + std::to_string(arm) + " has fewer than 5 units");

  GPHyperparams h;
  h.arm = arm;
  h.outcome_mean = y.mean();
  h.units_used = m;
  y.array() -= h.outcome_mean;
  const double var = y.squaredNorm() / static_cast<double>(m);
  const double anchor = var > 1e-12 ? var : 1.0;

  const double log_span = std::log(opt.grid_span);
  const double log_anchor = std::log(anchor);
  detail::NelderMead nm;
  nm.lo = {log_anchor - log_span, -log_span, log_anchor - log_span};
  nm.hi = {log_anchor + log_span, log_span, log_anchor + log_span};
  nm.budget = opt.max_evaluations;

  KernelConfig unit{family, degree, 1.0, 1.0};
  double cached_theta = std::numeric_limits<double>::quiet_NaN();
  Matrix base;
  auto unit_gram_for = [&](double theta) -> const Matrix& {
    if (theta != cached_theta) {
      unit.theta = theta;
      base = kernel_between(Z_arm, Z_arm, unit);
      base = 0.5 * (base + base.transpose());
      cached_theta = theta;
    }
    return base;
  };

  int evaluations = 0;
  auto negative_lml = [&](const detail::NelderMead::Point& x) {
    ++evaluations;
    const double gamma = std::exp(x[0]);
    const double theta = std::exp(x[1]);
    const double sigma2 = std::exp(x[2]);
    try {
      const double v = log_marginal_likelihood(gamma * unit_gram_for(theta), y, sigma2);
      return std::isfinite(v) ? -v : std::numeric_limits<double>::infinity();
    } catch (const Error&) {
      return std::numeric_limits<double>::infinity();
    }
  };
  nm.f = negative_lml;

  // Grid, theta outermost so each unit Gram is built once.
  detail::NelderMead::Point best{log_anchor, 0.0, log_anchor};
  double fbest = std::numeric_limits<double>::infinity();
  const int g = std::max(2, opt.grid_points);
  for (int it = 0; it < g; ++it) {
    for (int ig = 0; ig < g; ++ig) {
      for (int is = 0; is < g; ++is) {
        auto at = [&](int i, double lo, double hi) { return lo + (hi - lo) * i / (g - 1); };
        detail::NelderMead::Point x{at(ig, nm.lo[0], nm.hi[0]), at(it, nm.lo[1], nm.hi[1]),
                                    at(is, nm.lo[2], nm.hi[2])};
        const double fx = negative_lml(x);
        if (fx < fbest) {
          fbest = fx;
          best = x;
        }
      }
    }
  }

  const double grid_step = (nm.hi[0] - nm.lo[0]) / (g - 1);
  double step = 0.5 * grid_step;
  for (int restart = 0; restart < 4 && nm.used < nm.budget; ++restart) {
    auto [x, fx] = nm.run(best, fbest, step);
    const bool improved = fx < fbest - 1e-9 * (1.0 + std::abs(fbest));
    if (fx < fbest) {
      best = x;
      fbest = fx;
    }
    if (!improved && restart > 0) break;
    step = 0.1;
  }

  h.gamma = std::exp(best[0]);
  h.theta = std::exp(best[1]);
  h.sigma2 = std::exp(best[2]);
  h.lml = -fbest;
  h.evaluations = evaluations;
  if (!std::isfinite(h.lml))
    throw Error(ErrorCode::not_positive_definite, "marginal likelihood could not be evaluated anywhere");
  return h;
}

inline GPHyperparams tune(const Dataset& d, int arm, KernelFamily family, int degree, const Standardizer& st,
                          const TuneOptions& opt = {}) {
  const auto rows = arm_rows(d, arm, opt.subsample_cap);
  if (rows.size() < 5) throw Error(ErrorCode::arm_too_small, "arm " + std::to_string(arm) + " has fewer than 5 units");
  const Matrix Z = st.coordinates(d.X, family);
  Matrix Z_arm(static_cast<Eigen::Index>(rows.size()), Z.cols());
  Vector y(static_cast<Eigen::Index>(rows.size()));
  for (std::size_t k = 0; k < rows.size(); ++k) {
    Z_arm.row(static_cast<Eigen::Index>(k)) = Z.row(rows[k]);
    y(static_cast<Eigen::Index>(k)) = d.Y(rows[k]);
  }
  return tune_on_coordinates(Z_arm, std::move(y), family, degree, arm, opt);
}

inline GPHyperparams tune(const Dataset& d, int arm, KernelFamily family, int degree, const TuneOptions& opt = {}) {
  return tune(d, arm, family, degree, Standardizer::fit(d.X), opt);
}

}  // namespace kom
