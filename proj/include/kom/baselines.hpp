#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "kom/core_model.hpp"
#include "kom/error.hpp"
#include "kom/linalg.hpp"

namespace kom {

/// Exponent vectors of every monomial of total degree <= `degree` in `p`
/// variables, graded-lexicographic: constant first, then degree 1, ...
inline std::vector<std::vector<int>> monomial_exponents(int p, int degree) {
  std::vector<std::vector<int>> out;
  std::vector<int> e(static_cast<std::size_t>(p), 0);
  for (int total = 0; total <= degree; ++total) {
    // all compositions of `total` into p parts, lexicographically descending in the first variable
    std::vector<std::vector<int>> level;
    auto rec = [&](auto&& self, int var, int left) -> void {
      if (var == p - 1) {
        e[static_cast<std::size_t>(var)] = left;
        level.push_back(e);
        return;
      }
      for (int v = left; v >= 0; --v) {
        e[static_cast<std::size_t>(var)] = v;
        self(self, var + 1, left - v);
      }
    };
    rec(rec, 0, total);
    out.insert(out.end(), level.begin(), level.end());
  }
  return out;
}

/// Polynomial feature map on covariates standardized with statistics
/// captured at fit time.
struct PolyFeatures {
  int degree = 1;
  Vector mean;
  Vector scale;
  std::vector<std::vector<int>> exponents;

  static PolyFeatures fit(const Matrix& X, int degree) {
    if (degree < 1) throw Error(ErrorCode::invalid_argument, "polynomial degree must be >= 1");
    PolyFeatures f;
    f.degree = degree;
    f.mean = X.colwise().mean().transpose();
    f.scale.resize(X.cols());
    for (Eigen::Index k = 0; k < X.cols(); ++k) {
      const double var = X.rows() > 1 ? (X.col(k).array() - f.mean(k)).square().sum() / static_cast<double>(X.rows() - 1) : 0.0;
      f.scale(k) = var > 0.0 ? std::sqrt(var) : 1.0;
    }
    f.exponents = monomial_exponents(static_cast<int>(X.cols()), degree);
    return f;
  }

  Eigen::Index size() const { return static_cast<Eigen::Index>(exponents.size()); }

  Matrix transform(const Matrix& X) const {
    const Eigen::Index n = X.rows();
    Matrix Z = X.rowwise() - mean.transpose();
    for (Eigen::Index k = 0; k < Z.cols(); ++k) Z.col(k) /= scale(k);
    Matrix F(n, size());
    for (Eigen::Index j = 0; j < size(); ++j) {
      const auto& e = exponents[static_cast<std::size_t>(j)];
      Vector col = Vector::Ones(n);
      for (std::size_t k = 0; k < e.size(); ++k)
        for (int r = 0; r < e[k]; ++r) col.array() *= Z.col(static_cast<Eigen::Index>(k)).array();
      F.col(j) = col;
    }
    return F;
  }
};

enum class PropensityTarget { treatment, sampling };

struct PropensityModel {
  int degree = 1;
  PolyFeatures features;
  Vector coefficients;
  PropensityTarget target = PropensityTarget::treatment;
  bool converged = false;
  int iterations = 0;

  static constexpr double clip = 1e-6;

  Vector predict(const Matrix& X) const {
    const Vector eta = features.transform(X) * coefficients;
    Vector p(eta.size());
    for (Eigen::Index i = 0; i < eta.size(); ++i) p(i) = std::clamp(1.0 / (1.0 + std::exp(-eta(i))), clip, 1.0 - clip);
    return p;
  }
};

/// Ridge-penalized polynomial logistic regression by IRLS. Under separation
/// the linear predictor runs away; the last iterate is returned with
/// converged = false and predictions are clipped.
inline PropensityModel fit_logistic_poly(const Matrix& X, const Vector& labels, int degree, double ridge = 1e-8,
                                         PropensityTarget target = PropensityTarget::treatment, int max_iter = 100,
                                         double tol = 1e-8) {
  if (X.rows() != labels.size()) throw Error(ErrorCode::dimension_mismatch, "labels length differs from rows of X");
  double ones = 0.0;
  for (Eigen::Index i = 0; i < labels.size(); ++i) {
    if (labels(i) != 0.0 && labels(i) != 1.0) throw Error(ErrorCode::non_binary_indicator, "labels must be 0/1");
    ones += labels(i);
  }
  if (ones == 0.0 || ones == static_cast<double>(labels.size()))
    throw Error(ErrorCode::single_class, "logistic regression needs both classes");

  PropensityModel model;
  model.degree = degree;
  model.target = target;
  model.features = PolyFeatures::fit(X, degree);
  const Matrix F = model.features.transform(X);
  const Eigen::Index k = F.cols();
  Vector beta = Vector::Zero(k);
  const double prevalence = ones / static_cast<double>(labels.size());
  beta(0) = std::log(prevalence / (1.0 - prevalence));

  for (int it = 1; it <= max_iter; ++it) {
    model.iterations = it;
    const Vector eta = F * beta;
    Vector w(eta.size()), z(eta.size());
    for (Eigen::Index i = 0; i < eta.size(); ++i) {
      const double mu = 1.0 / (1.0 + std::exp(-eta(i)));
      w(i) = std::max(mu * (1.0 - mu), 1e-12);
      z(i) = eta(i) + (labels(i) - mu) / w(i);
    }
    Matrix H = F.transpose() * w.asDiagonal() * F;
    H.diagonal().array() += ridge;
    const Vector next = H.ldlt().solve(F.transpose() * w.cwiseProduct(z));
    if (!next.allFinite()) break;
    const double change = (next - beta).cwiseAbs().maxCoeff();
    beta = next;
    if ((F * beta).cwiseAbs().maxCoeff() > 35.0) break;  // separation
    if (change <= tol * (1.0 + beta.cwiseAbs().maxCoeff())) {
      model.converged = true;
      break;
    }
  }
  model.coefficients = beta;
  return model;
}

/// Propensity over the study units, predicted for all n rows.
inline PropensityModel fit_treatment_model(const Dataset& d, int degree) {
  std::vector<Eigen::Index> rows;
  for (Eigen::Index i = 0; i < d.n(); ++i)
    if (d.in_study(i)) rows.push_back(i);
  Matrix X(static_cast<Eigen::Index>(rows.size()), d.p());
  Vector t(static_cast<Eigen::Index>(rows.size()));
  for (std::size_t r = 0; r < rows.size(); ++r) {
    X.row(static_cast<Eigen::Index>(r)) = d.X.row(rows[r]);
    t(static_cast<Eigen::Index>(r)) = d.T(rows[r]);
  }
  return fit_logistic_poly(X, t, degree, 1e-8, PropensityTarget::treatment);
}

inline PropensityModel fit_sampling_model(const Dataset& d, int degree) {
  return fit_logistic_poly(d.X, d.S, degree, 1e-8, PropensityTarget::sampling);
}

// ---------------------------------------------------------------------------

struct IpwWeights {
  Vector W;          // each arm sums to n, zero outside the study
  Vector raw;        // generalized IPW weights before renormalization; (1/n) sum +-raw*Y is unnormalized
  Vector raw_printed;  // tabulated alternative where it differs (SATT, TATE), else == raw
};

namespace detail {

inline Vector normalize_arms(const Vector& raw, const Dataset& d) {
  const double n = static_cast<double>(d.n());
  double sum1 = 0.0, sum0 = 0.0;
  for (Eigen::Index i = 0; i < d.n(); ++i) {
    if (d.in_arm(i, 1)) sum1 += raw(i);
    if (d.in_arm(i, 0)) sum0 += raw(i);
  }
  if (!(sum1 > 0.0) || !(sum0 > 0.0)) throw Error(ErrorCode::empty_target, "an arm has zero total weight");
  Vector W = Vector::Zero(d.n());
  for (Eigen::Index i = 0; i < d.n(); ++i) {
    if (d.in_arm(i, 1)) W(i) = raw(i) * n / sum1;
    if (d.in_arm(i, 0)) W(i) = raw(i) * n / sum0;
  }
  return W;
}

}  // namespace detail

/// Generalized inverse-probability weights, renormalized so each arm sums to n.
/// SATT uses the treated-odds tilt phi/(1-phi) on controls and TATE the
/// sampling odds (1-psi)/psi; the tabulated forms without those tilts are kept
/// in `raw_printed`.
inline IpwWeights ipw_weights(const EstimandSpec& spec, const Vector& phi, const std::optional<Vector>& psi,
                              const Dataset& d) {
  const Eigen::Index n = d.n();
  if (phi.size() != n) throw Error(ErrorCode::dimension_mismatch, "propensity length differs from n");
  const double dn = static_cast<double>(n);
  IpwWeights out;
  out.raw = Vector::Zero(n);
  out.raw_printed = Vector::Zero(n);
  double n_s = 0.0, sum_t = 0.0, n_o = 0.0, n_t = 0.0, n_u = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    if (d.in_study(i)) {
      n_s += 1.0;
      sum_t += d.T(i);
      n_o += phi(i) * (1.0 - phi(i));
      n_t += truncation_keeps(phi(i), spec.alpha) ? 1.0 : 0.0;
    } else {
      n_u += 1.0;
    }
  }
  if (spec.kind == EstimandKind::tate) {
    if (!psi) throw Error(ErrorCode::missing_sampling_model, "TATE weights need a sampling probability");
    if (n_u == 0.0) throw Error(ErrorCode::empty_target, "TATE needs units outside the study (s=0)");
  }
  if (spec.kind == EstimandKind::osate && n_t == 0.0)
    throw Error(ErrorCode::empty_target, "every unit was truncated at alpha=" + std::to_string(spec.alpha));

  for (Eigen::Index i = 0; i < n; ++i) {
    if (!d.in_study(i)) continue;
    const double t = d.T(i), f = phi(i);
    const double ht = t / f + (1.0 - t) / (1.0 - f);
    double w = 0.0, printed = 0.0;
    switch (spec.kind) {
      case EstimandKind::sate:
        w = printed = dn / n_s * ht;
        break;
      case EstimandKind::satt:
        w = dn / sum_t * (t + (1.0 - t) * f / (1.0 - f));
        printed = dn * (t / sum_t + (1.0 - t) / (1.0 - f));
        break;
      case EstimandKind::tate: {
        const double s = (*psi)(i);
        w = dn * (1.0 - s) / (n_u * s) * ht;
        printed = dn * ht / (n_u * s);
        break;
      }
      case EstimandKind::owate:
        w = printed = dn * (t + (1.0 - 2.0 * t) * f) / n_o;
        break;
      case EstimandKind::osate:
        w = printed = dn * (truncation_keeps(f, spec.alpha) ? 1.0 : 0.0) / n_t * ht;
        break;
      case EstimandKind::kowate:
      case EstimandKind::kosate:
        throw Error(ErrorCode::invalid_argument, "no inverse-probability form for kernel-optimal estimands");
    }
    out.raw(i) = w;
    out.raw_printed(i) = printed;
  }
  out.W = detail::normalize_arms(out.raw, d);
  return out;
}

/// OWATE and OSATE target weights from an estimated propensity, every unit
/// treated as part of the study.
inline std::pair<TargetWeights, TargetWeights> overlap_and_truncated_v(const Vector& phi, double alpha) {
  const Eigen::Index n = phi.size();
  for (Eigen::Index i = 0; i < n; ++i)
    if (!(phi(i) > 0.0 && phi(i) < 1.0)) throw Error(ErrorCode::invalid_argument, "propensities must lie in (0,1)");
  Dataset all;
  all.X = Matrix::Zero(n, 1);
  all.T = Vector::Zero(n);
  all.S = Vector::Ones(n);
  all.Y = Vector::Zero(n);
  EstimandSpec ow{EstimandKind::owate, alpha, 0};
  EstimandSpec os{EstimandKind::osate, alpha, 0};
  return {fixed_target_weights(ow, all, phi), fixed_target_weights(os, all, phi)};
}

/// Ridge least squares on polynomial features, one fit per arm over the
/// study units; returns (1/n) sum V_i (g1(X_i) - g0(X_i)).
inline double outcome_regression_estimate(const Dataset& d, int degree, const TargetWeights& V, double ridge = 1e-6) {
  const Eigen::Index n = d.n();
  const TargetWeights Vu = V.to_unit_mean();
  if (Vu.V.size() != n) throw Error(ErrorCode::dimension_mismatch, "target weights length differs from n");
  const PolyFeatures pf = PolyFeatures::fit(d.X, degree);
  const Matrix F = pf.transform(d.X);

  std::array<Vector, 2> pred;
  for (int arm = 0; arm < 2; ++arm) {
    std::vector<Eigen::Index> rows;
    for (Eigen::Index i = 0; i < n; ++i)
      if (d.in_arm(i, arm)) rows.push_back(i);
    if (rows.empty()) throw Error(ErrorCode::empty_arm, "arm " + std::to_string(arm) + " has no study units");
    Matrix Fa(static_cast<Eigen::Index>(rows.size()), F.cols());
    Vector ya(static_cast<Eigen::Index>(rows.size()));
    for (std::size_t r = 0; r < rows.size(); ++r) {
      Fa.row(static_cast<Eigen::Index>(r)) = F.row(rows[r]);
      ya(static_cast<Eigen::Index>(r)) = d.Y(rows[r]);
    }
    Matrix G = Fa.transpose() * Fa;
    G.diagonal().tail(G.rows() - 1).array() += ridge;  // intercept unpenalized
    const Vector beta = G.ldlt().solve(Fa.transpose() * ya);
    pred[static_cast<std::size_t>(arm)] = F * beta;
  }
  return Vu.V.dot(pred[1] - pred[0]) / static_cast<double>(n);
}

}  // namespace kom
