#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "kom/error.hpp"

namespace kom {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

namespace linalg {

/// Lower Cholesky factor of A + jitter_used * I.
struct CholeskyFactor {
  Matrix L;
  double jitter_used = 0.0;

  Eigen::Index size() const { return L.rows(); }

  /// Solves (A + jitter I) x = b.
  Vector solve(const Vector& b) const {
    Vector x = L.triangularView<Eigen::Lower>().solve(b);
    L.transpose().triangularView<Eigen::Upper>().solveInPlace(x);
    return x;
  }

  Matrix solve(const Matrix& B) const {
    Matrix X = L.triangularView<Eigen::Lower>().solve(B);
    L.transpose().triangularView<Eigen::Upper>().solveInPlace(X);
    return X;
  }

  /// L^{-1} b
  Vector solve_lower(const Vector& b) const { return L.triangularView<Eigen::Lower>().solve(b); }

  double log_det() const { return 2.0 * L.diagonal().array().log().sum(); }
};

inline double max_abs(const Matrix& A) { return A.size() == 0 ? 0.0 : A.cwiseAbs().maxCoeff(); }

inline bool is_symmetric(const Matrix& A, double rel_tol = 1e-10) {
  if (A.rows() != A.cols()) return false;
  const double scale = std::max(1.0, max_abs(A));
  return max_abs(A - A.transpose()) <= rel_tol * scale;
}

namespace detail {

inline bool try_factor(const Matrix& A, double jitter, Matrix& L) {
  Matrix B = A;
  B.diagonal().array() += jitter;
  Eigen::LLT<Matrix> llt(B);
  if (llt.info() != Eigen::Success) return false;
  L = llt.matrixL();
  return L.allFinite();
}

}  // namespace detail

/// Cholesky with a geometric jitter ladder: the first retry adds
/// 1e-10 * mean(diag A) and each further retry multiplies by ten, until
/// the factorization succeeds or `max_jitter` is exceeded.
inline CholeskyFactor cholesky(const Matrix& A, double max_jitter) {
  if (A.rows() != A.cols())
    throw Error(ErrorCode::dimension_mismatch, "cholesky needs a square matrix");
  if (!A.allFinite()) throw Error(ErrorCode::non_finite_value, "cholesky input has non-finite entries");
  if (!is_symmetric(A)) throw Error(ErrorCode::asymmetric_input, "cholesky input is not symmetric");

  CholeskyFactor f;
  if (A.rows() == 0) return f;
  if (detail::try_factor(A, 0.0, f.L)) return f;

  double mean_diag = A.diagonal().mean();
  if (!(mean_diag > 0.0)) mean_diag = 1.0;
  for (double jitter = 1e-10 * mean_diag; jitter <= max_jitter * (1.0 + 1e-12); jitter *= 10.0) {
    if (detail::try_factor(A, jitter, f.L)) {
      f.jitter_used = jitter;
      return f;
    }
  }
  throw Error(ErrorCode::not_positive_definite,
              "jitter budget " + std::to_string(max_jitter) + " exhausted");
}

/// Jitter budget used throughout for kernel-derived matrices.
inline double default_max_jitter(const Matrix& A) {
  const double n = static_cast<double>(std::max<Eigen::Index>(1, A.rows()));
  return std::max(1e-8, 1e-2 * std::abs(A.trace()) / n);
}

inline double quad_form(const Vector& v, const Matrix& A) {
  if (A.rows() != A.cols() || A.rows() != v.size())
    throw Error(ErrorCode::dimension_mismatch, "quad_form: vector length " + std::to_string(v.size()) +
                                                   " vs matrix " + std::to_string(A.rows()) + "x" +
                                                   std::to_string(A.cols()));
  return v.dot(A * v);
}

struct MeanCov {
  Vector mean;
  Matrix cov;  // unbiased sample covariance plus ridge * I
  double ridge = 0.0;
  CholeskyFactor factor;  // of `cov`, used for whitening
};

/// Column mean, ridged sample covariance, and its Cholesky factor.
inline MeanCov sample_mean_cov(const Matrix& X) {
  const Eigen::Index n = X.rows();
  const Eigen::Index p = X.cols();
  if (n < 2) throw Error(ErrorCode::invalid_argument, "sample_mean_cov needs at least two rows");
  if (p < 1) throw Error(ErrorCode::invalid_argument, "sample_mean_cov needs at least one column");
  if (!X.allFinite()) throw Error(ErrorCode::non_finite_value, "covariates contain NaN or Inf");

  MeanCov out;
  out.mean = X.colwise().mean().transpose();
  const Matrix centered = X.rowwise() - out.mean.transpose();
  Matrix cov = (centered.transpose() * centered) / static_cast<double>(n - 1);
  cov = 0.5 * (cov + cov.transpose());

  const double tr = cov.trace();
  double ridge = tr > 0.0 ? 1e-8 * tr / static_cast<double>(p) : 1e-6 * std::max(1.0, tr);
  const double ridge_cap = 1e-6 * std::max(1.0, tr);
  for (;;) {
    Matrix ridged = cov;
    ridged.diagonal().array() += ridge;
    Matrix L;
    if (detail::try_factor(ridged, 0.0, L)) {
      out.cov = std::move(ridged);
      out.ridge = ridge;
      out.factor.L = std::move(L);
      return out;
    }
    if (ridge >= ridge_cap) break;
    ridge = std::min(ridge * 10.0, ridge_cap);
  }
  throw Error(ErrorCode::degenerate_covariance, "covariance could not be factored after ridge escalation");
}

}  // namespace linalg
}  // namespace kom
