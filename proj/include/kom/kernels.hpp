#pragma once

#include <cmath>
#include <string>
#include <string_view>
#include <vector>

#include "kom/error.hpp"
#include "kom/linalg.hpp"

namespace kom {

enum class KernelFamily { poly_mahalanobis, product_poly, gaussian };

inline std::string_view to_string(KernelFamily f) {
  switch (f) {
    case KernelFamily::poly_mahalanobis: return "poly_mahalanobis";
    case KernelFamily::product_poly: return "product_poly";
    case KernelFamily::gaussian: return "gaussian";
  }
  return "?";
}

inline KernelFamily parse_kernel_family(std::string_view s) {
  if (s == "poly_mahalanobis" || s == "poly") return KernelFamily::poly_mahalanobis;
  if (s == "product_poly" || s == "product") return KernelFamily::product_poly;
  if (s == "gaussian") return KernelFamily::gaussian;
  throw Error(ErrorCode::invalid_argument, "unknown kernel family '" + std::string(s) + "'");
}

struct KernelConfig {
  KernelFamily family = KernelFamily::poly_mahalanobis;
  int degree = 2;
  double gamma = 1.0;  // overall scale
  double theta = 1.0;  // weight of higher-order terms / inverse length-scale

  void check() const {
    if (degree < 1) throw Error(ErrorCode::invalid_argument, "kernel degree must be >= 1");
    if (!(gamma > 0.0) || !std::isfinite(gamma)) throw Error(ErrorCode::invalid_argument, "kernel gamma must be > 0");
    if (!(theta > 0.0) || !std::isfinite(theta)) throw Error(ErrorCode::invalid_argument, "kernel theta must be > 0");
  }
};

struct GramMatrix {
  Matrix K;
  KernelConfig config;
  bool whitened = false;
};

/// Location/scale statistics shared by every Gram built on one dataset.
/// Always computed over all n units (study and target together) so a Gram on
/// any subset of rows is a principal submatrix of the full one.
struct Standardizer {
  linalg::MeanCov stats;
  Vector scales;  // per-coordinate sd, floored

  static Standardizer fit(const Matrix& X) {
    Standardizer s;
    s.stats = linalg::sample_mean_cov(X);
    const Eigen::Index p = X.cols();
    s.scales.resize(p);
    const Matrix centered = X.rowwise() - s.stats.mean.transpose();
    for (Eigen::Index k = 0; k < p; ++k) {
      const double var = centered.col(k).squaredNorm() / static_cast<double>(X.rows() - 1);
      const double floor = 1e-8 * std::max(1.0, std::abs(s.stats.mean(k)));
      s.scales(k) = std::max(std::sqrt(var), floor);
    }
    return s;
  }

  /// z = L^{-1}(x - mean), rows are units.
  Matrix whiten(const Matrix& X) const {
    const Matrix centered = (X.rowwise() - stats.mean.transpose()).transpose();
    return stats.factor.L.triangularView<Eigen::Lower>().solve(centered).transpose();
  }

  /// z_k = (x_k - mean_k) / sd_k, rows are units.
  Matrix standardize(const Matrix& X) const {
    Matrix Z = X.rowwise() - stats.mean.transpose();
    for (Eigen::Index k = 0; k < Z.cols(); ++k) Z.col(k) /= scales(k);
    return Z;
  }

  Matrix coordinates(const Matrix& X, KernelFamily family) const {
    return family == KernelFamily::product_poly ? standardize(X) : whiten(X);
  }
};

namespace detail {

inline Matrix unit_gram(const Matrix& Za, const Matrix& Zb, KernelFamily family, int degree, double theta) {
  const Eigen::Index na = Za.rows();
  const Eigen::Index nb = Zb.rows();
  Matrix K(na, nb);
  switch (family) {
    case KernelFamily::poly_mahalanobis: {
      const Matrix inner = Za * Zb.transpose();
      K = (1.0 + theta * inner.array()).pow(static_cast<double>(degree)).matrix();
      break;
    }
    case KernelFamily::product_poly: {
      K.setOnes();
      for (Eigen::Index k = 0; k < Za.cols(); ++k) {
        const Matrix outer = Za.col(k) * Zb.col(k).transpose();
        K.array() *= (1.0 + theta * outer.array()).pow(static_cast<double>(degree));
      }
      break;
    }
    case KernelFamily::gaussian: {
      const Vector sa = Za.rowwise().squaredNorm();
      const Vector sb = Zb.rowwise().squaredNorm();
      Matrix d2 = -2.0 * Za * Zb.transpose();
      d2.colwise() += sa;
      d2.rowwise() += sb.transpose();
      K = (-theta * d2.array().max(0.0)).exp().matrix();
      break;
    }
  }
  return K;
}

inline void symmetrize(Matrix& K) { K = 0.5 * (K + K.transpose()); }

}  // namespace detail

/// Kernel matrix between two sets of precomputed coordinates (whitened or
/// standardized as the family requires). Scale gamma multiplies exactly.
inline Matrix kernel_between(const Matrix& Za, const Matrix& Zb, const KernelConfig& cfg) {
  cfg.check();
  return cfg.gamma * detail::unit_gram(Za, Zb, cfg.family, cfg.degree, cfg.theta);
}

inline GramMatrix gram_from_coordinates(const Matrix& Z, const KernelConfig& cfg) {
  GramMatrix g{kernel_between(Z, Z, cfg), cfg, cfg.family != KernelFamily::product_poly};
  detail::symmetrize(g.K);
  return g;
}

/// K_ij = gamma (1 + theta z_i'z_j)^d with z the Mahalanobis-whitened rows.
inline GramMatrix gram_poly_mahalanobis(const Matrix& X, const KernelConfig& cfg, const Standardizer& st) {
  if (cfg.family != KernelFamily::poly_mahalanobis)
    throw Error(ErrorCode::invalid_argument, "gram_poly_mahalanobis needs the poly_mahalanobis family");
  return gram_from_coordinates(st.whiten(X), cfg);
}

/// K_ij = gamma prod_k (1 + theta z_ik z_jk)^d on per-coordinate standardized values.
inline GramMatrix gram_product_poly(const Matrix& X, const KernelConfig& cfg, const Standardizer& st) {
  if (cfg.family != KernelFamily::product_poly)
    throw Error(ErrorCode::invalid_argument, "gram_product_poly needs the product_poly family");
  return gram_from_coordinates(st.standardize(X), cfg);
}

inline GramMatrix gram_gaussian(const Matrix& X, const KernelConfig& cfg, const Standardizer& st) {
  if (cfg.family != KernelFamily::gaussian)
    throw Error(ErrorCode::invalid_argument, "gram_gaussian needs the gaussian family");
  return gram_from_coordinates(st.whiten(X), cfg);
}

inline GramMatrix gram(const Matrix& X, const KernelConfig& cfg, const Standardizer& st) {
  return gram_from_coordinates(st.coordinates(X, cfg.family), cfg);
}

struct PsdDiagnostic {
  double jitter_used = 0.0;
  double threshold = 0.0;
  bool indefinite = false;
};

/// Jittered Cholesky as a cheap lower bound on the smallest eigenvalue. A
/// jitter above 1e-6 * trace / n (or no factorization at all) flags the
/// matrix as numerically indefinite.
inline PsdDiagnostic psd_check(const Matrix& K) {
  PsdDiagnostic d;
  const double n = static_cast<double>(std::max<Eigen::Index>(1, K.rows()));
  d.threshold = 1e-6 * std::max(std::abs(K.trace()), 1e-300) / n;
  try {
    const auto f = linalg::cholesky(K, d.threshold);
    d.jitter_used = f.jitter_used;
    d.indefinite = d.jitter_used > d.threshold;
  } catch (const Error&) {
    d.jitter_used = std::numeric_limits<double>::infinity();
    d.indefinite = true;
  }
  return d;
}

inline PsdDiagnostic psd_check(const GramMatrix& g) { return psd_check(g.K); }

}  // namespace kom
