#include <gtest/gtest.h>

#include <cmath>

#include "kom/baselines.hpp"
#include "kom/estimate.hpp"
#include "kom/rng.hpp"
#include "kom/simulation.hpp"

using namespace kom;

namespace {

double binomial(int n, int k) {
  double r = 1.0;
  for (int i = 1; i <= k; ++i) r = r * (n - k + i) / i;
  return r;
}

Dataset study(const Vector& T, const Matrix& X, const Vector& Y) {
  Dataset d;
  d.X = X;
  d.T = T;
  d.S = Vector::Ones(T.size());
  d.Y = Y;
  return validate_dataset(d);
}

}  // namespace

TEST(PolyFeatures, ColumnCountIsBinomial) {
  for (int p = 1; p <= 5; ++p)
    for (int deg = 1; deg <= 5; ++deg)
      EXPECT_EQ(static_cast<double>(monomial_exponents(p, deg).size()), binomial(p + deg, deg)) << p << "," << deg;
}

TEST(PolyFeatures, GradedOrder) {
  const auto e = monomial_exponents(2, 2);
  const std::vector<std::vector<int>> expected{{0, 0}, {1, 0}, {0, 1}, {2, 0}, {1, 1}, {0, 2}};
  EXPECT_EQ(e, expected);
}

TEST(Logistic, NullModelPredictsPrevalence) {
  Rng rng(1);
  const Eigen::Index n = 20000;
  Matrix X(n, 2);
  Vector y(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    X(i, 0) = rng.normal();
    X(i, 1) = rng.normal();
    y(i) = rng.bernoulli(0.3) ? 1.0 : 0.0;
  }
  const auto m = fit_logistic_poly(X, y, 1);
  EXPECT_TRUE(m.converged);
  const double prevalence = y.mean();
  const Vector p = m.predict(X);
  EXPECT_LE((p.array() - prevalence).abs().maxCoeff(), 0.05);
}

TEST(Logistic, SeparationIsClipped) {
  Matrix X(40, 1);
  Vector y(40);
  for (int i = 0; i < 40; ++i) {
    X(i, 0) = -2.0 + 0.1 * i + 0.05;
    y(i) = X(i, 0) > 0.0 ? 1.0 : 0.0;
  }
  const auto m = fit_logistic_poly(X, y, 1);
  EXPECT_FALSE(m.converged);
  const Vector p = m.predict(X);
  EXPECT_TRUE(p.allFinite());
  EXPECT_GE(p.minCoeff(), PropensityModel::clip);
  EXPECT_LE(p.maxCoeff(), 1.0 - PropensityModel::clip);
}

TEST(Logistic, Errors) {
  Matrix X = Matrix::Zero(4, 1);
  try {
    fit_logistic_poly(X, Vector::Ones(4), 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::single_class);
  }
  Vector bad(4);
  bad << 0, 1, 2, 0;
  EXPECT_THROW(fit_logistic_poly(X, bad, 1), Error);
}

TEST(Logistic, RecoversLinearLogit) {
  Rng rng(2);
  const Eigen::Index n = 20000;
  Matrix X(n, 1);
  Vector y(n), truth(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    X(i, 0) = rng.normal();
    truth(i) = 1.0 / (1.0 + std::exp(-(-0.5 + 1.2 * X(i, 0))));
    y(i) = rng.bernoulli(truth(i));
  }
  const Vector p = fit_logistic_poly(X, y, 1).predict(X);
  EXPECT_LE((p - truth).cwiseAbs().maxCoeff(), 0.05);
}

TEST(Ipw, ConstantPropensitySate) {
  Vector T(6);
  T << 1, 0, 1, 0, 1, 0;
  const auto d = study(T, Matrix::Zero(6, 1), Vector::Zero(6));
  const auto w = ipw_weights({EstimandKind::sate}, Vector::Constant(6, 0.5), std::nullopt, d);
  EXPECT_TRUE((w.raw.array() == 2.0).all());
  EXPECT_TRUE(w.W.isApprox(Vector::Constant(6, 2.0)));
}

TEST(Ipw, ConstantPropensityOverlap) {
  Vector T(8);
  T << 1, 0, 1, 0, 1, 0, 0, 0;
  const auto d = study(T, Matrix::Zero(8, 1), Vector::Zero(8));
  const auto w = ipw_weights({EstimandKind::owate}, Vector::Constant(8, 0.5), std::nullopt, d);
  const double n_o = 8 * 0.25;
  for (int i = 0; i < 8; ++i) EXPECT_DOUBLE_EQ(w.raw(i), 8 * 0.5 / n_o);  // 2, as for SATE at phi = 0.5
}

TEST(Ipw, SattTiltAndPrintedForm) {
  Vector T(4);
  T << 1, 0, 1, 0;
  const auto d = study(T, Matrix::Zero(4, 1), Vector::Zero(4));
  Vector phi(4);
  phi << 0.5, 0.2, 0.5, 0.6;
  const auto w = ipw_weights({EstimandKind::satt}, phi, std::nullopt, d);
  // n / sum T = 2
  EXPECT_DOUBLE_EQ(w.raw(0), 2.0);
  EXPECT_DOUBLE_EQ(w.raw(1), 2.0 * 0.25);
  EXPECT_DOUBLE_EQ(w.raw(3), 2.0 * 1.5);
  EXPECT_DOUBLE_EQ(w.raw_printed(1), 4.0 * 1.25);
}

TEST(Ipw, TateNeedsSamplingModel) {
  Dataset d;
  d.X = Matrix::Zero(4, 1);
  d.T = Vector::Zero(4);
  d.T(0) = 1;
  d.S = Vector::Ones(4);
  d.S(3) = 0;
  d.Y = Vector::Zero(4);
  d = validate_dataset(d);
  try {
    ipw_weights({EstimandKind::tate}, Vector::Constant(4, 0.5), std::nullopt, d);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::missing_sampling_model);
  }
  const auto w = ipw_weights({EstimandKind::tate}, Vector::Constant(4, 0.5), Vector::Constant(4, 0.75), d);
  EXPECT_EQ(w.W(3), 0.0);
  EXPECT_NEAR(w.W.head(3).sum(), 8.0, 1e-12);
}

TEST(Ipw, RandomizedRecoversDifferenceInMeans) {
  Rng rng(3);
  const Eigen::Index n = 101;
  Vector T(n), Y(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    T(i) = rng.bernoulli(0.5);
    Y(i) = rng.normal(T(i) * 2.0, 1.0);
  }
  const auto d = study(T, Matrix::Zero(n, 1), Y);
  const auto w = ipw_weights({EstimandKind::sate}, Vector::Constant(n, 0.5), std::nullopt, d);
  double m1 = 0, m0 = 0, c1 = 0, c0 = 0;
  for (Eigen::Index i = 0; i < n; ++i) (T(i) == 1.0 ? m1 : m0) += Y(i), (T(i) == 1.0 ? c1 : c0) += 1;
  EXPECT_NEAR(weighted_estimate(w.W, d), m1 / c1 - m0 / c0, 1e-10);
}

TEST(OverlapTruncated, Examples) {
  auto [ow, os] = overlap_and_truncated_v(Vector::Constant(5, 0.5), 0.1);
  EXPECT_TRUE(ow.V.isApprox(Vector::Ones(5)));
  Vector phi(4);
  phi << 0.05, 0.5, 0.95, 0.5;
  Vector expected(4);
  expected << 0, 2, 0, 2;
  EXPECT_TRUE(overlap_and_truncated_v(phi, 0.1).second.V.isApprox(expected));
  try {
    overlap_and_truncated_v(Vector::Constant(4, 0.01), 0.1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::empty_target);
  }
}

TEST(OverlapTruncated, ConvergeToSateTarget) {
  Rng rng(4);
  Vector u(50);
  for (int i = 0; i < 50; ++i) u(i) = 2.0 * rng.uniform() - 1.0;
  double prev = std::numeric_limits<double>::infinity();
  for (double eps : {0.4, 0.2, 0.1, 0.01, 1e-4}) {
    auto [ow, os] = overlap_and_truncated_v((0.5 + 0.999 * eps * u.array()).matrix(), 0.1);
    const double gap = (ow.V.array() - 1.0).abs().maxCoeff();
    EXPECT_LT(gap, prev);
    prev = gap;
    if (eps <= 0.2) EXPECT_TRUE(os.V.isApprox(Vector::Ones(50)));
  }
  EXPECT_LT(prev, 1e-6);
}

TEST(OutcomeRegression, LinearTruthIsExact) {
  Rng rng(5);
  const Eigen::Index n = 200;
  Matrix X(n, 2);
  Vector T(n), Y(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    X(i, 0) = rng.normal();
    X(i, 1) = rng.normal();
    T(i) = rng.bernoulli(0.5);
    Y(i) = 1.0 + 2.0 * X(i, 0) - X(i, 1) + 4.0 * T(i);
  }
  const auto d = study(T, X, Y);
  const TargetWeights V{Vector::Ones(n), Normalization::unit_mean};
  EXPECT_NEAR(outcome_regression_estimate(d, 4, V), 4.0, 1e-6);
}

TEST(OutcomeRegression, ConstantOutcomesGiveZero) {
  Rng rng(6);
  Matrix X(30, 2);
  Vector T(30);
  for (int i = 0; i < 30; ++i) X(i, 0) = rng.normal(), X(i, 1) = rng.normal(), T(i) = i % 2;
  const auto d = study(T, X, Vector::Constant(30, 7.0));
  Vector V(30);
  for (int i = 0; i < 30; ++i) V(i) = rng.uniform();
  EXPECT_NEAR(outcome_regression_estimate(d, 2, {V / V.sum(), Normalization::simplex}), 0.0, 1e-8);
}

// Monte Carlo checks on the simulation design with correctly specified covariates.

TEST(MonteCarlo, IpwSateWithTruePropensityIsUnbiased) {
  sim::Scenario s;
  s.alpha = 0.1;
  s.seed = 777;
  const int reps = 500;
  std::vector<double> est;
  for (int r = 0; r < reps; ++r) {
    const auto sim = sim::generate(s, static_cast<std::uint64_t>(r));
    const auto d = validate_dataset(sim.data);
    est.push_back(weighted_estimate(ipw_weights({EstimandKind::sate}, sim.pi, std::nullopt, d).W, d));
  }
  double mean = 0, ss = 0;
  for (double e : est) mean += e / reps;
  for (double e : est) ss += (e - mean) * (e - mean);
  const double mcse = std::sqrt(ss / (reps - 1) / reps);
  EXPECT_LE(std::abs(mean - 4.0), 3.0 * mcse) << "mean " << mean << " mcse " << mcse;
}

TEST(MonteCarlo, OutcomeRegressionIsUnbiased) {
  sim::Scenario s;
  s.alpha = 0.1;
  s.seed = 778;
  const int reps = 200;
  std::vector<double> est;
  for (int r = 0; r < reps; ++r) {
    const auto sim = sim::generate(s, static_cast<std::uint64_t>(r));
    const auto d = validate_dataset(sim.data);
    est.push_back(outcome_regression_estimate(d, 4, {Vector::Ones(d.n()), Normalization::unit_mean}));
  }
  double mean = 0, ss = 0;
  for (double e : est) mean += e / reps;
  for (double e : est) ss += (e - mean) * (e - mean);
  const double mcse = std::sqrt(ss / (reps - 1) / reps);
  EXPECT_LE(std::abs(mean - 4.0), 3.0 * mcse + 1e-9) << "mean " << mean << " mcse " << mcse;
}
