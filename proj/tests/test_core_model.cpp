#include <gtest/gtest.h>

#include <functional>
#include <sstream>

#include "kom/core_model.hpp"
#include "kom/rng.hpp"

using namespace kom;

namespace {

Dataset make(std::vector<double> t, std::vector<double> s, std::vector<double> y, int p = 1) {
  const auto n = static_cast<Eigen::Index>(t.size());
  Dataset d;
  d.X = Matrix::Zero(n, p);
  for (Eigen::Index i = 0; i < n; ++i) d.X(i, 0) = static_cast<double>(i);
  d.T = Eigen::Map<Vector>(t.data(), n);
  d.S = Eigen::Map<Vector>(s.data(), n);
  d.Y = Eigen::Map<Vector>(y.data(), n);
  return d;
}

ErrorCode code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no error thrown";
  return ErrorCode::invalid_argument;
}

const double NA = missing_value();

}  // namespace

TEST(Validate, MinimalBalanced) {
  const auto d = validate_dataset(make({1, 0, 1, 0}, {1, 1, 1, 1}, {1, 2, 3, 4}));
  const auto r = count_roles(d.T, d.S);
  EXPECT_EQ(r.treated, 2);
  EXPECT_EQ(r.control, 2);
  EXPECT_EQ(r.outside, 0);
}

TEST(Validate, TargetShaped) {
  const auto d = validate_dataset(make({1, 0, 1}, {1, 1, 0}, {2.0, 1.0, NA}));
  EXPECT_EQ(count_roles(d.T, d.S).outside, 1);
  EXPECT_TRUE(std::isnan(d.Y(2)));
}

TEST(Validate, Errors) {
  EXPECT_EQ(code_of([] { validate_dataset(make({1, 1}, {1, 1}, {1, 2})); }), ErrorCode::empty_arm);
  EXPECT_EQ(code_of([] { validate_dataset(make({1, 0, 1}, {1, 1, 1}, {1, NA, 2})); }), ErrorCode::missing_outcome);
  EXPECT_EQ(code_of([] { validate_dataset(make({1, 0, 0.5}, {1, 1, 1}, {1, 2, 3})); }),
            ErrorCode::non_binary_indicator);
  EXPECT_EQ(code_of([] { validate_dataset(make({1, 0, 1}, {1, 1, 2}, {1, 2, 3})); }),
            ErrorCode::non_binary_indicator);
  EXPECT_EQ(code_of([] {
              auto d = make({1, 0}, {1, 1}, {1, 2});
              d.X(0, 0) = std::numeric_limits<double>::infinity();
              validate_dataset(d);
            }),
            ErrorCode::non_finite_value);
}

TEST(Validate, OutcomesOutsideStudyAreDropped) {
  const auto d = validate_dataset(make({1, 0, 1}, {1, 1, 0}, {2.0, 1.0, 7.0}));
  EXPECT_TRUE(std::isnan(d.Y(2)));
}

TEST(TargetWeights, Examples) {
  {
    const auto d = make({1, 0, 1}, {1, 1, 1}, {0, 0, 0});
    const auto V = fixed_target_weights({EstimandKind::sate}, d);
    EXPECT_TRUE(V.V.isApprox(Vector::Ones(3)));
  }
  {
    const auto d = make({1, 0, 0, 0}, {1, 1, 0, 0}, {0, 0, NA, NA});
    const auto V = fixed_target_weights({EstimandKind::tate}, d);
    Vector e(4);
    e << 0, 0, 2, 2;
    EXPECT_TRUE(V.V.isApprox(e));
  }
  {
    const auto d = make({1, 0, 1, 0}, {1, 1, 1, 1}, {0, 0, 0, 0});
    Vector phi(4);
    phi << 0.05, 0.5, 0.5, 0.95;
    const auto V = fixed_target_weights({EstimandKind::osate, 0.1}, d, phi);
    Vector e(4);
    e << 0, 2, 2, 0;
    EXPECT_TRUE(V.V.isApprox(e));
  }
}

TEST(TargetWeights, Errors) {
  const auto d = make({1, 0, 1, 0}, {1, 1, 1, 1}, {0, 0, 0, 0});
  EXPECT_EQ(code_of([&] { fixed_target_weights({EstimandKind::owate}, d); }), ErrorCode::missing_propensity);
  EXPECT_EQ(code_of([&] { fixed_target_weights({EstimandKind::tate}, d); }), ErrorCode::empty_target);
  Vector phi = Vector::Constant(4, 0.01);
  EXPECT_EQ(code_of([&] { fixed_target_weights({EstimandKind::osate, 0.1}, d, phi); }), ErrorCode::empty_target);
  EXPECT_EQ(code_of([&] { fixed_target_weights({EstimandKind::kowate}, d); }), ErrorCode::invalid_argument);
}

TEST(TargetWeightsProperty, SumToNAndNonnegative) {
  Rng rng(3);
  for (int rep = 0; rep < 50; ++rep) {
    const int n = 5 + rep;
    Dataset d;
    d.X = Matrix::Zero(n, 1);
    d.T.resize(n);
    d.S.resize(n);
    d.Y = Vector::Zero(n);
    Vector phi(n);
    for (int i = 0; i < n; ++i) {
      d.T(i) = i % 2;
      d.S(i) = i < n - 2 ? 1.0 : 0.0;
      phi(i) = 0.05 + 0.9 * rng.uniform();
    }
    phi(0) = 0.5;  // keeps the truncated target nonempty
    for (auto k : {EstimandKind::sate, EstimandKind::satt, EstimandKind::tate, EstimandKind::owate,
                   EstimandKind::osate}) {
      const auto V = fixed_target_weights({k, 0.1}, d, phi);
      EXPECT_NEAR(V.V.sum(), n, 1e-10) << to_string(k);
      EXPECT_GE(V.V.minCoeff(), 0.0);
      if (k != EstimandKind::tate)
        for (int i = n - 2; i < n; ++i) EXPECT_EQ(V.V(i), 0.0);
    }
  }
}

TEST(TargetWeightsProperty, SatePermutationInvariantTateDependsOnlyOnS) {
  auto d = make({1, 0, 1, 0, 1}, {1, 1, 0, 1, 0}, {1, 2, NA, 3, NA});
  const auto sate = fixed_target_weights({EstimandKind::sate}, d).V;
  auto e = d;
  e.T << 0, 1, 0, 1, 1;
  e.X *= 3.0;
  EXPECT_TRUE(fixed_target_weights({EstimandKind::tate}, d).V.isApprox(fixed_target_weights({EstimandKind::tate}, e).V));
  // permute rows: reverse
  auto r = d;
  r.T = d.T.reverse();
  r.S = d.S.reverse();
  EXPECT_TRUE(fixed_target_weights({EstimandKind::sate}, r).V.isApprox(sate.reverse()));
}

TEST(TargetWeightsProperty, OverlapPeaksAtHalfAndTruncationIsIndicator) {
  Rng rng(8);
  const int n = 40;
  Dataset d;
  d.X = Matrix::Zero(n, 1);
  d.T = Vector::Zero(n);
  d.S = Vector::Ones(n);
  d.Y = Vector::Zero(n);
  for (int i = 0; i < n; i += 2) d.T(i) = 1;
  Vector phi(n);
  for (int i = 0; i < n; ++i) phi(i) = 0.01 + 0.98 * rng.uniform();
  Eigen::Index am, bm;
  fixed_target_weights({EstimandKind::owate}, d, phi).V.maxCoeff(&am);
  (phi.array() - 0.5).abs().minCoeff(&bm);
  EXPECT_EQ(am, bm);
  const auto os = fixed_target_weights({EstimandKind::osate, 0.1}, d, phi).V;
  const double level = os.maxCoeff();
  for (int i = 0; i < n; ++i) EXPECT_TRUE(os(i) == 0.0 || std::abs(os(i) - level) < 1e-12);
}

TEST(TargetWeights, NormalizationRoundTrip) {
  TargetWeights v{Vector::Constant(4, 0.25), Normalization::simplex};
  const auto u = v.to_unit_mean();
  EXPECT_NEAR(u.V.sum(), 4.0, 1e-15);
  EXPECT_TRUE(u.to_simplex().V.isApprox(v.V));
  EXPECT_EQ(u.total(), 4.0);
}

TEST(Estimand, Parse) {
  EXPECT_EQ(parse_estimand("SATE"), EstimandKind::sate);
  EXPECT_EQ(parse_estimand("kosate"), EstimandKind::kosate);
  EXPECT_THROW(parse_estimand("ate"), Error);
}

TEST(Csv, ReadsAndMarksMissing) {
  std::istringstream in("\xEF\xBB\xBFid,t,s,y,x1,x2\na,1,1,2.5,0.1,0.2\nb,0,1,1,0.3,0.4\nc,,0,,0.5,0.6\n");
  const auto d = read_dataset_csv(in);
  ASSERT_EQ(d.n(), 3);
  EXPECT_EQ(d.p(), 2);
  EXPECT_EQ(d.ids[2], "c");
  EXPECT_TRUE(std::isnan(d.Y(2)));
  EXPECT_DOUBLE_EQ(d.X(1, 1), 0.4);
  EXPECT_NO_THROW(validate_dataset(d));
}

TEST(Csv, MissingColumnIsNamed) {
  std::istringstream in("id,t,s,x1\n1,1,1,0\n");
  try {
    read_dataset_csv(in);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::parse_error);
    EXPECT_NE(std::string(e.what()).find("'y'"), std::string::npos);
  }
}

TEST(Csv, BadCellNamesRowAndColumn) {
  std::istringstream in("id,t,s,y,x1\n1,1,1,abc,0\n");
  try {
    read_dataset_csv(in);
    FAIL();
  } catch (const Error& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("'y'"), std::string::npos);
    EXPECT_NE(msg.find("row 2"), std::string::npos);
  }
}

TEST(Format, RoundTrips) {
  Rng rng(12);
  for (int i = 0; i < 1000; ++i) {
    const double x = rng.normal() * std::pow(10.0, static_cast<int>(rng.uniform() * 20) - 10);
    EXPECT_EQ(std::stod(format_number(x)), x);
  }
  EXPECT_EQ(format_number(std::nan("")), "");
}
