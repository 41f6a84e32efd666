#pragma once

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "kom/error.hpp"
#include "kom/linalg.hpp"

namespace kom {

struct RoleCounts {
  Eigen::Index treated = 0;  // T=1, S=1
  Eigen::Index control = 0;  // T=0, S=1
  Eigen::Index outside = 0;  // S=0
  Eigen::Index study() const { return treated + control; }
};

/// Units with S=1 form the study sample and carry an outcome; units with S=0
/// only contribute covariates. Missing outcomes are stored as NaN.
struct Dataset {
  Matrix X;  // n x p, raw units
  Vector T;  // 0/1
  Vector S;  // 0/1
  Vector Y;  // NaN where S=0
  std::vector<std::string> ids;
  RoleCounts roles;  // filled in by validate_dataset

  Eigen::Index n() const { return X.rows(); }
  Eigen::Index p() const { return X.cols(); }
  bool in_study(Eigen::Index i) const { return S(i) == 1.0; }
  bool in_arm(Eigen::Index i, int t) const { return S(i) == 1.0 && T(i) == static_cast<double>(t); }
};

inline double missing_value() { return std::numeric_limits<double>::quiet_NaN(); }

inline RoleCounts count_roles(const Vector& T, const Vector& S) {
  RoleCounts r;
  for (Eigen::Index i = 0; i < S.size(); ++i) {
    if (S(i) == 1.0) {
      (T(i) == 1.0 ? r.treated : r.control)++;
    } else {
      r.outside++;
    }
  }
  return r;
}

inline Dataset validate_dataset(Dataset d) {
  const Eigen::Index n = d.X.rows();
  if (n < 2) throw Error(ErrorCode::invalid_argument, "dataset needs at least two rows");
  if (d.X.cols() < 1) throw Error(ErrorCode::invalid_argument, "dataset needs at least one covariate");
  if (d.T.size() != n || d.S.size() != n || d.Y.size() != n)
    throw Error(ErrorCode::dimension_mismatch, "t, s, y and X must have the same number of rows");
  if (d.ids.empty()) {
    d.ids.reserve(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) d.ids.push_back(std::to_string(i + 1));
  } else if (static_cast<Eigen::Index>(d.ids.size()) != n) {
    throw Error(ErrorCode::dimension_mismatch, "ids must have one entry per row");
  }

  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index k = 0; k < d.X.cols(); ++k) {
      if (!std::isfinite(d.X(i, k)))
        throw Error(ErrorCode::non_finite_value,
                    "covariate x" + std::to_string(k + 1) + " is not finite at row " + d.ids[i]);
    }
    if (d.S(i) != 0.0 && d.S(i) != 1.0)
      throw Error(ErrorCode::non_binary_indicator, "column s is not 0/1 at row " + d.ids[i]);
    if (d.S(i) == 1.0 && d.T(i) != 0.0 && d.T(i) != 1.0)
      throw Error(ErrorCode::non_binary_indicator, "column t is not 0/1 at row " + d.ids[i]);
    if (d.S(i) == 1.0 && !std::isfinite(d.Y(i)))
      throw Error(ErrorCode::missing_outcome, "column y is missing at study row " + d.ids[i]);
    if (d.S(i) == 0.0) {
      d.Y(i) = missing_value();
      if (d.T(i) != 1.0) d.T(i) = 0.0;
    }
  }

  d.roles = count_roles(d.T, d.S);
  if (d.roles.treated == 0) throw Error(ErrorCode::empty_arm, "no treated units in the study sample");
  if (d.roles.control == 0) throw Error(ErrorCode::empty_arm, "no control units in the study sample");
  return d;
}

// ---------------------------------------------------------------------------
// Estimands

enum class EstimandKind { sate, satt, tate, owate, osate, kowate, kosate };

inline std::string_view to_string(EstimandKind k) {
  switch (k) {
    case EstimandKind::sate: return "sate";
    case EstimandKind::satt: return "satt";
    case EstimandKind::tate: return "tate";
    case EstimandKind::owate: return "owate";
    case EstimandKind::osate: return "osate";
    case EstimandKind::kowate: return "kowate";
    case EstimandKind::kosate: return "kosate";
  }
  return "?";
}

inline EstimandKind parse_estimand(std::string_view s) {
  for (auto k : {EstimandKind::sate, EstimandKind::satt, EstimandKind::tate, EstimandKind::owate,
                 EstimandKind::osate, EstimandKind::kowate, EstimandKind::kosate}) {
    std::string lower(s);
    std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char c) { return std::tolower(c); });
    if (lower == to_string(k)) return k;
  }
  throw Error(ErrorCode::invalid_argument, "unknown estimand '" + std::string(s) + "'");
}

struct EstimandSpec {
  EstimandKind kind = EstimandKind::sate;
  double alpha = 0.1;           // truncation level, OSATE
  Eigen::Index subset_size = 0; // n', KOSATE; 0 = derive from OSATE truncation

  bool variable_v() const { return kind == EstimandKind::kowate || kind == EstimandKind::kosate; }
  bool needs_propensity() const { return kind == EstimandKind::owate || kind == EstimandKind::osate; }
};

enum class Normalization {
  unit_mean,  // sum V = n
  simplex,    // sum V = 1
};

struct TargetWeights {
  Vector V;
  Normalization normalization = Normalization::unit_mean;

  double total() const { return normalization == Normalization::unit_mean ? static_cast<double>(V.size()) : 1.0; }

  /// The one place the two conventions are converted; every QP uses unit-mean.
  TargetWeights to_unit_mean() const {
    if (normalization == Normalization::unit_mean) return *this;
    return {V * static_cast<double>(V.size()), Normalization::unit_mean};
  }
  TargetWeights to_simplex() const {
    if (normalization == Normalization::simplex) return *this;
    return {V / static_cast<double>(V.size()), Normalization::simplex};
  }
};

inline bool truncation_keeps(double phi, double alpha) { return alpha < phi && phi < 1.0 - alpha; }

namespace detail {

inline TargetWeights scaled_to_n(Vector raw, std::string_view what) {
  const double total = raw.sum();
  if (!(total > 0.0)) throw Error(ErrorCode::empty_target, std::string(what) + " target has no mass");
  raw *= static_cast<double>(raw.size()) / total;
  return {std::move(raw), Normalization::unit_mean};
}

}  // namespace detail

/// Fixed-formula target weights on the unit-mean scale. Units outside the
/// study get zero weight except for TATE, whose target is exactly them.
inline TargetWeights fixed_target_weights(const EstimandSpec& spec, const Dataset& d,
                                          const std::optional<Vector>& phi = std::nullopt) {
  const Eigen::Index n = d.n();
  Vector raw = Vector::Zero(n);
  if (spec.needs_propensity()) {
    if (!phi) throw Error(ErrorCode::missing_propensity, std::string(to_string(spec.kind)) + " needs a propensity");
    if (phi->size() != n) throw Error(ErrorCode::dimension_mismatch, "propensity length differs from n");
  }

  switch (spec.kind) {
    case EstimandKind::sate:
      for (Eigen::Index i = 0; i < n; ++i) raw(i) = d.S(i);
      return detail::scaled_to_n(std::move(raw), "SATE");
    case EstimandKind::satt:
      for (Eigen::Index i = 0; i < n; ++i) raw(i) = d.S(i) * d.T(i);
      return detail::scaled_to_n(std::move(raw), "SATT");
    case EstimandKind::tate:
      for (Eigen::Index i = 0; i < n; ++i) raw(i) = 1.0 - d.S(i);
      if (raw.sum() == 0.0) throw Error(ErrorCode::empty_target, "TATE needs units outside the study (s=0)");
      return detail::scaled_to_n(std::move(raw), "TATE");
    case EstimandKind::owate:
      for (Eigen::Index i = 0; i < n; ++i) raw(i) = d.S(i) * (*phi)(i) * (1.0 - (*phi)(i));
      return detail::scaled_to_n(std::move(raw), "OWATE");
    case EstimandKind::osate:
      for (Eigen::Index i = 0; i < n; ++i) raw(i) = d.S(i) * (truncation_keeps((*phi)(i), spec.alpha) ? 1.0 : 0.0);
      if (raw.sum() == 0.0)
        throw Error(ErrorCode::empty_target, "every unit was truncated at alpha=" + std::to_string(spec.alpha));
      return detail::scaled_to_n(std::move(raw), "OSATE");
    case EstimandKind::kowate:
    case EstimandKind::kosate:
      break;
  }
  throw Error(ErrorCode::invalid_argument,
              std::string(to_string(spec.kind)) + " weights come from the variable-V problem, not a formula");
}

// ---------------------------------------------------------------------------
// CSV ingestion: id,t,s,y,x1..xp with a header row.

/// Shortest decimal form that reads back to the same double; NaN is empty.
inline std::string format_number(double x) {
  if (std::isnan(x)) return "";
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, r.ptr);
}

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) {
    while (!cell.empty() && (cell.back() == '\r' || cell.back() == ' ')) cell.pop_back();
    std::size_t start = 0;
    while (start < cell.size() && cell[start] == ' ') ++start;
    out.push_back(cell.substr(start));
  }
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline double parse_cell(const std::string& cell, std::string_view column, std::size_t row) {
  try {
    std::size_t used = 0;
    const double v = std::stod(cell, &used);
    if (used != cell.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    throw Error(ErrorCode::parse_error,
                "column '" + std::string(column) + "' row " + std::to_string(row) + ": cannot parse '" + cell + "'");
  }
}

}  // namespace detail

inline Dataset read_dataset_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw Error(ErrorCode::parse_error, "empty CSV (header required)");
  if (line.size() >= 3 && static_cast<unsigned char>(line[0]) == 0xEF) line.erase(0, 3);  // BOM
  const auto header = detail::split_csv_line(line);

  auto find = [&](std::string_view name) -> std::optional<std::size_t> {
    for (std::size_t j = 0; j < header.size(); ++j)
      if (header[j] == name) return j;
    return std::nullopt;
  };
  const auto id_col = find("id");
  const auto t_col = find("t");
  const auto s_col = find("s");
  const auto y_col = find("y");
  for (auto [col, name] : {std::pair{t_col, "t"}, std::pair{s_col, "s"}, std::pair{y_col, "y"}})
    if (!col) throw Error(ErrorCode::parse_error, std::string("missing required column '") + name + "'");

  std::vector<std::size_t> x_cols;
  for (int k = 1;; ++k) {
    auto c = find("x" + std::to_string(k));
    if (!c) break;
    x_cols.push_back(*c);
  }
  if (x_cols.empty()) throw Error(ErrorCode::parse_error, "missing covariate columns 'x1'..'xp'");

  std::vector<std::vector<std::string>> rows;
  while (std::getline(in, line)) {
    if (line.empty() || line == "\r") continue;
    rows.push_back(detail::split_csv_line(line));
  }

  const auto n = static_cast<Eigen::Index>(rows.size());
  Dataset d;
  d.X.resize(n, static_cast<Eigen::Index>(x_cols.size()));
  d.T.resize(n);
  d.S.resize(n);
  d.Y.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& r = rows[static_cast<std::size_t>(i)];
    const std::size_t line_no = static_cast<std::size_t>(i) + 2;
    if (r.size() < header.size())
      throw Error(ErrorCode::parse_error, "row " + std::to_string(line_no) + " has too few cells");
    d.ids.push_back(id_col ? r[*id_col] : std::to_string(i + 1));
    d.T(i) = r[*t_col].empty() ? 0.0 : detail::parse_cell(r[*t_col], "t", line_no);
    d.S(i) = detail::parse_cell(r[*s_col], "s", line_no);
    d.Y(i) = r[*y_col].empty() ? missing_value() : detail::parse_cell(r[*y_col], "y", line_no);
    for (std::size_t k = 0; k < x_cols.size(); ++k)
      d.X(i, static_cast<Eigen::Index>(k)) =
          detail::parse_cell(r[x_cols[k]], "x" + std::to_string(k + 1), line_no);
  }
  return d;
}

inline Dataset read_dataset_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::parse_error, "cannot open '" + path + "'");
  return read_dataset_csv(in);
}

}  // namespace kom
