#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace kom {

enum class ErrorCode {
  missing_outcome,
  empty_arm,
  non_binary_indicator,
  non_finite_value,
  missing_propensity,
  missing_sampling_model,
  empty_target,
  not_positive_definite,
  asymmetric_input,
  degenerate_covariance,
  dimension_mismatch,
  arm_too_small,
  single_class,
  invalid_subset_size,
  weight_constraint_violated,
  infeasible,
  all_degrees_failed,
  invalid_argument,
  parse_error,
};

inline std::string_view to_string(ErrorCode c) {
  switch (c) {
    case ErrorCode::missing_outcome: return "MissingOutcome";
    case ErrorCode::empty_arm: return "EmptyArm";
    case ErrorCode::non_binary_indicator: return "NonBinaryIndicator";
    case ErrorCode::non_finite_value: return "NonFiniteValue";
    case ErrorCode::missing_propensity: return "MissingPropensity";
    case ErrorCode::missing_sampling_model: return "MissingSamplingModel";
    case ErrorCode::empty_target: return "EmptyTarget";
    case ErrorCode::not_positive_definite: return "NotPositiveDefinite";
    case ErrorCode::asymmetric_input: return "AsymmetricInput";
    case ErrorCode::degenerate_covariance: return "DegenerateCovariance";
    case ErrorCode::dimension_mismatch: return "DimensionMismatch";
    case ErrorCode::arm_too_small: return "ArmTooSmall";
    case ErrorCode::single_class: return "SingleClass";
    case ErrorCode::invalid_subset_size: return "InvalidSubsetSize";
    case ErrorCode::weight_constraint_violated: return "WeightConstraintViolated";
    case ErrorCode::infeasible: return "Infeasible";
    case ErrorCode::all_degrees_failed: return "AllDegreesFailed";
    case ErrorCode::invalid_argument: return "InvalidArgument";
    case ErrorCode::parse_error: return "ParseError";
  }
  return "Unknown";
}

/// Every failure raised by the library carries one of the codes above so
/// callers (the CLI in particular) can map it to an exit status.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace kom
