#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace cebd {

enum class ErrorCode {
  // bures
  NonSymmetric,
  IndefiniteBeyondTolerance,
  FromNotPositiveDefinite,
  // models
  DomainError,
  SingularCovariance,
  EmptyDataset,
  DimensionError,
  DegenerateSample,
  // gmodel
  GridTooLarge,
  AllAtomsZeroLikelihood,
  NonConvergence,
  // transport
  InfeasibleMarginals,
  CycleLimit,
  Infeasible,
  Unbounded,
  EmptyRow,
  ProblemTooLarge,
  // constrain
  BayesCovarianceSingular,
  GridInfeasible,
  // io / cli
  ParseError,
  ColumnMismatch,
  RowCountMismatch,
  UnknownScenario,
  ConfigError,
};

/// Module that owns an error code, e.g. "transport".
std::string_view error_module(ErrorCode code);
std::string_view error_name(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

  /// Qualified code such as "gmodel.NonConvergence".
  std::string qualified() const;

 private:
  ErrorCode code_;
};

}  // namespace cebd
