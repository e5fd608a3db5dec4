#include "cebd/error.hpp"

namespace cebd {

std::string_view error_module(ErrorCode code) {
  switch (code) {
    case ErrorCode::NonSymmetric:
    case ErrorCode::IndefiniteBeyondTolerance:
    case ErrorCode::FromNotPositiveDefinite:
      return "bures";
    case ErrorCode::DomainError:
    case ErrorCode::SingularCovariance:
    case ErrorCode::EmptyDataset:
    case ErrorCode::DimensionError:
    case ErrorCode::DegenerateSample:
      return "models";
    case ErrorCode::GridTooLarge:
    case ErrorCode::AllAtomsZeroLikelihood:
    case ErrorCode::NonConvergence:
      return "gmodel";
    case ErrorCode::InfeasibleMarginals:
    case ErrorCode::CycleLimit:
    case ErrorCode::Infeasible:
    case ErrorCode::Unbounded:
    case ErrorCode::EmptyRow:
    case ErrorCode::ProblemTooLarge:
      return "transport";
    case ErrorCode::BayesCovarianceSingular:
    case ErrorCode::GridInfeasible:
      return "constrain";
    case ErrorCode::ParseError:
    case ErrorCode::ColumnMismatch:
    case ErrorCode::RowCountMismatch:
    case ErrorCode::UnknownScenario:
    case ErrorCode::ConfigError:
      return "cli";
  }
  return "unknown";
}

std::string_view error_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::NonSymmetric: return "NonSymmetric";
    case ErrorCode::IndefiniteBeyondTolerance: return "IndefiniteBeyondTolerance";
    case ErrorCode::FromNotPositiveDefinite: return "FromNotPositiveDefinite";
    case ErrorCode::DomainError: return "DomainError";
    case ErrorCode::SingularCovariance: return "SingularCovariance";
    case ErrorCode::EmptyDataset: return "EmptyDataset";
    case ErrorCode::DimensionError: return "DimensionError";
    case ErrorCode::DegenerateSample: return "DegenerateSample";
    case ErrorCode::GridTooLarge: return "GridTooLarge";
    case ErrorCode::AllAtomsZeroLikelihood: return "AllAtomsZeroLikelihood";
    case ErrorCode::NonConvergence: return "NonConvergence";
    case ErrorCode::InfeasibleMarginals: return "InfeasibleMarginals";
    case ErrorCode::CycleLimit: return "CycleLimit";
    case ErrorCode::Infeasible: return "Infeasible";
    case ErrorCode::Unbounded: return "Unbounded";
    case ErrorCode::EmptyRow: return "EmptyRow";
    case ErrorCode::ProblemTooLarge: return "ProblemTooLarge";
    case ErrorCode::BayesCovarianceSingular: return "BayesCovarianceSingular";
    case ErrorCode::GridInfeasible: return "GridInfeasible";
    case ErrorCode::ParseError: return "ParseError";
    case ErrorCode::ColumnMismatch: return "ColumnMismatch";
    case ErrorCode::RowCountMismatch: return "RowCountMismatch";
    case ErrorCode::UnknownScenario: return "UnknownScenario";
    case ErrorCode::ConfigError: return "ConfigError";
  }
  return "Unknown";
}

std::string Error::qualified() const {
  std::string s(error_module(code_));
  s += '.';
  s += error_name(code_);
  return s;
}

}  // namespace cebd
