#pragma once

#include <stdexcept>
#include <string>

namespace tubempc {

enum class ErrorCode {
    Unbounded,
    InfeasibleSet,
    SingularShape,
    NotContractive,
    NoConvergence,
    DegenerateSystem,
    DimensionMismatch,
    PEViolation,
    LPFailure,
    UnboundedParameter,
    MissingRow,
    Infeasible,
    SolverFailure,
    NoInvariantScaling,
    UnstableNominal,
    UnverifiedDesign,
    MissingDataset,
    MissingArtifact,
    ConfigError,
};

const char* to_string(ErrorCode code);

/// Every failure raised by the library carries a machine-readable code.
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& what)
        : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code)
    {
    }

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

inline void require_dims(bool ok, const std::string& what)
{
    if (!ok) {
        throw Error(ErrorCode::DimensionMismatch, what);
    }
}

}  // namespace tubempc
