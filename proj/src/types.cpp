#include <tubempc/error.hpp>
#include <tubempc/types.hpp>

#include <Eigen/Eigenvalues>

namespace tubempc {

Matrix repeat_blkdiag(const Matrix& block, int count)
{
    Matrix out = Matrix::Zero(block.rows() * count, block.cols() * count);
    for (int k = 0; k < count; ++k) {
        out.block(k * block.rows(), k * block.cols(), block.rows(), block.cols()) = block;
    }
    return out;
}

Matrix blkdiag(const std::vector<Matrix>& blocks)
{
    Eigen::Index rows = 0;
    Eigen::Index cols = 0;
    for (const auto& b : blocks) {
        rows += b.rows();
        cols += b.cols();
    }
    Matrix out = Matrix::Zero(rows, cols);
    Eigen::Index r = 0;
    Eigen::Index c = 0;
    for (const auto& b : blocks) {
        out.block(r, c, b.rows(), b.cols()) = b;
        r += b.rows();
        c += b.cols();
    }
    return out;
}

double spectral_radius(const Matrix& a)
{
    if (a.size() == 0) {
        return 0.0;
    }
    Eigen::EigenSolver<Matrix> es(a, false);
    return es.eigenvalues().cwiseAbs().maxCoeff();
}

const char* to_string(ErrorCode code)
{
    switch (code) {
    case ErrorCode::Unbounded: return "Unbounded";
    case ErrorCode::InfeasibleSet: return "InfeasibleSet";
    case ErrorCode::SingularShape: return "SingularShape";
    case ErrorCode::NotContractive: return "NotContractive";
    case ErrorCode::NoConvergence: return "NoConvergence";
    case ErrorCode::DegenerateSystem: return "DegenerateSystem";
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::PEViolation: return "PEViolation";
    case ErrorCode::LPFailure: return "LPFailure";
    case ErrorCode::UnboundedParameter: return "UnboundedParameter";
    case ErrorCode::MissingRow: return "MissingRow";
    case ErrorCode::Infeasible: return "Infeasible";
    case ErrorCode::SolverFailure: return "SolverFailure";
    case ErrorCode::NoInvariantScaling: return "NoInvariantScaling";
    case ErrorCode::UnstableNominal: return "UnstableNominal";
    case ErrorCode::UnverifiedDesign: return "UnverifiedDesign";
    case ErrorCode::MissingDataset: return "MissingDataset";
    case ErrorCode::MissingArtifact: return "MissingArtifact";
    case ErrorCode::ConfigError: return "ConfigError";
    }
    return "Unknown";
}

}  // namespace tubempc
