#pragma once

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include <vector>

namespace tubempc {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using SparseMatrix = Eigen::SparseMatrix<double>;
using Triplet = Eigen::Triplet<double>;
using Triplets = std::vector<Triplet>;

/// Block-diagonal stacking of one matrix repeated `count` times.
Matrix repeat_blkdiag(const Matrix& block, int count);

/// Block-diagonal stacking of heterogeneous blocks.
Matrix blkdiag(const std::vector<Matrix>& blocks);

/// Spectral radius via the eigenvalues of a general square matrix.
double spectral_radius(const Matrix& a);

}  // namespace tubempc
