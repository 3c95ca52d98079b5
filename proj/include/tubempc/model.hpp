#pragma once

#include <tubempc/geometry.hpp>
#include <tubempc/types.hpp>

#include <random>
#include <vector>

namespace tubempc {

/// x+ = A x + B u + M w,  w in W.
struct GroundTruthModel {
    Matrix A;
    Matrix B;
    Matrix M;
    Box W;
    double Ts = 0.0;

    int nx() const { return static_cast<int>(A.rows()); }
    int nu() const { return static_cast<int>(B.cols()); }
    int nw() const { return static_cast<int>(M.cols()); }
    void validate() const;
};

/// Zero-order hold of gain / den(s) in controllable canonical form with the
/// gain placed in the input matrix, so the output equals the last state.
/// `den` lists coefficients from the highest power down. M = 0, W = {0}.
GroundTruthModel discretize_zoh(const std::vector<double>& den, double gain, double Ts);

/// Exact ZOH of a continuous pair (Ac, Bc).
std::pair<Matrix, Matrix> zoh(const Matrix& Ac, const Matrix& Bc, double Ts);

/// Block-lifted matrices of the true plant.
/// Abar = A^p, Bbar = [A^{p-1}B ... B], Cbar/Dbar stack the j-step maps for j = 1..p-1,
/// Mbar/Nbar are the matching disturbance maps.
struct LiftedMatrices {
    int p = 1;
    Matrix Abar, Bbar, Cbar, Dbar, Mbar, Nbar;
};

LiftedMatrices lift_exact(const GroundTruthModel& gt, int p);

/// Per-row true coefficient vector [C_i A^j, C_i A^{j-1} B, ..., C_i B].
Vector true_row_parameters(const GroundTruthModel& gt, int steps, int state);

/// Exact box of the j-step lumped disturbance sum_t A^{j-1-t} M w_t, w_t in W.
Box lumped_disturbance_box(const GroundTruthModel& gt, int steps);

/// (Wx, Wy) for a p-step model: the p-step box and the stacked j = 1..p-1 boxes.
std::pair<Box, Box> lumped_disturbance_boxes(const GroundTruthModel& gt, int p);

struct Trajectory {
    std::vector<Vector> x;  ///< N+1 states
    std::vector<Vector> u;  ///< N inputs
    std::vector<Vector> w;  ///< N disturbances actually applied
    int clipped = 0;        ///< disturbance samples clipped into W

    int length() const { return static_cast<int>(u.size()); }
    int block(int k, int p) const { return k / p; }
};

Vector sample_uniform(const Box& box, std::mt19937_64& rng);

/// Roll out with a fixed disturbance sequence (clipped into W, clips counted).
Trajectory simulate(const GroundTruthModel& gt, const Vector& x0, const std::vector<Vector>& U,
                    const std::vector<Vector>& Wseq);

/// Roll out with disturbances drawn uniformly from W.
Trajectory simulate(const GroundTruthModel& gt, const Vector& x0, const std::vector<Vector>& U,
                    std::mt19937_64& rng);

/// Row-structured multi-step predictor.
///
/// Every (steps j, state i) predictor row owns an independent coefficient block
/// theta_hat + delta, where delta ranges over a residual box. Rows with j = p
/// form (Abar, Bbar); rows with j < p form the intermediate outputs (Cbar, Dbar).
/// The global parameter vector is the concatenation of the deltas in row order:
/// p-step rows (i = 0..nx-1) first, then j = 1..p-1 rows.
struct PredictorRow {
    int state = 0;
    int steps = 1;
    Vector theta_hat;  ///< length nx + nu*steps
    Box residual;      ///< box on delta = theta - theta_hat
};

struct AffineTerms;

class MultiStepModel {
public:
    struct Matrices {
        Matrix A, B, C, D;
    };

    MultiStepModel() = default;
    MultiStepModel(int p, int nx, int nu, std::vector<PredictorRow> rows, Box Wx, Box Wy);

    /// Singleton-uncertainty model with the exact lifted matrices as nominal.
    static MultiStepModel from_lifted(const GroundTruthModel& gt, int p, const Box& Wx, const Box& Wy);

    int p() const { return p_; }
    int nx() const { return nx_; }
    int nu() const { return nu_; }
    int num_params() const { return num_params_; }
    int num_rows() const { return static_cast<int>(rows_.size()); }
    const std::vector<PredictorRow>& rows() const { return rows_; }
    /// Row index of the (steps, state) predictor.
    int row_index(int steps, int state) const;
    const PredictorRow& row(int steps, int state) const { return rows_[row_index(steps, state)]; }
    int param_offset(int row) const { return offsets_[row]; }
    const Box& Wx() const { return Wx_; }
    const Box& Wy() const { return Wy_; }

    Matrices nominal() const;
    /// Matrices at theta_hat + delta (delta in global parameter order).
    Matrices evaluate(const Vector& delta) const;
    /// Matrices with each row at its own coefficient vector (full coefficients, not deltas).
    Matrices from_row_coefficients(const std::vector<Vector>& coeffs) const;

    Box theta_box() const;
    HPolytope theta_polytope() const;
    AffineTerms terms() const;

private:
    int p_ = 1;
    int nx_ = 0;
    int nu_ = 0;
    int num_params_ = 0;
    std::vector<PredictorRow> rows_;
    std::vector<int> offsets_;
    Box Wx_;
    Box Wy_;
};

/// Generic affine-in-theta multi-step matrices: M(theta) = M_0 + sum_i M_i theta_i.
struct AffineTerms {
    int p = 1;
    int nx = 0;
    int nu = 0;
    std::vector<MultiStepModel::Matrices> terms;  ///< terms[0] is the constant part

    int num_params() const { return static_cast<int>(terms.size()) - 1; }
    MultiStepModel::Matrices evaluate(const Vector& theta) const;
};

}  // namespace tubempc
