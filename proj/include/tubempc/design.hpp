#pragma once

#include <tubempc/geometry.hpp>
#include <tubempc/model.hpp>
#include <tubempc/sdp_solver.hpp>

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace tubempc {

/// X = {x : F x <= 1}, U = {u : G u <= 1}.
struct ConstraintSets {
    Matrix F;
    Matrix G;

    /// Boxes [lo, hi] with finite, sign-straddling bounds (0 strictly inside).
    static ConstraintSets from_boxes(const Vector& x_lo, const Vector& x_hi, const Vector& u_lo, const Vector& u_hi);
    HPolytope state_set() const { return HPolytope(F, Vector::Ones(F.rows()), true); }
    HPolytope input_set() const { return HPolytope(G, Vector::Ones(G.rows()), true); }
    /// Bounding boxes of X and U (by support values).
    Box state_box() const;
    Box input_box() const;
};

/// Q = diag(q) > 0, R > 0.
struct DesignWeights {
    Vector q;
    Matrix R;

    void validate(int nx, int nu) const;
    Matrix Q() const { return q.asDiagonal(); }
    Matrix Qp(int p) const { return repeat_blkdiag(Q(), p - 1); }
    Matrix Rp(int p) const { return repeat_blkdiag(R, p); }
};

struct SynthesisSettings {
    /// Q is inflated by this relative amount inside the LMIs so the returned
    /// pair satisfies the terminal-cost inequality with a strictly positive margin.
    double margin_inflation = 1e-3;
    SdpSettings sdp;
};

struct SynthesisResult {
    Matrix K;
    Matrix P;
    /// Slack matrices in P coordinates: Pbar[i], Qbar[i][j-1].
    std::vector<Matrix> Pbar;
    std::vector<std::vector<Matrix>> Qbar;
    SdpResult sdp;
    int vertex_blocks = 0;
};

/// Diagonal-P terminal cost and feedback gain from the per-row vertex LMIs.
SynthesisResult synthesize_KP(const MultiStepModel& model, const DesignWeights& weights,
                              const SynthesisSettings& settings = {});

struct MarginReport {
    double margin = 0.0;             ///< min of the two below
    double decomposed_margin = 0.0;  ///< best slack certificate over all row-vertex blocks
    double sampled_margin = 0.0;     ///< min eig of P - lhs(theta) over random draws
    int vertex_blocks = 0;
    int samples = 0;
};

/// Terminal-cost inequality check. The decomposed margin is the largest t
/// such that slacks exist with every row-vertex term and the aggregate
/// condition holding with t*I to spare.
MarginReport verify_terminal_cost(const MultiStepModel& model, const Matrix& K, const Matrix& P,
                                  const DesignWeights& weights, int samples, std::uint64_t seed = 1);

/// Diagonal P for a fixed K (the P-only program used by the fallback path).
SynthesisResult synthesize_P_for_K(const MultiStepModel& model, const Matrix& K, const DesignWeights& weights,
                                   const SynthesisSettings& settings = {});

/// Infinite-horizon LQR gain u = K x for (A, B) by Riccati iteration.
Matrix lqr_gain(const Matrix& A, const Matrix& B, const Matrix& Q, const Matrix& R);

/// Vertices of one predictor row's coefficient box (only coordinates with
/// positive width are enumerated).
std::vector<Vector> row_vertices(const PredictorRow& row);

struct ShapeResult {
    Matrix V;
    double rho = 0.0;         ///< |V Acl V^{-1}|_inf at the nominal parameters
    double robust_rho = 0.0;  ///< interval upper bound over the parameter box
    bool fallback = false;    ///< identity used because the eigenbasis was ill-conditioned
    bool rho_ok = true;       ///< rho <= target
};

/// Low-complexity tube shape from the real left eigenbasis of the nominal
/// closed loop. Rows are scaled so that the box `scale_radius` touches every
/// facet (rows of a complex pair share one scale).
ShapeResult choose_tube_shape(const MultiStepModel& model, const Matrix& K,
                              const std::optional<Vector>& scale_radius = std::nullopt, double rho_target = 0.9);

/// Interval bound on max_theta |V Acl(theta) V^{-1}|_inf.
double robust_contraction_bound(const MultiStepModel& model, const Matrix& K, const Matrix& V);

struct Tightenings {
    Vector fbar;  ///< c_x
    Vector gbar;  ///< c_u * p
    Vector wx;    ///< q_x
    Vector wy;    ///< c_x * (p - 1)
    Matrix Fp;    ///< blkdiag(F, ..., F), p - 1 blocks
    Matrix Gp;    ///< blkdiag(G, ..., G), p blocks
    Matrix Hp;    ///< blkdiag(H_x, F_p)
};

Tightenings precompute_tightenings(const ConstraintSets& sets, const LowComplexityPolytope& X0, const Matrix& K,
                                   const Box& Wx, const Box& Wy, int p);

/// Robust one-block support of the closed loop: for each row of `Hrows`
/// (acting on the p-step state when `output` is false, on the stacked
/// intermediate states otherwise) returns max over X0 vertices and the
/// parameter box of Hrows_r * M_cl(theta) x.
Vector closed_loop_support(const MultiStepModel& model, const Matrix& K, const LowComplexityPolytope& X0,
                           const Matrix& Hrows, bool output);

struct EtaReport {
    double eta = 0.0;
    double eta_lower = 0.0;  ///< smallest eta making eta*X0 invariant
    double eta_upper = 0.0;  ///< largest eta fitting the constraints
};

/// Largest eta with eta*X0 robustly invariant and constraint admissible.
EtaReport terminal_set_eta(const MultiStepModel& model, const Matrix& K, const LowComplexityPolytope& X0,
                           const Tightenings& t);

struct ControllerDesign {
    int p = 1;
    Matrix K;
    Matrix P;
    Matrix V;
    double eta = 0.0;
    Tightenings tight;
    DesignWeights weights;
    ConstraintSets sets;
    double rho = 0.0;
    double robust_rho = 0.0;
    double margin = 0.0;
    bool used_fallback = false;
    /// False when (K, P) come from the nominal LQR without a robust certificate.
    bool certified = true;
    /// False when no scaling eta*X0 is both invariant and admissible.
    bool has_terminal_set = true;

    LowComplexityPolytope X0() const { return LowComplexityPolytope(V); }
    /// Content hash over every numeric field (FNV-1a on the raw bytes).
    std::string hash() const;
};

struct DesignSettings {
    SynthesisSettings synthesis;
    int verify_samples = 1000;
    double rho_target = 0.9;
    /// When the joint (K, P) program fails, take K from the nominal lifted LQR
    /// and solve the remaining P-only program instead.
    bool allow_fallback = true;
    /// Skip the LMI program: K is the nominal lifted LQR gain and P its nominal
    /// cost-to-go. The result is marked uncertified (used by the one-step baseline,
    /// for which a diagonal certificate need not exist).
    bool certify = true;
};

/// Nominal cost-to-go P = Acl' P Acl + Q + Ccl' Qp Ccl + K' Rp K of u = K x.
Matrix nominal_cost_to_go(const MultiStepModel& model, const Matrix& K, const DesignWeights& weights);

/// Offline pipeline: (K, P) -> verify -> X0 -> tightenings -> eta.
ControllerDesign design_controller(const MultiStepModel& model, const ConstraintSets& sets,
                                   const DesignWeights& weights, const DesignSettings& settings,
                                   const std::optional<Vector>& shape_scale = std::nullopt);

}  // namespace tubempc
