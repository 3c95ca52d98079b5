#pragma once

#include <tubempc/design.hpp>
#include <tubempc/model.hpp>
#include <tubempc/qp_solver.hpp>

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace tubempc {

enum class CostMode { Quadratic, Linear };

/// How the robust one-step inclusions are encoded.
enum class LambdaMode {
    /// Box parameter sets: the inner maximisation is taken in closed form,
    /// with |.| handled by one epigraph vector per (stage, vertex).
    ClosedForm,
    /// Explicit nonnegative multipliers with H_p E = Lambda H_theta.
    Explicit,
};

CostMode parse_cost_mode(const std::string& s);
LambdaMode parse_lambda_mode(const std::string& s);
const char* to_string(CostMode m);
const char* to_string(LambdaMode m);

struct MpcConfig {
    int horizon = 5;
    CostMode cost = CostMode::Quadratic;
    /// Linear objective c' sum_l Xhat_l (l = 1..N) in linear mode.
    Vector c;
    /// Small weight on sum(alpha) in linear mode; keeps the tube sizes unique.
    double alpha_weight = 1e-3;
    bool terminal = true;
    LambdaMode lambda = LambdaMode::ClosedForm;
    /// Replaces the design's P as terminal weight (quadratic mode).
    std::optional<Matrix> terminal_weight;
    /// If set, build_qp refuses designs whose hash differs.
    std::optional<std::string> expected_hash;
};

/// Generic uncertainty description: M(theta) affine in theta, theta in a polytope.
struct PolytopicModel {
    AffineTerms terms;
    HPolytope theta;
    Box Wx;
    Box Wy;

    static PolytopicModel from(const MultiStepModel& m);
};

/// Offsets of every variable group inside the stacked decision vector.
struct QpIndex {
    int nx = 0, nu = 0, p = 1, N = 0, nv = 0;
    int z0 = 0, alpha0 = 0, V0 = 0, X0 = 0, U0 = 0, Y0 = 0, aux0 = 0;
    int aux_per_stage_vertex = 0;  ///< epigraph length or multipliers per (l, v)
    int total = 0;

    int z(int l) const { return z0 + l * nx; }
    int alpha(int l) const { return alpha0 + l; }
    int V(int l) const { return V0 + l * nu * p; }
    int Xhat(int l) const { return X0 + l * nx; }
    int Uhat(int l) const { return U0 + l * nu * p; }
    int Yhat(int l) const { return Y0 + l * nx * (p - 1); }

    struct Segment {
        std::string name;
        int offset;
        int size;
    };
    std::vector<Segment> segments() const;
};

struct QPSpec {
    QpProblem qp;
    QpIndex index;
    LambdaMode lambda = LambdaMode::ClosedForm;
    /// Explicit mode: for every (l, v) the kept (row, facet) multiplier pairs,
    /// in the order of their variables starting at aux_offsets[l * nv + v].
    std::vector<std::vector<std::pair<int, int>>> lambda_pattern;
    std::vector<int> aux_offsets;
    int lambda_rows = 0;    ///< q_x + c_x (p - 1)
    int lambda_facets = 0;  ///< q_theta
    Vector Xj;
    Matrix K;
    Matrix V;  ///< tube shape
    double eta = 0.0;

    int num_vars() const { return static_cast<int>(qp.q.size()); }
    int num_eq() const { return static_cast<int>(qp.A.rows()); }
    int num_ineq() const { return static_cast<int>(qp.G.rows()); }
};

QPSpec build_qp(const Vector& Xj, const MultiStepModel& model, const ControllerDesign& design,
                const MpcConfig& cfg);

/// Explicit-multiplier build for an arbitrary polytopic parameter set.
QPSpec build_qp(const Vector& Xj, const PolytopicModel& model, const ControllerDesign& design,
                const MpcConfig& cfg);

struct TubeDecision {
    std::vector<Vector> z;
    std::vector<double> alpha;
    std::vector<Vector> V;
    /// Explicit mode only: Lambda[l][v], (q_x + c_x(p-1)) x q_theta.
    std::vector<std::vector<Matrix>> Lambda;
};

struct NominalTrajectory {
    std::vector<Vector> X;
    std::vector<Vector> U;
    std::vector<Vector> Y;
};

enum class MpcStatus { Optimal, Infeasible, NumericalFailure };
const char* to_string(MpcStatus s);

struct MPCSolution {
    MpcStatus status = MpcStatus::NumericalFailure;
    TubeDecision tube;
    NominalTrajectory nominal;
    Vector U;  ///< applied block V_0 + K X_j
    double objective = 0.0;
    double eq_residual = 0.0;
    double ineq_residual = 0.0;
    int iterations = 0;
    Vector raw;  ///< full decision vector
};

struct SolveOptions {
    QpSettings qp;
    /// Throw Error(Infeasible / SolverFailure) instead of returning a failed status.
    bool throw_on_failure = true;
    std::optional<Vector> warm_start;
};

MPCSolution solve_step(const QPSpec& spec, const SolveOptions& options = {});

/// Candidate decision for the next block: everything shifted by one stage,
/// the appended stage has V = 0 and alpha = eta. Seeds the next solve.
Vector shifted_warm_start(const QPSpec& next, const MPCSolution& previous, const MultiStepModel& model);

struct TubeReport {
    double max_violation = 0.0;  ///< of tube containment and output rows
    int worst_stage = -1;
    long samples = 0;
};

/// Monte-Carlo check that uncertain one-block successors of every tube
/// cross-section land in the next one and respect the output constraints.
TubeReport verify_tube(const MPCSolution& solution, const MultiStepModel& model, const ControllerDesign& design,
                       int n_samples, std::uint64_t seed = 1);

/// max(|V (x - z_l)|_inf - alpha_l, 0).
double tube_violation(const MPCSolution& solution, const Matrix& V, int stage, const Vector& x);

/// Numeric data of one (stage, vertex) inclusion: rows of H_p E (columns per
/// parameter), H_p e and the right-hand side Phi - wbar.
struct StageData {
    Matrix HE;
    Vector He;
    Vector rhs;
};

StageData make_stage_data(const PolytopicModel& model, const Matrix& Hp, const Matrix& K, const Vector& xv,
                          const Vector& z, double alpha, const Vector& Vl, const Vector& z_next, double alpha_next,
                          const Vector& wbar_x, const Vector& wbar_y);

struct DualCheck {
    Vector lp_value;      ///< per row: min Lambda h  s.t. Lambda H = HE, Lambda >= 0 (plus He - rhs)
    Vector vertex_value;  ///< per row: max over vertices of HE theta (plus He - rhs)
    bool lambda_feasible = false;
    bool vertex_feasible = false;
    bool equivalent = false;
};

/// Compares the multiplier form with brute-force vertex maximisation.
DualCheck dual_equivalence_check(const StageData& stage, const HPolytope& Theta, double tol = 1e-7);

/// Vertices of a bounded polytope by facet-subset enumeration (small instances).
std::vector<Vector> enumerate_vertices(const HPolytope& P, double tol = 1e-9);

/// Plain-text triplet dump: sections COST, EQ, INEQ with `row col value` lines.
void export_triplets(const QPSpec& spec, std::ostream& os);

}  // namespace tubempc
