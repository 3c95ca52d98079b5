#pragma once

#include <tubempc/design.hpp>
#include <tubempc/identify.hpp>
#include <tubempc/mpc.hpp>

#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace tubempc {

enum class TauMode {
    Observed,   ///< regressors taken from the identification data
    WorstCase,  ///< regressors ranging over the bounding boxes of X and U
};

TauMode parse_tau_mode(const std::string& s);
const char* to_string(TauMode m);

/// Prediction-error bounds max |phi'(theta - theta_hat)| per predictor row.
/// The disturbance part is kept separately in `noise_*` (it cancels in the
/// difference of two predictions and enters the tube through Wx / Wy).
struct TauTable {
    Vector tau_p;    ///< p-step rows, n_x
    Matrix tau_j;    ///< (p - 1) x n_x, row j - 1
    Vector noise_p;  ///< radius of Wx
    Matrix noise_j;  ///< radii of Wy, same layout as tau_j

    Vector total_p() const { return tau_p + noise_p; }
    /// tau_j stacked as j = 1..p-1 blocks of n_x, matching the output vector.
    Vector stacked_j() const;
};

TauTable worst_case_tau(const MultiStepModel& model, TauMode mode, const ConstraintSets* sets,
                        const Dataset* data);

struct RigidTubeConfig {
    TauTable tau;
    Box rpi_box;      ///< cross-section S, RPI for e+ = Acl e + d, d in dist_x
    Box dist_x;       ///< tau_p box plus Wx
    Box dist_y;       ///< tau_j boxes plus Wy
    MultiStepModel::Matrices nominal;
    Matrix K;
};

struct RigidSolution {
    MpcStatus status = MpcStatus::NumericalFailure;
    std::vector<Vector> z;  ///< N + 1 centres
    std::vector<Vector> v;  ///< N nominal input blocks
    std::vector<Vector> y;  ///< N nominal intermediate outputs
    Vector U;               ///< K (X_j - z_0) + v_0
    double objective = 0.0;
    int iterations = 0;
};

/// Multi-rate MPC with a rigid tube z_l + S and u = K (x - z) + v.
class RigidTubeController {
public:
    RigidTubeController(const MultiStepModel& model, const ControllerDesign& design, const TauTable& tau,
                        const MpcConfig& cfg);

    const RigidTubeConfig& config() const { return cfg_; }
    QpProblem build(const Vector& Xj) const;
    RigidSolution solve(const Vector& Xj, const SolveOptions& options = {}) const;

    int horizon() const { return mpc_.horizon; }
    int z_offset(int l) const { return l * nx_; }
    int v_offset(int l) const { return (N() + 1) * nx_ + l * nup_; }
    int y_offset(int l) const { return (N() + 1) * nx_ + N() * nup_ + l * ny_; }

private:
    int N() const { return mpc_.horizon; }

    RigidTubeConfig cfg_;
    MpcConfig mpc_;
    DesignWeights weights_;
    Matrix P_;
    ConstraintSets sets_;
    Matrix Fp_, Gp_;
    int nx_ = 0, nup_ = 0, ny_ = 0, p_ = 1;
    Vector state_rhs_, input_rhs_, output_rhs_;
};

/// The p = 1 homothetic tube controller, re-solved at every time instant.
class OneStepHomothetic {
public:
    OneStepHomothetic(MultiStepModel model, ControllerDesign design, MpcConfig cfg);

    QPSpec build(const Vector& x) const { return build_qp(x, model_, design_, cfg_); }
    MPCSolution solve(const Vector& x, const SolveOptions& options = {}) const;

    const MultiStepModel& model() const { return model_; }
    const ControllerDesign& design() const { return design_; }
    const MpcConfig& config() const { return cfg_; }

private:
    MultiStepModel model_;
    ControllerDesign design_;
    MpcConfig cfg_;
};

struct ComplexityRow {
    std::string controller;
    long n_var = 0;
    long n_ineq = 0;
    long n_eq = 0;
    std::optional<double> reference_var, reference_ineq, reference_eq;
};

ComplexityRow count_qp(const std::string& name, const QpProblem& qp);

/// Attaches the published reference counts for the known controller names
/// ("rigid", "homothetic", "proposed").
std::vector<ComplexityRow> complexity_report(const std::vector<std::pair<std::string, const QpProblem*>>& qps);

/// |log10(ours / reference)| <= 1.
bool within_order_of_magnitude(double ours, double reference);

void write_complexity_csv(const std::vector<ComplexityRow>& rows, std::ostream& os);

}  // namespace tubempc
