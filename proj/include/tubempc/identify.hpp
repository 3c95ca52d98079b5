#pragma once

#include <tubempc/geometry.hpp>
#include <tubempc/model.hpp>

#include <optional>
#include <random>
#include <vector>

namespace tubempc {

/// Raw excitation record: states x_0..x_T and inputs u_0..u_{T-1}.
struct Dataset {
    std::vector<Vector> x;
    std::vector<Vector> u;

    int size() const { return static_cast<int>(u.size()); }
    int nx() const { return x.empty() ? 0 : static_cast<int>(x.front().size()); }
    int nu() const { return u.empty() ? 0 : static_cast<int>(u.front().size()); }
};

/// Excite the plant from x0 = 0 with inputs uniform in `input_box` and
/// disturbances uniform in gt.W.
Dataset generate_dataset(const GroundTruthModel& gt, int samples, const Box& input_box, std::mt19937_64& rng);

struct Regressor {
    Vector psi;  ///< [x_k; u_k; ...; u_{k+j-1}]
    double target = 0.0;
};

std::vector<Regressor> build_regressors(const Dataset& ds, int steps, int state, bool check_pe = true);

struct MinErrorResult {
    double lambda = 0.0;
    Vector theta;
};

/// Chebyshev fit: min lambda s.t. |target - psi' theta| <= lambda.
MinErrorResult min_error_bound(const std::vector<Regressor>& regs);

/// Bounding box of {theta : |target - psi' theta| <= bound}, inflated by 1e-9 per side.
Box feasible_parameter_box(const std::vector<Regressor>& regs, double bound);

struct NominalResult {
    Vector theta_hat;
    double tau_hat = 0.0;
};

/// max_k max_{theta in box} |psi_k'(theta - theta_hat)|, closed form for boxes.
double observed_prediction_bound(const std::vector<Regressor>& regs, const Box& box, const Vector& theta_hat);

/// Same quantity with psi ranging over the box [lo, hi] instead of the data.
double worst_case_prediction_bound(const Vector& lo, const Vector& hi, const Box& box, const Vector& theta_hat);

/// theta_hat minimising the observed worst-case bound; tau_hat adds `noise_bound`.
NominalResult nominal_parameters(const std::vector<Regressor>& regs, const Box& box, double noise_bound);

/// How the noise level used in the feasible parameter set is chosen.
enum class FpsBound {
    Lambda,  ///< the Chebyshev residual lambda itself
    Scaled,  ///< scale * lambda
    Known,   ///< exact lumped bound of the declared disturbance (needs the plant's M and W)
};

FpsBound parse_fps_bound(const std::string& s);
const char* to_string(FpsBound b);

struct IdentifySettings {
    int p = 1;
    FpsBound bound = FpsBound::Known;
    double scale = 1.1;
};

struct IdentifiedRow {
    int state = 0;
    int steps = 1;
    Box theta_box;
    Vector theta_hat;
    double lambda_min = 0.0;
    double noise_bound = 0.0;  ///< level used to build the feasible set
    double tau_hat = 0.0;
};

IdentifiedRow identify_row(const Dataset& ds, int steps, int state, const IdentifySettings& settings,
                           std::optional<double> known_noise = std::nullopt);

/// Build the affine multi-step model from identified rows for every (state, j <= p).
MultiStepModel assemble_multistep_model(const std::vector<IdentifiedRow>& rows, int p, int nx, int nu,
                                        const Box& Wx, const Box& Wy);

struct IdentificationResult {
    std::vector<IdentifiedRow> rows;
    MultiStepModel model;
};

/// Full pipeline. With `gt` given, known noise levels and the lumped disturbance
/// boxes come from its (M, W); otherwise Wx/Wy fall back to the per-row noise levels.
IdentificationResult identify_model(const Dataset& ds, const IdentifySettings& settings,
                                    const GroundTruthModel* gt = nullptr);

}  // namespace tubempc
