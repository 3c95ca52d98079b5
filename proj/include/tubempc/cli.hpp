#pragma once

#include <tubempc/baselines.hpp>
#include <tubempc/design.hpp>
#include <tubempc/error.hpp>
#include <tubempc/identify.hpp>
#include <tubempc/model.hpp>
#include <tubempc/mpc.hpp>

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace tubempc {

using Json = nlohmann::json;

// ---------------------------------------------------------------------------
// Experiment configuration

struct PlantConfig {
    /// Transfer function gain / den(s), or explicit (A, B) when `A` is non-empty.
    std::vector<double> den;
    double gain = 1.0;
    Matrix A, B;
    double Ts = 0.1;
    Matrix M;
    double w_bound = 0.0;

    GroundTruthModel build() const;
};

struct DatasetConfig {
    int samples = 2000;
    double input_bound = 1.0;
    std::uint64_t seed = 1;
};

struct IdentifyConfig {
    int p = 10;
    FpsBound bound = FpsBound::Known;
    double scale = 1.1;
    /// Skip identification and use the exact lifted plant (singleton parameter set).
    bool exact = false;
};

struct SimulateConfig {
    int runs = 100;
    int blocks = 30;
    std::uint64_t seed = 7;
    CostMode cost = CostMode::Quadratic;
    bool terminal = true;
    bool warm_start = true;
    Vector x0_radius;  ///< initial states uniform in this centred box
};

struct ExperimentConfig {
    PlantConfig plant;
    DatasetConfig dataset;
    IdentifyConfig identify;
    Vector x_lo, x_hi, u_lo, u_hi;
    DesignWeights weights;
    MpcConfig mpc;
    Vector x0;
    int one_step_horizon = 50;
    TauMode tau_mode = TauMode::WorstCase;
    std::vector<std::string> controllers{"proposed", "rigid", "homothetic"};
    SimulateConfig simulate;

    ConstraintSets sets() const { return ConstraintSets::from_boxes(x_lo, x_hi, u_lo, u_hi); }
    bool runs_controller(const std::string& name) const;
};

/// Throws Error(ConfigError) with the offending key.
ExperimentConfig parse_config(const Json& j);
ExperimentConfig load_config(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Artifacts

Json to_json(const MultiStepModel& m);
MultiStepModel model_from_json(const Json& j);

/// Stores the design with its hash; loading recomputes the tightenings from
/// (sets, V, K, Wx, Wy) and refuses the file if the hash no longer matches.
Json to_json(const ControllerDesign& d);
ControllerDesign design_from_json(const Json& j, const MultiStepModel& model);

void write_dataset_csv(const Dataset& ds, std::ostream& os);
Dataset read_dataset_csv(std::istream& is);

struct ModelArtifacts {
    GroundTruthModel plant;
    Dataset dataset;
    MultiStepModel proposed;  ///< p-step model
    MultiStepModel one_step;  ///< p = 1 model (same data)
};

struct DesignArtifacts {
    ControllerDesign proposed;
    ControllerDesign one_step;
};

ModelArtifacts run_identify(const ExperimentConfig& cfg);
DesignArtifacts run_design(const ExperimentConfig& cfg, const ModelArtifacts& models);

// ---------------------------------------------------------------------------
// Closed-loop simulation

/// One block decision of a receding-horizon controller.
struct BlockDecision {
    MpcStatus status = MpcStatus::NumericalFailure;
    Vector U;  ///< block of inputs, length nu * block_length
    double objective = 0.0;
    std::vector<double> alpha;
    /// Distance of the realised next block state from the predicted next cross-section.
    std::function<double(const Vector&)> next_violation;
};

class ClosedLoopController {
public:
    virtual ~ClosedLoopController() = default;
    virtual std::string name() const = 0;
    virtual int block_length() const = 0;
    virtual BlockDecision decide(const Vector& x) = 0;
    /// Forget warm-start state between runs.
    virtual void reset() {}
};

std::unique_ptr<ClosedLoopController> make_homothetic_loop(std::string name, const MultiStepModel& model,
                                                           const ControllerDesign& design, const MpcConfig& cfg,
                                                           bool warm_start);
std::unique_ptr<ClosedLoopController> make_rigid_loop(const MultiStepModel& model, const ControllerDesign& design,
                                                      const TauTable& tau, const MpcConfig& cfg);

struct StepRecord {
    int run = 0;
    int k = 0;
    int j = 0;  ///< solve index of the controller
    Vector x, u, w;
    std::string status;
    double objective = 0.0;
    std::vector<double> alpha;
    double wall_time = 0.0;
    double tube_violation = 0.0;  ///< only at block starts after the first
    bool violation = false;       ///< x_k outside X or u_k outside U
};

struct SimulationTrace {
    std::string controller;
    std::vector<StepRecord> steps;
    int solves = 0;
    int failed_solves = 0;
    int constraint_violations = 0;
    double max_tube_violation = 0.0;
};

/// Runs `steps` time steps from x0 under a fixed disturbance sequence.
SimulationTrace simulate_closed_loop(ClosedLoopController& ctrl, const GroundTruthModel& plant,
                                     const ConstraintSets& sets, const Vector& x0, const std::vector<Vector>& w,
                                     int run = 0, double tol = 1e-6);

/// Initial state and disturbance sequence of run `run` (common random numbers).
struct RunDraw {
    Vector x0;
    std::vector<Vector> w;
};
RunDraw draw_run(const ExperimentConfig& cfg, const GroundTruthModel& plant, int run, int steps);

void write_trace_csv(const std::vector<SimulationTrace>& traces, std::ostream& os);

// ---------------------------------------------------------------------------
// Open-loop comparison of the three tubes

struct TubeBounds {
    std::string controller;
    int stage = 0;
    Vector lower, upper;
};

struct OpenLoopComparison {
    std::vector<TubeBounds> bounds;
    std::optional<MPCSolution> proposed;
    std::optional<MPCSolution> one_step;
    std::optional<RigidSolution> rigid;
    std::string proposed_status = "skipped", one_step_status = "skipped", rigid_status = "skipped";
    Box rigid_cross_section;
    Json checks;
};

OpenLoopComparison run_open_loop(const ExperimentConfig& cfg, const ModelArtifacts& models,
                                 const DesignArtifacts& designs);
void write_tube_widths_csv(const OpenLoopComparison& cmp, std::ostream& os);

std::vector<ComplexityRow> run_complexity(const ExperimentConfig& cfg, const ModelArtifacts& models,
                                          const DesignArtifacts& designs);

// ---------------------------------------------------------------------------
// Command layer

/// Error raised inside a named pipeline stage.
class StageError : public Error {
public:
    StageError(std::string stage, const Error& e) : Error(e), stage_(std::move(stage)) {}
    const std::string& stage() const { return stage_; }

private:
    std::string stage_;
};

/// 0 ok, 2 configuration/artifact problems, 3 infeasible, 4 solver failure, 1 anything else.
int exit_code(ErrorCode code);

}  // namespace tubempc
