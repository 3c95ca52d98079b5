#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <tubempc/cli.hpp>

#include <sstream>

using namespace tubempc;

namespace {

const std::string kConfigDir = TUBEMPC_CONFIG_DIR;
const std::string kTestData = TUBEMPC_TEST_DATA;

ErrorCode parse_error_code(const Json& j)
{
    try {
        (void)parse_config(j);
    } catch (const Error& e) {
        return e.code();
    }
    FAIL("configuration was accepted");
    return ErrorCode::ConfigError;
}

struct Pipeline {
    ExperimentConfig cfg = load_config(kTestData + "/small.json");
    ModelArtifacts models = run_identify(cfg);
    DesignArtifacts designs = run_design(cfg, models);
};

const Pipeline& pipeline()
{
    static const Pipeline p;
    return p;
}

}  // namespace

TEST_CASE("bundled experiment configuration parses")
{
    const ExperimentConfig c = load_config(kConfigDir + "/sec5.json");
    const GroundTruthModel gt = c.plant.build();
    CHECK(gt.nx() == 3);
    CHECK(gt.nu() == 1);
    CHECK(gt.Ts == doctest::Approx(0.1));
    CHECK(gt.W.radius(0) == doctest::Approx(0.01));
    CHECK(c.identify.p == 10);
    CHECK(c.dataset.samples == 2000);
    CHECK(c.mpc.horizon == 5);
    CHECK(c.mpc.cost == CostMode::Linear);
    CHECK_FALSE(c.mpc.terminal);
    CHECK(c.mpc.c(2) == 1.0);
    CHECK(c.x_lo(2) == -1.0);
    CHECK(c.x_hi(2) == 10.0);
    CHECK(c.u_hi(0) == 10.0);
    CHECK(c.tau_mode == TauMode::WorstCase);
    CHECK(c.one_step_horizon == 50);
    CHECK(c.simulate.runs == 100);
    CHECK(c.simulate.blocks == 30);
    CHECK(c.runs_controller("rigid"));
}

TEST_CASE("configuration errors name the offending key")
{
    Json base = Json::parse(R"({
        "plant": {"den": [1, 2], "gain": 1, "Ts": 0.1, "M": [1], "w_bound": 0.01},
        "constraints": {"x_lo": [-1], "x_hi": [1], "u_lo": [-1], "u_hi": [1]}
    })");
    CHECK_NOTHROW((void)parse_config(base));

    Json j = base;
    j["plant"]["Ts"] = "fast";
    CHECK(parse_error_code(j) == ErrorCode::ConfigError);
    j = base;
    j["constraints"]["x_lo"] = Json::array({0.5});
    CHECK(parse_error_code(j) == ErrorCode::ConfigError);
    j = base;
    j["constraints"]["u_hi"] = Json::array({1, 2});
    CHECK(parse_error_code(j) == ErrorCode::ConfigError);
    j = base;
    j["baselines"] = {{"controllers", {"proposed", "mystery"}}};
    CHECK(parse_error_code(j) == ErrorCode::ConfigError);
    j = base;
    j["mpc"] = {{"cost", "linear"}};
    CHECK(parse_error_code(j) == ErrorCode::ConfigError);
    j = base;
    j.erase("constraints");
    CHECK(parse_error_code(j) == ErrorCode::ConfigError);
    j = base;
    j["identify"] = {{"fps_bound", "guess"}};
    CHECK(parse_error_code(j) == ErrorCode::ConfigError);

    try {
        (void)load_config("/nonexistent/config.json");
        FAIL("expected ConfigError");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::ConfigError);
    }
}

TEST_CASE("model and design artifacts round-trip")
{
    const auto& p = pipeline();
    const MultiStepModel m = model_from_json(Json::parse(to_json(p.models.proposed).dump()));
    REQUIRE(m.num_params() == p.models.proposed.num_params());
    CHECK((m.theta_box().radius - p.models.proposed.theta_box().radius).norm() == 0.0);
    CHECK((m.nominal().A - p.models.proposed.nominal().A).norm() == 0.0);
    CHECK((m.Wy().radius - p.models.proposed.Wy().radius).norm() == 0.0);

    const Json dj = Json::parse(to_json(p.designs.proposed).dump());
    const ControllerDesign d = design_from_json(dj, m);
    CHECK(d.hash() == p.designs.proposed.hash());
    CHECK((d.tight.wx - p.designs.proposed.tight.wx).norm() == 0.0);

    Json bad = dj;
    bad["K"][0][0] = bad["K"][0][0].get<double>() + 1e-6;
    try {
        (void)design_from_json(bad, m);
        FAIL("expected UnverifiedDesign");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::UnverifiedDesign);
    }
    // The hash also binds the design to the disturbance bounds of its model.
    Json mj = to_json(p.models.proposed);
    mj["Wx"]["radius"][0] = mj["Wx"]["radius"][0].get<double>() * 2.0;
    CHECK_THROWS_AS((void)design_from_json(dj, model_from_json(mj)), Error);

    Json broken = dj;
    broken.erase("eta");
    try {
        (void)design_from_json(broken, m);
        FAIL("expected MissingArtifact");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::MissingArtifact);
    }
}

TEST_CASE("dataset csv round-trips exactly")
{
    const auto& p = pipeline();
    std::stringstream ss;
    write_dataset_csv(p.models.dataset, ss);
    const Dataset back = read_dataset_csv(ss);
    REQUIRE(back.size() == p.models.dataset.size());
    for (int k = 0; k < back.size(); ++k) {
        CHECK(back.u[k] == p.models.dataset.u[k]);
        CHECK(back.x[k] == p.models.dataset.x[k]);
    }
    CHECK(back.x.back() == p.models.dataset.x.back());
    std::stringstream empty;
    CHECK_THROWS_AS((void)read_dataset_csv(empty), Error);
}

TEST_CASE("closed-loop traces are reproducible and feasible")
{
    const auto& p = pipeline();
    const ExperimentConfig& cfg = p.cfg;
    MpcConfig mc = cfg.mpc;
    mc.cost = cfg.simulate.cost;
    mc.terminal = cfg.simulate.terminal;
    auto ctrl = make_homothetic_loop("proposed", p.models.proposed, p.designs.proposed, mc, true);
    const int steps = cfg.simulate.blocks * cfg.identify.p;
    const RunDraw a = draw_run(cfg, p.models.plant, 1, steps);
    const RunDraw b = draw_run(cfg, p.models.plant, 1, steps);
    const RunDraw c = draw_run(cfg, p.models.plant, 2, steps);
    CHECK(a.x0 == b.x0);
    CHECK(a.x0 != c.x0);
    const SimulationTrace t1 = simulate_closed_loop(*ctrl, p.models.plant, cfg.sets(), a.x0, a.w, 1);
    const SimulationTrace t2 = simulate_closed_loop(*ctrl, p.models.plant, cfg.sets(), b.x0, b.w, 1);
    REQUIRE(t1.steps.size() == static_cast<std::size_t>(steps));
    CHECK(t1.failed_solves == 0);
    CHECK(t1.constraint_violations == 0);
    CHECK(t1.max_tube_violation <= 1e-6);
    CHECK(t1.solves == cfg.simulate.blocks);
    for (std::size_t k = 0; k < t1.steps.size(); ++k) {
        CHECK(t1.steps[k].u == t2.steps[k].u);
    }
    // The trace replays: each state follows from the previous state, input and disturbance.
    const GroundTruthModel& gt = p.models.plant;
    for (std::size_t k = 0; k + 1 < t1.steps.size(); ++k) {
        const auto& r = t1.steps[k];
        CHECK((gt.A * r.x + gt.B * r.u + gt.M * r.w - t1.steps[k + 1].x).norm() < 1e-12);
    }
    std::ostringstream os;
    write_trace_csv({t1}, os);
    CHECK(os.str().rfind("controller,run,k,j,x1,x2,u1,w1,qp_status,objective,alpha,wall_time,tube_violation,violation",
                         0) == 0);
}

TEST_CASE("open-loop comparison and complexity report")
{
    const auto& p = pipeline();
    const OpenLoopComparison cmp = run_open_loop(p.cfg, p.models, p.designs);
    CHECK(cmp.proposed_status == "optimal");
    CHECK(cmp.checks.at("proposed_feasible").get<bool>());
    CHECK(cmp.checks.at("proposed_sampled_tube_violation").get<double>() <= 1e-8);
    std::ostringstream os;
    write_tube_widths_csv(cmp, os);
    CHECK(os.str().rfind("controller,stage,axis,lower,upper\n", 0) == 0);
    const auto rows = run_complexity(p.cfg, p.models, p.designs);
    REQUIRE(rows.size() == 3);
    for (const auto& r : rows) CHECK(r.n_var > 0);
}

TEST_CASE("error codes map to process exit codes")
{
    CHECK(exit_code(ErrorCode::ConfigError) == 2);
    CHECK(exit_code(ErrorCode::MissingArtifact) == 2);
    CHECK(exit_code(ErrorCode::MissingDataset) == 2);
    CHECK(exit_code(ErrorCode::UnverifiedDesign) == 2);
    CHECK(exit_code(ErrorCode::Infeasible) == 3);
    CHECK(exit_code(ErrorCode::SolverFailure) == 4);
    CHECK(exit_code(ErrorCode::NoConvergence) == 4);
    CHECK(exit_code(ErrorCode::LPFailure) == 4);
    CHECK(exit_code(ErrorCode::DimensionMismatch) == 1);
    const StageError se("design", Error(ErrorCode::NoInvariantScaling, "x"));
    CHECK(se.stage() == "design");
    CHECK(se.code() == ErrorCode::NoInvariantScaling);
}
