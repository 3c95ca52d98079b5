#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "support.hpp"

#include <tubempc/baselines.hpp>
#include <tubempc/error.hpp>

#include <random>
#include <sstream>

using namespace tubempc;

namespace {

MpcConfig quadratic(int N, bool terminal)
{
    MpcConfig cfg;
    cfg.horizon = N;
    cfg.cost = CostMode::Quadratic;
    cfg.terminal = terminal;
    return cfg;
}

}  // namespace

TEST_CASE("exact parameters give zero prediction error bounds")
{
    const GroundTruthModel gt = fixture::small_plant(0.01);
    const auto [Wx, Wy] = lumped_disturbance_boxes(gt, 3);
    const MultiStepModel m = MultiStepModel::from_lifted(gt, 3, Wx, Wy);
    const ConstraintSets sets = fixture::small_sets();
    const TauTable t = worst_case_tau(m, TauMode::WorstCase, &sets, nullptr);
    CHECK(t.tau_p.norm() == 0.0);
    CHECK(t.tau_j.norm() == 0.0);
    CHECK((t.noise_p - Wx.radius).norm() == 0.0);
    CHECK(t.stacked_j().size() == 4);
}

TEST_CASE("worst-case prediction error bounds hold and are attained")
{
    const GroundTruthModel gt = fixture::small_plant(0.01);
    const int p = 2;
    const MultiStepModel m = fixture::uncertain_model(gt, p, 0.05, 0.002);
    const ConstraintSets sets = fixture::small_sets(3.0, 1.5);
    const TauTable t = worst_case_tau(m, TauMode::WorstCase, &sets, nullptr);
    const Box xb = sets.state_box(), ub = sets.input_box();
    std::mt19937_64 rng(31);
    const Box tb = m.theta_box();
    Vector seen_p = Vector::Zero(2);
    for (int s = 0; s < 10000; ++s) {
        const Vector x = sample_uniform(xb, rng);
        Vector U(p);
        for (int k = 0; k < p; ++k) U(k) = sample_uniform(ub, rng)(0);
        const auto nom = m.nominal();
        const auto e = m.evaluate(sample_uniform(tb, rng));
        const Vector dp = (e.A - nom.A) * x + (e.B - nom.B) * U;
        const Vector dj = (e.C - nom.C) * x + (e.D - nom.D) * U;
        CHECK((dp.cwiseAbs().array() <= t.tau_p.array() + 1e-12).all());
        CHECK((dj.cwiseAbs().array() <= t.tau_j.row(0).transpose().array() + 1e-12).all());
        seen_p = seen_p.cwiseMax(dp.cwiseAbs());
    }
    CHECK((seen_p.array() <= t.tau_p.array()).all());
    // Brute force over regressor and parameter corners for the p-step rows.
    for (int i = 0; i < 2; ++i) {
        const PredictorRow& row = m.row(p, i);
        const int n = static_cast<int>(row.theta_hat.size());
        Vector lo(n), hi(n);
        lo << xb.lower(), Vector::Constant(p, ub.lower()(0));
        hi << xb.upper(), Vector::Constant(p, ub.upper()(0));
        double best = 0.0;
        for (int a = 0; a < (1 << n); ++a) {
            Vector psi(n);
            for (int k = 0; k < n; ++k) psi(k) = (a >> k) & 1 ? hi(k) : lo(k);
            for (int b = 0; b < (1 << n); ++b) {
                Vector d = row.residual.center;
                for (int k = 0; k < n; ++k) d(k) += ((b >> k) & 1 ? 1.0 : -1.0) * row.residual.radius(k);
                best = std::max(best, std::abs(psi.dot(d)));
            }
        }
        CHECK(t.tau_p(i) == doctest::Approx(best).epsilon(1e-12));
    }
}

TEST_CASE("observed and worst-case modes need their inputs")
{
    const GroundTruthModel gt = fixture::small_plant(0.01);
    const MultiStepModel m = fixture::uncertain_model(gt, 2, 0.05);
    try {
        (void)worst_case_tau(m, TauMode::Observed, nullptr, nullptr);
        FAIL("expected MissingDataset");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::MissingDataset);
    }
    try {
        (void)worst_case_tau(m, TauMode::WorstCase, nullptr, nullptr);
        FAIL("expected ConfigError");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::ConfigError);
    }
    CHECK(parse_tau_mode("observed") == TauMode::Observed);
    CHECK(parse_tau_mode("worstcase") == TauMode::WorstCase);
    CHECK_THROWS_AS(parse_tau_mode("median"), Error);

    // Observed bounds never exceed the worst case over a box that covers the data.
    std::mt19937_64 rng(2);
    const Dataset ds = generate_dataset(gt, 300, Box::symmetric(Vector::Ones(1)), rng);
    const ConstraintSets sets = fixture::small_sets();
    const TauTable obs = worst_case_tau(m, TauMode::Observed, nullptr, &ds);
    const TauTable wc = worst_case_tau(m, TauMode::WorstCase, &sets, nullptr);
    CHECK((obs.tau_p.array() <= wc.tau_p.array()).all());
    CHECK((obs.tau_p.array() > 0.0).all());
}

TEST_CASE("without uncertainty the rigid tube reduces to nominal MPC")
{
    const GroundTruthModel gt = fixture::small_plant(0.0);
    const int p = 2;
    const auto [Wx, Wy] = lumped_disturbance_boxes(gt, p);
    const MultiStepModel m = MultiStepModel::from_lifted(gt, p, Wx, Wy);
    const ControllerDesign d = design_controller(m, fixture::small_sets(), fixture::unit_weights(), DesignSettings{});
    const ConstraintSets sets = fixture::small_sets();
    const TauTable tau = worst_case_tau(m, TauMode::WorstCase, &sets, nullptr);
    MpcConfig cfg = quadratic(5, false);
    cfg.terminal_weight = d.P;
    const RigidTubeController rigid(m, d, tau, cfg);
    CHECK(rigid.config().rpi_box.radius.norm() == 0.0);
    std::mt19937_64 rng(4);
    for (int t = 0; t < 5; ++t) {
        const Vector x = sample_uniform(Box::symmetric(Vector::Constant(2, 3.0)), rng);
        const RigidSolution r = rigid.solve(x);
        const MPCSolution h = solve_step(build_qp(x, m, d, cfg));
        REQUIRE(r.status == MpcStatus::Optimal);
        CHECK(r.objective == doctest::Approx(h.objective).epsilon(1e-6));
        CHECK((r.U - h.U).norm() < 1e-5);
        CHECK((r.z[0] - x).norm() < 1e-6);
    }
}

TEST_CASE("a state-independent tube can be infeasible where the homothetic tube is not")
{
    const GroundTruthModel gt = fixture::small_plant(0.01);
    const int p = 2;
    const MultiStepModel m = fixture::uncertain_model(gt, p, 0.1, 0.001);
    const ConstraintSets sets = fixture::small_sets(3.0, 10.0);
    const ControllerDesign d = design_controller(m, sets, fixture::unit_weights(), DesignSettings{});
    const TauTable tau = worst_case_tau(m, TauMode::WorstCase, &sets, nullptr);
    const MpcConfig cfg = quadratic(5, false);
    const RigidTubeController rigid(m, d, tau, cfg);
    // The cross-section alone does not fit inside the state constraints.
    CHECK((rigid.config().rpi_box.radius.array() > sets.state_box().radius.array()).any());
    const Vector x = Vector::Constant(2, 0.1);
    SolveOptions opt;
    opt.throw_on_failure = false;
    CHECK(rigid.solve(x, opt).status == MpcStatus::Infeasible);
    const MPCSolution h = solve_step(build_qp(x, m, d, cfg), opt);
    CHECK(h.status == MpcStatus::Optimal);
    CHECK(verify_tube(h, m, d, 200).max_violation <= 1e-8);
}

TEST_CASE("the one-step baseline needs a one-step model")
{
    const GroundTruthModel gt = fixture::small_plant(0.01);
    const MultiStepModel m2 = fixture::uncertain_model(gt, 2, 0.02);
    const ControllerDesign d2 = design_controller(m2, fixture::small_sets(), fixture::unit_weights(), DesignSettings{});
    CHECK_THROWS_AS(OneStepHomothetic(m2, d2, quadratic(5, true)), Error);
    const MultiStepModel m1 = fixture::uncertain_model(gt, 1, 0.02);
    const ControllerDesign d1 = design_controller(m1, fixture::small_sets(), fixture::unit_weights(), DesignSettings{});
    const OneStepHomothetic one(m1, d1, quadratic(10, true));
    const MPCSolution s = one.solve(Vector::Constant(2, 0.5));
    CHECK(s.status == MpcStatus::Optimal);
    CHECK(s.U.size() == 1);
}

TEST_CASE("problem size bookkeeping")
{
    const QpProblem empty;
    const auto rows = complexity_report({{"rigid", &empty}, {"proposed", nullptr}, {"other", nullptr}});
    REQUIRE(rows.size() == 3);
    CHECK(rows[0].n_var == 0);
    CHECK(rows[0].reference_var.has_value());
    CHECK_FALSE(rows[2].reference_var.has_value());
    CHECK(within_order_of_magnitude(5.36e4, 1.2e5));
    CHECK(within_order_of_magnitude(1.2e6, 1.2e5));
    CHECK_FALSE(within_order_of_magnitude(1.0e4, 1.2e5 + 1.0));
    CHECK_FALSE(within_order_of_magnitude(0.0, 1.0));
    std::ostringstream os;
    write_complexity_csv(rows, os);
    CHECK(os.str().rfind("controller,n_var,n_ineq,n_eq,reference_n_var,reference_n_ineq,reference_n_eq\n", 0) == 0);
}
