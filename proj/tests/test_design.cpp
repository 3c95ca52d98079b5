#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "support.hpp"

#include <tubempc/design.hpp>
#include <tubempc/error.hpp>

#include <random>

using namespace tubempc;

namespace {

// Closed-loop Lyapunov solve by Kronecker products, independent of the library's iteration.
Matrix lyapunov(const Matrix& A, const Matrix& Q)
{
    const Eigen::Index n = A.rows();
    Matrix kron(n * n, n * n);
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j < n; ++j) kron.block(i * n, j * n, n, n) = A(j, i) * A.transpose();
    const Vector q = Eigen::Map<const Vector>(Q.data(), n * n);
    const Vector pv = (Matrix::Identity(n * n, n * n) - kron).partialPivLu().solve(q);
    Matrix P = Eigen::Map<const Matrix>(pv.data(), n, n);
    return 0.5 * (P + P.transpose());
}

}  // namespace

TEST_CASE("LQR gain satisfies the Riccati optimality condition")
{
    const GroundTruthModel gt = fixture::small_plant();
    const Matrix Q = Vector::Ones(2).asDiagonal();
    const Matrix R = Matrix::Identity(1, 1) * 0.5;
    const Matrix K = lqr_gain(gt.A, gt.B, Q, R);
    const Matrix Acl = gt.A + gt.B * K;
    CHECK(spectral_radius(Acl) < 1.0);
    const Matrix P = lyapunov(Acl, Q + K.transpose() * R * K);
    const Matrix Kopt = -(R + gt.B.transpose() * P * gt.B).ldlt().solve(gt.B.transpose() * P * gt.A);
    CHECK((K - Kopt).norm() < 1e-8);
}

TEST_CASE("nominal cost-to-go equals the simulated infinite-horizon cost")
{
    const GroundTruthModel gt = fixture::small_plant(0.0);
    const int p = 3;
    const auto [Wx, Wy] = lumped_disturbance_boxes(gt, p);
    const MultiStepModel m = MultiStepModel::from_lifted(gt, p, Wx, Wy);
    const DesignWeights w{(Vector(2) << 1.0, 2.0).finished(), Matrix::Identity(1, 1) * 0.3};
    const auto nom = m.nominal();
    const Matrix K = lqr_gain(nom.A, nom.B, w.Q(), w.Rp(p));
    const Matrix P = nominal_cost_to_go(m, K, w);

    // Oracle: run the one-step plant, applying each block of K x at the block start.
    Vector x0(2);
    x0 << 1.0, -0.5;
    Vector x = x0;
    double cost = 0.0;
    for (int blk = 0; blk < 400; ++blk) {
        const Vector U = K * x;
        for (int t = 0; t < p; ++t) {
            cost += x.dot(w.Q() * x);
            const Vector u = U.segment(t, 1);
            cost += u.dot(w.R * u);
            x = gt.A * x + gt.B * u;
        }
    }
    CHECK(x0.dot(P * x0) == doctest::Approx(cost).epsilon(1e-9));
}

TEST_CASE("synthesised terminal cost passes verification on an uncertain model")
{
    const GroundTruthModel gt = fixture::small_plant(0.01);
    const MultiStepModel m = fixture::uncertain_model(gt, 2, 0.02, 0.001);
    const DesignWeights w = fixture::unit_weights();
    const SynthesisResult syn = synthesize_KP(m, w);
    const MarginReport rep = verify_terminal_cost(m, syn.K, syn.P, w, 1000, 3);
    CHECK(rep.margin >= -1e-8);
    CHECK(rep.sampled_margin >= -1e-8);
    CHECK(rep.vertex_blocks > 0);
    // Independent sampled check of P - Acl'PAcl - stage >= 0 at the vertices of each row box.
    std::mt19937_64 rng(17);
    const Box tb = m.theta_box();
    for (int s = 0; s < 200; ++s) {
        Vector delta = tb.center;
        for (int k = 0; k < delta.size(); ++k) delta(k) += (rng() & 1 ? 1.0 : -1.0) * tb.radius(k);
        const auto e = m.evaluate(delta);
        const Matrix Acl = e.A + e.B * syn.K;
        const Matrix Ccl = e.C + e.D * syn.K;
        const Matrix lhs = Acl.transpose() * syn.P * Acl + w.Q() + Ccl.transpose() * w.Qp(2) * Ccl +
                           syn.K.transpose() * w.Rp(2) * syn.K;
        Eigen::SelfAdjointEigenSolver<Matrix> es(syn.P - lhs);
        CHECK(es.eigenvalues().minCoeff() >= -1e-8);
    }
    // A destabilising cost is caught.
    const MarginReport bad = verify_terminal_cost(m, syn.K, 0.01 * syn.P, w, 100, 3);
    CHECK(bad.margin < 0.0);
}

TEST_CASE("eigenbasis shape contracts at the spectral radius")
{
    GroundTruthModel gt = fixture::small_plant(0.01);
    gt.A << 0.9, 0.2, 0.0, 0.7;
    const int p = 2;
    const auto [Wx, Wy] = lumped_disturbance_boxes(gt, p);
    const MultiStepModel m = MultiStepModel::from_lifted(gt, p, Wx, Wy);
    const Matrix K = Matrix::Zero(p, 2);
    const ShapeResult s = choose_tube_shape(m, K);
    const double sr = spectral_radius(m.nominal().A);
    CHECK(sr == doctest::Approx(0.81).epsilon(1e-12));
    CHECK(s.rho == doctest::Approx(sr).epsilon(1e-8));
    CHECK(s.robust_rho == doctest::Approx(sr).epsilon(1e-8));
    CHECK(robust_contraction_bound(m, K, s.V) == doctest::Approx(sr).epsilon(1e-8));
    CHECK(s.rho_ok);
}

TEST_CASE("terminal set is robustly invariant and admissible")
{
    const GroundTruthModel gt = fixture::small_plant(0.01);
    const int p = 2;
    const MultiStepModel m = fixture::uncertain_model(gt, p, 0.02, 0.001);
    const ConstraintSets sets = fixture::small_sets();
    const DesignWeights w = fixture::unit_weights();
    const ControllerDesign d = design_controller(m, sets, w, DesignSettings{});
    REQUIRE(d.has_terminal_set);
    REQUIRE(d.eta > 0.0);
    const LowComplexityPolytope X0 = d.X0();
    std::mt19937_64 rng(21);
    const Box tb = m.theta_box();
    for (const Vector& v : X0.vertices()) {
        const Vector x = d.eta * v;
        CHECK((sets.F * x).maxCoeff() <= 1.0 + 1e-9);
        CHECK((d.tight.Gp * (d.K * x)).maxCoeff() <= 1.0 + 1e-9);
        for (int s = 0; s < 200; ++s) {
            const auto e = m.evaluate(sample_uniform(tb, rng));
            const Vector xn = (e.A + e.B * d.K) * x + sample_uniform(m.Wx(), rng);
            CHECK(X0.contains(xn / d.eta, 1e-9));
            const Vector y = (e.C + e.D * d.K) * x + sample_uniform(m.Wy(), rng);
            CHECK((d.tight.Fp * y).maxCoeff() <= 1.0 + 1e-9);
        }
    }
}

TEST_CASE("design hash tracks the controller data")
{
    const GroundTruthModel gt = fixture::small_plant(0.01);
    const MultiStepModel m = fixture::uncertain_model(gt, 2, 0.02, 0.001);
    const ControllerDesign d = design_controller(m, fixture::small_sets(), fixture::unit_weights(), DesignSettings{});
    ControllerDesign e = d;
    CHECK(e.hash() == d.hash());
    e.K(0, 0) += 1e-12;
    CHECK(e.hash() != d.hash());
    e = d;
    e.eta *= 0.5;
    CHECK(e.hash() != d.hash());
}

TEST_CASE("constraint and weight validation")
{
    Vector lo(2), hi(2);
    lo << 0.0, -1.0;
    hi << 1.0, 1.0;
    try {
        (void)ConstraintSets::from_boxes(lo, hi, Vector::Constant(1, -1), Vector::Constant(1, 1));
        FAIL("expected ConfigError");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::ConfigError);
    }
    const ConstraintSets s = fixture::small_sets(4.0, 2.0);
    CHECK(s.state_box().radius(0) == doctest::Approx(4.0));
    CHECK(s.input_box().radius(0) == doctest::Approx(2.0));
    DesignWeights w{Vector::Ones(2), -Matrix::Identity(1, 1)};
    CHECK_THROWS_AS(w.validate(2, 1), Error);
    w.R = Matrix::Identity(1, 1);
    CHECK_NOTHROW(w.validate(2, 1));
}
