#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <tubempc/qp_solver.hpp>

#include <random>

using namespace tubempc;

TEST_CASE("lp with a known vertex optimum")
{
    // max x + y  s.t.  x + 2y <= 4, 3x + y <= 6, x, y >= 0  -> (1.6, 1.2)
    Vector c(2);
    c << -1, -1;
    Matrix G(4, 2);
    G << 1, 2, 3, 1, -1, 0, 0, -1;
    Vector h(4);
    h << 4, 6, 0, 0;
    const QpResult r = solve_lp(c, Matrix(0, 2), Vector(0), G, h);
    REQUIRE(r.status == QpStatus::Optimal);
    CHECK(r.x(0) == doctest::Approx(1.6).epsilon(1e-8));
    CHECK(r.x(1) == doctest::Approx(1.2).epsilon(1e-8));
    CHECK(r.objective == doctest::Approx(-2.8).epsilon(1e-8));
}

TEST_CASE("equality constrained qp matches the closed-form kkt solution")
{
    // min 0.5 x'x - 1'x  s.t.  sum(x) = 1  -> x = 1/n
    const int n = 5;
    QpProblem qp;
    qp.P = to_sparse(Matrix::Identity(n, n));
    qp.q = -Vector::Ones(n);
    qp.A = to_sparse(Matrix::Ones(1, n));
    qp.b = Vector::Ones(1);
    qp.G = SparseMatrix(0, n);
    qp.h = Vector(0);
    const QpResult r = solve_qp(qp);
    REQUIRE(r.status == QpStatus::Optimal);
    for (int i = 0; i < n; ++i) {
        CHECK(r.x(i) == doctest::Approx(0.2).epsilon(1e-8));
    }
}

TEST_CASE("box-constrained qp equals clipped unconstrained minimizer")
{
    // Separable: min 0.5 d_i x_i^2 - c_i x_i, |x_i| <= 1 -> x_i = clip(c_i / d_i)
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> uni(-3.0, 3.0);
    const int n = 30;
    Vector d(n), c(n);
    for (int i = 0; i < n; ++i) {
        d(i) = 0.5 + std::abs(uni(rng));
        c(i) = uni(rng);
    }
    QpProblem qp;
    qp.P = to_sparse(Matrix(d.asDiagonal()));
    qp.q = -c;
    qp.A = SparseMatrix(0, n);
    qp.b = Vector(0);
    Matrix G(2 * n, n);
    G << Matrix::Identity(n, n), -Matrix::Identity(n, n);
    qp.G = to_sparse(G);
    qp.h = Vector::Ones(2 * n);
    const QpResult r = solve_qp(qp);
    REQUIRE(r.status == QpStatus::Optimal);
    for (int i = 0; i < n; ++i) {
        CHECK(r.x(i) == doctest::Approx(std::clamp(c(i) / d(i), -1.0, 1.0)).epsilon(1e-7));
    }
    CHECK(r.z.minCoeff() >= 0.0);
}

TEST_CASE("infeasible and unbounded programs are classified")
{
    Vector c(1);
    c << 1.0;
    Matrix G(2, 1);
    G << 1, -1;
    Vector h(2);
    h << -1, -1;  // x <= -1 and x >= 1
    CHECK(solve_lp(c, Matrix(0, 1), Vector(0), G, h).status == QpStatus::Infeasible);

    Matrix G2(1, 1);
    G2 << 1;
    Vector h2(1);
    h2 << 0;  // x <= 0, minimize x
    CHECK(solve_lp(c, Matrix(0, 1), Vector(0), G2, h2).status == QpStatus::Unbounded);
}

TEST_CASE("random feasible lps satisfy strong duality")
{
    std::mt19937_64 rng(11);
    std::normal_distribution<double> nd;
    for (int trial = 0; trial < 20; ++trial) {
        const int n = 6, m = 20;
        Matrix G(m, n);
        for (int i = 0; i < m; ++i) {
            for (int j = 0; j < n; ++j) {
                G(i, j) = nd(rng);
            }
        }
        // Bounded: add a box.
        Matrix Gb(m + 2 * n, n);
        Gb << G, Matrix::Identity(n, n), -Matrix::Identity(n, n);
        Vector h = Vector::Ones(m + 2 * n);
        Vector c(n);
        for (int j = 0; j < n; ++j) {
            c(j) = nd(rng);
        }
        const QpResult r = solve_lp(c, Matrix(0, n), Vector(0), Gb, h);
        REQUIRE(r.status == QpStatus::Optimal);
        // Dual objective: -h'z
        CHECK(c.dot(r.x) == doctest::Approx(-h.dot(r.z)).epsilon(1e-7));
        CHECK((Gb * r.x - h).maxCoeff() <= 1e-8);
    }
}
