#pragma once

#include <tubempc/types.hpp>

#include <optional>
#include <string>

namespace tubempc {

/// min 0.5 x'Px + q'x  s.t.  Ax = b,  Gx <= h.
/// P is symmetric with both triangles stored; an empty P means a linear program.
struct QpProblem {
    SparseMatrix P;
    Vector q;
    SparseMatrix A;
    Vector b;
    SparseMatrix G;
    Vector h;

    Eigen::Index num_vars() const { return q.size(); }
};

enum class QpStatus { Optimal, Infeasible, Unbounded, NumericalFailure };

const char* to_string(QpStatus status);

struct QpSettings {
    double feas_tol = 1e-9;
    double gap_tol = 1e-9;
    int max_iter = 120;
    double regularization = 1e-10;
    int refinement_steps = 3;
    /// Classify non-converged runs with a phase-one LP.
    bool classify_failures = true;
};

struct QpResult {
    QpStatus status = QpStatus::NumericalFailure;
    Vector x;
    Vector y;  ///< equality multipliers
    Vector z;  ///< inequality multipliers (>= 0)
    double objective = 0.0;
    int iterations = 0;
    double primal_residual = 0.0;
    double dual_residual = 0.0;
    double gap = 0.0;
};

/// Primal-dual interior-point method (Mehrotra predictor-corrector) on the
/// sparse quasi-definite KKT system. Deterministic for identical inputs.
/// `x_hint`, when given, seeds the primal iterate.
QpResult solve_qp(const QpProblem& problem, const QpSettings& settings = {},
                  const std::optional<Vector>& x_hint = std::nullopt);

/// Dense convenience wrapper: min c'x s.t. Aeq x = beq, G x <= h.
QpResult solve_lp(const Vector& c, const Matrix& A_eq, const Vector& b_eq, const Matrix& G,
                  const Vector& h, const QpSettings& settings = {});

SparseMatrix to_sparse(const Matrix& m, double drop_tol = 0.0);

}  // namespace tubempc
