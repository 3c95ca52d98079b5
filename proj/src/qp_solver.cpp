#include <tubempc/error.hpp>
#include <tubempc/qp_solver.hpp>

#include <Eigen/SparseCholesky>
#include <Eigen/OrderingMethods>

#include <algorithm>
#include <cmath>
#include <limits>

namespace tubempc {

const char* to_string(QpStatus status)
{
    switch (status) {
    case QpStatus::Optimal: return "optimal";
    case QpStatus::Infeasible: return "infeasible";
    case QpStatus::Unbounded: return "unbounded";
    case QpStatus::NumericalFailure: return "numerical-failure";
    }
    return "unknown";
}

SparseMatrix to_sparse(const Matrix& m, double drop_tol)
{
    Triplets t;
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
        for (Eigen::Index r = 0; r < m.rows(); ++r) {
            if (std::abs(m(r, c)) > drop_tol) {
                t.emplace_back(static_cast<int>(r), static_cast<int>(c), m(r, c));
            }
        }
    }
    SparseMatrix s(m.rows(), m.cols());
    s.setFromTriplets(t.begin(), t.end());
    return s;
}

namespace {

Vector row_inf_norms(const SparseMatrix& m)
{
    Vector norms = Vector::Zero(m.rows());
    for (int k = 0; k < m.outerSize(); ++k) {
        for (SparseMatrix::InnerIterator it(m, k); it; ++it) {
            norms(it.row()) = std::max(norms(it.row()), std::abs(it.value()));
        }
    }
    return norms;
}

double inf_norm(const Vector& v) { return v.size() == 0 ? 0.0 : v.cwiseAbs().maxCoeff(); }

/// Keeps the rows with non-zero norm and scales them to unit infinity norm.
struct RowScaling {
    std::vector<int> kept;
    Vector scale;  // for kept rows
};

/// Column equilibration in the spirit of Ruiz: alternately balances row and
/// column infinity norms of [P; A; G] and returns the column factors only.
Vector column_scaling(const SparseMatrix& P, const SparseMatrix& A, const SparseMatrix& G, int passes = 10)
{
    const Eigen::Index n = P.cols();
    Vector D = Vector::Ones(n);
    for (int pass = 0; pass < passes; ++pass) {
        Vector cmax = Vector::Zero(n);
        for (const SparseMatrix* M : {&A, &G}) {
            Vector rmax = Vector::Zero(M->rows());
            for (int k = 0; k < M->outerSize(); ++k) {
                for (SparseMatrix::InnerIterator it(*M, k); it; ++it) {
                    rmax(it.row()) = std::max(rmax(it.row()), std::abs(it.value() * D(it.col())));
                }
            }
            for (int k = 0; k < M->outerSize(); ++k) {
                for (SparseMatrix::InnerIterator it(*M, k); it; ++it) {
                    const double v = std::abs(it.value() * D(it.col())) / rmax(it.row());
                    cmax(it.col()) = std::max(cmax(it.col()), v);
                }
            }
        }
        for (int k = 0; k < P.outerSize(); ++k) {
            for (SparseMatrix::InnerIterator it(P, k); it; ++it) {
                const double v = std::abs(it.value() * D(it.row()) * D(it.col()));
                cmax(it.col()) = std::max(cmax(it.col()), std::sqrt(v));
            }
        }
        double worst = 0.0;
        for (Eigen::Index j = 0; j < n; ++j) {
            if (cmax(j) > 0.0) {
                D(j) /= std::sqrt(cmax(j));
                worst = std::max(worst, std::abs(std::log(cmax(j))));
            }
        }
        if (worst < 1e-2) {
            break;
        }
    }
    return D.cwiseMax(1e-4).cwiseMin(1e4);
}

// Returns false if a zero row is inconsistent with its right-hand side.
bool normalize_rows(const SparseMatrix& m, const Vector& rhs, bool inequality, SparseMatrix& out,
                    Vector& out_rhs, RowScaling& scaling)
{
    const Vector norms = row_inf_norms(m);
    std::vector<int> index(m.rows(), -1);
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        if (norms(r) > 0.0) {
            index[r] = static_cast<int>(scaling.kept.size());
            scaling.kept.push_back(static_cast<int>(r));
        } else {
            const bool ok = inequality ? rhs(r) >= -1e-12 : std::abs(rhs(r)) <= 1e-12;
            if (!ok) {
                return false;
            }
        }
    }
    const int kept = static_cast<int>(scaling.kept.size());
    scaling.scale.resize(kept);
    out_rhs.resize(kept);
    for (int i = 0; i < kept; ++i) {
        scaling.scale(i) = 1.0 / norms(scaling.kept[i]);
        out_rhs(i) = rhs(scaling.kept[i]) * scaling.scale(i);
    }
    Triplets t;
    t.reserve(m.nonZeros());
    for (int k = 0; k < m.outerSize(); ++k) {
        for (SparseMatrix::InnerIterator it(m, k); it; ++it) {
            const int r = index[it.row()];
            if (r >= 0) {
                t.emplace_back(r, it.col(), it.value() * scaling.scale(r));
            }
        }
    }
    out.resize(kept, m.cols());
    out.setFromTriplets(t.begin(), t.end());
    out.makeCompressed();
    return true;
}

/// Newton systems  [P A' G'; A 0 0; G 0 -W] d = r  with W = diag(s./z).
/// The inequality block is eliminated, so the factored matrix is
/// [P + G' W^-1 G + reg I, A'; A, -reg I], whose leading block is positive
/// definite; iterative refinement runs against the full unregularized operator.
class KktSystem {
public:
    KktSystem(const SparseMatrix& P, const SparseMatrix& A, const SparseMatrix& G, double reg)
        : P_(P), A_(A), G_(G), Gt_(G.transpose()), n_(static_cast<int>(P.cols())), me_(static_cast<int>(A.rows())),
          mi_(static_cast<int>(G.rows())), reg_(reg)
    {
        // Fixed sparsity pattern: union of P, G'G, A and the diagonal.
        Triplets t;
        const SparseMatrix GtG = Gt_ * G_;
        append_lower(t, P, 0, 0.0);
        append_lower(t, GtG, 0, 0.0);
        for (int k = 0; k < A.outerSize(); ++k) {
            for (SparseMatrix::InnerIterator it(A, k); it; ++it) {
                t.emplace_back(n_ + it.row(), it.col(), 0.0);
            }
        }
        for (int i = 0; i < n_ + me_; ++i) {
            t.emplace_back(i, i, 0.0);
        }
        pattern_ = std::move(t);
        K_.resize(n_ + me_, n_ + me_);
        K_.setFromTriplets(pattern_.begin(), pattern_.end());
        K_.makeCompressed();
        ldlt_.analyzePattern(K_);
    }

    bool factorize(const Vector& w)
    {
        w_ = w;
        const Vector dinv = w.cwiseInverse();
        const SparseMatrix H = Gt_ * dinv.asDiagonal() * G_;
        Triplets t = pattern_;
        t.reserve(t.size() + P_.nonZeros() + H.nonZeros() + A_.nonZeros() + n_ + me_);
        append_lower(t, P_, 0, 1.0);
        append_lower(t, H, 0, 1.0);
        for (int k = 0; k < A_.outerSize(); ++k) {
            for (SparseMatrix::InnerIterator it(A_, k); it; ++it) {
                t.emplace_back(n_ + it.row(), it.col(), it.value());
            }
        }
        base_ = t.size();
        double reg = reg_;
        // An exactly singular pivot gets more regularization; refinement
        // against the unregularized operator removes its effect.
        for (int attempt = 0; attempt < 5; ++attempt) {
            t.resize(base_);
            for (int i = 0; i < n_; ++i) {
                t.emplace_back(i, i, reg);
            }
            for (int i = 0; i < me_; ++i) {
                t.emplace_back(n_ + i, n_ + i, -reg);
            }
            K_.setFromTriplets(t.begin(), t.end());
            ldlt_.factorize(K_);
            if (ldlt_.info() == Eigen::Success) {
                return true;
            }
            reg *= 100.0;
        }
        return false;
    }

    Vector apply(const Vector& v) const
    {
        Vector out(v.size());
        const auto vx = v.head(n_);
        const auto vy = v.segment(n_, me_);
        const auto vz = v.tail(mi_);
        out.head(n_) = P_ * vx + A_.transpose() * vy + Gt_ * vz;
        out.segment(n_, me_) = A_ * vx;
        out.tail(mi_) = G_ * vx - w_.cwiseProduct(vz);
        return out;
    }

    Vector solve(const Vector& rhs, int refinement) const
    {
        Vector sol = solve_reduced(rhs);
        double best = (rhs - apply(sol)).lpNorm<Eigen::Infinity>();
        for (int k = 0; k < refinement; ++k) {
            const Vector res = rhs - apply(sol);
            const Vector cand = sol + solve_reduced(res);
            const double r = (rhs - apply(cand)).lpNorm<Eigen::Infinity>();
            if (!(r < best)) {
                break;
            }
            best = r;
            sol = cand;
        }
        return sol;
    }

private:
    static void append_lower(Triplets& t, const SparseMatrix& M, int offset, double scale)
    {
        for (int k = 0; k < M.outerSize(); ++k) {
            for (SparseMatrix::InnerIterator it(M, k); it; ++it) {
                if (it.row() >= it.col()) {
                    t.emplace_back(offset + it.row(), offset + it.col(), scale * it.value());
                }
            }
        }
    }

    Vector solve_reduced(const Vector& rhs) const
    {
        const auto r1 = rhs.head(n_);
        const auto r3 = rhs.tail(mi_);
        Vector red(n_ + me_);
        red.head(n_) = r1 + Gt_ * r3.cwiseQuotient(w_);
        red.tail(me_) = rhs.segment(n_, me_);
        const Vector xy = ldlt_.solve(red);
        Vector out(n_ + me_ + mi_);
        out.head(n_ + me_) = xy;
        out.tail(mi_) = (G_ * xy.head(n_) - r3).cwiseQuotient(w_);
        return out;
    }

    const SparseMatrix& P_;
    const SparseMatrix& A_;
    const SparseMatrix& G_;
    SparseMatrix Gt_;
    int n_;
    int me_;
    int mi_;
    double reg_;
    Vector w_;
    Triplets pattern_;
    std::size_t base_ = 0;
    SparseMatrix K_;
    Eigen::SimplicialLDLT<SparseMatrix, Eigen::Lower, Eigen::AMDOrdering<int>> ldlt_;
};

double max_step(const Vector& v, const Vector& dv)
{
    double alpha = std::numeric_limits<double>::infinity();
    for (Eigen::Index i = 0; i < v.size(); ++i) {
        if (dv(i) < 0.0) {
            alpha = std::min(alpha, -v(i) / dv(i));
        }
    }
    return alpha;
}

struct CoreResult {
    QpStatus status = QpStatus::NumericalFailure;
    bool converged = false;
    Vector x, y, z, s;
    int iterations = 0;
    double pres = 0.0;
    double dres = 0.0;
    double gap = 0.0;
};

// Works on a row-normalized, cost-scaled problem.
CoreResult ipm_core(const SparseMatrix& P, const Vector& q, const SparseMatrix& A, const Vector& b,
                    const SparseMatrix& G, const Vector& h, const QpSettings& settings,
                    const std::optional<Vector>& x_hint)
{
    const int n = static_cast<int>(q.size());
    const int me = static_cast<int>(b.size());
    const int mi = static_cast<int>(h.size());
    CoreResult out;

    KktSystem kkt(P, A, G, settings.regularization);

    Vector x(n), y(me), z(mi), s(mi);
    {
        if (!kkt.factorize(Vector::Ones(mi))) {
            return out;
        }
        Vector rhs(n + me + mi);
        rhs << -q, b, h;
        const Vector sol = kkt.solve(rhs, settings.refinement_steps);
        x = sol.head(n);
        y = sol.segment(n, me);
        if (x_hint && x_hint->size() == n) {
            x = *x_hint;
        }
        s = h - G * x;
        z = -s;
        if (mi > 0) {
            const double ap = -s.minCoeff();
            if (ap >= -1e-8) {
                s.array() += 1.0 + ap;
            }
            const double ad = -z.minCoeff();
            if (ad >= -1e-8) {
                z.array() += 1.0 + ad;
            }
        }
    }

    const double bnorm = std::max(inf_norm(b), inf_norm(h));
    const double qnorm = inf_norm(q);
    int stall = 0;
    // Best iterate by normalized optimality measure; degenerate problems can
    // stagnate at a dual residual limited by the conditioning of the solve.
    double best_merit = std::numeric_limits<double>::infinity();
    int best_it = 0;
    Vector bx, by, bz, bs;
    double bpres = 0.0, bdres = 0.0, bgap = 0.0, brel = 0.0;

    for (int it = 0; it < settings.max_iter; ++it) {
        out.iterations = it + 1;
        const Vector Px = P * x;
        const Vector rd = Px + q + A.transpose() * y + G.transpose() * z;
        const Vector rp = A * x - b;
        const Vector ri = G * x + s - h;
        const double gap = mi > 0 ? s.dot(z) : 0.0;
        const double mu = mi > 0 ? gap / mi : 0.0;
        const double pobj = 0.5 * x.dot(Px) + q.dot(x);
        out.pres = std::max(inf_norm(rp), inf_norm(ri)) / (1.0 + bnorm);
        out.dres = inf_norm(rd) / (1.0 + qnorm);
        out.gap = gap;
        const double rel_gap = gap / std::max(1.0, std::abs(pobj));
        if (out.pres <= settings.feas_tol && out.dres <= settings.feas_tol &&
            (gap <= settings.gap_tol || rel_gap <= settings.gap_tol)) {
            out.converged = true;
            out.status = QpStatus::Optimal;
            break;
        }
        const double merit = std::max({out.pres / settings.feas_tol, out.dres / settings.feas_tol,
                                       std::min(gap, rel_gap) / settings.gap_tol});
        if (merit < 0.5 * best_merit || (merit < best_merit && it - best_it < 5)) {
            if (merit < 0.5 * best_merit) {
                best_it = it;
            }
            best_merit = merit;
            bx = x;
            by = y;
            bz = z;
            bs = s;
            bpres = out.pres;
            bdres = out.dres;
            bgap = gap;
            brel = rel_gap;
        } else if (it - best_it > 25) {
            break;
        }

        // Farkas certificates on the current iterate.
        if (mi > 0) {
            const double val = b.dot(y) + h.dot(z);
            if (val < 0.0) {
                const double cert = inf_norm(A.transpose() * y + G.transpose() * z);
                if (cert <= 1e-9 * (-val) && z.maxCoeff() > 1e3) {
                    out.status = QpStatus::Infeasible;
                    break;
                }
            }
        }
        {
            const double qx = q.dot(x);
            if (qx < 0.0 && inf_norm(x) > 1e6) {
                const double lim = 1e-9 * (-qx);
                const Vector Gx = G * x;
                const double gpos = mi > 0 ? std::max(0.0, Gx.maxCoeff()) : 0.0;
                if (inf_norm(Px) <= lim && inf_norm(A * x) <= lim && gpos <= lim) {
                    out.status = QpStatus::Unbounded;
                    break;
                }
            }
        }

        if (!kkt.factorize(s.cwiseQuotient(z))) {
            break;
        }
        auto newton = [&](const Vector& rc) {
            Vector rhs(n + me + mi);
            rhs << -rd, -rp, -ri + rc.cwiseQuotient(z);
            const Vector sol = kkt.solve(rhs, settings.refinement_steps);
            Vector dx = sol.head(n);
            Vector dy = sol.segment(n, me);
            Vector dz = sol.tail(mi);
            Vector ds = -ri - G * dx;
            return std::tuple<Vector, Vector, Vector, Vector>(dx, dy, dz, ds);
        };

        // Predictor.
        const Vector rc_aff = s.cwiseProduct(z);
        auto [dxa, dya, dza, dsa] = newton(rc_aff);
        double alpha_aff = std::min({1.0, max_step(s, dsa), max_step(z, dza)});
        double sigma = 0.0;
        if (mi > 0) {
            const double mu_aff = (s + alpha_aff * dsa).dot(z + alpha_aff * dza) / mi;
            sigma = std::pow(std::max(0.0, mu_aff) / mu, 3.0);
            sigma = std::min(1.0, sigma);
        }
        // Corrector.
        const Vector rc = s.cwiseProduct(z) + dsa.cwiseProduct(dza) - Vector::Constant(mi, sigma * mu);
        auto [dx, dy, dz, ds] = newton(rc);
        const double amax = std::min(max_step(s, ds), max_step(z, dz));
        double alpha = std::min(1.0, 0.99 * amax);
        // Stay in a wide neighbourhood of the central path: no complementarity
        // product may drop far below the average one.
        if (mi > 0 && std::isfinite(alpha)) {
            for (int bt = 0; bt < 60; ++bt) {
                const Vector sn = s + alpha * ds;
                const Vector zn = z + alpha * dz;
                const Vector prod = sn.cwiseProduct(zn);
                if (prod.minCoeff() >= 1e-4 * prod.sum() / mi) {
                    break;
                }
                alpha *= 0.9;
            }
        }
        if (!std::isfinite(alpha) || alpha < 1e-12) {
            if (++stall > 3) {
                break;
            }
        } else {
            stall = 0;
        }
        x += alpha * dx;
        y += alpha * dy;
        z += alpha * dz;
        s += alpha * ds;
        if (!x.allFinite() || !z.allFinite()) {
            break;
        }
    }
    out.x = x;
    out.y = y;
    out.z = z;
    out.s = s;
    if (!out.converged && out.status == QpStatus::NumericalFailure && bx.size() == n) {
        // Accept a slightly less accurate solution rather than discarding it.
        if (bpres <= 1e3 * settings.feas_tol && bdres <= 1e3 * settings.feas_tol &&
            std::min(bgap, brel) <= 1e3 * settings.gap_tol) {
            out.x = bx;
            out.y = by;
            out.z = bz;
            out.s = bs;
            out.pres = bpres;
            out.dres = bdres;
            out.gap = bgap;
            out.status = QpStatus::Optimal;
        }
    }
    return out;
}

}  // namespace

QpResult solve_qp(const QpProblem& problem, const QpSettings& settings, const std::optional<Vector>& x_hint)
{
    const Eigen::Index n = problem.num_vars();
    SparseMatrix P = problem.P.size() == 0 ? SparseMatrix(n, n) : problem.P;
    SparseMatrix A = problem.A.size() == 0 && problem.b.size() == 0 ? SparseMatrix(0, n) : problem.A;
    SparseMatrix G = problem.G.size() == 0 && problem.h.size() == 0 ? SparseMatrix(0, n) : problem.G;
    require_dims(P.rows() == n && P.cols() == n, "QP cost matrix");
    require_dims(A.cols() == n && A.rows() == problem.b.size(), "QP equality block");
    require_dims(G.cols() == n && G.rows() == problem.h.size(), "QP inequality block");

    // Work in x = D xs.
    const Vector D = column_scaling(P, A, G);
    const auto Dm = D.asDiagonal();
    P = Dm * P * Dm;
    A = A * Dm;
    G = G * Dm;
    const Vector qd = D.cwiseProduct(problem.q);
    std::optional<Vector> hint;
    if (x_hint && x_hint->size() == n) {
        hint = x_hint->cwiseQuotient(D);
    }

    QpResult result;
    SparseMatrix As, Gs;
    Vector bs, hs;
    RowScaling sa, sg;
    if (!normalize_rows(A, problem.b, false, As, bs, sa) || !normalize_rows(G, problem.h, true, Gs, hs, sg)) {
        result.status = QpStatus::Infeasible;
        return result;
    }
    double pmax = 0.0;
    for (int k = 0; k < P.outerSize(); ++k) {
        for (SparseMatrix::InnerIterator it(P, k); it; ++it) {
            pmax = std::max(pmax, std::abs(it.value()));
        }
    }
    const double cost_scale = 1.0 / std::max({1.0, inf_norm(qd), pmax});
    const SparseMatrix Ps = P * cost_scale;
    const Vector qs = qd * cost_scale;

    CoreResult core = ipm_core(Ps, qs, As, bs, Gs, hs, settings, hint);
    if (core.x.size() == n) {
        core.x = core.x.cwiseProduct(D);
    }
    result.iterations = core.iterations;
    result.primal_residual = core.pres;
    result.dual_residual = core.dres;
    result.gap = core.gap / cost_scale;
    result.status = core.status;
    result.x = core.x;
    result.y = Vector::Zero(problem.b.size());
    for (size_t i = 0; i < sa.kept.size() && static_cast<Eigen::Index>(i) < core.y.size(); ++i) {
        result.y(sa.kept[i]) = core.y(static_cast<Eigen::Index>(i)) * sa.scale(static_cast<Eigen::Index>(i)) / cost_scale;
    }
    result.z = Vector::Zero(problem.h.size());
    for (size_t i = 0; i < sg.kept.size() && static_cast<Eigen::Index>(i) < core.z.size(); ++i) {
        result.z(sg.kept[i]) = core.z(static_cast<Eigen::Index>(i)) * sg.scale(static_cast<Eigen::Index>(i)) / cost_scale;
    }
    if (result.x.size() == n) {
        result.objective = 0.5 * result.x.dot(problem.P.size() == 0 ? Vector::Zero(n) : Vector(problem.P * result.x)) +
                           problem.q.dot(result.x);
    }

    if (result.status == QpStatus::NumericalFailure && settings.classify_failures) {
        // Phase one: min t  s.t.  Ax = b,  Gx - t <= h,  t >= -1.
        const int mi = static_cast<int>(hs.size());
        if (mi > 0) {
            SparseMatrix G1(mi + 1, n + 1);
            Triplets t;
            for (int k = 0; k < Gs.outerSize(); ++k) {
                for (SparseMatrix::InnerIterator it(Gs, k); it; ++it) {
                    t.emplace_back(it.row(), it.col(), it.value());
                }
            }
            for (int i = 0; i < mi; ++i) {
                t.emplace_back(i, static_cast<int>(n), -1.0);
            }
            t.emplace_back(mi, static_cast<int>(n), -1.0);
            G1.setFromTriplets(t.begin(), t.end());
            Vector h1(mi + 1);
            h1 << hs, 1.0;
            SparseMatrix A1(As.rows(), n + 1);
            Triplets ta;
            for (int k = 0; k < As.outerSize(); ++k) {
                for (SparseMatrix::InnerIterator it(As, k); it; ++it) {
                    ta.emplace_back(it.row(), it.col(), it.value());
                }
            }
            A1.setFromTriplets(ta.begin(), ta.end());
            Vector c1 = Vector::Zero(n + 1);
            c1(n) = 1.0;
            QpSettings s1 = settings;
            s1.classify_failures = false;
            const CoreResult ph1 = ipm_core(SparseMatrix(n + 1, n + 1), c1, A1, bs, G1, h1, s1, std::nullopt);
            if (ph1.status == QpStatus::Optimal && ph1.x(n) > 1e-7) {
                result.status = QpStatus::Infeasible;
            } else if (ph1.status == QpStatus::Infeasible) {
                result.status = QpStatus::Infeasible;
            }
        }
    }
    return result;
}

QpResult solve_lp(const Vector& c, const Matrix& A_eq, const Vector& b_eq, const Matrix& G, const Vector& h,
                  const QpSettings& settings)
{
    QpProblem prob;
    const Eigen::Index n = c.size();
    prob.P = SparseMatrix(n, n);
    prob.q = c;
    prob.A = A_eq.size() == 0 ? SparseMatrix(0, n) : to_sparse(A_eq);
    prob.b = b_eq;
    prob.G = G.size() == 0 ? SparseMatrix(0, n) : to_sparse(G);
    prob.h = h;
    return solve_qp(prob, settings);
}

}  // namespace tubempc
