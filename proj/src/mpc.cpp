#include <tubempc/mpc.hpp>
#include <tubempc/error.hpp>

#include <Eigen/LU>

#include <algorithm>
#include <cmath>
#include <functional>
#include <ostream>
#include <random>

namespace tubempc {

CostMode parse_cost_mode(const std::string& s)
{
    if (s == "quadratic") return CostMode::Quadratic;
    if (s == "linear") return CostMode::Linear;
    throw Error(ErrorCode::ConfigError, "unknown cost mode '" + s + "'");
}

LambdaMode parse_lambda_mode(const std::string& s)
{
    if (s == "closed_form") return LambdaMode::ClosedForm;
    if (s == "explicit") return LambdaMode::Explicit;
    throw Error(ErrorCode::ConfigError, "unknown multiplier mode '" + s + "'");
}

const char* to_string(CostMode m) { return m == CostMode::Quadratic ? "quadratic" : "linear"; }
const char* to_string(LambdaMode m) { return m == LambdaMode::ClosedForm ? "closed_form" : "explicit"; }

const char* to_string(MpcStatus s)
{
    switch (s) {
    case MpcStatus::Optimal: return "optimal";
    case MpcStatus::Infeasible: return "infeasible";
    case MpcStatus::NumericalFailure: return "numerical-failure";
    }
    return "?";
}

PolytopicModel PolytopicModel::from(const MultiStepModel& m)
{
    return PolytopicModel{m.terms(), m.theta_polytope(), m.Wx(), m.Wy()};
}

std::vector<QpIndex::Segment> QpIndex::segments() const
{
    return {{"z", z0, (N + 1) * nx},          {"alpha", alpha0, N + 1},
            {"V", V0, N * nu * p},            {"Xhat", X0, (N + 1) * nx},
            {"Uhat", U0, N * nu * p},         {"Yhat", Y0, N * nx * (p - 1)},
            {"aux", aux0, total - aux0}};
}

namespace {

/// Accumulates sparse rows of a constraint block.
class Rows {
public:
    void coef(int col, double v)
    {
        if (v != 0.0) {
            trip_.emplace_back(n_, col, v);
        }
    }
    template <typename Derived>
    void coefs(int col0, const Eigen::MatrixBase<Derived>& v)
    {
        for (Eigen::Index k = 0; k < v.size(); ++k) {
            coef(col0 + static_cast<int>(k), v(k));
        }
    }
    void end(double rhs)
    {
        rhs_.push_back(rhs);
        ++n_;
    }
    int count() const { return n_; }

    void finish(int cols, SparseMatrix& M, Vector& r) const
    {
        M.resize(n_, cols);
        M.setFromTriplets(trip_.begin(), trip_.end());
        r = Eigen::Map<const Vector>(rhs_.data(), n_);
    }

private:
    Triplets trip_;
    std::vector<double> rhs_;
    int n_ = 0;
};

struct BuildContext {
    const Vector& Xj;
    const ControllerDesign& design;
    const MpcConfig& cfg;
    MultiStepModel::Matrices nom;
    Box Wx;
    Box Wy;
    int nx, nu, p;
};

/// Emits the (stage, vertex) inclusion rows; returns the number of auxiliary
/// variables it allocated starting at `aux`.
using InclusionEmitter = std::function<int(int l, int v, const Vector& xv, int aux, Rows& eq, Rows& in)>;

void check_design(const BuildContext& c)
{
    const auto& d = c.design;
    require_dims(c.Xj.size() == c.nx, "X_j has wrong dimension");
    require_dims(c.Xj.allFinite(), "X_j is not finite");
    require_dims(d.p == c.p, "design and model disagree on p");
    require_dims(d.K.rows() == c.nu * c.p && d.K.cols() == c.nx, "K has wrong shape");
    require_dims(d.V.rows() == c.nx && d.V.cols() == c.nx, "tube shape has wrong size");
    require_dims(d.P.rows() == c.nx && d.P.cols() == c.nx, "P has wrong size");
    require_dims(c.cfg.horizon >= 1, "horizon must be positive");
    if (c.cfg.expected_hash && *c.cfg.expected_hash != d.hash()) {
        throw Error(ErrorCode::UnverifiedDesign, "design hash " + d.hash() + " does not match " + *c.cfg.expected_hash);
    }
    if (c.cfg.terminal && !d.has_terminal_set) {
        throw Error(ErrorCode::UnverifiedDesign, "terminal constraint requested but the design has no terminal set");
    }
    if (c.cfg.terminal && !d.certified) {
        throw Error(ErrorCode::UnverifiedDesign, "terminal constraint requested with an uncertified terminal cost");
    }
    if (c.cfg.cost == CostMode::Linear) {
        require_dims(c.cfg.c.size() == c.nx, "linear objective has wrong dimension");
    }
    if (c.cfg.terminal_weight) {
        require_dims(c.cfg.terminal_weight->rows() == c.nx && c.cfg.terminal_weight->cols() == c.nx,
                     "terminal weight has wrong size");
    }
}

QPSpec assemble(const BuildContext& c, LambdaMode mode, const InclusionEmitter& emit)
{
    check_design(c);
    const int nx = c.nx, nu = c.nu, p = c.p, N = c.cfg.horizon;
    const int nup = nu * p, ny = nx * (p - 1);
    const auto& d = c.design;
    const auto& t = d.tight;
    const LowComplexityPolytope X0(d.V);
    const Matrix Hx = X0.H();
    const int qx = static_cast<int>(Hx.rows());
    const auto& verts = X0.vertices();
    const int nv = static_cast<int>(verts.size());

    QPSpec spec;
    spec.lambda = mode;
    spec.Xj = c.Xj;
    spec.K = d.K;
    spec.V = d.V;
    spec.eta = d.eta;
    QpIndex& ix = spec.index;
    ix.nx = nx;
    ix.nu = nu;
    ix.p = p;
    ix.N = N;
    ix.nv = nv;
    ix.z0 = 0;
    ix.alpha0 = ix.z0 + (N + 1) * nx;
    ix.V0 = ix.alpha0 + N + 1;
    ix.X0 = ix.V0 + N * nup;
    ix.U0 = ix.X0 + (N + 1) * nx;
    ix.Y0 = ix.U0 + N * nup;
    ix.aux0 = ix.Y0 + N * ny;

    Rows eq, in;
    const Matrix GK = t.Gp * d.K;
    const Matrix& F = d.sets.F;

    // Initial membership: H_x (X_j - z_0) <= alpha_0.
    for (int r = 0; r < qx; ++r) {
        in.coefs(ix.z(0), -Hx.row(r));
        in.coef(ix.alpha(0), -1.0);
        in.end(-Hx.row(r).dot(c.Xj));
    }
    for (int l = 0; l <= N; ++l) {
        in.coef(ix.alpha(l), -1.0);
        in.end(0.0);
        // State tightening, also at the last stage so every cross-section lies in X.
        for (int r = 0; r < F.rows(); ++r) {
            in.coefs(ix.z(l), F.row(r));
            in.coef(ix.alpha(l), t.fbar(r));
            in.end(1.0);
        }
        if (l == N) {
            break;
        }
        for (int r = 0; r < GK.rows(); ++r) {
            in.coefs(ix.z(l), GK.row(r));
            in.coefs(ix.V(l), t.Gp.row(r));
            in.coef(ix.alpha(l), t.gbar(r));
            in.end(1.0);
        }
    }
    if (c.cfg.terminal) {
        // z_N + alpha_N X0 within eta X0; max over X0 of each H_x row is 1.
        for (int r = 0; r < qx; ++r) {
            in.coefs(ix.z(N), Hx.row(r));
            in.coef(ix.alpha(N), 1.0);
            in.end(d.eta);
        }
    }

    int aux = ix.aux0;
    spec.aux_offsets.assign(static_cast<std::size_t>(N) * nv, 0);
    for (int l = 0; l < N; ++l) {
        for (int v = 0; v < nv; ++v) {
            spec.aux_offsets[static_cast<std::size_t>(l) * nv + v] = aux;
            aux += emit(l, v, verts[v], aux, eq, in);
        }
    }
    ix.aux_per_stage_vertex = N * nv > 0 ? (aux - ix.aux0) / (N * nv) : 0;
    ix.total = aux;

    // Nominal prediction at the nominal parameters.
    for (int i = 0; i < nx; ++i) {
        eq.coef(ix.Xhat(0) + i, 1.0);
        eq.end(c.Xj(i));
    }
    for (int l = 0; l < N; ++l) {
        for (int i = 0; i < nup; ++i) {
            eq.coef(ix.Uhat(l) + i, 1.0);
            eq.coefs(ix.Xhat(l), -d.K.row(i));
            eq.coef(ix.V(l) + i, -1.0);
            eq.end(0.0);
        }
        for (int i = 0; i < nx; ++i) {
            eq.coef(ix.Xhat(l + 1) + i, 1.0);
            eq.coefs(ix.Xhat(l), -c.nom.A.row(i));
            eq.coefs(ix.Uhat(l), -c.nom.B.row(i));
            eq.end(0.0);
        }
        for (int i = 0; i < ny; ++i) {
            eq.coef(ix.Yhat(l) + i, 1.0);
            eq.coefs(ix.Xhat(l), -c.nom.C.row(i));
            eq.coefs(ix.Uhat(l), -c.nom.D.row(i));
            eq.end(0.0);
        }
    }

    QpProblem& qp = spec.qp;
    eq.finish(ix.total, qp.A, qp.b);
    in.finish(ix.total, qp.G, qp.h);
    qp.q = Vector::Zero(ix.total);
    qp.P.resize(ix.total, ix.total);
    if (c.cfg.cost == CostMode::Linear) {
        for (int l = 1; l <= N; ++l) {
            qp.q.segment(ix.Xhat(l), nx) += c.cfg.c;
        }
        for (int l = 0; l <= N; ++l) {
            qp.q(ix.alpha(l)) += c.cfg.alpha_weight;
        }
    } else {
        Triplets pt;
        auto add_block = [&](int off, const Matrix& W) {
            for (Eigen::Index a = 0; a < W.rows(); ++a) {
                for (Eigen::Index b = 0; b < W.cols(); ++b) {
                    if (W(a, b) != 0.0) {
                        pt.emplace_back(off + a, off + b, 2.0 * W(a, b));
                    }
                }
            }
        };
        const Matrix Q = d.weights.Q();
        const Matrix Rp = d.weights.Rp(p);
        const Matrix Pf = c.cfg.terminal_weight ? *c.cfg.terminal_weight : d.P;
        for (int l = 0; l < N; ++l) {
            add_block(ix.Xhat(l), Q);
            add_block(ix.Uhat(l), Rp);
            if (p > 1) {
                add_block(ix.Yhat(l), d.weights.Qp(p));
            }
        }
        add_block(ix.Xhat(N), 0.5 * (Pf + Pf.transpose()));
        qp.P.setFromTriplets(pt.begin(), pt.end());
    }
    return spec;
}

/// psi = [X^v; U^v] as an affine map of (z_l, alpha_l, V_l): coefficient of
/// a' psi on z, alpha and V for a given row vector a.
struct PsiCoef {
    Vector z;
    double alpha;
    Vector V;
};

PsiCoef psi_coef(const Vector& a, const Matrix& K, const Vector& xv, int nx)
{
    const Vector ax = a.head(nx);
    const Vector au = a.tail(a.size() - nx);
    PsiCoef pc;
    pc.z = ax + K.transpose() * au;
    pc.alpha = pc.z.dot(xv);
    pc.V = au;
    return pc;
}

}  // namespace

QPSpec build_qp(const Vector& Xj, const MultiStepModel& model, const ControllerDesign& design, const MpcConfig& cfg)
{
    if (cfg.lambda == LambdaMode::Explicit) {
        return build_qp(Xj, PolytopicModel::from(model), design, cfg);
    }
    const int nx = model.nx(), nu = model.nu(), p = model.p();
    BuildContext ctx{Xj, design, cfg, model.nominal(), model.Wx(), model.Wy(), nx, nu, p};
    check_design(ctx);
    const int npsi = nx + nu * p;
    const Matrix& Hp = design.tight.Hp;
    const int nr = static_cast<int>(Hp.rows());
    const int qx = nr - static_cast<int>(design.tight.wy.size());
    const Matrix Hx = Hp.topLeftCorner(qx, nx);

    // Row r of H_p touches predictor column cidx: p-step rows first, then j = 1..p-1.
    Matrix Acen = Matrix::Zero(nr, npsi);  // sum_c Hp(r,c) (theta_hat + center)
    Matrix Brad = Matrix::Zero(nr, npsi);  // sum_c |Hp(r,c)| radius
    for (int r = 0; r < nr; ++r) {
        for (int cidx = 0; cidx < Hp.cols(); ++cidx) {
            const double h = Hp(r, cidx);
            if (h == 0.0) {
                continue;
            }
            const int steps = cidx < nx ? p : (cidx - nx) / nx + 1;
            const int state = cidx < nx ? cidx : (cidx - nx) % nx;
            const PredictorRow& row = model.row(steps, state);
            const int len = static_cast<int>(row.theta_hat.size());
            Acen.row(r).head(len) += h * (row.theta_hat + row.residual.center).transpose();
            Brad.row(r).head(len) += std::abs(h) * row.residual.radius.transpose();
        }
    }
    // Only coordinates with nonzero radius need an epigraph variable.
    std::vector<int> used;
    std::vector<int> slot(npsi, -1);
    for (int m = 0; m < npsi; ++m) {
        if (Brad.col(m).cwiseAbs().maxCoeff() > 0.0) {
            slot[m] = static_cast<int>(used.size());
            used.push_back(m);
        }
    }
    const auto& K = design.K;
    const auto& t = design.tight;
    const int ns = static_cast<int>(used.size());
    QpIndex layout;  // filled by assemble; offsets needed inside the emitter
    const int N = cfg.horizon;
    layout.nx = nx;
    layout.nu = nu;
    layout.p = p;
    layout.z0 = 0;
    layout.alpha0 = (N + 1) * nx;
    layout.V0 = layout.alpha0 + N + 1;

    InclusionEmitter emit = [&](int l, int, const Vector& xv, int aux, Rows& /*eq*/, Rows& in) {
        const int zc = layout.z0 + l * nx, ac = layout.alpha0 + l, Vc = layout.V0 + l * nu * p;
        const int zn = layout.z0 + (l + 1) * nx, an = layout.alpha0 + l + 1;
        // s >= |psi| on the used coordinates.
        for (int k = 0; k < ns; ++k) {
            const int m = used[k];
            Vector a = Vector::Zero(npsi);
            a(m) = 1.0;
            const PsiCoef pc = psi_coef(a, K, xv, nx);
            for (double sg : {1.0, -1.0}) {
                in.coefs(zc, sg * pc.z);
                in.coef(ac, sg * pc.alpha);
                in.coefs(Vc, sg * pc.V);
                in.coef(aux + k, -1.0);
                in.end(0.0);
            }
        }
        for (int r = 0; r < nr; ++r) {
            const PsiCoef pc = psi_coef(Acen.row(r).transpose(), K, xv, nx);
            Vector zcoef = pc.z;
            in.coefs(Vc, pc.V);
            for (int k = 0; k < ns; ++k) {
                in.coef(aux + k, Brad(r, used[k]));
            }
            double rhs;
            if (r < qx) {
                in.coefs(zc, zcoef);
                in.coef(ac, pc.alpha);
                in.coefs(zn, -Hx.row(r));
                in.coef(an, -1.0);
                rhs = -t.wx(r);
            } else {
                in.coefs(zc, zcoef);
                in.coef(ac, pc.alpha);
                rhs = 1.0 - t.wy(r - qx);
            }
            in.end(rhs);
        }
        return ns;
    };
    return assemble(ctx, LambdaMode::ClosedForm, emit);
}

QPSpec build_qp(const Vector& Xj, const PolytopicModel& model, const ControllerDesign& design, const MpcConfig& cfg)
{
    const AffineTerms& T = model.terms;
    require_dims(!T.terms.empty(), "model has no constant term");
    require_dims(model.theta.dim() == T.num_params(), "parameter set dimension mismatch");
    if (cfg.lambda != LambdaMode::Explicit) {
        throw Error(ErrorCode::ConfigError, "closed-form multipliers need a row-structured box model");
    }
    const int nx = T.nx, nu = T.nu, p = T.p;
    BuildContext ctx{Xj, design, cfg, T.terms[0], model.Wx, model.Wy, nx, nu, p};
    check_design(ctx);
    const auto& K = design.K;
    const auto& t = design.tight;
    const Matrix& Hp = t.Hp;
    const int nr = static_cast<int>(Hp.rows());
    const int qx = nr - static_cast<int>(t.wy.size());
    const Matrix Hx = Hp.topLeftCorner(qx, nx);
    const int ntheta = T.num_params();
    const Matrix& Ht = model.theta.H;
    const Vector& ht = model.theta.h;
    const int qt = static_cast<int>(Ht.rows());

    // Per parameter: H_p [A_k + B_k K; C_k + D_k K] and H_p [B_k; D_k].
    std::vector<Matrix> Gz(ntheta + 1), GV(ntheta + 1);
    for (int k = 0; k <= ntheta; ++k) {
        const auto& M = T.terms[k];
        Matrix Mx(nx + M.C.rows(), nx), Mu(nx + M.C.rows(), nu * p);
        Mx << M.A, M.C;
        Mu << M.B, M.D;
        GV[k] = Hp * Mu;
        Gz[k] = Hp * (Mx + Mu * K);
    }
    // Structural pattern of H_p E: entry (r, k) vanishes for every decision.
    std::vector<std::vector<char>> nz(nr, std::vector<char>(ntheta, 0));
    for (int k = 0; k < ntheta; ++k) {
        for (int r = 0; r < nr; ++r) {
            nz[r][k] = (Gz[k + 1].row(r).cwiseAbs().maxCoeff() > 0.0 || GV[k + 1].row(r).cwiseAbs().maxCoeff() > 0.0);
        }
    }
    // With one parameter per facet, multipliers on facets of structurally zero
    // columns can be set to zero without loss (their combination is >= 0 on Theta).
    bool axis_aligned = true;
    std::vector<int> facet_param(qt, -1);
    std::vector<std::vector<std::pair<int, double>>> facets_of(ntheta);
    for (int f = 0; f < qt; ++f) {
        int count = 0;
        for (int k = 0; k < ntheta; ++k) {
            if (Ht(f, k) != 0.0) {
                ++count;
                facet_param[f] = k;
                facets_of[k].emplace_back(f, Ht(f, k));
            }
        }
        axis_aligned = axis_aligned && count == 1;
    }
    std::vector<std::vector<int>> kept(nr);
    std::vector<std::vector<int>> eq_params(nr);
    for (int r = 0; r < nr; ++r) {
        for (int f = 0; f < qt; ++f) {
            if (!axis_aligned || (facet_param[f] >= 0 && nz[r][facet_param[f]])) {
                kept[r].push_back(f);
            }
        }
        for (int k = 0; k < ntheta; ++k) {
            if (!axis_aligned || nz[r][k]) {
                eq_params[r].push_back(k);
            }
        }
    }
    std::vector<std::pair<int, int>> pattern;
    std::vector<std::vector<int>> var_of(nr);  // per row: facet -> local var index, -1 if pruned
    for (int r = 0; r < nr; ++r) {
        var_of[r].assign(qt, -1);
        for (int f : kept[r]) {
            var_of[r][f] = static_cast<int>(pattern.size());
            pattern.emplace_back(r, f);
        }
    }
    const int N = cfg.horizon;
    QpIndex layout;
    layout.z0 = 0;
    layout.alpha0 = (N + 1) * nx;
    layout.V0 = layout.alpha0 + N + 1;
    const int nlam = static_cast<int>(pattern.size());

    InclusionEmitter emit = [&](int l, int, const Vector& xv, int aux, Rows& eq, Rows& in) {
        const int zc = layout.z0 + l * nx, ac = layout.alpha0 + l, Vc = layout.V0 + l * nu * p;
        const int zn = layout.z0 + (l + 1) * nx, an = layout.alpha0 + l + 1;
        for (int k = 0; k < nlam; ++k) {
            in.coef(aux + k, -1.0);
            in.end(0.0);
        }
        for (int r = 0; r < nr; ++r) {
            // (H_p E)_{r,k} = Lambda_r H_theta(:, k)
            for (int k : eq_params[r]) {
                for (const auto& [f, hv] : facets_of[k]) {
                    if (var_of[r][f] >= 0) {
                        eq.coef(aux + var_of[r][f], hv);
                    }
                }
                const auto gz = Gz[k + 1].row(r);
                eq.coefs(zc, -gz.transpose());
                eq.coef(ac, -gz.dot(xv));
                eq.coefs(Vc, -GV[k + 1].row(r).transpose());
                eq.end(0.0);
            }
            // Lambda_r h + (H_p e)_r <= Phi_r - wbar_r
            for (int f : kept[r]) {
                in.coef(aux + var_of[r][f], ht(f));
            }
            const auto g0 = Gz[0].row(r);
            in.coefs(Vc, GV[0].row(r).transpose());
            in.coefs(zc, g0.transpose());
            in.coef(ac, g0.dot(xv));
            double rhs;
            if (r < qx) {
                in.coefs(zn, -Hx.row(r));
                in.coef(an, -1.0);
                rhs = -t.wx(r);
            } else {
                rhs = 1.0 - t.wy(r - qx);
            }
            in.end(rhs);
        }
        return nlam;
    };
    QPSpec spec = assemble(ctx, LambdaMode::Explicit, emit);
    spec.lambda_pattern.assign(static_cast<std::size_t>(N) * spec.index.nv, pattern);
    spec.lambda_rows = nr;
    spec.lambda_facets = qt;
    return spec;
}

namespace {

void extract(const QPSpec& spec, const Vector& x, MPCSolution& sol)
{
    const QpIndex& ix = spec.index;
    const int nup = ix.nu * ix.p, ny = ix.nx * (ix.p - 1);
    auto& tb = sol.tube;
    auto& nm = sol.nominal;
    for (int l = 0; l <= ix.N; ++l) {
        tb.z.push_back(x.segment(ix.z(l), ix.nx));
        tb.alpha.push_back(x(ix.alpha(l)));
        nm.X.push_back(x.segment(ix.Xhat(l), ix.nx));
        if (l < ix.N) {
            tb.V.push_back(x.segment(ix.V(l), nup));
            nm.U.push_back(x.segment(ix.Uhat(l), nup));
            nm.Y.push_back(x.segment(ix.Yhat(l), ny));
        }
    }
    if (spec.lambda == LambdaMode::Explicit) {
        tb.Lambda.assign(ix.N, std::vector<Matrix>(ix.nv));
        for (int l = 0; l < ix.N; ++l) {
            for (int v = 0; v < ix.nv; ++v) {
                const std::size_t id = static_cast<std::size_t>(l) * ix.nv + v;
                Matrix L = Matrix::Zero(spec.lambda_rows, spec.lambda_facets);
                const int off = spec.aux_offsets[id];
                const auto& pat = spec.lambda_pattern[id];
                for (std::size_t k = 0; k < pat.size(); ++k) {
                    L(pat[k].first, pat[k].second) = x(off + static_cast<int>(k));
                }
                tb.Lambda[l][v] = std::move(L);
            }
        }
    }
    sol.U = tb.V.front() + spec.K * spec.Xj;
}

}  // namespace

MPCSolution solve_step(const QPSpec& spec, const SolveOptions& options)
{
    const QpResult res = solve_qp(spec.qp, options.qp, options.warm_start);
    MPCSolution sol;
    sol.iterations = res.iterations;
    if (res.status == QpStatus::Infeasible) {
        sol.status = MpcStatus::Infeasible;
        if (options.throw_on_failure) {
            throw Error(ErrorCode::Infeasible, "tube QP is infeasible");
        }
        return sol;
    }
    if (res.status != QpStatus::Optimal) {
        sol.status = MpcStatus::NumericalFailure;
        if (options.throw_on_failure) {
            throw Error(ErrorCode::SolverFailure, std::string("QP solver returned ") + to_string(res.status));
        }
        return sol;
    }
    const auto& qp = spec.qp;
    sol.raw = res.x;
    sol.objective = res.objective;
    sol.eq_residual = qp.A.rows() > 0 ? (qp.A * res.x - qp.b).cwiseAbs().maxCoeff() : 0.0;
    sol.ineq_residual = qp.G.rows() > 0 ? std::max(0.0, (qp.G * res.x - qp.h).maxCoeff()) : 0.0;
    if (std::max(sol.eq_residual, sol.ineq_residual) > 1e-6) {
        sol.status = MpcStatus::NumericalFailure;
        if (options.throw_on_failure) {
            throw Error(ErrorCode::SolverFailure, "QP solution violates constraints by " +
                                                      std::to_string(std::max(sol.eq_residual, sol.ineq_residual)));
        }
        return sol;
    }
    sol.status = MpcStatus::Optimal;
    extract(spec, res.x, sol);
    return sol;
}

Vector shifted_warm_start(const QPSpec& next, const MPCSolution& previous, const MultiStepModel& model)
{
    const QpIndex& ix = next.index;
    require_dims(previous.raw.size() == ix.total, "previous solution has a different layout");
    const int N = ix.N, nx = ix.nx, nup = ix.nu * ix.p;
    const Vector& old = previous.raw;
    Vector x = old;
    for (int l = 0; l < N; ++l) {
        x.segment(ix.z(l), nx) = old.segment(ix.z(l + 1), nx);
        x(ix.alpha(l)) = old(ix.alpha(l + 1));
    }
    x(ix.alpha(N)) = next.eta > 0.0 ? next.eta : old(ix.alpha(N));
    for (int l = 0; l + 1 < N; ++l) {
        x.segment(ix.V(l), nup) = old.segment(ix.V(l + 1), nup);
    }
    x.segment(ix.V(N - 1), nup).setZero();
    const int per = ix.aux_per_stage_vertex * ix.nv;
    for (int l = 0; l + 1 < N; ++l) {
        x.segment(ix.aux0 + l * per, per) = old.segment(ix.aux0 + (l + 1) * per, per);
    }
    const auto nom = model.nominal();
    x.segment(ix.Xhat(0), nx) = next.Xj;
    for (int l = 0; l < N; ++l) {
        const Vector X = x.segment(ix.Xhat(l), nx);
        const Vector U = next.K * X + x.segment(ix.V(l), nup);
        x.segment(ix.Uhat(l), nup) = U;
        x.segment(ix.Xhat(l + 1), nx) = nom.A * X + nom.B * U;
        if (ix.p > 1) {
            x.segment(ix.Yhat(l), nx * (ix.p - 1)) = nom.C * X + nom.D * U;
        }
    }
    return x;
}

double tube_violation(const MPCSolution& solution, const Matrix& V, int stage, const Vector& x)
{
    const auto& tb = solution.tube;
    return std::max(0.0, (V * (x - tb.z[stage])).cwiseAbs().maxCoeff() - tb.alpha[stage]);
}

TubeReport verify_tube(const MPCSolution& solution, const MultiStepModel& model, const ControllerDesign& design,
                       int n_samples, std::uint64_t seed)
{
    TubeReport rep;
    const auto& tb = solution.tube;
    const int N = static_cast<int>(tb.V.size());
    const int nx = model.nx();
    const LowComplexityPolytope X0(design.V);
    const Box tbox = model.theta_box();
    const Matrix& Vinv = X0.V_inv();
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> uni(-1.0, 1.0);
    std::bernoulli_distribution coin(0.5);
    auto corner_or_uniform = [&](const Box& b) {
        Vector s(b.dim());
        const bool corner = coin(rng);
        for (Eigen::Index i = 0; i < s.size(); ++i) {
            s(i) = corner ? (coin(rng) ? 1.0 : -1.0) : uni(rng);
        }
        return Vector(b.center + b.radius.cwiseProduct(s));
    };
    const Matrix& F = design.sets.F;
    const Matrix& Fp = design.tight.Fp;
    const Matrix& Gp = design.tight.Gp;
    for (int l = 0; l < N; ++l) {
        for (int s = 0; s < n_samples; ++s) {
            const Vector delta = corner_or_uniform(tbox);
            const auto M = model.evaluate(delta);
            const Vector sx = corner_or_uniform(Box::symmetric(Vector::Ones(nx)));
            const Vector x = tb.z[l] + tb.alpha[l] * Vinv * sx;
            const Vector u = design.K * x + tb.V[l];
            const Vector xn = M.A * x + M.B * u + corner_or_uniform(model.Wx());
            double viol = tube_violation(solution, design.V, l + 1, xn);
            viol = std::max(viol, (F * x).maxCoeff() - 1.0);
            viol = std::max(viol, (Gp * u).maxCoeff() - 1.0);
            if (model.p() > 1) {
                const Vector y = M.C * x + M.D * u + corner_or_uniform(model.Wy());
                viol = std::max(viol, (Fp * y).maxCoeff() - 1.0);
            }
            if (viol > rep.max_violation) {
                rep.max_violation = viol;
                rep.worst_stage = l;
            }
            ++rep.samples;
        }
    }
    return rep;
}

StageData make_stage_data(const PolytopicModel& model, const Matrix& Hp, const Matrix& K, const Vector& xv,
                          const Vector& z, double alpha, const Vector& Vl, const Vector& z_next, double alpha_next,
                          const Vector& wbar_x, const Vector& wbar_y)
{
    const AffineTerms& T = model.terms;
    const int nx = T.nx;
    const int nr = static_cast<int>(Hp.rows());
    const int qx = static_cast<int>(wbar_x.size());
    require_dims(qx + wbar_y.size() == nr, "tightening vectors do not match H_p");
    const Vector X = z + alpha * xv;
    const Vector U = Vl + K * X;
    auto stacked = [&](const MultiStepModel::Matrices& M) {
        Vector out(nx + M.C.rows());
        out << M.A * X + M.B * U, M.C * X + M.D * U;
        return out;
    };
    StageData st;
    st.HE.resize(nr, T.num_params());
    for (int k = 0; k < T.num_params(); ++k) {
        st.HE.col(k) = Hp * stacked(T.terms[k + 1]);
    }
    st.He = Hp * stacked(T.terms[0]);
    st.He.head(qx) -= Hp.topLeftCorner(qx, nx) * z_next;
    st.rhs.resize(nr);
    st.rhs << Vector::Constant(qx, alpha_next) - wbar_x, Vector::Ones(nr - qx) - wbar_y;
    return st;
}

std::vector<Vector> enumerate_vertices(const HPolytope& P, double tol)
{
    const int n = static_cast<int>(P.dim());
    const int m = static_cast<int>(P.rows());
    std::vector<Vector> out;
    if (n == 0) {
        out.emplace_back(Vector());
        return out;
    }
    std::vector<int> pick(n);
    for (int i = 0; i < n; ++i) pick[i] = i;
    while (n <= m) {
        Matrix A(n, n);
        Vector b(n);
        for (int i = 0; i < n; ++i) {
            A.row(i) = P.H.row(pick[i]);
            b(i) = P.h(pick[i]);
        }
        Eigen::FullPivLU<Matrix> lu(A);
        if (lu.rank() == n) {
            const Vector x = lu.solve(b);
            if (((P.H * x - P.h).array() <= tol * (1.0 + P.h.cwiseAbs().array())).all()) {
                const bool dup = std::any_of(out.begin(), out.end(), [&](const Vector& y) {
                    return (y - x).cwiseAbs().maxCoeff() <= 1e-9 * (1.0 + x.cwiseAbs().maxCoeff());
                });
                if (!dup) out.push_back(x);
            }
        }
        int i = n - 1;
        while (i >= 0 && pick[i] == m - n + i) --i;
        if (i < 0) break;
        ++pick[i];
        for (int j = i + 1; j < n; ++j) pick[j] = pick[j - 1] + 1;
    }
    return out;
}

DualCheck dual_equivalence_check(const StageData& stage, const HPolytope& Theta, double tol)
{
    const int nr = static_cast<int>(stage.HE.rows());
    const int q = static_cast<int>(Theta.rows());
    require_dims(stage.HE.cols() == Theta.dim(), "stage data and parameter set disagree");
    DualCheck dc;
    dc.lp_value.resize(nr);
    dc.vertex_value.resize(nr);
    const auto verts = enumerate_vertices(Theta);
    if (verts.empty()) {
        throw Error(ErrorCode::InfeasibleSet, "parameter set is empty");
    }
    const Matrix Aeq = Theta.H.transpose();
    const Matrix G = -Matrix::Identity(q, q);
    const Vector h = Vector::Zero(q);
    for (int r = 0; r < nr; ++r) {
        const Vector target = stage.HE.row(r).transpose();
        const QpResult lp = solve_lp(Theta.h, Aeq, target, G, h);
        if (lp.status != QpStatus::Optimal) {
            throw Error(ErrorCode::LPFailure, std::string("multiplier LP: ") + to_string(lp.status));
        }
        const double base = stage.He(r) - stage.rhs(r);
        dc.lp_value(r) = lp.objective + base;
        double best = -std::numeric_limits<double>::infinity();
        for (const auto& v : verts) best = std::max(best, target.dot(v));
        dc.vertex_value(r) = best + base;
    }
    dc.lambda_feasible = dc.lp_value.maxCoeff() <= tol;
    dc.vertex_feasible = dc.vertex_value.maxCoeff() <= tol;
    const double gap = (dc.lp_value - dc.vertex_value).cwiseAbs().maxCoeff();
    dc.equivalent = dc.lambda_feasible == dc.vertex_feasible && gap <= tol * (1.0 + dc.vertex_value.cwiseAbs().maxCoeff());
    return dc;
}

void export_triplets(const QPSpec& spec, std::ostream& os)
{
    const auto& qp = spec.qp;
    const int n = static_cast<int>(qp.q.size());
    os.precision(17);
    os << "# n_var " << n << " n_eq " << qp.A.rows() << " n_ineq " << qp.G.rows()
       << "; column " << n << " holds the linear cost / right-hand side\n";
    auto dump = [&](const char* name, const SparseMatrix& M, const Vector& rhs) {
        os << name << '\n';
        for (int k = 0; k < M.outerSize(); ++k) {
            for (SparseMatrix::InnerIterator it(M, k); it; ++it) {
                os << it.row() << ' ' << it.col() << ' ' << it.value() << '\n';
            }
        }
        for (Eigen::Index r = 0; r < rhs.size(); ++r) {
            if (rhs(r) != 0.0) os << r << ' ' << n << ' ' << rhs(r) << '\n';
        }
    };
    dump("COST", qp.P, qp.q);
    dump("EQ", qp.A, qp.b);
    dump("INEQ", qp.G, qp.h);
}

}  // namespace tubempc
