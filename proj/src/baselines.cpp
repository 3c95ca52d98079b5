#include <tubempc/baselines.hpp>
#include <tubempc/error.hpp>

#include <cmath>
#include <ostream>

namespace tubempc {

TauMode parse_tau_mode(const std::string& s)
{
    if (s == "observed") return TauMode::Observed;
    if (s == "worstcase") return TauMode::WorstCase;
    throw Error(ErrorCode::ConfigError, "unknown tau mode '" + s + "'");
}

const char* to_string(TauMode m) { return m == TauMode::Observed ? "observed" : "worstcase"; }

Vector TauTable::stacked_j() const
{
    Vector out(tau_j.size());
    for (Eigen::Index j = 0; j < tau_j.rows(); ++j) {
        out.segment(j * tau_j.cols(), tau_j.cols()) = tau_j.row(j).transpose();
    }
    return out;
}

TauTable worst_case_tau(const MultiStepModel& model, TauMode mode, const ConstraintSets* sets, const Dataset* data)
{
    const int p = model.p(), nx = model.nx(), nu = model.nu();
    if (mode == TauMode::Observed && data == nullptr) {
        throw Error(ErrorCode::MissingDataset, "observed tau needs the identification data");
    }
    if (mode == TauMode::WorstCase && sets == nullptr) {
        throw Error(ErrorCode::ConfigError, "worst-case tau needs the constraint sets");
    }
    Vector xlo, xhi, ulo, uhi;
    if (sets != nullptr) {
        const Box xb = sets->state_box();
        const Box ub = sets->input_box();
        xlo = xb.lower();
        xhi = xb.upper();
        ulo = ub.lower();
        uhi = ub.upper();
    }
    auto bound = [&](int steps, int state) {
        const PredictorRow& row = model.row(steps, state);
        const Box full(row.theta_hat + row.residual.center, row.residual.radius);
        if (mode == TauMode::Observed) {
            return observed_prediction_bound(build_regressors(*data, steps, state, false), full, row.theta_hat);
        }
        Vector lo(nx + nu * steps), hi(nx + nu * steps);
        lo.head(nx) = xlo;
        hi.head(nx) = xhi;
        for (int k = 0; k < steps; ++k) {
            lo.segment(nx + k * nu, nu) = ulo;
            hi.segment(nx + k * nu, nu) = uhi;
        }
        return worst_case_prediction_bound(lo, hi, full, row.theta_hat);
    };
    TauTable t;
    t.tau_p.resize(nx);
    t.tau_j.resize(p - 1, nx);
    t.noise_p = model.Wx().radius;
    t.noise_j.resize(p - 1, nx);
    for (int i = 0; i < nx; ++i) {
        t.tau_p(i) = bound(p, i);
        for (int j = 1; j < p; ++j) {
            t.tau_j(j - 1, i) = bound(j, i);
            t.noise_j(j - 1, i) = model.Wy().radius((j - 1) * nx + i);
        }
    }
    return t;
}

namespace {

Vector box_support(const Matrix& H, const Box& S)
{
    return H * S.center + H.cwiseAbs() * S.radius;
}

}  // namespace

RigidTubeController::RigidTubeController(const MultiStepModel& model, const ControllerDesign& design,
                                         const TauTable& tau, const MpcConfig& cfg)
    : mpc_(cfg), weights_(design.weights), sets_(design.sets)
{
    p_ = model.p();
    nx_ = model.nx();
    nup_ = model.nu() * p_;
    ny_ = nx_ * (p_ - 1);
    require_dims(design.p == p_, "design and model disagree on p");
    require_dims(cfg.horizon >= 1, "horizon must be positive");
    require_dims(tau.tau_p.size() == nx_ && tau.tau_j.rows() == p_ - 1, "tau table has wrong shape");
    if (cfg.cost == CostMode::Linear) {
        require_dims(cfg.c.size() == nx_, "linear objective has wrong dimension");
    }
    cfg_.tau = tau;
    cfg_.nominal = model.nominal();
    cfg_.K = design.K;
    P_ = cfg.terminal_weight ? *cfg.terminal_weight : design.P;
    Fp_ = design.tight.Fp;
    Gp_ = design.tight.Gp;

    const auto& nom = cfg_.nominal;
    cfg_.dist_x = Box(model.Wx().center, tau.tau_p + model.Wx().radius);
    cfg_.dist_y = Box(model.Wy().center, tau.stacked_j() + model.Wy().radius);
    const Matrix Acl = nom.A + nom.B * design.K;
    cfg_.rpi_box = rpi_outer_approx(Acl, cfg_.dist_x);
    const Box& S = cfg_.rpi_box;

    state_rhs_ = Vector::Ones(sets_.F.rows()) - box_support(sets_.F, S);
    input_rhs_ = Vector::Ones(Gp_.rows()) - box_support(Gp_ * design.K, S);
    if (p_ > 1) {
        const Matrix Ccl = nom.C + nom.D * design.K;
        output_rhs_ = Vector::Ones(Fp_.rows()) - box_support(Fp_ * Ccl, S) - box_support(Fp_, cfg_.dist_y);
    }
}

QpProblem RigidTubeController::build(const Vector& Xj) const
{
    require_dims(Xj.size() == nx_, "X_j has wrong dimension");
    const int n = y_offset(N());
    const auto& nom = cfg_.nominal;
    const Box& S = cfg_.rpi_box;
    Triplets gi, ge;
    std::vector<double> h, b;
    auto row_in = [&](int col0, const Matrix& M, int r) {
        for (Eigen::Index c = 0; c < M.cols(); ++c) {
            if (M(r, c) != 0.0) gi.emplace_back(static_cast<int>(h.size()), col0 + static_cast<int>(c), M(r, c));
        }
    };
    // X_j - z_0 in S.
    for (int i = 0; i < nx_; ++i) {
        gi.emplace_back(static_cast<int>(h.size()), z_offset(0) + i, 1.0);
        h.push_back(Xj(i) - S.lower()(i));
        gi.emplace_back(static_cast<int>(h.size()), z_offset(0) + i, -1.0);
        h.push_back(S.upper()(i) - Xj(i));
    }
    for (int l = 0; l <= N(); ++l) {
        for (int r = 0; r < sets_.F.rows(); ++r) {
            row_in(z_offset(l), sets_.F, r);
            h.push_back(state_rhs_(r));
        }
        if (l == N()) break;
        for (int r = 0; r < Gp_.rows(); ++r) {
            row_in(v_offset(l), Gp_, r);
            h.push_back(input_rhs_(r));
        }
        for (int r = 0; r < Fp_.rows(); ++r) {
            row_in(y_offset(l), Fp_, r);
            h.push_back(output_rhs_(r));
        }
    }
    auto row_eq = [&](int col0, const Matrix& M, int r, double sign) {
        for (Eigen::Index c = 0; c < M.cols(); ++c) {
            if (M(r, c) != 0.0) ge.emplace_back(static_cast<int>(b.size()), col0 + static_cast<int>(c), sign * M(r, c));
        }
    };
    for (int l = 0; l < N(); ++l) {
        for (int i = 0; i < nx_; ++i) {
            ge.emplace_back(static_cast<int>(b.size()), z_offset(l + 1) + i, 1.0);
            row_eq(z_offset(l), nom.A, i, -1.0);
            row_eq(v_offset(l), nom.B, i, -1.0);
            b.push_back(0.0);
        }
        for (int i = 0; i < ny_; ++i) {
            ge.emplace_back(static_cast<int>(b.size()), y_offset(l) + i, 1.0);
            row_eq(z_offset(l), nom.C, i, -1.0);
            row_eq(v_offset(l), nom.D, i, -1.0);
            b.push_back(0.0);
        }
    }
    if (mpc_.terminal) {
        // Nominal terminal equality; S is RPI under the same K.
        for (int i = 0; i < nx_; ++i) {
            ge.emplace_back(static_cast<int>(b.size()), z_offset(N()) + i, 1.0);
            b.push_back(0.0);
        }
    }
    QpProblem qp;
    qp.G.resize(static_cast<Eigen::Index>(h.size()), n);
    qp.G.setFromTriplets(gi.begin(), gi.end());
    qp.h = Eigen::Map<const Vector>(h.data(), static_cast<Eigen::Index>(h.size()));
    qp.A.resize(static_cast<Eigen::Index>(b.size()), n);
    qp.A.setFromTriplets(ge.begin(), ge.end());
    qp.b = Eigen::Map<const Vector>(b.data(), static_cast<Eigen::Index>(b.size()));
    qp.q = Vector::Zero(n);
    qp.P.resize(n, n);
    if (mpc_.cost == CostMode::Linear) {
        for (int l = 1; l <= N(); ++l) qp.q.segment(z_offset(l), nx_) += mpc_.c;
    } else {
        Triplets pt;
        auto add = [&](int off, const Matrix& W) {
            for (Eigen::Index a = 0; a < W.rows(); ++a)
                for (Eigen::Index c = 0; c < W.cols(); ++c)
                    if (W(a, c) != 0.0) pt.emplace_back(off + a, off + c, 2.0 * W(a, c));
        };
        for (int l = 0; l < N(); ++l) {
            add(z_offset(l), weights_.Q());
            add(v_offset(l), weights_.Rp(p_));
            if (p_ > 1) add(y_offset(l), weights_.Qp(p_));
        }
        add(z_offset(N()), 0.5 * (P_ + P_.transpose()));
        qp.P.setFromTriplets(pt.begin(), pt.end());
    }
    return qp;
}

RigidSolution RigidTubeController::solve(const Vector& Xj, const SolveOptions& options) const
{
    const QpProblem qp = build(Xj);
    const QpResult res = solve_qp(qp, options.qp);
    RigidSolution sol;
    sol.iterations = res.iterations;
    if (res.status != QpStatus::Optimal) {
        sol.status = res.status == QpStatus::Infeasible ? MpcStatus::Infeasible : MpcStatus::NumericalFailure;
        if (options.throw_on_failure) {
            throw Error(res.status == QpStatus::Infeasible ? ErrorCode::Infeasible : ErrorCode::SolverFailure,
                        std::string("rigid tube QP: ") + to_string(res.status));
        }
        return sol;
    }
    sol.status = MpcStatus::Optimal;
    sol.objective = res.objective;
    for (int l = 0; l <= N(); ++l) {
        sol.z.push_back(res.x.segment(z_offset(l), nx_));
        if (l < N()) {
            sol.v.push_back(res.x.segment(v_offset(l), nup_));
            sol.y.push_back(res.x.segment(y_offset(l), ny_));
        }
    }
    sol.U = cfg_.K * (Xj - sol.z.front()) + sol.v.front();
    return sol;
}

OneStepHomothetic::OneStepHomothetic(MultiStepModel model, ControllerDesign design, MpcConfig cfg)
    : model_(std::move(model)), design_(std::move(design)), cfg_(std::move(cfg))
{
    require_dims(model_.p() == 1, "one-step controller needs a p = 1 model");
    require_dims(design_.p == 1, "one-step controller needs a p = 1 design");
}

MPCSolution OneStepHomothetic::solve(const Vector& x, const SolveOptions& options) const
{
    return solve_step(build(x), options);
}

ComplexityRow count_qp(const std::string& name, const QpProblem& qp)
{
    ComplexityRow r;
    r.controller = name;
    r.n_var = static_cast<long>(qp.q.size());
    r.n_ineq = static_cast<long>(qp.h.size());
    r.n_eq = static_cast<long>(qp.b.size());
    return r;
}

std::vector<ComplexityRow> complexity_report(const std::vector<std::pair<std::string, const QpProblem*>>& qps)
{
    std::vector<ComplexityRow> rows;
    for (const auto& [name, qp] : qps) {
        ComplexityRow r;
        if (qp) {
            r = count_qp(name, *qp);
        }
        r.controller = name;
        if (name == "rigid") {
            r.reference_var = 2.5e2;
            r.reference_ineq = 9.5e2;
            r.reference_eq = 1.5e2;
        } else if (name == "homothetic") {
            r.reference_var = 7.1e4;
            r.reference_ineq = 7.2e4;
            r.reference_eq = 3.4e4;
        } else if (name == "proposed") {
            r.reference_var = 1.2e5;
            r.reference_ineq = 1.2e5;
            r.reference_eq = 6.1e5;
        }
        rows.push_back(std::move(r));
    }
    return rows;
}

bool within_order_of_magnitude(double ours, double reference)
{
    if (ours <= 0.0 || reference <= 0.0) {
        return ours == reference;
    }
    return std::abs(std::log10(ours / reference)) <= 1.0;
}

void write_complexity_csv(const std::vector<ComplexityRow>& rows, std::ostream& os)
{
    auto opt = [](const std::optional<double>& v) { return v ? std::to_string(static_cast<long>(*v)) : std::string(); };
    os << "controller,n_var,n_ineq,n_eq,reference_n_var,reference_n_ineq,reference_n_eq\n";
    for (const auto& r : rows) {
        os << r.controller << ',' << r.n_var << ',' << r.n_ineq << ',' << r.n_eq << ',' << opt(r.reference_var) << ','
           << opt(r.reference_ineq) << ',' << opt(r.reference_eq) << '\n';
    }
}

}  // namespace tubempc
