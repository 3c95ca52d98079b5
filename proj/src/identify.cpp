#include <tubempc/error.hpp>
#include <tubempc/identify.hpp>
#include <tubempc/qp_solver.hpp>

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>

namespace tubempc {

namespace {

QpSettings lp_settings()
{
    QpSettings s;
    s.feas_tol = 1e-9;
    s.gap_tol = 1e-8;
    s.max_iter = 150;
    return s;
}

Matrix regressor_matrix(const std::vector<Regressor>& regs)
{
    Matrix Psi(regs.size(), regs.front().psi.size());
    for (std::size_t k = 0; k < regs.size(); ++k) {
        Psi.row(static_cast<Eigen::Index>(k)) = regs[k].psi.transpose();
    }
    return Psi;
}

Vector targets(const std::vector<Regressor>& regs)
{
    Vector y(regs.size());
    for (std::size_t k = 0; k < regs.size(); ++k) {
        y(static_cast<Eigen::Index>(k)) = regs[k].target;
    }
    return y;
}

}  // namespace

Dataset generate_dataset(const GroundTruthModel& gt, int samples, const Box& input_box, std::mt19937_64& rng)
{
    require_dims(input_box.dim() == gt.nu(), "input excitation box dimension");
    std::vector<Vector> U;
    U.reserve(samples);
    for (int k = 0; k < samples; ++k) {
        U.push_back(sample_uniform(input_box, rng));
    }
    // Inputs and disturbances are drawn from separate streams so the input
    // sequence does not depend on the disturbance dimension.
    std::mt19937_64 wrng(rng());
    const Trajectory tr = simulate(gt, Vector::Zero(gt.nx()), U, wrng);
    return Dataset{tr.x, tr.u};
}

std::vector<Regressor> build_regressors(const Dataset& ds, int steps, int state, bool check_pe)
{
    require_dims(steps >= 1, "steps must be >= 1");
    require_dims(state >= 0 && state < ds.nx(), "state index");
    const int n = ds.size() - steps + 1;
    if (n < 1) {
        throw Error(ErrorCode::PEViolation, "dataset shorter than the prediction horizon");
    }
    const int nx = ds.nx();
    const int nu = ds.nu();
    std::vector<Regressor> regs(n);
    for (int k = 0; k < n; ++k) {
        Vector psi(nx + nu * steps);
        psi.head(nx) = ds.x[k];
        for (int t = 0; t < steps; ++t) {
            psi.segment(nx + t * nu, nu) = ds.u[k + t];
        }
        regs[k].psi = std::move(psi);
        regs[k].target = ds.x[k + steps](state);
    }
    if (check_pe) {
        const Matrix Psi = regressor_matrix(regs);
        const Matrix gram = Psi.transpose() * Psi;
        Eigen::SelfAdjointEigenSolver<Matrix> es(gram, Eigen::EigenvaluesOnly);
        const double lo = es.eigenvalues().minCoeff();
        const double hi = es.eigenvalues().maxCoeff();
        if (!(lo >= 1e-8 * hi) || hi <= 0.0) {
            throw Error(ErrorCode::PEViolation, "regressor Gram matrix is rank deficient (min eig " +
                                                    std::to_string(lo) + ", max eig " + std::to_string(hi) + ")");
        }
    }
    return regs;
}

MinErrorResult min_error_bound(const std::vector<Regressor>& regs)
{
    require_dims(!regs.empty(), "no regressors");
    const Matrix Psi = regressor_matrix(regs);
    const Vector y = targets(regs);
    const Eigen::Index N = Psi.rows();
    const Eigen::Index n = Psi.cols();
    // Variables [theta; lambda].
    Matrix G = Matrix::Zero(2 * N + 1, n + 1);
    G.topLeftCorner(N, n) = Psi;
    G.block(N, 0, N, n) = -Psi;
    G.col(n).head(2 * N).setConstant(-1.0);
    G(2 * N, n) = -1.0;
    Vector h(2 * N + 1);
    h << y, -y, 0.0;
    Vector c = Vector::Zero(n + 1);
    c(n) = 1.0;
    const QpResult r = solve_lp(c, Matrix(0, n + 1), Vector(0), G, h, lp_settings());
    if (r.status != QpStatus::Optimal) {
        throw Error(ErrorCode::LPFailure, std::string("error-bound LP: ") + to_string(r.status));
    }
    MinErrorResult out;
    out.theta = r.x.head(n);
    // Report the exact max residual of the returned fit.
    out.lambda = (y - Psi * out.theta).cwiseAbs().maxCoeff();
    return out;
}

Box feasible_parameter_box(const std::vector<Regressor>& regs, double bound)
{
    require_dims(!regs.empty(), "no regressors");
    const Matrix Psi = regressor_matrix(regs);
    const Vector y = targets(regs);
    const Eigen::Index N = Psi.rows();
    const Eigen::Index n = Psi.cols();
    const double slack = 1e-9;
    QpProblem lp;
    Matrix G(2 * N, n);
    G << Psi, -Psi;
    lp.G = to_sparse(G);
    lp.h.resize(2 * N);
    lp.h << y.array() + bound + slack, -y.array() + bound + slack;
    lp.P = SparseMatrix(n, n);
    lp.A = SparseMatrix(0, n);
    lp.b = Vector(0);
    Vector lo(n), hi(n);
    for (Eigen::Index m = 0; m < n; ++m) {
        for (int sense : {1, -1}) {
            lp.q = Vector::Zero(n);
            lp.q(m) = sense;
            const QpResult r = solve_qp(lp, lp_settings());
            if (r.status == QpStatus::Unbounded) {
                throw Error(ErrorCode::UnboundedParameter,
                            "feasible parameter set unbounded in coordinate " + std::to_string(m));
            }
            if (r.status != QpStatus::Optimal) {
                throw Error(ErrorCode::LPFailure, std::string("parameter-box LP: ") + to_string(r.status));
            }
            (sense > 0 ? lo : hi)(m) = r.x(m);
        }
    }
    return Box::from_bounds(lo.array() - slack, hi.array() + slack);
}

double observed_prediction_bound(const std::vector<Regressor>& regs, const Box& box, const Vector& theta_hat)
{
    const Vector d = box.center - theta_hat;
    double best = 0.0;
    for (const auto& reg : regs) {
        best = std::max(best, reg.psi.cwiseAbs().dot(box.radius) + std::abs(reg.psi.dot(d)));
    }
    return best;
}

double worst_case_prediction_bound(const Vector& lo, const Vector& hi, const Box& box, const Vector& theta_hat)
{
    // max over psi in [lo, hi] of |psi|'r + |psi'd|: convex, so each coordinate sits at an endpoint.
    const Vector d = box.center - theta_hat;
    double best = 0.0;
    for (double sigma : {1.0, -1.0}) {
        double total = 0.0;
        for (Eigen::Index m = 0; m < d.size(); ++m) {
            const double a = std::abs(lo(m)) * box.radius(m) + sigma * d(m) * lo(m);
            const double b = std::abs(hi(m)) * box.radius(m) + sigma * d(m) * hi(m);
            total += std::max(a, b);
        }
        best = std::max(best, total);
    }
    return best;
}

NominalResult nominal_parameters(const std::vector<Regressor>& regs, const Box& box, double noise_bound)
{
    require_dims(!regs.empty(), "no regressors");
    const Matrix Psi = regressor_matrix(regs);
    const Eigen::Index N = Psi.rows();
    const Eigen::Index n = Psi.cols();
    const Vector absr = Psi.cwiseAbs() * box.radius;
    const Vector pc = Psi * box.center;

    // Coordinates with (numerically) zero width are fixed to the box center.
    std::vector<Eigen::Index> fixed;
    for (Eigen::Index m = 0; m < n; ++m) {
        if (box.radius(m) <= 1e-12) {
            fixed.push_back(m);
        }
    }
    const Eigen::Index nf = static_cast<Eigen::Index>(fixed.size());
    const Eigen::Index nfree = n - nf;

    // Variables [theta_hat; t]: |psi_k'(c - theta_hat)| <= t - |psi_k|'r.
    Matrix G = Matrix::Zero(2 * N + 2 * nfree, n + 1);
    Vector h(2 * N + 2 * nfree);
    G.topLeftCorner(N, n) = -Psi;
    G.block(0, n, N, 1).setConstant(-1.0);
    h.head(N) = -absr - pc;
    G.block(N, 0, N, n) = Psi;
    G.block(N, n, N, 1).setConstant(-1.0);
    h.segment(N, N) = -absr + pc;
    Eigen::Index row = 2 * N;
    for (Eigen::Index m = 0; m < n; ++m) {
        if (box.radius(m) <= 1e-12) {
            continue;
        }
        G(row, m) = 1.0;
        h(row++) = box.center(m) + box.radius(m);
        G(row, m) = -1.0;
        h(row++) = -(box.center(m) - box.radius(m));
    }
    Matrix Aeq = Matrix::Zero(nf, n + 1);
    Vector beq(nf);
    for (Eigen::Index k = 0; k < nf; ++k) {
        Aeq(k, fixed[k]) = 1.0;
        beq(k) = box.center(fixed[k]);
    }
    Vector c = Vector::Zero(n + 1);
    c(n) = 1.0;
    const QpResult r = solve_lp(c, Aeq, beq, G, h, lp_settings());
    if (r.status != QpStatus::Optimal) {
        throw Error(ErrorCode::LPFailure, std::string("nominal-parameter LP: ") + to_string(r.status));
    }
    NominalResult out;
    out.theta_hat = r.x.head(n).cwiseMax(box.lower()).cwiseMin(box.upper());
    out.tau_hat = observed_prediction_bound(regs, box, out.theta_hat) + noise_bound;
    return out;
}

FpsBound parse_fps_bound(const std::string& s)
{
    if (s == "lambda") return FpsBound::Lambda;
    if (s == "scaled") return FpsBound::Scaled;
    if (s == "known") return FpsBound::Known;
    throw Error(ErrorCode::ConfigError, "unknown fps bound mode '" + s + "'");
}

const char* to_string(FpsBound b)
{
    switch (b) {
    case FpsBound::Lambda: return "lambda";
    case FpsBound::Scaled: return "scaled";
    case FpsBound::Known: return "known";
    }
    return "unknown";
}

IdentifiedRow identify_row(const Dataset& ds, int steps, int state, const IdentifySettings& settings,
                           std::optional<double> known_noise)
{
    const auto regs = build_regressors(ds, steps, state, true);
    IdentifiedRow row;
    row.state = state;
    row.steps = steps;
    const MinErrorResult fit = min_error_bound(regs);
    row.lambda_min = fit.lambda;
    switch (settings.bound) {
    case FpsBound::Lambda: row.noise_bound = fit.lambda; break;
    case FpsBound::Scaled: row.noise_bound = settings.scale * fit.lambda; break;
    case FpsBound::Known:
        if (!known_noise) {
            throw Error(ErrorCode::ConfigError, "known noise bound requested but the disturbance path is unknown");
        }
        // The Chebyshev residual can never exceed a valid noise level.
        row.noise_bound = std::max(*known_noise, fit.lambda);
        break;
    }
    row.theta_box = feasible_parameter_box(regs, row.noise_bound);
    const NominalResult nom = nominal_parameters(regs, row.theta_box, row.noise_bound);
    row.theta_hat = nom.theta_hat;
    row.tau_hat = nom.tau_hat;
    return row;
}

MultiStepModel assemble_multistep_model(const std::vector<IdentifiedRow>& rows, int p, int nx, int nu,
                                        const Box& Wx, const Box& Wy)
{
    std::vector<PredictorRow> out;
    for (int j = 1; j <= p; ++j) {
        for (int i = 0; i < nx; ++i) {
            const auto it = std::find_if(rows.begin(), rows.end(),
                                         [&](const IdentifiedRow& r) { return r.steps == j && r.state == i; });
            if (it == rows.end()) {
                throw Error(ErrorCode::MissingRow,
                            "no identified row for state " + std::to_string(i) + ", " + std::to_string(j) + " steps");
            }
            PredictorRow r;
            r.state = i;
            r.steps = j;
            r.theta_hat = it->theta_hat;
            r.residual = Box(it->theta_box.center - it->theta_hat, it->theta_box.radius);
            out.push_back(std::move(r));
        }
    }
    return MultiStepModel(p, nx, nu, std::move(out), Wx, Wy);
}

IdentificationResult identify_model(const Dataset& ds, const IdentifySettings& settings, const GroundTruthModel* gt)
{
    const int p = settings.p;
    const int nx = ds.nx();
    const int nu = ds.nu();
    IdentificationResult res;
    for (int j = 1; j <= p; ++j) {
        std::optional<Box> lumped;
        if (gt) {
            lumped = lumped_disturbance_box(*gt, j);
        }
        for (int i = 0; i < nx; ++i) {
            std::optional<double> known;
            if (lumped) {
                known = std::abs(lumped->center(i)) + lumped->radius(i);
            }
            res.rows.push_back(identify_row(ds, j, i, settings, known));
        }
    }
    Box Wx, Wy;
    if (gt) {
        std::tie(Wx, Wy) = lumped_disturbance_boxes(*gt, p);
    } else {
        Vector rx(nx), ry(nx * (p - 1));
        for (const auto& r : res.rows) {
            if (r.steps == p) {
                rx(r.state) = r.noise_bound;
            } else {
                ry((r.steps - 1) * nx + r.state) = r.noise_bound;
            }
        }
        Wx = Box::symmetric(rx);
        Wy = Box::symmetric(ry);
    }
    res.model = assemble_multistep_model(res.rows, p, nx, nu, Wx, Wy);
    return res;
}

}  // namespace tubempc
