#include <tubempc/design.hpp>
#include <tubempc/error.hpp>

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstring>
#include <random>
#include <limits>
#include <sstream>

namespace tubempc {

ConstraintSets ConstraintSets::from_boxes(const Vector& x_lo, const Vector& x_hi, const Vector& u_lo,
                                          const Vector& u_hi)
{
    auto rows = [](const Vector& lo, const Vector& hi) {
        require_dims(lo.size() == hi.size(), "constraint box bounds");
        const Eigen::Index n = lo.size();
        Matrix F(2 * n, n);
        F.setZero();
        for (Eigen::Index i = 0; i < n; ++i) {
            if (!(hi(i) > 0.0 && lo(i) < 0.0)) {
                throw Error(ErrorCode::ConfigError, "constraint boxes must contain the origin in their interior");
            }
            F(i, i) = 1.0 / hi(i);
            F(n + i, i) = 1.0 / lo(i);
        }
        return F;
    };
    return ConstraintSets{rows(x_lo, x_hi), rows(u_lo, u_hi)};
}

namespace {

Box bounding_box(const HPolytope& P)
{
    const Eigen::Index n = P.dim();
    Vector lo(n), hi(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        Vector e = Vector::Zero(n);
        e(i) = 1.0;
        hi(i) = support_value(P, e);
        lo(i) = -support_value(P, -e);
    }
    return Box::from_bounds(lo, hi);
}

}  // namespace

Box ConstraintSets::state_box() const { return bounding_box(state_set()); }
Box ConstraintSets::input_box() const { return bounding_box(input_set()); }

void DesignWeights::validate(int nx, int nu) const
{
    require_dims(q.size() == nx, "Q diagonal length");
    require_dims(R.rows() == nu && R.cols() == nu, "R dimensions");
    if ((q.array() <= 0.0).any()) {
        throw Error(ErrorCode::ConfigError, "Q must have strictly positive diagonal entries");
    }
    Eigen::LLT<Matrix> llt(0.5 * (R + R.transpose()));
    if (llt.info() != Eigen::Success) {
        throw Error(ErrorCode::ConfigError, "R must be positive definite");
    }
}

std::vector<Vector> row_vertices(const PredictorRow& row)
{
    const Box& box = row.residual;
    std::vector<Eigen::Index> free;
    for (Eigen::Index m = 0; m < box.dim(); ++m) {
        if (box.radius(m) > 0.0) {
            free.push_back(m);
        }
    }
    const int nf = static_cast<int>(free.size());
    if (nf > 30) {
        throw Error(ErrorCode::DimensionMismatch, "predictor row has too many uncertain coefficients to enumerate");
    }
    const Vector center = row.theta_hat + box.center;
    std::vector<Vector> out;
    out.reserve(std::size_t{1} << nf);
    for (long k = 0; k < (1L << nf); ++k) {
        Vector v = center;
        for (int f = 0; f < nf; ++f) {
            const double s = ((k >> (nf - 1 - f)) & 1) ? 1.0 : -1.0;
            v(free[f]) += s * box.radius(free[f]);
        }
        out.push_back(std::move(v));
    }
    return out;
}

namespace {

/// Closed-loop row map: coefficient vector theta (nx + nu*j) -> row of the
/// closed-loop matrix, theta_x' + theta_u' K_{1..j}.
Vector closed_loop_row(const Vector& theta, const Matrix& K, int nx, int nu, int steps)
{
    return theta.head(nx) + K.topRows(nu * steps).transpose() * theta.tail(nu * steps);
}

struct SymIndex {
    int base = 0;
    int n = 0;
    int operator()(int r, int c) const
    {
        if (r > c) {
            std::swap(r, c);
        }
        // Row-major packing of the upper triangle.
        return base + r * n - r * (r - 1) / 2 + (c - r);
    }
    static int count(int n) { return n * (n + 1) / 2; }
};

Matrix unpack_sym(const Vector& y, const SymIndex& idx)
{
    Matrix M(idx.n, idx.n);
    for (int r = 0; r < idx.n; ++r) {
        for (int c = 0; c < idx.n; ++c) {
            M(r, c) = y(idx(r, c));
        }
    }
    return M;
}

Matrix riccati_fixed_point(const Matrix& A, const Matrix& B, const Matrix& Q, const Matrix& R, Matrix* Pout);

/// Diagonal state scaling that balances the nominal Riccati solution. The
/// synthesis is posed in x~ = T x, which keeps P diagonal but avoids the
/// poor conditioning of states with very different magnitudes.
Vector balancing_scale(const MultiStepModel& model, const DesignWeights& weights)
{
    const auto nom = model.nominal();
    const int nx = model.nx();
    Vector t = Vector::Ones(nx);
    Matrix P;
    riccati_fixed_point(nom.A, nom.B, weights.Q(), weights.Rp(model.p()), &P);
    if (!P.allFinite()) {
        return t;
    }
    for (int i = 0; i < nx; ++i) {
        if (P(i, i) > 0.0) {
            t(i) = std::sqrt(P(i, i));
        }
    }
    return t / std::exp(t.array().log().mean());
}

Matrix sqrt_spd(const Matrix& R)
{
    Eigen::SelfAdjointEigenSolver<Matrix> es(0.5 * (R + R.transpose()));
    return es.eigenvectors() * es.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal() *
           es.eigenvectors().transpose();
}

}  // namespace

SynthesisResult synthesize_KP(const MultiStepModel& model, const DesignWeights& weights,
                              const SynthesisSettings& settings)
{
    const int nx = model.nx();
    const int nu = model.nu();
    const int p = model.p();
    weights.validate(nx, nu);
    const Vector T = balancing_scale(model, weights);
    const Vector q = (weights.q * (1.0 + settings.margin_inflation)).cwiseQuotient(T.cwiseProduct(T));
    const Matrix Rs = sqrt_spd(weights.Rp(p) * (1.0 + settings.margin_inflation));

    SdpProblem sdp;
    const int xv = sdp.add_variables(nx);
    const int yv = sdp.add_variables(nu * p * nx);
    auto Yvar = [&](int m, int k) { return yv + m * nx + k; };
    std::vector<SymIndex> pbar(nx);
    std::vector<std::vector<SymIndex>> qbar(nx, std::vector<SymIndex>(std::max(0, p - 1)));
    for (int i = 0; i < nx; ++i) {
        pbar[i] = SymIndex{sdp.add_variables(SymIndex::count(nx)), nx};
        for (int j = 1; j < p; ++j) {
            qbar[i][j - 1] = SymIndex{sdp.add_variables(SymIndex::count(nx)), nx};
        }
    }

    int vertex_blocks = 0;
    auto add_row_lmi = [&](const PredictorRow& row, const SymIndex& slack, bool p_step) {
        const int j = row.steps;
        for (Vector th : row_vertices(row)) {
            th.head(nx) = T(row.state) * th.head(nx).cwiseQuotient(T);
            th.tail(nu * j) *= T(row.state);
            const int blk = sdp.add_block(1 + nx);
            ++vertex_blocks;
            if (p_step) {
                sdp.add_coefficient(blk, xv + row.state, 0, 0, 1.0);
            } else {
                sdp.add_constant(blk, 0, 0, 1.0 / q(row.state));
            }
            for (int k = 0; k < nx; ++k) {
                sdp.add_coefficient(blk, xv + k, 0, 1 + k, th(k));
                for (int m = 0; m < nu * j; ++m) {
                    sdp.add_coefficient(blk, Yvar(m, k), 0, 1 + k, th(nx + m));
                }
            }
            for (int r = 0; r < nx; ++r) {
                for (int c = r; c < nx; ++c) {
                    sdp.add_coefficient(blk, slack(r, c), 1 + r, 1 + c, 1.0);
                }
            }
        }
    };
    for (const PredictorRow& row : model.rows()) {
        if (row.steps == p) {
            add_row_lmi(row, pbar[row.state], true);
        } else {
            add_row_lmi(row, qbar[row.state][row.steps - 1], false);
        }
    }

    // Aggregate condition with PQ = sum of all slacks.
    {
        const int nup = nu * p;
        const int size = 3 * nx + nup;
        const int blk = sdp.add_block(size);
        // This block couples to every vertex block through the slacks; start
        // its primal iterate correspondingly larger.
        sdp.set_start_scale(blk, std::max(1.0, vertex_blocks / 16.0));
        for (int k = 0; k < nx; ++k) {
            sdp.add_coefficient(blk, xv + k, k, k, 1.0);
            sdp.add_coefficient(blk, xv + k, 2 * nx + nup + k, k, std::sqrt(q(k)));
            sdp.add_constant(blk, 2 * nx + nup + k, 2 * nx + nup + k, 1.0);
        }
        auto add_pq = [&](const SymIndex& s) {
            for (int r = 0; r < nx; ++r) {
                for (int c = 0; c < nx; ++c) {
                    sdp.add_coefficient(blk, s(r, c), r, nx + c, 1.0);
                    if (r <= c) {
                        sdp.add_coefficient(blk, s(r, c), nx + r, nx + c, 1.0);
                    }
                }
            }
        };
        for (int i = 0; i < nx; ++i) {
            add_pq(pbar[i]);
            for (int j = 1; j < p; ++j) {
                add_pq(qbar[i][j - 1]);
            }
        }
        for (int m = 0; m < nup; ++m) {
            sdp.add_constant(blk, 2 * nx + m, 2 * nx + m, 1.0);
            for (int l = 0; l < nup; ++l) {
                if (Rs(m, l) != 0.0) {
                    for (int k = 0; k < nx; ++k) {
                        sdp.add_coefficient(blk, Yvar(l, k), 2 * nx + m, k, Rs(m, l));
                    }
                }
            }
        }
    }

    Vector b = Vector::Zero(sdp.num_variables());
    // Same objective as in the original coordinates: sum of x_i = x~_i / T_i^2.
    b.segment(xv, nx) = T.cwiseProduct(T).cwiseInverse();
    sdp.set_objective(b);

    SynthesisResult out;
    out.vertex_blocks = vertex_blocks;
    out.sdp = solve_sdp(sdp, settings.sdp);
    if (out.sdp.status == SdpStatus::Infeasible) {
        throw Error(ErrorCode::Infeasible, "terminal-cost LMIs infeasible (most violated block " +
                                               std::to_string(out.sdp.worst_block) + ")");
    }
    const Vector& y = out.sdp.y;
    const Vector xdiag = y.segment(xv, nx);
    if (xdiag.allFinite() && xdiag.maxCoeff() <= 1e-7) {
        // The supremum is only approached as X -> 0: no diagonal P exists.
        throw Error(ErrorCode::Infeasible, "terminal-cost LMIs admit no diagonal P (iterates collapse to X = 0)");
    }
    if (out.sdp.status != SdpStatus::Optimal && out.sdp.status != SdpStatus::Inaccurate) {
        throw Error(ErrorCode::SolverFailure, std::string("terminal-cost LMIs: ") + to_string(out.sdp.status));
    }
    if ((xdiag.array() <= 0.0).any()) {
        throw Error(ErrorCode::SolverFailure, "terminal-cost LMIs returned a non-positive X");
    }
    Matrix Y(nu * p, nx);
    for (int m = 0; m < nu * p; ++m) {
        for (int k = 0; k < nx; ++k) {
            Y(m, k) = y(Yvar(m, k));
        }
    }
    // Map back from the balanced coordinates: K = K~ T, P = T P~ T.
    const Vector pdiag = xdiag.cwiseInverse();
    out.P = pdiag.cwiseProduct(T).cwiseProduct(T).asDiagonal();
    out.K = Y * pdiag.cwiseProduct(T).asDiagonal();
    out.Pbar.resize(nx);
    out.Qbar.assign(nx, std::vector<Matrix>(std::max(0, p - 1)));
    for (int i = 0; i < nx; ++i) {
        const auto Tp = pdiag.cwiseProduct(T).asDiagonal();
        out.Pbar[i] = Tp * unpack_sym(y, pbar[i]) * Tp;
        for (int j = 1; j < p; ++j) {
            out.Qbar[i][j - 1] = Tp * unpack_sym(y, qbar[i][j - 1]) * Tp;
        }
    }
    return out;
}

namespace {

/// Slack program in P coordinates for a fixed K:
///   Pbar_i - p_i a a' >= t I   (per p-step row vertex)
///   Qbar_ij - q_i c c' >= t I  (per j-step row vertex)
///   P - Q - K'RpK - sum Pbar - sum Qbar >= t I
/// With P fixed, maximise t. With P free (diagonal), fix t = 0 and minimise trace P.
/// Single-vertex rows use the exact rank-one term as a constant slack.
struct SlackResult {
    double t = 0.0;
    Vector pdiag;
    SdpResult sdp;
    int vertex_blocks = 0;
};

SlackResult slack_program(const MultiStepModel& model, const Matrix& K, const DesignWeights& weights,
                          const std::optional<Matrix>& Pfixed, double inflation, const SdpSettings& sdp_settings)
{
    const int nx = model.nx();
    const int nu = model.nu();
    const int p = model.p();
    const Vector q = weights.q * (1.0 + inflation);
    SdpProblem sdp;
    const bool fixedP = Pfixed.has_value();
    const int tv = fixedP ? sdp.add_variable() : -1;
    const int pv = fixedP ? -1 : sdp.add_variables(nx);

    Matrix constant = Matrix::Zero(nx, nx);  // sum of fixed rank-one slacks (fixed P only)
    // For free P the single-vertex p-step rows still depend on p_i: collect (i, a a').
    std::vector<std::pair<int, Matrix>> free_rank_one;
    std::vector<std::optional<SymIndex>> slack_of_row(model.num_rows());
    SlackResult out;

    for (int r = 0; r < model.num_rows(); ++r) {
        const PredictorRow& row = model.rows()[r];
        const auto verts = row_vertices(row);
        const bool p_step = row.steps == p;
        const int i = row.state;
        if (verts.size() == 1) {
            const Vector a = closed_loop_row(verts[0], K, nx, nu, row.steps);
            const Matrix aa = a * a.transpose();
            if (p_step) {
                if (fixedP) {
                    constant += (*Pfixed)(i, i) * aa;
                } else {
                    free_rank_one.emplace_back(i, aa);
                }
            } else {
                constant += q(i) * aa;
            }
            continue;
        }
        const SymIndex s{sdp.add_variables(SymIndex::count(nx)), nx};
        slack_of_row[r] = s;
        for (const Vector& th : verts) {
            const Vector a = closed_loop_row(th, K, nx, nu, row.steps);
            const int blk = sdp.add_block(nx);
            ++out.vertex_blocks;
            for (int rr = 0; rr < nx; ++rr) {
                for (int cc = rr; cc < nx; ++cc) {
                    sdp.add_coefficient(blk, s(rr, cc), rr, cc, 1.0);
                    const double aa = a(rr) * a(cc);
                    if (p_step) {
                        if (fixedP) {
                            sdp.add_constant(blk, rr, cc, -(*Pfixed)(i, i) * aa);
                        } else {
                            sdp.add_coefficient(blk, pv + i, rr, cc, -aa);
                        }
                    } else {
                        sdp.add_constant(blk, rr, cc, -q(i) * aa);
                    }
                }
                if (fixedP) {
                    sdp.add_coefficient(blk, tv, rr, rr, -1.0);
                }
            }
        }
    }

    // Aggregate block.
    const Matrix base = -weights.Q() * (1.0 + inflation) - K.transpose() * weights.Rp(p) * K *
                        (1.0 + inflation) - constant;
    const int blk = sdp.add_block(nx);
    sdp.set_start_scale(blk, std::max(1.0, out.vertex_blocks / 16.0));
    for (int rr = 0; rr < nx; ++rr) {
        for (int cc = rr; cc < nx; ++cc) {
            double c0 = base(rr, cc);
            if (fixedP) {
                c0 += (*Pfixed)(rr, cc);
            }
            sdp.add_constant(blk, rr, cc, c0);
            for (int r = 0; r < model.num_rows(); ++r) {
                if (slack_of_row[r]) {
                    sdp.add_coefficient(blk, (*slack_of_row[r])(rr, cc), rr, cc, -1.0);
                }
            }
            if (!fixedP) {
                for (const auto& [i, aa] : free_rank_one) {
                    sdp.add_coefficient(blk, pv + i, rr, cc, -aa(rr, cc));
                }
            }
        }
        if (fixedP) {
            sdp.add_coefficient(blk, tv, rr, rr, -1.0);
        } else {
            sdp.add_coefficient(blk, pv + rr, rr, rr, 1.0);
        }
    }

    Vector b = Vector::Zero(sdp.num_variables());
    if (fixedP) {
        b(tv) = 1.0;
    } else {
        b.segment(pv, nx).setConstant(-1.0);
    }
    sdp.set_objective(b);

    if (sdp.num_variables() == 1 && fixedP) {
        // No uncertain rows: t is the smallest eigenvalue of the aggregate block.
        const Matrix F = sdp.evaluate(blk, Vector::Zero(1));
        Eigen::SelfAdjointEigenSolver<Matrix> es(F, Eigen::EigenvaluesOnly);
        out.t = es.eigenvalues().minCoeff();
        out.sdp.status = SdpStatus::Optimal;
        return out;
    }
    out.sdp = solve_sdp(sdp, sdp_settings);
    if (fixedP) {
        out.t = out.sdp.y(tv);
        // Guard against solver inaccuracy: the certificate is only as good as
        // the smallest eigenvalue actually achieved.
        out.t = std::min(out.t, out.t + out.sdp.min_eig);
    } else {
        out.pdiag = out.sdp.y.segment(pv, nx);
    }
    return out;
}

double min_eig_sym(const Matrix& M)
{
    Eigen::SelfAdjointEigenSolver<Matrix> es(0.5 * (M + M.transpose()), Eigen::EigenvaluesOnly);
    return es.eigenvalues().minCoeff();
}

}  // namespace

SynthesisResult synthesize_P_for_K(const MultiStepModel& model, const Matrix& K, const DesignWeights& weights,
                                   const SynthesisSettings& settings)
{
    weights.validate(model.nx(), model.nu());
    const SlackResult r = slack_program(model, K, weights, std::nullopt, settings.margin_inflation, settings.sdp);
    if (r.sdp.status == SdpStatus::Infeasible) {
        throw Error(ErrorCode::Infeasible, "no diagonal P exists for the given K");
    }
    const bool usable = r.sdp.status == SdpStatus::Optimal || r.sdp.status == SdpStatus::Inaccurate;
    if (!usable || (r.pdiag.array() <= 0.0).any()) {
        throw Error(ErrorCode::SolverFailure, std::string("P-only program: ") + to_string(r.sdp.status));
    }
    SynthesisResult out;
    out.K = K;
    out.P = r.pdiag.asDiagonal();
    out.sdp = r.sdp;
    out.vertex_blocks = r.vertex_blocks;
    return out;
}

namespace {

Matrix riccati_fixed_point(const Matrix& A, const Matrix& B, const Matrix& Q, const Matrix& R, Matrix* Pout)
{
    Matrix P = Q;
    Matrix K;
    for (int it = 0; it < 10000; ++it) {
        const Matrix S = R + B.transpose() * P * B;
        K = -S.ldlt().solve(B.transpose() * P * A);
        const Matrix Pn = Q + A.transpose() * P * (A + B * K);
        const double diff = (Pn - P).cwiseAbs().maxCoeff();
        P = 0.5 * (Pn + Pn.transpose());
        if (diff <= 1e-12 * std::max(1.0, P.cwiseAbs().maxCoeff())) {
            break;
        }
    }
    if (Pout) {
        *Pout = P;
    }
    return K;
}

}  // namespace

Matrix lqr_gain(const Matrix& A, const Matrix& B, const Matrix& Q, const Matrix& R)
{
    return riccati_fixed_point(A, B, Q, R, nullptr);
}

MarginReport verify_terminal_cost(const MultiStepModel& model, const Matrix& K, const Matrix& P,
                                  const DesignWeights& weights, int samples, std::uint64_t seed)
{
    const int nx = model.nx();
    const int p = model.p();
    require_dims(K.rows() == model.nu() * p && K.cols() == nx, "K dimensions");
    require_dims(P.rows() == nx && P.cols() == nx, "P dimensions");
    MarginReport rep;
    SdpSettings s;
    s.tol = 1e-9;
    const SlackResult sr = slack_program(model, K, weights, P, 0.0, s);
    const bool usable = sr.sdp.status == SdpStatus::Optimal || sr.sdp.status == SdpStatus::Inaccurate;
    rep.decomposed_margin = usable ? sr.t : -std::numeric_limits<double>::infinity();
    rep.vertex_blocks = sr.vertex_blocks;

    std::mt19937_64 rng(seed);
    const Matrix Qp = weights.Qp(p);
    const Matrix KRK = K.transpose() * weights.Rp(p) * K;
    double sampled = std::numeric_limits<double>::infinity();
    const Box tb = model.theta_box();
    for (int k = 0; k < samples; ++k) {
        const Vector delta = sample_uniform(tb, rng);
        const auto m = model.evaluate(delta);
        const Matrix Acl = m.A + m.B * K;
        const Matrix Ccl = m.C + m.D * K;
        const Matrix lhs = Acl.transpose() * P * Acl + weights.Q() + Ccl.transpose() * Qp * Ccl + KRK;
        sampled = std::min(sampled, min_eig_sym(P - lhs));
    }
    rep.samples = samples;
    rep.sampled_margin = samples > 0 ? sampled : std::numeric_limits<double>::infinity();
    rep.margin = std::min(rep.decomposed_margin, rep.sampled_margin);
    return rep;
}

namespace {

bool is_real(const std::complex<double>& z) { return std::abs(z.imag()) <= 1e-10 * std::max(1.0, std::abs(z)); }

}  // namespace

double robust_contraction_bound(const MultiStepModel& model, const Matrix& K, const Matrix& V)
{
    const int nx = model.nx();
    const int nu = model.nu();
    const int p = model.p();
    Matrix center(nx, nx), radius(nx, nx);
    for (int i = 0; i < nx; ++i) {
        const PredictorRow& row = model.row(p, i);
        const Vector c = row.theta_hat + row.residual.center;
        center.row(i) = closed_loop_row(c, K, nx, nu, p).transpose();
        const Vector& r = row.residual.radius;
        radius.row(i) = (r.head(nx) + K.cwiseAbs().transpose() * r.tail(nu * p)).transpose();
    }
    const Matrix Vi = V.inverse();
    const Matrix c = V * center * Vi;
    const Matrix rad = V.cwiseAbs() * radius * Vi.cwiseAbs();
    return (c.cwiseAbs() + rad).rowwise().sum().maxCoeff();
}

ShapeResult choose_tube_shape(const MultiStepModel& model, const Matrix& K, const std::optional<Vector>& scale_radius,
                              double rho_target)
{
    const int nx = model.nx();
    const auto nom = model.nominal();
    const Matrix Acl = nom.A + nom.B * K;
    const double sr = spectral_radius(Acl);
    if (sr >= 1.0) {
        throw Error(ErrorCode::UnstableNominal, "nominal closed loop has spectral radius " + std::to_string(sr));
    }
    Eigen::EigenSolver<Matrix> es(Acl.transpose());
    std::vector<int> order(nx);
    for (int k = 0; k < nx; ++k) {
        order[k] = k;
    }
    const auto ev = es.eigenvalues();
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        const double ma = std::abs(ev(a)), mb = std::abs(ev(b));
        if (std::abs(ma - mb) > 1e-12) return ma > mb;
        if (std::abs(ev(a).real() - ev(b).real()) > 1e-12) return ev(a).real() > ev(b).real();
        return ev(a).imag() > ev(b).imag();
    });

    Matrix V(nx, nx);
    std::vector<std::pair<int, int>> groups;  // rows sharing one scale
    std::vector<bool> used(nx, false);
    int row = 0;
    for (int k : order) {
        if (used[k]) {
            continue;
        }
        const Eigen::VectorXcd w = es.eigenvectors().col(k);
        if (is_real(ev(k))) {
            Vector v = w.real();
            if (v.norm() == 0.0) {
                v = w.imag();
            }
            v /= v.norm();
            Eigen::Index imax = 0;
            v.cwiseAbs().maxCoeff(&imax);
            if (v(imax) < 0.0) {
                v = -v;
            }
            V.row(row) = v.transpose();
            groups.emplace_back(row, row);
            used[k] = true;
            ++row;
        } else {
            if (ev(k).imag() < 0.0) {
                // Handle the pair from its positive-imaginary member.
                continue;
            }
            int partner = -1;
            for (int m : order) {
                if (!used[m] && m != k && std::abs(ev(m) - std::conj(ev(k))) <= 1e-9 * std::max(1.0, std::abs(ev(k)))) {
                    partner = m;
                    break;
                }
            }
            if (partner < 0) {
                throw Error(ErrorCode::SingularShape, "unpaired complex eigenvalue");
            }
            // Rotate the phase so the real and imaginary parts are orthogonal.
            const std::complex<double> s = (w.array() * w.array()).sum();
            const double phase = 0.5 * std::arg(s);
            const Eigen::VectorXcd wr = w * std::exp(std::complex<double>(0.0, -phase));
            const double nrm = wr.norm();
            V.row(row) = (wr.real() / nrm).transpose();
            V.row(row + 1) = (wr.imag() / nrm).transpose();
            groups.emplace_back(row, row + 1);
            used[k] = used[partner] = true;
            row += 2;
        }
    }
    // Complex members with negative imaginary part whose partner came first.
    require_dims(row == nx, "eigenbasis construction");

    ShapeResult out;
    Eigen::JacobiSVD<Matrix> svd(V);
    const double cond = svd.singularValues()(0) / svd.singularValues()(nx - 1);
    if (!(cond <= 1e8)) {
        V = Matrix::Identity(nx, nx);
        groups.clear();
        for (int i = 0; i < nx; ++i) {
            groups.emplace_back(i, i);
        }
        out.fallback = true;
    }
    if (scale_radius) {
        require_dims(scale_radius->size() == nx, "shape scale radius");
        for (const auto& [a, b] : groups) {
            double s = 0.0;
            for (int r = a; r <= b; ++r) {
                s = std::max(s, V.row(r).cwiseAbs().dot(*scale_radius));
            }
            if (s > 0.0) {
                for (int r = a; r <= b; ++r) {
                    V.row(r) /= s;
                }
            }
        }
    }
    out.V = V;
    out.rho = (V * Acl * V.inverse()).cwiseAbs().rowwise().sum().maxCoeff();
    out.rho_ok = out.rho <= rho_target;
    out.robust_rho = robust_contraction_bound(model, K, V);
    return out;
}

Tightenings precompute_tightenings(const ConstraintSets& sets, const LowComplexityPolytope& X0, const Matrix& K,
                                   const Box& Wx, const Box& Wy, int p)
{
    Tightenings t;
    const Matrix& F = sets.F;
    t.Fp = repeat_blkdiag(F, p - 1);
    t.Gp = repeat_blkdiag(sets.G, p);
    require_dims(K.rows() == t.Gp.cols(), "K rows must equal nu * p");
    const Matrix Hx = X0.H();
    t.Hp = blkdiag({Hx, t.Fp});
    t.fbar.resize(F.rows());
    for (Eigen::Index r = 0; r < F.rows(); ++r) {
        t.fbar(r) = support_value(X0, F.row(r).transpose());
    }
    const Matrix GK = t.Gp * K;
    t.gbar.resize(GK.rows());
    for (Eigen::Index r = 0; r < GK.rows(); ++r) {
        t.gbar(r) = support_value(X0, GK.row(r).transpose());
    }
    t.wx.resize(Hx.rows());
    for (Eigen::Index r = 0; r < Hx.rows(); ++r) {
        t.wx(r) = support_value(Wx, Hx.row(r).transpose());
    }
    t.wy.resize(t.Fp.rows());
    for (Eigen::Index r = 0; r < t.Fp.rows(); ++r) {
        t.wy(r) = support_value(Wy, t.Fp.row(r).transpose());
    }
    return t;
}

Vector closed_loop_support(const MultiStepModel& model, const Matrix& K, const LowComplexityPolytope& X0,
                           const Matrix& Hrows, bool output)
{
    const int nx = model.nx();
    const int nu = model.nu();
    const int p = model.p();
    const int ncols = output ? nx * (p - 1) : nx;
    require_dims(Hrows.cols() == ncols, "closed_loop_support row width");
    Vector best = Vector::Constant(Hrows.rows(), -std::numeric_limits<double>::infinity());
    for (const Vector& x : X0.vertices()) {
        const Vector u = K * x;
        for (Eigen::Index r = 0; r < Hrows.rows(); ++r) {
            double val = 0.0;
            for (int c = 0; c < ncols; ++c) {
                const double h = Hrows(r, c);
                if (h == 0.0) {
                    continue;
                }
                const int steps = output ? c / nx + 1 : p;
                const int state = output ? c % nx : c;
                const PredictorRow& row = model.row(steps, state);
                Vector psi(nx + nu * steps);
                psi << x, u.head(nu * steps);
                const Vector center = row.theta_hat + row.residual.center;
                val += h * center.dot(psi) + std::abs(h) * row.residual.radius.dot(psi.cwiseAbs());
            }
            best(r) = std::max(best(r), val);
        }
    }
    return best;
}

EtaReport terminal_set_eta(const MultiStepModel& model, const Matrix& K, const LowComplexityPolytope& X0,
                           const Tightenings& t)
{
    const Matrix Hx = X0.H();
    EtaReport rep;
    // Invariance: eta * gamma_r + wx_r <= eta for each facet r.
    const Vector gamma = closed_loop_support(model, K, X0, Hx, false);
    double lower = 0.0;
    for (Eigen::Index r = 0; r < gamma.size(); ++r) {
        if (gamma(r) >= 1.0) {
            if (t.wx(r) > 0.0 || gamma(r) > 1.0) {
                throw Error(ErrorCode::NoInvariantScaling,
                            "X0 is not robustly contractive (facet " + std::to_string(r) + " support " +
                                std::to_string(gamma(r)) + ")");
            }
            continue;
        }
        lower = std::max(lower, t.wx(r) / (1.0 - gamma(r)));
    }
    // Constraint admissibility: eta*fbar <= 1, eta*gbar <= 1, eta*c + wy <= 1.
    double upper = std::numeric_limits<double>::infinity();
    auto cap = [&](double coeff, double rhs) {
        if (rhs < 0.0) {
            throw Error(ErrorCode::NoInvariantScaling, "output disturbance alone violates the constraints");
        }
        if (coeff > 0.0) {
            upper = std::min(upper, rhs / coeff);
        }
    };
    for (Eigen::Index r = 0; r < t.fbar.size(); ++r) {
        cap(t.fbar(r), 1.0);
    }
    for (Eigen::Index r = 0; r < t.gbar.size(); ++r) {
        cap(t.gbar(r), 1.0);
    }
    if (t.Fp.rows() > 0) {
        const Vector c = closed_loop_support(model, K, X0, t.Fp, true);
        for (Eigen::Index r = 0; r < c.size(); ++r) {
            cap(c(r), 1.0 - t.wy(r));
        }
    }
    rep.eta_lower = lower;
    rep.eta_upper = upper;
    if (!(upper >= lower) || !std::isfinite(upper) || upper <= 0.0) {
        throw Error(ErrorCode::NoInvariantScaling, "no eta satisfies invariance (eta >= " + std::to_string(lower) +
                                                       ") and the constraints (eta <= " + std::to_string(upper) + ")");
    }
    rep.eta = upper;
    return rep;
}

Matrix nominal_cost_to_go(const MultiStepModel& model, const Matrix& K, const DesignWeights& weights)
{
    const int p = model.p();
    const auto nom = model.nominal();
    const Matrix Acl = nom.A + nom.B * K;
    if (spectral_radius(Acl) >= 1.0) {
        throw Error(ErrorCode::UnstableNominal, "nominal closed loop is not Schur");
    }
    Matrix stage = weights.Q() + K.transpose() * weights.Rp(p) * K;
    if (p > 1) {
        const Matrix Ccl = nom.C + nom.D * K;
        stage += Ccl.transpose() * weights.Qp(p) * Ccl;
    }
    // Doubling iteration on the Lyapunov series.
    Matrix P = stage;
    Matrix Ak = Acl;
    for (int it = 0; it < 64; ++it) {
        const Matrix next = P + Ak.transpose() * P * Ak;
        const double change = (next - P).cwiseAbs().maxCoeff();
        P = next;
        Ak = Ak * Ak;
        if (change <= 1e-13 * P.cwiseAbs().maxCoeff()) {
            break;
        }
    }
    return 0.5 * (P + P.transpose());
}

std::string ControllerDesign::hash() const
{
    std::uint64_t h = 1469598103934665603ULL;
    auto mix = [&](const double* data, std::size_t n) {
        const auto* bytes = reinterpret_cast<const unsigned char*>(data);
        for (std::size_t k = 0; k < n * sizeof(double); ++k) {
            h ^= bytes[k];
            h *= 1099511628211ULL;
        }
    };
    auto mixm = [&](const Matrix& m) {
        const double dims[2] = {static_cast<double>(m.rows()), static_cast<double>(m.cols())};
        mix(dims, 2);
        mix(m.data(), static_cast<std::size_t>(m.size()));
    };
    const double scalars[4] = {static_cast<double>(p), eta, certified ? 1.0 : 0.0, has_terminal_set ? 1.0 : 0.0};
    mix(scalars, 4);
    mixm(K);
    mixm(P);
    mixm(V);
    mixm(tight.fbar);
    mixm(tight.gbar);
    mixm(tight.wx);
    mixm(tight.wy);
    mixm(sets.F);
    mixm(sets.G);
    std::ostringstream os;
    os << std::hex << h;
    return os.str();
}

ControllerDesign design_controller(const MultiStepModel& model, const ConstraintSets& sets,
                                   const DesignWeights& weights, const DesignSettings& settings,
                                   const std::optional<Vector>& shape_scale)
{
    ControllerDesign d;
    d.p = model.p();
    d.weights = weights;
    d.sets = sets;
    if (settings.certify) {
        SynthesisResult syn;
        try {
            syn = synthesize_KP(model, weights, settings.synthesis);
        } catch (const Error& e) {
            if (!settings.allow_fallback || e.code() != ErrorCode::SolverFailure) {
                throw;
            }
            const auto nom = model.nominal();
            const Matrix Kl = lqr_gain(nom.A, nom.B, weights.Q(), weights.Rp(model.p()));
            syn = synthesize_P_for_K(model, Kl, weights, settings.synthesis);
            d.used_fallback = true;
        }
        d.K = syn.K;
        d.P = syn.P;
        const MarginReport rep = verify_terminal_cost(model, d.K, d.P, weights, settings.verify_samples);
        d.margin = rep.margin;
        if (rep.margin < -1e-8) {
            throw Error(ErrorCode::SolverFailure,
                        "synthesised terminal cost fails verification (margin " + std::to_string(rep.margin) + ")");
        }
    } else {
        const auto nom = model.nominal();
        d.K = lqr_gain(nom.A, nom.B, weights.Q(), weights.Rp(model.p()));
        d.P = nominal_cost_to_go(model, d.K, weights);
        d.margin = std::numeric_limits<double>::quiet_NaN();
        d.certified = false;
    }
    const ShapeResult shape = choose_tube_shape(model, d.K, shape_scale, settings.rho_target);
    d.V = shape.V;
    d.rho = shape.rho;
    d.robust_rho = shape.robust_rho;
    const LowComplexityPolytope X0(d.V);
    d.tight = precompute_tightenings(sets, X0, d.K, model.Wx(), model.Wy(), model.p());
    try {
        d.eta = terminal_set_eta(model, d.K, X0, d.tight).eta;
    } catch (const Error& e) {
        if (d.certified || e.code() != ErrorCode::NoInvariantScaling) {
            throw;
        }
        d.eta = 0.0;
        d.has_terminal_set = false;
    }
    return d;
}

}  // namespace tubempc
