#include <tubempc/error.hpp>
#include <tubempc/sdp_solver.hpp>

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <iostream>
#include <limits>
#include <map>
#include <tuple>

namespace tubempc {

const char* to_string(SdpStatus s)
{
    switch (s) {
    case SdpStatus::Optimal: return "optimal";
    case SdpStatus::Inaccurate: return "inaccurate";
    case SdpStatus::Infeasible: return "infeasible";
    case SdpStatus::Unbounded: return "unbounded";
    case SdpStatus::NumericalFailure: return "numerical-failure";
    }
    return "unknown";
}

int SdpProblem::add_variable() { return num_vars_++; }

int SdpProblem::add_variables(int count)
{
    const int first = num_vars_;
    num_vars_ += count;
    return first;
}

int SdpProblem::add_block(int size)
{
    require_dims(size >= 1, "SDP block size");
    blocks_.push_back(Block{size, {}, 1.0});
    return static_cast<int>(blocks_.size()) - 1;
}

void SdpProblem::add_constant(int block, int r, int c, double v)
{
    if (v != 0.0) {
        blocks_.at(block).entries.push_back({-1, r, c, v});
    }
}

void SdpProblem::add_coefficient(int block, int var, int r, int c, double v)
{
    require_dims(var >= 0 && var < num_vars_, "SDP variable index");
    if (v != 0.0) {
        blocks_.at(block).entries.push_back({var, r, c, v});
    }
}

void SdpProblem::set_objective(const Vector& b)
{
    require_dims(b.size() == num_vars_, "SDP objective size");
    b_ = b;
}

void SdpProblem::set_start_scale(int block, double factor)
{
    if (!(factor > 0.0)) {
        throw Error(ErrorCode::DimensionMismatch, "SDP start scale must be positive");
    }
    blocks_.at(block).start_scale = factor;
}

Matrix SdpProblem::evaluate(int block, const Vector& y) const
{
    const Block& bl = blocks_.at(block);
    Matrix F = Matrix::Zero(bl.size, bl.size);
    for (const Entry& e : bl.entries) {
        const double v = e.var < 0 ? e.v : e.v * y(e.var);
        F(e.r, e.c) += v;
        if (e.r != e.c) {
            F(e.c, e.r) += v;
        }
    }
    return F;
}

namespace {

// Internal standard form: S = C - sum_i y_i A_i >= 0 with C = F0, A_i = -F_i.
// A_i is stored by upper-triangular position: position p = (r, c), r <= c,
// stands for the symmetric unit matrix E_p = e_r e_c' + e_c e_r' (e_r e_r' on
// the diagonal), and carries the list of (variable, coefficient) pairs.
struct SparseBlock {
    int s = 0;
    double start_scale = 1.0;
    Matrix C;
    std::vector<std::pair<int, int>> pos;
    std::vector<int> start;  // CSR over positions
    std::vector<int> var;
    std::vector<double> coef;
    std::vector<int> vars;   // distinct variables of the block
};

std::vector<SparseBlock> compile(const SdpProblem& prob)
{
    std::vector<SparseBlock> out;
    out.reserve(prob.blocks().size());
    for (const auto& bl : prob.blocks()) {
        SparseBlock d;
        d.s = bl.size;
        d.start_scale = bl.start_scale;
        d.C = Matrix::Zero(bl.size, bl.size);
        std::vector<std::tuple<int, int, int, double>> terms;  // (r, c, var, coef)
        for (const auto& e : bl.entries) {
            require_dims(e.r >= 0 && e.c >= 0 && e.r < bl.size && e.c < bl.size, "SDP entry index");
            const int r = std::min(e.r, e.c);
            const int c = std::max(e.r, e.c);
            if (e.var < 0) {
                d.C(r, c) += e.v;
                if (r != c) {
                    d.C(c, r) += e.v;
                }
            } else {
                terms.emplace_back(r, c, e.var, -e.v);
            }
        }
        std::sort(terms.begin(), terms.end(), [](const auto& a, const auto& b) {
            return std::tie(std::get<0>(a), std::get<1>(a), std::get<2>(a)) <
                   std::tie(std::get<0>(b), std::get<1>(b), std::get<2>(b));
        });
        for (std::size_t k = 0; k < terms.size(); ++k) {
            const auto [r, c, v, a] = terms[k];
            const bool new_pos = d.pos.empty() || d.pos.back() != std::make_pair(r, c);
            if (new_pos) {
                d.pos.emplace_back(r, c);
                d.start.push_back(static_cast<int>(d.var.size()));
            }
            if (!new_pos && d.var.back() == v) {
                d.coef.back() += a;  // merge repeated (r, c, var)
            } else {
                d.var.push_back(v);
                d.coef.push_back(a);
            }
        }
        d.start.push_back(static_cast<int>(d.var.size()));
        d.vars = d.var;
        std::sort(d.vars.begin(), d.vars.end());
        d.vars.erase(std::unique(d.vars.begin(), d.vars.end()), d.vars.end());
        out.push_back(std::move(d));
    }
    return out;
}

using Blocks = std::vector<Matrix>;

double inner(const Blocks& a, const Blocks& b)
{
    double s = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k) {
        s += a[k].cwiseProduct(b[k]).sum();
    }
    return s;
}

/// out_i += <A_i, Z> over all blocks.
Vector apply_A(const std::vector<SparseBlock>& blocks, const Blocks& Z, int m)
{
    Vector out = Vector::Zero(m);
    for (std::size_t k = 0; k < blocks.size(); ++k) {
        const auto& bl = blocks[k];
        for (std::size_t p = 0; p < bl.pos.size(); ++p) {
            const auto [r, c] = bl.pos[p];
            const double z = r == c ? Z[k](r, r) : Z[k](r, c) + Z[k](c, r);
            for (int t = bl.start[p]; t < bl.start[p + 1]; ++t) {
                out(bl.var[t]) += bl.coef[t] * z;
            }
        }
    }
    return out;
}

/// out = sum_i y_i A_i for one block.
void apply_At(const SparseBlock& bl, const Vector& y, Matrix& out)
{
    out.setZero(bl.s, bl.s);
    for (std::size_t p = 0; p < bl.pos.size(); ++p) {
        double v = 0.0;
        for (int t = bl.start[p]; t < bl.start[p + 1]; ++t) {
            v += bl.coef[t] * y(bl.var[t]);
        }
        const auto [r, c] = bl.pos[p];
        out(r, c) += v;
        if (r != c) {
            out(c, r) += v;
        }
    }
}

/// Per-size scratch objects, so the inner loops do not allocate.
struct Workspace {
    Matrix T1, T2;
    Eigen::SelfAdjointEigenSolver<Matrix> eig;
};

Workspace& workspace(std::map<int, Workspace>& cache, int s)
{
    auto it = cache.find(s);
    if (it == cache.end()) {
        it = cache.emplace(s, Workspace{Matrix(s, s), Matrix(s, s), Eigen::SelfAdjointEigenSolver<Matrix>(s)}).first;
    }
    return it->second;
}

/// Largest alpha with X + alpha dX >= 0, given the Cholesky factor L of X.
double max_step(const Matrix& L, const Matrix& dX, Workspace& ws)
{
    ws.T1 = dX;
    L.triangularView<Eigen::Lower>().solveInPlace(ws.T1);
    ws.T2 = ws.T1.transpose();
    L.triangularView<Eigen::Lower>().solveInPlace(ws.T2);
    ws.eig.compute(ws.T2, Eigen::EigenvaluesOnly);
    const double lmin = ws.eig.eigenvalues()(0);
    return lmin >= 0.0 ? std::numeric_limits<double>::infinity() : -1.0 / lmin;
}

void symmetrize(Matrix& a)
{
    for (Eigen::Index c = 0; c < a.cols(); ++c) {
        for (Eigen::Index r = c + 1; r < a.rows(); ++r) {
            const double v = 0.5 * (a(r, c) + a(c, r));
            a(r, c) = v;
            a(c, r) = v;
        }
    }
}

/// Adds the block's contribution <A_i, X A_j S^{-1}> to the Schur matrix.
void add_schur(const SparseBlock& bl, const Matrix& X, const Matrix& Sinv, Matrix& W, Matrix& M)
{
    const auto np = static_cast<Eigen::Index>(bl.pos.size());
    W.resize(np, np);
    // tr(E_p X E_q S^{-1}) summed over the (one or two) orientations of p and q.
    for (Eigen::Index p = 0; p < np; ++p) {
        const auto [a, b] = bl.pos[p];
        for (Eigen::Index q = p; q < np; ++q) {
            const auto [c, d] = bl.pos[q];
            double w = X(b, c) * Sinv(d, a);
            if (c != d) {
                w += X(b, d) * Sinv(c, a);
            }
            if (a != b) {
                w += X(a, c) * Sinv(d, b);
                if (c != d) {
                    w += X(a, d) * Sinv(c, b);
                }
            }
            W(p, q) = w;
            W(q, p) = w;
        }
    }
    for (Eigen::Index p = 0; p < np; ++p) {
        for (Eigen::Index q = 0; q < np; ++q) {
            const double w = W(p, q);
            if (w == 0.0) {
                continue;
            }
            for (int s = bl.start[p]; s < bl.start[p + 1]; ++s) {
                const double cw = bl.coef[s] * w;
                const int i = bl.var[s];
                for (int t = bl.start[q]; t < bl.start[q + 1]; ++t) {
                    M(i, bl.var[t]) += cw * bl.coef[t];
                }
            }
        }
    }
}

}  // namespace

SdpResult solve_sdp(const SdpProblem& problem, const SdpSettings& settings)
{
    const int m = problem.num_variables();
    const Vector b = problem.objective().size() == m ? problem.objective() : Vector::Zero(m);
    const std::vector<SparseBlock> blocks = compile(problem);
    const std::size_t nb = blocks.size();
    double n_total = 0.0;
    for (const auto& bl : blocks) {
        n_total += bl.s;
    }
    std::map<int, Workspace> ws_cache;

    // Starting point in the style of common infeasible-start SDP codes.
    Blocks X(nb), S(nb), Sinv(nb), Lx(nb), Ls(nb), Rd(nb);
    double normC = 0.0;
    for (std::size_t k = 0; k < nb; ++k) {
        const auto& bl = blocks[k];
        normC += bl.C.squaredNorm();
        std::vector<double> colnorm2;
        std::map<int, double> an2;
        for (std::size_t p = 0; p < bl.pos.size(); ++p) {
            const double mult = bl.pos[p].first == bl.pos[p].second ? 1.0 : 2.0;
            for (int t = bl.start[p]; t < bl.start[p + 1]; ++t) {
                an2[bl.var[t]] += mult * bl.coef[t] * bl.coef[t];
            }
        }
        const double sd = static_cast<double>(bl.s);
        double xi = std::max(10.0, std::sqrt(sd));
        double eta = std::max(10.0, std::sqrt(sd));
        double amax = bl.C.norm();
        for (const auto& [v, a2] : an2) {
            const double an = std::sqrt(a2);
            amax = std::max(amax, an);
            xi = std::max(xi, sd * (1.0 + std::abs(b(v))) / (1.0 + an));
        }
        eta = std::max(eta, (1.0 + amax) / std::sqrt(sd));
        X[k] = xi * bl.start_scale * Matrix::Identity(bl.s, bl.s);
        S[k] = eta * Matrix::Identity(bl.s, bl.s);
    }
    normC = std::sqrt(normC);
    Vector y = Vector::Zero(m);

    SdpResult res;
    const double normb = b.norm();
    Blocks dXa(nb), dSa(nb), dX(nb), dS(nb), cent(nb), XRdSinv(nb);
    Matrix W, Msch;
    double best_merit = std::numeric_limits<double>::infinity();
    int since_best = 0;
    bool stalled = false;

    for (int it = 0; it < settings.max_iter; ++it) {
        res.iterations = it + 1;
        double rd2 = 0.0;
        double pobj = 0.0;
        for (std::size_t k = 0; k < nb; ++k) {
            apply_At(blocks[k], y, Rd[k]);
            Rd[k] = blocks[k].C - S[k] - Rd[k];
            rd2 += Rd[k].squaredNorm();
            pobj += blocks[k].C.cwiseProduct(X[k]).sum();
        }
        const Vector AX = apply_A(blocks, X, m);
        const Vector Rp = b - AX;
        const double dobj = b.dot(y);
        const double gap = inner(X, S);
        const double mu = gap / n_total;
        res.primal_infeasibility = Rp.norm() / (1.0 + normb);
        res.dual_infeasibility = std::sqrt(rd2) / (1.0 + normC);
        res.relative_gap = gap / (1.0 + std::abs(pobj) + std::abs(dobj));
        const double objgap = std::abs(pobj - dobj) / (1.0 + std::abs(pobj) + std::abs(dobj));
        if (settings.verbose) {
            std::cerr << "sdp it " << it << " pobj " << pobj << " dobj " << dobj << " pinf "
                      << res.primal_infeasibility << " dinf " << res.dual_infeasibility << " gap "
                      << res.relative_gap << "\n";
        }
        if (res.primal_infeasibility < settings.tol && res.dual_infeasibility < settings.tol &&
            res.relative_gap < settings.tol) {
            res.status = SdpStatus::Optimal;
            break;
        }
        const double merit = std::max({res.primal_infeasibility, res.dual_infeasibility, res.relative_gap, objgap});
        if (merit < 0.9 * best_merit) {
            best_merit = merit;
            since_best = 0;
        } else if (++since_best >= 30) {
            stalled = true;
            break;
        }
        // Certificate that the LMIs admit no y: X >= 0, A(X) ~ 0, <C, X> < 0.
        {
            double trX = 0.0;
            for (const auto& Xk : X) {
                trX += Xk.trace();
            }
            if (pobj < 0.0 && trX > 1e8) {
                const double cx = pobj / trX;
                if (AX.norm() / trX < 1e-3 * (-cx) && -cx > 1e-10 && res.primal_infeasibility > 1e-2) {
                    res.status = SdpStatus::Infeasible;
                    break;
                }
            }
        }
        // A feasible y whose objective keeps growing: b'y exceeds any primal bound.
        if (res.dual_infeasibility < settings.tol && dobj > 1e10 * (1.0 + std::abs(pobj)) &&
            res.primal_infeasibility > 1e-2) {
            res.status = SdpStatus::Unbounded;
            break;
        }

        bool chol_ok = true;
        for (std::size_t k = 0; k < nb && chol_ok; ++k) {
            Eigen::LLT<Matrix> ls(S[k]);
            Eigen::LLT<Matrix> lx(X[k]);
            if (ls.info() != Eigen::Success || lx.info() != Eigen::Success) {
                chol_ok = false;
                break;
            }
            Ls[k] = ls.matrixL();
            Lx[k] = lx.matrixL();
            Sinv[k] = ls.solve(Matrix::Identity(blocks[k].s, blocks[k].s));
            symmetrize(Sinv[k]);
        }
        if (!chol_ok) {
            break;
        }

        Msch.setZero(m, m);
        for (std::size_t k = 0; k < nb; ++k) {
            add_schur(blocks[k], X[k], Sinv[k], W, Msch);
        }
        symmetrize(Msch);
        const double diag_scale = std::max(1.0, Msch.diagonal().cwiseAbs().maxCoeff());
        Msch.diagonal().array() += 1e-14 * diag_scale;
        Eigen::LDLT<Matrix> schur(Msch);
        if (schur.info() != Eigen::Success) {
            break;
        }

        // Common part of the right-hand side: Rp + A(X) + A(X Rd S^{-1}).
        for (std::size_t k = 0; k < nb; ++k) {
            Workspace& ws = workspace(ws_cache, blocks[k].s);
            ws.T1.noalias() = X[k] * Rd[k];
            XRdSinv[k].noalias() = ws.T1 * Sinv[k];
        }
        const Vector rhs_common = Rp + AX + apply_A(blocks, XRdSinv, m);

        auto recover = [&](const Blocks* centering, const Vector& dy, Blocks& dx, Blocks& ds) {
            for (std::size_t k = 0; k < nb; ++k) {
                Workspace& ws = workspace(ws_cache, blocks[k].s);
                apply_At(blocks[k], dy, ds[k]);
                ds[k] = Rd[k] - ds[k];
                ws.T1.noalias() = X[k] * ds[k];
                dx[k].noalias() = -ws.T1 * Sinv[k];
                dx[k] -= X[k];
                if (centering) {
                    dx[k] += (*centering)[k];
                }
                symmetrize(dx[k]);
            }
        };
        auto direction = [&](const Blocks* centering, Vector& dy, Blocks& dx, Blocks& ds) {
            Vector rhs = rhs_common;
            if (centering) {
                rhs -= apply_A(blocks, *centering, m);
            }
            dy = schur.solve(rhs);
            recover(centering, dy, dx, ds);
            // The Schur system is badly conditioned near the optimum; refine
            // against the primal equation A(dX) = Rp itself, which removes the
            // cancellation error of forming dX from a large X.
            for (int r = 0; r < 2; ++r) {
                const Vector err = Rp - apply_A(blocks, dx, m);
                if (err.norm() <= 1e-3 * settings.tol * (1.0 + Rp.norm())) {
                    break;
                }
                dy += schur.solve(err);
                recover(centering, dy, dx, ds);
            }
        };
        auto step_lengths = [&](const Blocks& dx, const Blocks& ds, double& ap, double& ad) {
            ap = std::numeric_limits<double>::infinity();
            ad = std::numeric_limits<double>::infinity();
            for (std::size_t k = 0; k < nb; ++k) {
                Workspace& ws = workspace(ws_cache, blocks[k].s);
                ap = std::min(ap, max_step(Lx[k], dx[k], ws));
                ad = std::min(ad, max_step(Ls[k], ds[k], ws));
            }
        };

        // Predictor.
        Vector dya;
        direction(nullptr, dya, dXa, dSa);
        double apa = 0.0, ada = 0.0;
        step_lengths(dXa, dSa, apa, ada);
        apa = std::min(1.0, apa);
        ada = std::min(1.0, ada);
        double mu_aff = 0.0;
        for (std::size_t k = 0; k < nb; ++k) {
            mu_aff += (X[k] + apa * dXa[k]).cwiseProduct(S[k] + ada * dSa[k]).sum();
        }
        mu_aff /= n_total;
        const double sigma = std::clamp(std::pow(std::max(mu_aff, 0.0) / mu, 3.0), 0.0, 1.0);

        // Corrector: sigma*mu*S^{-1} - dXa dSa S^{-1}.
        for (std::size_t k = 0; k < nb; ++k) {
            Workspace& ws = workspace(ws_cache, blocks[k].s);
            ws.T1.noalias() = dXa[k] * dSa[k];
            cent[k].noalias() = -ws.T1 * Sinv[k];
            cent[k] += sigma * mu * Sinv[k];
        }
        Vector dy;
        direction(&cent, dy, dX, dS);
        double ap = 0.0, ad = 0.0;
        step_lengths(dX, dS, ap, ad);
        const double gamma = 0.98;
        ap = std::min(1.0, gamma * ap);
        ad = std::min(1.0, gamma * ad);
        if (!(ap > 1e-12) && !(ad > 1e-12)) {
            break;
        }
        for (std::size_t k = 0; k < nb; ++k) {
            X[k] += ap * dX[k];
            S[k] += ad * dS[k];
            symmetrize(X[k]);
            symmetrize(S[k]);
        }
        y += ad * dy;
        if (!y.allFinite()) {
            break;
        }
    }

    res.y = y;
    res.objective = b.dot(y);
    res.min_eig = std::numeric_limits<double>::infinity();
    for (int k = 0; k < problem.num_blocks(); ++k) {
        const Matrix F = problem.evaluate(k, y);
        Eigen::SelfAdjointEigenSolver<Matrix> es(F, Eigen::EigenvaluesOnly);
        const double e = es.eigenvalues().minCoeff();
        if (e < res.min_eig) {
            res.min_eig = e;
            res.worst_block = k;
        }
    }
    if (res.status == SdpStatus::NumericalFailure && y.allFinite()) {
        const double loose = 1e3 * settings.tol;
        if (res.primal_infeasibility < loose && res.dual_infeasibility < loose && res.relative_gap < loose) {
            res.status = SdpStatus::Optimal;
        } else if (stalled || res.iterations >= settings.max_iter) {
            if (res.dual_infeasibility < loose) {
                res.status = SdpStatus::Inaccurate;
            }
        }
    }
    return res;
}

}  // namespace tubempc
