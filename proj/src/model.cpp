#include <tubempc/error.hpp>
#include <tubempc/model.hpp>

#include <unsupported/Eigen/MatrixFunctions>

#include <algorithm>
#include <cmath>
#include <functional>

namespace tubempc {

void GroundTruthModel::validate() const
{
    require_dims(A.rows() == A.cols(), "A must be square");
    require_dims(B.rows() == A.rows(), "B row count");
    require_dims(M.rows() == A.rows(), "M row count");
    require_dims(W.dim() == M.cols(), "W dimension must match M columns");
}

std::pair<Matrix, Matrix> zoh(const Matrix& Ac, const Matrix& Bc, double Ts)
{
    const Eigen::Index n = Ac.rows();
    const Eigen::Index m = Bc.cols();
    Matrix aug = Matrix::Zero(n + m, n + m);
    aug.topLeftCorner(n, n) = Ac * Ts;
    aug.topRightCorner(n, m) = Bc * Ts;
    const Matrix E = aug.exp();
    return {E.topLeftCorner(n, n), E.topRightCorner(n, m)};
}

GroundTruthModel discretize_zoh(const std::vector<double>& den, double gain, double Ts)
{
    if (den.size() < 2) {
        throw Error(ErrorCode::DegenerateSystem, "denominator must have degree >= 1");
    }
    if (den.front() == 0.0) {
        throw Error(ErrorCode::DegenerateSystem, "zero leading denominator coefficient");
    }
    if (!(Ts > 0.0)) {
        throw Error(ErrorCode::DegenerateSystem, "sampling time must be positive");
    }
    const int n = static_cast<int>(den.size()) - 1;
    const double lead = den.front();
    Matrix Ac = Matrix::Zero(n, n);
    for (int k = 0; k < n; ++k) {
        Ac(0, k) = -den[k + 1] / lead;
    }
    for (int k = 1; k < n; ++k) {
        Ac(k, k - 1) = 1.0;
    }
    Matrix Bc = Matrix::Zero(n, 1);
    Bc(0, 0) = gain / lead;

    GroundTruthModel gt;
    std::tie(gt.A, gt.B) = zoh(Ac, Bc, Ts);
    gt.M = Matrix::Zero(n, 1);
    gt.W = Box::point(Vector::Zero(1));
    gt.Ts = Ts;
    return gt;
}

LiftedMatrices lift_exact(const GroundTruthModel& gt, int p)
{
    gt.validate();
    require_dims(p >= 1, "p must be >= 1");
    const int nx = gt.nx();
    const int nu = gt.nu();
    const int nw = gt.nw();
    std::vector<Matrix> Apow(p + 1);
    Apow[0] = Matrix::Identity(nx, nx);
    for (int k = 1; k <= p; ++k) {
        Apow[k] = gt.A * Apow[k - 1];
    }
    LiftedMatrices out;
    out.p = p;
    out.Abar = Apow[p];
    out.Bbar.resize(nx, nu * p);
    out.Mbar.resize(nx, nw * p);
    for (int t = 0; t < p; ++t) {
        out.Bbar.middleCols(t * nu, nu) = Apow[p - 1 - t] * gt.B;
        out.Mbar.middleCols(t * nw, nw) = Apow[p - 1 - t] * gt.M;
    }
    out.Cbar = Matrix::Zero(nx * (p - 1), nx);
    out.Dbar = Matrix::Zero(nx * (p - 1), nu * p);
    out.Nbar = Matrix::Zero(nx * (p - 1), nw * p);
    for (int j = 1; j < p; ++j) {
        out.Cbar.middleRows((j - 1) * nx, nx) = Apow[j];
        for (int t = 0; t < j; ++t) {
            out.Dbar.block((j - 1) * nx, t * nu, nx, nu) = Apow[j - 1 - t] * gt.B;
            out.Nbar.block((j - 1) * nx, t * nw, nx, nw) = Apow[j - 1 - t] * gt.M;
        }
    }
    return out;
}

Vector true_row_parameters(const GroundTruthModel& gt, int steps, int state)
{
    const int nx = gt.nx();
    const int nu = gt.nu();
    Vector theta(nx + nu * steps);
    Matrix Ak = Matrix::Identity(nx, nx);
    for (int t = steps - 1; t >= 0; --t) {
        theta.segment(nx + t * nu, nu) = (Ak * gt.B).row(state).transpose();
        Ak = gt.A * Ak;
    }
    theta.head(nx) = Ak.row(state).transpose();
    return theta;
}

Box lumped_disturbance_box(const GroundTruthModel& gt, int steps)
{
    Vector c = Vector::Zero(gt.nx());
    Vector r = Vector::Zero(gt.nx());
    Matrix Ak = Matrix::Identity(gt.nx(), gt.nx());
    for (int t = 0; t < steps; ++t) {
        const Matrix AM = Ak * gt.M;
        c += AM * gt.W.center;
        r += AM.cwiseAbs() * gt.W.radius;
        Ak = gt.A * Ak;
    }
    return Box(c, r);
}

std::pair<Box, Box> lumped_disturbance_boxes(const GroundTruthModel& gt, int p)
{
    const Box wx = lumped_disturbance_box(gt, p);
    const int nx = gt.nx();
    Vector c(nx * (p - 1)), r(nx * (p - 1));
    for (int j = 1; j < p; ++j) {
        const Box b = lumped_disturbance_box(gt, j);
        c.segment((j - 1) * nx, nx) = b.center;
        r.segment((j - 1) * nx, nx) = b.radius;
    }
    return {wx, Box(c, r)};
}

Vector sample_uniform(const Box& box, std::mt19937_64& rng)
{
    std::uniform_real_distribution<double> uni(-1.0, 1.0);
    Vector x(box.dim());
    for (Eigen::Index i = 0; i < x.size(); ++i) {
        x(i) = box.center(i) + box.radius(i) * uni(rng);
    }
    return x;
}

namespace {

Trajectory rollout(const GroundTruthModel& gt, const Vector& x0, const std::vector<Vector>& U,
                   const std::function<Vector(int)>& wsrc, bool clip)
{
    gt.validate();
    require_dims(x0.size() == gt.nx(), "initial state dimension");
    Trajectory tr;
    tr.x.reserve(U.size() + 1);
    tr.x.push_back(x0);
    for (std::size_t k = 0; k < U.size(); ++k) {
        require_dims(U[k].size() == gt.nu(), "input dimension at step " + std::to_string(k));
        Vector w = wsrc(static_cast<int>(k));
        require_dims(w.size() == gt.nw(), "disturbance dimension at step " + std::to_string(k));
        if (clip) {
            const Vector lo = gt.W.lower();
            const Vector hi = gt.W.upper();
            const Vector wc = w.cwiseMax(lo).cwiseMin(hi);
            if ((wc - w).cwiseAbs().maxCoeff() > 0.0) {
                ++tr.clipped;
            }
            w = wc;
        }
        tr.x.push_back(gt.A * tr.x.back() + gt.B * U[k] + gt.M * w);
        tr.u.push_back(U[k]);
        tr.w.push_back(w);
    }
    return tr;
}

}  // namespace

Trajectory simulate(const GroundTruthModel& gt, const Vector& x0, const std::vector<Vector>& U,
                    const std::vector<Vector>& Wseq)
{
    require_dims(Wseq.size() >= U.size(), "disturbance sequence shorter than input sequence");
    return rollout(gt, x0, U, [&](int k) { return Wseq[k]; }, true);
}

Trajectory simulate(const GroundTruthModel& gt, const Vector& x0, const std::vector<Vector>& U,
                    std::mt19937_64& rng)
{
    return rollout(gt, x0, U, [&](int) { return sample_uniform(gt.W, rng); }, false);
}

// ---------------------------------------------------------------------------

MultiStepModel::MultiStepModel(int p, int nx, int nu, std::vector<PredictorRow> rows, Box Wx, Box Wy)
    : p_(p), nx_(nx), nu_(nu), Wx_(std::move(Wx)), Wy_(std::move(Wy))
{
    require_dims(p >= 1 && nx >= 1 && nu >= 1, "multi-step model dimensions");
    require_dims(Wx_.dim() == nx, "Wx dimension");
    require_dims(Wy_.dim() == nx * (p - 1), "Wy dimension");
    rows_.resize(static_cast<std::size_t>(nx) * p);
    std::vector<bool> seen(rows_.size(), false);
    for (auto& r : rows) {
        require_dims(r.steps >= 1 && r.steps <= p && r.state >= 0 && r.state < nx, "predictor row index");
        const int len = nx + nu * r.steps;
        require_dims(r.theta_hat.size() == len && r.residual.dim() == len, "predictor row length");
        const int idx = row_index(r.steps, r.state);
        seen[idx] = true;
        rows_[idx] = std::move(r);
    }
    for (std::size_t k = 0; k < seen.size(); ++k) {
        if (!seen[k]) {
            throw Error(ErrorCode::MissingRow, "predictor row " + std::to_string(k) + " missing");
        }
    }
    offsets_.resize(rows_.size() + 1);
    offsets_[0] = 0;
    for (std::size_t k = 0; k < rows_.size(); ++k) {
        offsets_[k + 1] = offsets_[k] + static_cast<int>(rows_[k].theta_hat.size());
    }
    num_params_ = offsets_.back();
}

int MultiStepModel::row_index(int steps, int state) const
{
    return steps == p_ ? state : nx_ * steps + state;
}

MultiStepModel MultiStepModel::from_lifted(const GroundTruthModel& gt, int p, const Box& Wx, const Box& Wy)
{
    std::vector<PredictorRow> rows;
    for (int j = 1; j <= p; ++j) {
        for (int i = 0; i < gt.nx(); ++i) {
            PredictorRow r;
            r.state = i;
            r.steps = j;
            r.theta_hat = true_row_parameters(gt, j, i);
            r.residual = Box::point(Vector::Zero(r.theta_hat.size()));
            rows.push_back(std::move(r));
        }
    }
    return MultiStepModel(p, gt.nx(), gt.nu(), std::move(rows), Wx, Wy);
}

MultiStepModel::Matrices MultiStepModel::from_row_coefficients(const std::vector<Vector>& coeffs) const
{
    Matrices m;
    m.A = Matrix::Zero(nx_, nx_);
    m.B = Matrix::Zero(nx_, nu_ * p_);
    m.C = Matrix::Zero(nx_ * (p_ - 1), nx_);
    m.D = Matrix::Zero(nx_ * (p_ - 1), nu_ * p_);
    for (std::size_t k = 0; k < rows_.size(); ++k) {
        const PredictorRow& r = rows_[k];
        const Vector& c = coeffs[k];
        if (r.steps == p_) {
            m.A.row(r.state) = c.head(nx_).transpose();
            m.B.row(r.state) = c.tail(nu_ * p_).transpose();
        } else {
            const int out = (r.steps - 1) * nx_ + r.state;
            m.C.row(out) = c.head(nx_).transpose();
            m.D.row(out).head(nu_ * r.steps) = c.tail(nu_ * r.steps).transpose();
        }
    }
    return m;
}

MultiStepModel::Matrices MultiStepModel::nominal() const
{
    std::vector<Vector> coeffs;
    coeffs.reserve(rows_.size());
    for (const auto& r : rows_) {
        coeffs.push_back(r.theta_hat);
    }
    return from_row_coefficients(coeffs);
}

MultiStepModel::Matrices MultiStepModel::evaluate(const Vector& delta) const
{
    require_dims(delta.size() == num_params_, "parameter vector length");
    std::vector<Vector> coeffs;
    coeffs.reserve(rows_.size());
    for (std::size_t k = 0; k < rows_.size(); ++k) {
        coeffs.push_back(rows_[k].theta_hat + delta.segment(offsets_[k], rows_[k].theta_hat.size()));
    }
    return from_row_coefficients(coeffs);
}

Box MultiStepModel::theta_box() const
{
    Vector c(num_params_), r(num_params_);
    for (std::size_t k = 0; k < rows_.size(); ++k) {
        c.segment(offsets_[k], rows_[k].residual.dim()) = rows_[k].residual.center;
        r.segment(offsets_[k], rows_[k].residual.dim()) = rows_[k].residual.radius;
    }
    return Box(c, r);
}

HPolytope MultiStepModel::theta_polytope() const { return theta_box().to_hpolytope(); }

AffineTerms MultiStepModel::terms() const
{
    AffineTerms t;
    t.p = p_;
    t.nx = nx_;
    t.nu = nu_;
    t.terms.reserve(num_params_ + 1);
    t.terms.push_back(nominal());
    Matrices zero;
    zero.A = Matrix::Zero(nx_, nx_);
    zero.B = Matrix::Zero(nx_, nu_ * p_);
    zero.C = Matrix::Zero(nx_ * (p_ - 1), nx_);
    zero.D = Matrix::Zero(nx_ * (p_ - 1), nu_ * p_);
    for (std::size_t k = 0; k < rows_.size(); ++k) {
        const PredictorRow& r = rows_[k];
        for (int m = 0; m < static_cast<int>(r.theta_hat.size()); ++m) {
            Matrices e = zero;
            if (r.steps == p_) {
                if (m < nx_) {
                    e.A(r.state, m) = 1.0;
                } else {
                    e.B(r.state, m - nx_) = 1.0;
                }
            } else {
                const int out = (r.steps - 1) * nx_ + r.state;
                if (m < nx_) {
                    e.C(out, m) = 1.0;
                } else {
                    e.D(out, m - nx_) = 1.0;
                }
            }
            t.terms.push_back(std::move(e));
        }
    }
    return t;
}

MultiStepModel::Matrices AffineTerms::evaluate(const Vector& theta) const
{
    require_dims(theta.size() == num_params(), "parameter vector length");
    MultiStepModel::Matrices m = terms.at(0);
    for (int i = 0; i < num_params(); ++i) {
        m.A += terms[i + 1].A * theta(i);
        m.B += terms[i + 1].B * theta(i);
        m.C += terms[i + 1].C * theta(i);
        m.D += terms[i + 1].D * theta(i);
    }
    return m;
}

}  // namespace tubempc
