#include <tubempc/error.hpp>
#include <tubempc/geometry.hpp>
#include <tubempc/qp_solver.hpp>

#include <cmath>

namespace tubempc {

HPolytope::HPolytope(Matrix H_, Vector h_, bool bounded_) : H(std::move(H_)), h(std::move(h_)), bounded(bounded_)
{
    require_dims(H.rows() == h.size(), "HPolytope: H and h row counts differ");
    require_dims(H.rows() >= 1 && H.cols() >= 1, "HPolytope: empty representation");
    for (Eigen::Index r = 0; r < H.rows(); ++r) {
        if (H.row(r).cwiseAbs().maxCoeff() == 0.0) {
            throw Error(ErrorCode::DimensionMismatch, "HPolytope: zero row " + std::to_string(r));
        }
    }
}

bool HPolytope::contains(const Vector& x, double tol) const
{
    return ((H * x - h).array() <= tol).all();
}

HPolytope HPolytope::scaled(double lambda) const
{
    HPolytope out = *this;
    out.h *= lambda;
    return out;
}

Box::Box(Vector center_, Vector radius_) : center(std::move(center_)), radius(std::move(radius_))
{
    require_dims(center.size() == radius.size(), "Box: center/radius size");
    if ((radius.array() < 0.0).any()) {
        throw Error(ErrorCode::DimensionMismatch, "Box: negative radius");
    }
}

Box Box::symmetric(const Vector& radius) { return Box(Vector::Zero(radius.size()), radius); }

Box Box::from_bounds(const Vector& lower, const Vector& upper)
{
    require_dims(lower.size() == upper.size(), "Box: bound sizes");
    return Box(0.5 * (lower + upper), (0.5 * (upper - lower)).cwiseMax(0.0));
}

Box Box::point(const Vector& x) { return Box(x, Vector::Zero(x.size())); }

bool Box::contains(const Vector& x, double tol) const
{
    return ((x - center).cwiseAbs() - radius).maxCoeff() <= tol;
}

HPolytope Box::to_hpolytope() const
{
    const Eigen::Index n = dim();
    Matrix H(2 * n, n);
    H << Matrix::Identity(n, n), -Matrix::Identity(n, n);
    Vector h(2 * n);
    h << center + radius, radius - center;
    return HPolytope(H, h, true);
}

Vector sign_vector(int k, int n)
{
    Vector s(n);
    for (int i = 0; i < n; ++i) {
        s(i) = ((k >> (n - 1 - i)) & 1) ? 1.0 : -1.0;
    }
    return s;
}

std::vector<Vector> low_complexity_vertices(const Matrix& V)
{
    require_dims(V.rows() == V.cols(), "low-complexity shape must be square");
    const int n = static_cast<int>(V.rows());
    Eigen::FullPivLU<Matrix> lu(V);
    lu.setThreshold(1e-12);
    if (!lu.isInvertible()) {
        throw Error(ErrorCode::SingularShape, "shape matrix V is singular");
    }
    const Matrix Vi = lu.inverse();
    std::vector<Vector> out;
    out.reserve(std::size_t{1} << n);
    for (int k = 0; k < (1 << n); ++k) {
        out.push_back(Vi * sign_vector(k, n));
    }
    return out;
}

LowComplexityPolytope::LowComplexityPolytope(const Matrix& V) : V_(V)
{
    require_dims(V.rows() == V.cols() && V.rows() >= 1, "low-complexity shape must be square");
    Eigen::JacobiSVD<Matrix> svd(V);
    const auto& sv = svd.singularValues();
    cond_ = sv(sv.size() - 1) > 0.0 ? sv(0) / sv(sv.size() - 1) : std::numeric_limits<double>::infinity();
    if (!(cond_ <= 1e12)) {
        throw Error(ErrorCode::SingularShape, "shape matrix V has condition number " + std::to_string(cond_));
    }
    V_inv_ = V.inverse();
    vertices_ = low_complexity_vertices(V);
}

Matrix LowComplexityPolytope::H() const
{
    Matrix H(2 * V_.rows(), V_.cols());
    H << V_, -V_;
    return H;
}

HPolytope LowComplexityPolytope::to_hpolytope() const
{
    return HPolytope(H(), Vector::Ones(2 * V_.rows()), true);
}

bool LowComplexityPolytope::contains(const Vector& x, double tol) const
{
    return (V_ * x).cwiseAbs().maxCoeff() <= 1.0 + tol;
}

Vector LowComplexityPolytope::halfwidths() const { return V_inv_.cwiseAbs().rowwise().sum(); }

double support_value(const Box& B, const Vector& d)
{
    require_dims(d.size() == B.dim(), "support direction size");
    return d.dot(B.center) + d.cwiseAbs().dot(B.radius);
}

double support_value(const LowComplexityPolytope& X, const Vector& d)
{
    // x = V^{-1} s with |s| <= 1: max d'V^{-1}s = |V^{-T} d|_1.
    require_dims(d.size() == X.dim(), "support direction size");
    return (X.V_inv().transpose() * d).lpNorm<1>();
}

double support_value(const HPolytope& P, const Vector& d)
{
    require_dims(d.size() == P.dim(), "support direction size");
    QpSettings settings;
    settings.feas_tol = 1e-10;
    settings.gap_tol = 1e-11;
    const QpResult r = solve_lp(-d, Matrix(0, P.dim()), Vector(0), P.H, P.h, settings);
    switch (r.status) {
    case QpStatus::Optimal: return -r.objective;
    case QpStatus::Unbounded: throw Error(ErrorCode::Unbounded, "support function unbounded in the given direction");
    case QpStatus::Infeasible: throw Error(ErrorCode::InfeasibleSet, "polytope is empty");
    default: throw Error(ErrorCode::LPFailure, "support LP did not converge");
    }
}

Box rpi_outer_approx(const Matrix& Acl, const Box& W, double eps, int max_iter)
{
    require_dims(Acl.rows() == Acl.cols() && Acl.rows() == W.dim(), "rpi_outer_approx dimensions");
    if (!(eps > 0.0)) {
        throw Error(ErrorCode::DimensionMismatch, "rpi_outer_approx needs eps > 0");
    }
    const double rho = spectral_radius(Acl);
    if (rho >= 1.0) {
        throw Error(ErrorCode::NotContractive, "spectral radius " + std::to_string(rho) + " >= 1");
    }
    // Partial sums s_m = sum_{i<=m} |Acl|^i r_W increase monotonically to the
    // smallest box that is invariant in the elementwise-absolute sense.
    const Matrix absA = Acl.cwiseAbs();
    const Eigen::Index n = Acl.rows();
    const Vector& r = W.radius;
    const Vector center = (Matrix::Identity(n, n) - Acl).partialPivLu().solve(W.center);
    Vector s = r;
    for (int it = 0; it < max_iter; ++it) {
        const Vector next = absA * s + r;
        if (!next.allFinite()) {
            break;
        }
        if (((next.array() - (1.0 + eps) * s.array()) <= 1e-300).all()) {
            // The tail is geometric once the increments are this small; the
            // limit (I - |Acl|)^{-1} r_W is the fixed point and is never smaller.
            Vector limit = (Matrix::Identity(n, n) - absA).partialPivLu().solve(r);
            if (limit.allFinite() && (limit.array() >= s.array() - 1e-12).all()) {
                return Box(center, limit.cwiseMax(s));
            }
            return Box(center, (1.0 + eps) * next);
        }
        s = next;
    }
    throw Error(ErrorCode::NoConvergence, "RPI box iteration did not reach the tail bound");
}

}  // namespace tubempc
