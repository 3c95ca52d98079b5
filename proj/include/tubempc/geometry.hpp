#pragma once

#include <tubempc/types.hpp>

#include <vector>

namespace tubempc {

/// {x : H x <= h}.
struct HPolytope {
    Matrix H;
    Vector h;
    bool bounded = false;

    HPolytope() = default;
    HPolytope(Matrix H_, Vector h_, bool bounded_ = false);

    Eigen::Index dim() const { return H.cols(); }
    Eigen::Index rows() const { return H.rows(); }
    bool contains(const Vector& x, double tol = 1e-9) const;
    HPolytope scaled(double lambda) const;
};

/// Axis-aligned box {x : |x - center| <= radius}.
struct Box {
    Vector center;
    Vector radius;

    Box() = default;
    Box(Vector center_, Vector radius_);
    static Box symmetric(const Vector& radius);
    static Box from_bounds(const Vector& lower, const Vector& upper);
    static Box point(const Vector& x);

    Eigen::Index dim() const { return center.size(); }
    Vector lower() const { return center - radius; }
    Vector upper() const { return center + radius; }
    bool contains(const Vector& x, double tol = 1e-9) const;
    HPolytope to_hpolytope() const;
};

/// {x : |V x|_inf <= 1} with its 2^n vertices cached in lexicographic sign order.
class LowComplexityPolytope {
public:
    explicit LowComplexityPolytope(const Matrix& V);

    const Matrix& V() const { return V_; }
    const Matrix& V_inv() const { return V_inv_; }
    const std::vector<Vector>& vertices() const { return vertices_; }
    double condition_number() const { return cond_; }
    Eigen::Index dim() const { return V_.rows(); }

    /// Half-space matrix [V; -V] so that the set is {x : H x <= 1}.
    Matrix H() const;
    HPolytope to_hpolytope() const;
    bool contains(const Vector& x, double tol = 1e-9) const;
    /// max |x_i| over the set, i.e. half-widths of its bounding box.
    Vector halfwidths() const;

private:
    Matrix V_;
    Matrix V_inv_;
    double cond_ = 1.0;
    std::vector<Vector> vertices_;
};

double support_value(const HPolytope& P, const Vector& d);
double support_value(const Box& B, const Vector& d);
double support_value(const LowComplexityPolytope& X, const Vector& d);

/// All 2^n points V^{-1} s, s in {-1,+1}^n, ordered with s_0 the slowest-varying sign
/// and -1 before +1.
std::vector<Vector> low_complexity_vertices(const Matrix& V);

/// Sign vector of the k-th vertex in the ordering above.
Vector sign_vector(int k, int n);

/// Box outer approximation of the minimal RPI set of e+ = Acl e + w, w in W.
/// The result S satisfies |Acl| r_S + r_W <= (1 + eps) r_S, hence Acl S + W is in (1 + eps) S.
Box rpi_outer_approx(const Matrix& Acl, const Box& W, double eps = 1e-3, int max_iter = 10000);

}  // namespace tubempc
