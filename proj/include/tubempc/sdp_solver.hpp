#pragma once

#include <tubempc/types.hpp>

#include <string>
#include <vector>

namespace tubempc {

/// Linear matrix inequality program in "dual" form:
///
///   maximize b'y  s.t.  F_k(y) = F_k0 + sum_i y_i F_ki >= 0  for every block k.
///
/// Blocks are small dense symmetric matrices; each block stores only the
/// variables it depends on, so programs with tens of thousands of blocks
/// stay cheap to assemble.
class SdpProblem {
public:
    int add_variable();
    int add_variables(int count);
    int add_block(int size);
    /// Adds v at (r, c) and (c, r) of the constant term.
    void add_constant(int block, int r, int c, double v);
    /// Adds v at (r, c) and (c, r) of the coefficient of `var`.
    void add_coefficient(int block, int var, int r, int c, double v);
    void set_objective(const Vector& b);
    /// Scales the interior-point starting iterate of one block. Useful when a
    /// single block couples to many others (its primal iterate then has to
    /// balance all of them).
    void set_start_scale(int block, double factor);

    int num_variables() const { return num_vars_; }
    int num_blocks() const { return static_cast<int>(blocks_.size()); }
    /// F_k(y) for inspection.
    Matrix evaluate(int block, const Vector& y) const;

    struct Entry {
        int var;  ///< -1 for the constant term
        int r;
        int c;
        double v;
    };
    struct Block {
        int size = 0;
        std::vector<Entry> entries;
        double start_scale = 1.0;
    };
    const std::vector<Block>& blocks() const { return blocks_; }
    const Vector& objective() const { return b_; }

private:
    int num_vars_ = 0;
    std::vector<Block> blocks_;
    Vector b_;
};

/// Inaccurate: the method stalled before reaching the tolerance; the returned
/// y is the last (dual-interior) iterate and may still be usable.
enum class SdpStatus { Optimal, Inaccurate, Infeasible, Unbounded, NumericalFailure };

const char* to_string(SdpStatus s);

struct SdpSettings {
    double tol = 1e-8;
    int max_iter = 100;
    bool verbose = false;
};

struct SdpResult {
    SdpStatus status = SdpStatus::NumericalFailure;
    Vector y;
    double objective = 0.0;
    int iterations = 0;
    double primal_infeasibility = 0.0;
    double dual_infeasibility = 0.0;
    double relative_gap = 0.0;
    /// Smallest eigenvalue over all blocks of F(y); index of that block.
    double min_eig = 0.0;
    int worst_block = -1;
};

/// Primal-dual interior-point method with the HKM search direction and a
/// Mehrotra predictor-corrector step.
SdpResult solve_sdp(const SdpProblem& problem, const SdpSettings& settings = {});

}  // namespace tubempc
