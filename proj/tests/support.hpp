#pragma once

#include <tubempc/design.hpp>
#include <tubempc/model.hpp>

#include <cmath>

namespace fixture {

using namespace tubempc;

/// Stable two-state plant with a scalar input and a scalar disturbance.
inline GroundTruthModel small_plant(double w = 0.01)
{
    GroundTruthModel gt;
    gt.A.resize(2, 2);
    gt.A << 0.9, 0.2, -0.1, 0.8;
    gt.B.resize(2, 1);
    gt.B << 0.1, 0.5;
    gt.M.resize(2, 1);
    gt.M << 1.0, 0.5;
    gt.W = Box::symmetric(Vector::Constant(1, w));
    gt.Ts = 1.0;
    return gt;
}

/// Row-structured model whose nominal rows are the true plant and whose
/// residual boxes have radius rel*|theta| + abs around zero.
inline MultiStepModel uncertain_model(const GroundTruthModel& gt, int p, double rel, double abs = 0.0)
{
    std::vector<PredictorRow> rows;
    for (int j = 1; j <= p; ++j) {
        for (int i = 0; i < gt.nx(); ++i) {
            PredictorRow r;
            r.state = i;
            r.steps = j;
            r.theta_hat = true_row_parameters(gt, j, i);
            r.residual = Box(Vector::Zero(r.theta_hat.size()),
                             (rel * r.theta_hat.cwiseAbs()).array() + abs);
            rows.push_back(r);
        }
    }
    const auto [Wx, Wy] = lumped_disturbance_boxes(gt, p);
    return MultiStepModel(p, gt.nx(), gt.nu(), rows, Wx, Wy);
}

inline ConstraintSets small_sets(double x = 5.0, double u = 2.0)
{
    return ConstraintSets::from_boxes(Vector::Constant(2, -x), Vector::Constant(2, x), Vector::Constant(1, -u),
                                      Vector::Constant(1, u));
}

inline DesignWeights unit_weights(int nx = 2, int nu = 1)
{
    return DesignWeights{Vector::Ones(nx), Matrix::Identity(nu, nu)};
}

}  // namespace fixture
