// End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
// exits non-zero if any criterion fails. Optional arguments select criteria
// by number; `--json FILE` writes the collected details.

#include "support.hpp"

#include <tubempc/baselines.hpp>
#include <tubempc/cli.hpp>

#include <chrono>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <sstream>

using namespace tubempc;

namespace {

const std::string kConfig = std::string(TUBEMPC_CONFIG_DIR) + "/sec5.json";

struct Outcome {
    bool pass = false;
    std::string summary;
    Json details;
};

double seconds_since(std::chrono::steady_clock::time_point t0)
{
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(double v)
{
    std::ostringstream os;
    os.precision(3);
    os << v;
    return os.str();
}

// ---------------------------------------------------------------------------
// Shared experiment pipeline (identification and design run once).

struct Experiment {
    ExperimentConfig cfg;
    ModelArtifacts models;
    DesignArtifacts designs;
    double seconds = 0.0;
};

Experiment& experiment()
{
    static std::optional<Experiment> e;
    if (!e) {
        const auto t0 = std::chrono::steady_clock::now();
        e.emplace();
        e->cfg = load_config(kConfig);
        e->models = run_identify(e->cfg);
        e->designs = run_design(e->cfg, e->models);
        e->seconds = seconds_since(t0);
    }
    return *e;
}

// ---------------------------------------------------------------------------
// 1. Multiplier form versus vertex enumeration on random polytopic instances.

Matrix randn(int r, int c, std::mt19937_64& rng, double scale = 1.0)
{
    std::normal_distribution<double> N(0.0, scale);
    Matrix M(r, c);
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) M(i, j) = N(rng);
    return M;
}

HPolytope random_parameter_set(int ntheta, std::mt19937_64& rng)
{
    std::uniform_real_distribution<double> U(0.0, 1.0);
    if (ntheta == 2) {
        // Polygon: sorted random normals with every gap below pi keep it bounded.
        const double pi = std::acos(-1.0);
        for (;;) {
            const int q = 3 + static_cast<int>(U(rng) * 6.0);  // 3..8
            std::vector<double> ang(q);
            for (auto& a : ang) a = 2.0 * pi * U(rng);
            std::sort(ang.begin(), ang.end());
            double gap = ang.front() + 2.0 * pi - ang.back();
            for (int k = 1; k < q; ++k) gap = std::max(gap, ang[k] - ang[k - 1]);
            if (gap >= 0.95 * pi) continue;
            Matrix H(q, 2);
            Vector h(q);
            for (int k = 0; k < q; ++k) {
                H(k, 0) = std::cos(ang[k]);
                H(k, 1) = std::sin(ang[k]);
                h(k) = 0.2 + U(rng);
            }
            return HPolytope(H, h, true);
        }
    }
    // Box plus up to two random cuts that keep the origin inside: q <= 8.
    const int cuts = static_cast<int>(U(rng) * 3.0);
    Matrix H(2 * ntheta + cuts, ntheta);
    Vector h(2 * ntheta + cuts);
    H.topRows(ntheta) = Matrix::Identity(ntheta, ntheta);
    H.middleRows(ntheta, ntheta) = -Matrix::Identity(ntheta, ntheta);
    for (int k = 0; k < 2 * ntheta; ++k) h(k) = 0.2 + U(rng);
    for (int k = 0; k < cuts; ++k) {
        H.row(2 * ntheta + k) = randn(1, ntheta, rng);
        h(2 * ntheta + k) = 0.1 + 0.5 * U(rng);
    }
    return HPolytope(H, h, true);
}

Outcome criterion_1()
{
    const auto t0 = std::chrono::steady_clock::now();
    std::mt19937_64 rng(20240101);
    std::uniform_real_distribution<double> U(0.0, 1.0);
    const int nx = 2, nu = 1, p = 2, instances = 200;
    int agree_feasible = 0, agree_infeasible = 0, disagreements = 0, rows_checked = 0;
    double worst_gap = 0.0;
    int max_q = 0;
    for (int inst = 0; inst < instances; ++inst) {
        const int ntheta = 2 + inst % 2;
        PolytopicModel pm{AffineTerms{}, random_parameter_set(ntheta, rng), Box::symmetric(Vector::Zero(nx)),
                          Box::symmetric(Vector::Zero(nx * (p - 1)))};
        max_q = std::max(max_q, static_cast<int>(pm.theta.rows()));
        pm.terms.p = p;
        pm.terms.nx = nx;
        pm.terms.nu = nu;
        for (int k = 0; k <= ntheta; ++k) {
            const double s = k == 0 ? 0.5 : 0.2;
            pm.terms.terms.push_back({randn(nx, nx, rng, s), randn(nx, nu * p, rng, s),
                                      randn(nx * (p - 1), nx, rng, s), randn(nx * (p - 1), nu * p, rng, s)});
        }
        Matrix V = randn(nx, nx, rng) + 2.0 * Matrix::Identity(nx, nx);
        const int ny_rows = 2 + static_cast<int>(U(rng) * 3.0);
        Matrix Hp = Matrix::Zero(2 * nx + ny_rows, nx + nx * (p - 1));
        Hp.block(0, 0, nx, nx) = V;
        Hp.block(nx, 0, nx, nx) = -V;
        Hp.block(2 * nx, nx, ny_rows, nx * (p - 1)) = randn(ny_rows, nx * (p - 1), rng);
        const Matrix K = randn(nu * p, nx, rng, 0.3);
        const LowComplexityPolytope X0(V);
        const Vector xv = X0.vertices()[inst % X0.vertices().size()];
        const Vector z = randn(nx, 1, rng), Vl = randn(nu * p, 1, rng), zn = randn(nx, 1, rng);
        const double alpha = U(rng) * 2.0;

        // Place every row at a random signed distance from its bound.
        const Vector zero_x = Vector::Zero(2 * nx), zero_y = Vector::Zero(ny_rows);
        const StageData probe = make_stage_data(pm, Hp, K, xv, z, alpha, Vl, zn, 0.0, zero_x, zero_y);
        const auto verts = enumerate_vertices(pm.theta);
        const int nr = static_cast<int>(Hp.rows());
        Vector worst(nr);
        for (int r = 0; r < nr; ++r) {
            double best = -1e300;
            for (const auto& v : verts) best = std::max(best, probe.HE.row(r).dot(v));
            worst(r) = best + probe.He(r);
        }
        const bool want_feasible = U(rng) < 0.5;
        Vector delta(nr);
        for (int r = 0; r < nr; ++r) delta(r) = (1e-3 + 0.5 * U(rng)) * (want_feasible || U(rng) < 0.7 ? 1.0 : -1.0);
        if (!want_feasible && (delta.array() > 0.0).all()) delta(static_cast<int>(U(rng) * nr)) *= -1.0;
        const double alpha_next = worst.head(2 * nx).maxCoeff() + 1.0;
        const Vector wx = Vector::Constant(2 * nx, alpha_next) - worst.head(2 * nx) - delta.head(2 * nx);
        const Vector wy = Vector::Ones(ny_rows) - worst.tail(ny_rows) - delta.tail(ny_rows);
        const StageData st = make_stage_data(pm, Hp, K, xv, z, alpha, Vl, zn, alpha_next, wx, wy);
        const DualCheck dc = dual_equivalence_check(st, pm.theta, 1e-7);
        rows_checked += nr;
        worst_gap = std::max(worst_gap, (dc.lp_value - dc.vertex_value).cwiseAbs().maxCoeff());
        const bool truth = (delta.array() > 0.0).all();
        if (dc.equivalent && dc.lambda_feasible == truth && dc.vertex_feasible == truth) {
            (truth ? agree_feasible : agree_infeasible)++;
        } else {
            ++disagreements;
        }
    }
    const double secs = seconds_since(t0);
    Outcome o;
    o.pass = disagreements == 0 && agree_feasible > 0 && agree_infeasible > 0 && worst_gap <= 1e-7 && secs < 60.0;
    o.summary = std::to_string(instances) + " instances (q_theta <= " + std::to_string(max_q) + "), " +
                std::to_string(agree_feasible) + " feasible / " + std::to_string(agree_infeasible) +
                " infeasible agree, " + std::to_string(disagreements) + " disagree, max value gap " + fmt(worst_gap) +
                ", " + fmt(secs) + " s";
    o.details = {{"instances", instances},          {"rows", rows_checked},     {"feasible_agree", agree_feasible},
                 {"infeasible_agree", agree_infeasible}, {"disagreements", disagreements},
                 {"max_value_gap", worst_gap},      {"max_q_theta", max_q},    {"seconds", secs}};
    return o;
}

// ---------------------------------------------------------------------------
// 2. Open-loop experiment.

Outcome criterion_2()
{
    const auto t0 = std::chrono::steady_clock::now();
    Experiment& e = experiment();
    const OpenLoopComparison cmp = run_open_loop(e.cfg, e.models, e.designs);
    const Json& c = cmp.checks;
    auto flag = [&](const char* k) { return c.contains(k) && c.at(k).is_boolean() && c.at(k).get<bool>(); };
    const bool a = cmp.proposed_status == "optimal" && flag("proposed_feasible") &&
                   c.at("proposed_sampled_tube_violation").get<double>() <= 1e-8;
    // Lower edge of x3 at every predicted instant (block starts and intermediate steps).
    const bool b = flag("proposed_lower_edges_respect_bounds");
    const bool cc = c.contains("width_ordering_vs_rigid") && c.at("width_ordering_vs_rigid").at("holds").get<bool>();
    const bool d = flag("one_step_alpha_strictly_increasing");
    const double secs = seconds_since(t0) + e.seconds;
    Outcome o;
    o.pass = a && b && cc && d && secs < 600.0;
    o.summary = std::string("(a) feasible ") + (a ? "yes" : "no") + ", (b) lower edges " + (b ? "ok" : "violated") +
                " [margin " + fmt(std::min(c.value("proposed_lower_edge_margin", 0.0),
                                           c.value("proposed_intermediate_lower_edge_margin", 1e300))) +
                "], (c) width <= rigid " + (cc ? "yes" : "no") + " [rigid tau " + c.value("rigid_tau_mode", "?") +
                ", " + c.value("rigid_status", "?") + "], (d) one-step alpha increasing " + (d ? "yes" : "no") +
                ", " + fmt(secs) + " s";
    o.details = c;
    o.details["proposed_objective"] = cmp.proposed ? cmp.proposed->objective : 0.0;
    o.details["seconds"] = secs;
    return o;
}

// ---------------------------------------------------------------------------
// 3. Problem sizes against the published table.

Outcome criterion_3()
{
    Experiment& e = experiment();
    const auto rows = run_complexity(e.cfg, e.models, e.designs);
    bool pass = rows.size() == 3;
    std::ostringstream s;
    Json details = Json::array();
    for (const auto& r : rows) {
        const bool v = r.reference_var && within_order_of_magnitude(static_cast<double>(r.n_var), *r.reference_var);
        const bool i = r.reference_ineq && within_order_of_magnitude(static_cast<double>(r.n_ineq), *r.reference_ineq);
        const bool q = r.reference_eq && within_order_of_magnitude(static_cast<double>(r.n_eq), *r.reference_eq);
        // The proposed controller's equality count is reported, not gated.
        const bool gate_eq = r.controller != "proposed";
        pass = pass && v && i && (q || !gate_eq);
        s << r.controller << " (" << r.n_var << ", " << r.n_ineq << ", " << r.n_eq << ")" << (gate_eq ? "" : "*")
          << "; ";
        details.push_back({{"controller", r.controller},
                           {"n_var", r.n_var},
                           {"n_ineq", r.n_ineq},
                           {"n_eq", r.n_eq},
                           {"reference", {r.reference_var.value_or(0), r.reference_ineq.value_or(0), r.reference_eq.value_or(0)}},
                           {"within", {v, i, q}},
                           {"eq_gated", gate_eq}});
    }
    Outcome o;
    o.pass = pass;
    o.summary = s.str() + "* equality count not gated";
    o.details = details;
    return o;
}

// ---------------------------------------------------------------------------
// 4. Terminal cost certificate.

Outcome criterion_4()
{
    Experiment& e = experiment();
    const auto& d = e.designs.proposed;
    const MarginReport rep = verify_terminal_cost(e.models.proposed, d.K, d.P, e.cfg.weights, 1000, 4);
    Outcome o;
    o.pass = rep.margin >= -1e-8 && rep.samples == 1000 && rep.vertex_blocks > 0;
    o.summary = "margin " + fmt(rep.margin) + " (vertex blocks " + std::to_string(rep.vertex_blocks) + ": " +
                fmt(rep.decomposed_margin) + ", 1000 samples: " + fmt(rep.sampled_margin) + ")";
    o.details = {{"margin", rep.margin},
                 {"decomposed_margin", rep.decomposed_margin},
                 {"sampled_margin", rep.sampled_margin},
                 {"vertex_blocks", rep.vertex_blocks},
                 {"samples", rep.samples}};
    return o;
}

// ---------------------------------------------------------------------------
// 5. Closed-loop Monte Carlo.

Outcome criterion_5()
{
    const auto t0 = std::chrono::steady_clock::now();
    Experiment& e = experiment();
    const ExperimentConfig& cfg = e.cfg;
    MpcConfig mc = cfg.mpc;
    mc.cost = CostMode::Quadratic;
    mc.terminal = true;
    mc.lambda = LambdaMode::ClosedForm;
    auto ctrl = make_homothetic_loop("proposed", e.models.proposed, e.designs.proposed, mc, cfg.simulate.warm_start);
    const int runs = 100, blocks = 30;
    const int steps = blocks * e.models.proposed.p();
    const ConstraintSets sets = cfg.sets();
    long solves = 0, failed = 0, violations = 0;
    double tube = 0.0;
    for (int run = 0; run < runs; ++run) {
        const RunDraw draw = draw_run(cfg, e.models.plant, run, steps);
        const SimulationTrace tr = simulate_closed_loop(*ctrl, e.models.plant, sets, draw.x0, draw.w, run);
        solves += tr.solves;
        failed += tr.failed_solves;
        violations += tr.constraint_violations;
        tube = std::max(tube, tr.max_tube_violation);
    }
    const double secs = seconds_since(t0);
    Outcome o;
    o.pass = solves == static_cast<long>(runs) * blocks && failed == 0 && violations == 0 && tube <= 1e-6 &&
             secs < 900.0;
    o.summary = std::to_string(runs) + " runs x " + std::to_string(blocks) + " blocks: " + std::to_string(solves) +
                " solves, " + std::to_string(failed) + " infeasible, " + std::to_string(violations) +
                " constraint violations, max tube violation " + fmt(tube) + ", " + fmt(secs) + " s";
    o.details = {{"runs", runs},       {"blocks", blocks},         {"solves", solves}, {"failed_solves", failed},
                 {"violations", violations}, {"max_tube_violation", tube}, {"seconds", secs}};
    return o;
}

// ---------------------------------------------------------------------------
// 6. Identification soundness.

Outcome criterion_6()
{
    Experiment& e = experiment();
    const GroundTruthModel& gt = e.models.plant;
    const MultiStepModel& m = e.models.proposed;
    const int p = m.p(), nx = m.nx();
    int outside = 0;
    double worst_box = -1e300;
    for (const auto& row : m.rows()) {
        const Vector d = true_row_parameters(gt, row.steps, row.state) - row.theta_hat;
        const double excess = ((d - row.residual.center).cwiseAbs() - row.residual.radius).maxCoeff();
        worst_box = std::max(worst_box, excess);
        if (excess > 0.0) ++outside;
    }
    // Fresh data from an independent stream; the prediction bound tau_hat of
    // each row is the observed bound on the training regressors plus the noise level.
    std::mt19937_64 rng(e.cfg.dataset.seed + 1000003);
    const Dataset fresh = generate_dataset(
        gt, 1000 + p - 1, Box::symmetric(Vector::Constant(gt.nu(), e.cfg.dataset.input_bound)), rng);
    double worst_ratio = 0.0, worst_excess = -1e300;
    int exceed = 0;
    for (int j = 1; j <= p; ++j) {
        const Box lumped = lumped_disturbance_box(gt, j);
        for (int i = 0; i < nx; ++i) {
            const PredictorRow& row = m.row(j, i);
            const Box box(row.theta_hat + row.residual.center, row.residual.radius);
            const double noise = std::abs(lumped.center(i)) + lumped.radius(i);
            const auto train = build_regressors(e.models.dataset, j, i, false);
            const double tau_hat = observed_prediction_bound(train, box, row.theta_hat) + noise;
            const auto test = build_regressors(fresh, j, i, false);
            double worst = 0.0;
            for (const auto& r : test) worst = std::max(worst, std::abs(r.target - row.theta_hat.dot(r.psi)));
            worst_excess = std::max(worst_excess, worst - tau_hat);
            worst_ratio = std::max(worst_ratio, worst / tau_hat);
            if (worst > tau_hat + 1e-7) ++exceed;
        }
    }
    Outcome o;
    o.pass = outside == 0 && exceed == 0;
    o.summary = "true parameters outside their box: " + std::to_string(outside) + " of " +
                std::to_string(m.num_rows()) + " rows (max excess " + fmt(worst_box) + "); held-out residual above tau_hat: " +
                std::to_string(exceed) + " rows (max residual/tau_hat " + fmt(worst_ratio) + ")";
    o.details = {{"rows", m.num_rows()},           {"rows_outside_box", outside}, {"max_box_excess", worst_box},
                 {"rows_exceeding_tau", exceed},   {"max_residual_over_tau", worst_ratio},
                 {"max_residual_minus_tau", worst_excess}, {"fresh_samples", 1000}};
    return o;
}

// ---------------------------------------------------------------------------
// 7. The p = 1 instance against the one-step baseline.

std::vector<int> projection_indices(const QpIndex& ix)
{
    std::vector<int> out;
    for (int l = 0; l <= ix.N; ++l)
        for (int i = 0; i < ix.nx; ++i) out.push_back(ix.z(l) + i);
    for (int l = 0; l <= ix.N; ++l) out.push_back(ix.alpha(l));
    for (int l = 0; l < ix.N; ++l)
        for (int i = 0; i < ix.nu * ix.p; ++i) out.push_back(ix.V(l) + i);
    return out;
}

QpSettings tight_lp()
{
    QpSettings s;
    s.feas_tol = 1e-10;
    s.gap_tol = 1e-11;
    s.max_iter = 200;
    return s;
}

// max d'xi over the projection of the feasible set; returns the maximiser's projection.
std::optional<std::pair<double, Vector>> support(const QPSpec& spec, const std::vector<int>& idx, const Vector& d)
{
    QpProblem lp;
    const int n = spec.num_vars();
    lp.P = SparseMatrix(n, n);
    lp.q = Vector::Zero(n);
    for (std::size_t k = 0; k < idx.size(); ++k) lp.q(idx[k]) = -d(static_cast<Eigen::Index>(k));
    lp.A = spec.qp.A;
    lp.b = spec.qp.b;
    lp.G = spec.qp.G;
    lp.h = spec.qp.h;
    const QpResult r = solve_qp(lp, tight_lp());
    if (r.status != QpStatus::Optimal) return std::nullopt;
    Vector xi(static_cast<Eigen::Index>(idx.size()));
    for (std::size_t k = 0; k < idx.size(); ++k) xi(static_cast<Eigen::Index>(k)) = r.x(idx[k]);
    return std::make_pair(-r.objective, xi);
}

// Is some point of the feasible set within tol of xi on the projected coordinates?
bool contains(const QPSpec& spec, const std::vector<int>& idx, const Vector& xi, double tol)
{
    const int n = spec.num_vars();
    const int m = static_cast<int>(idx.size());
    QpProblem lp;
    lp.P = SparseMatrix(n, n);
    lp.q = Vector::Zero(n);
    lp.A = spec.qp.A;
    lp.b = spec.qp.b;
    std::vector<Eigen::Triplet<double>> t;
    for (int k = 0; k < spec.qp.G.outerSize(); ++k)
        for (SparseMatrix::InnerIterator it(spec.qp.G, k); it; ++it) t.emplace_back(it.row(), it.col(), it.value());
    const int g = static_cast<int>(spec.qp.G.rows());
    for (int k = 0; k < m; ++k) {
        t.emplace_back(g + 2 * k, idx[k], 1.0);
        t.emplace_back(g + 2 * k + 1, idx[k], -1.0);
    }
    lp.G.resize(g + 2 * m, n);
    lp.G.setFromTriplets(t.begin(), t.end());
    lp.h.resize(g + 2 * m);
    lp.h.head(g) = spec.qp.h;
    for (int k = 0; k < m; ++k) {
        lp.h(g + 2 * k) = xi(k) + tol;
        lp.h(g + 2 * k + 1) = -xi(k) + tol;
    }
    return solve_qp(lp, tight_lp()).status == QpStatus::Optimal;
}

Outcome criterion_7()
{
    std::mt19937_64 rng(777);
    std::uniform_real_distribution<double> U(0.0, 1.0);
    const int instances = 20, directions = 8;
    int done = 0, attempts = 0, support_mismatch = 0, containment_failures = 0, lp_failures = 0;
    double worst_gap = 0.0;
    while (done < instances && attempts < 200) {
        ++attempts;
        GroundTruthModel gt = fixture::small_plant(0.005 + 0.02 * U(rng));
        gt.A = randn(2, 2, rng, 0.4);
        const double sr = spectral_radius(gt.A);
        if (sr > 0.9) gt.A *= 0.9 / sr;
        gt.B = randn(2, 1, rng);
        const MultiStepModel m = fixture::uncertain_model(gt, 1, 0.01 + 0.04 * U(rng), 0.001);
        const ConstraintSets sets = fixture::small_sets(2.0 + 3.0 * U(rng), 1.0 + 2.0 * U(rng));
        ControllerDesign d;
        try {
            d = design_controller(m, sets, fixture::unit_weights(), DesignSettings{});
        } catch (const Error&) {
            continue;
        }
        MpcConfig cfg;
        cfg.horizon = 2 + static_cast<int>(U(rng) * 4.0);
        cfg.cost = CostMode::Quadratic;
        cfg.terminal = d.has_terminal_set;
        const Vector x = sample_uniform(Box::symmetric(Vector::Constant(2, 0.5)), rng);
        cfg.lambda = LambdaMode::ClosedForm;
        const QPSpec a = build_qp(x, m, d, cfg);
        MpcConfig cb = cfg;
        cb.lambda = LambdaMode::Explicit;
        const QPSpec b = OneStepHomothetic(m, d, cb).build(x);
        const auto ia = projection_indices(a.index), ib = projection_indices(b.index);
        if (ia.size() != ib.size()) {
            ++containment_failures;
            ++done;
            continue;
        }
        bool any_lp = false;
        for (int k = 0; k < directions; ++k) {
            const Vector dir = randn(static_cast<int>(ia.size()), 1, rng);
            const auto sa = support(a, ia, dir);
            const auto sb = support(b, ib, dir);
            if (!sa || !sb) {
                any_lp = true;
                continue;
            }
            const double gap = std::abs(sa->first - sb->first) / (1.0 + std::abs(sa->first));
            worst_gap = std::max(worst_gap, gap);
            if (gap > 1e-7) ++support_mismatch;
            if (!contains(b, ib, sa->second, 1e-7) || !contains(a, ia, sb->second, 1e-7)) ++containment_failures;
        }
        if (any_lp) ++lp_failures;
        ++done;
    }
    Outcome o;
    o.pass = done == instances && support_mismatch == 0 && containment_failures == 0 && lp_failures == 0;
    o.summary = std::to_string(done) + " instances x " + std::to_string(directions) +
                " directions: max support gap " + fmt(worst_gap) + ", " + std::to_string(support_mismatch) +
                " support mismatches, " + std::to_string(containment_failures) + " containment failures, " +
                std::to_string(lp_failures) + " LP failures";
    o.details = {{"instances", done},
                 {"attempts", attempts},
                 {"directions", directions},
                 {"max_relative_support_gap", worst_gap},
                 {"support_mismatches", support_mismatch},
                 {"containment_failures", containment_failures},
                 {"lp_failures", lp_failures}};
    return o;
}

// ---------------------------------------------------------------------------
// 8. Exact model without disturbances: all controllers coincide.

Outcome criterion_8()
{
    ExperimentConfig cfg = load_config(kConfig);
    cfg.plant.w_bound = 0.0;
    cfg.identify.exact = true;
    const ModelArtifacts models = run_identify(cfg);
    const ConstraintSets sets = cfg.sets();
    const ControllerDesign dp = design_controller(models.proposed, sets, cfg.weights, DesignSettings{});
    DesignSettings uncert;
    uncert.certify = false;
    const ControllerDesign d1 = design_controller(models.one_step, sets, cfg.weights, uncert);
    const int p = models.proposed.p();
    const int N = cfg.mpc.horizon;

    MpcConfig mc = cfg.mpc;
    mc.cost = CostMode::Quadratic;
    mc.terminal = false;
    mc.terminal_weight = dp.P;
    MpcConfig m1 = mc;
    m1.horizon = N * p;
    const OneStepHomothetic one(models.one_step, d1, m1);
    const ConstraintSets s = sets;
    const TauTable tau = worst_case_tau(models.proposed, TauMode::WorstCase, &s, nullptr);
    const RigidTubeController rigid(models.proposed, dp, tau, mc);

    std::mt19937_64 rng(88);
    const Box draw(Vector::Constant(3, 0.0), (Vector(3) << 2.0, 2.0, 0.5).finished());
    double worst = 0.0;
    int failures = 0;
    for (int t = 0; t < 10; ++t) {
        const Vector x = sample_uniform(draw, rng);
        SolveOptions opt;
        opt.throw_on_failure = false;
        const MPCSolution a = solve_step(build_qp(x, models.proposed, dp, mc), opt);
        const MPCSolution b = one.solve(x, opt);
        const RigidSolution c = rigid.solve(x, opt);
        if (a.status != MpcStatus::Optimal || b.status != MpcStatus::Optimal || c.status != MpcStatus::Optimal) {
            ++failures;
            continue;
        }
        // Whole predicted input sequences over the common 50-step horizon.
        Vector ua(N * p), ub(N * p), uc(N * p);
        for (int l = 0; l < N; ++l) {
            ua.segment(l * p, p) = a.nominal.U[l];
            uc.segment(l * p, p) = c.v[l];
        }
        for (int k = 0; k < N * p; ++k) ub(k) = b.nominal.U[k](0);
        worst = std::max({worst, (ua - ub).cwiseAbs().maxCoeff(), (ua - uc).cwiseAbs().maxCoeff(),
                          (a.U - c.U).cwiseAbs().maxCoeff(), (a.U - ub.head(p)).cwiseAbs().maxCoeff()});
    }
    Outcome o;
    o.pass = failures == 0 && worst <= 1e-6;
    o.summary = "10 initial states: " + std::to_string(failures) + " solver failures, max input difference " +
                fmt(worst) + " (rigid cross-section radius " + fmt(rigid.config().rpi_box.radius.maxCoeff()) + ")";
    o.details = {{"failures", failures}, {"max_input_difference", worst}};
    return o;
}

}  // namespace

int main(int argc, char** argv)
{
    std::set<int> selected;
    std::string json_path;
    for (int i = 1; i < argc; ++i) {
        const std::string a = argv[i];
        if (a == "--json" && i + 1 < argc) {
            json_path = argv[++i];
        } else {
            selected.insert(std::stoi(a));
        }
    }
    const std::vector<std::pair<int, std::function<Outcome()>>> criteria{
        {1, criterion_1}, {2, criterion_2}, {3, criterion_3}, {4, criterion_4},
        {5, criterion_5}, {6, criterion_6}, {7, criterion_7}, {8, criterion_8}};
    Json all;
    bool ok = true;
    for (const auto& [n, run] : criteria) {
        if (!selected.empty() && !selected.count(n)) continue;
        Outcome o;
        try {
            o = run();
        } catch (const std::exception& e) {
            o.pass = false;
            o.summary = std::string("exception: ") + e.what();
        }
        ok = ok && o.pass;
        std::cout << "criterion " << n << ": " << (o.pass ? "PASS" : "FAIL") << " - " << o.summary << std::endl;
        all[std::to_string(n)] = {{"pass", o.pass}, {"summary", o.summary}, {"details", o.details}};
    }
    if (!json_path.empty()) {
        std::ofstream(json_path) << all.dump(2) << '\n';
    }
    return ok ? 0 : 1;
}
