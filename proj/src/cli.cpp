#include <tubempc/cli.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <random>
#include <sstream>

namespace tubempc {

namespace {

[[noreturn]] void config_error(const std::string& key, const std::string& what)
{
    throw Error(ErrorCode::ConfigError, key + ": " + what);
}

// Numbers may be given as JSON numbers or as decimal strings.
double number(const Json& j, const std::string& key)
{
    if (j.is_number()) {
        return j.get<double>();
    }
    if (j.is_string()) {
        const std::string s = j.get<std::string>();
        std::size_t used = 0;
        double v = 0.0;
        try {
            v = std::stod(s, &used);
        } catch (const std::exception&) {
            config_error(key, "'" + s + "' is not a number");
        }
        if (used != s.size()) {
            config_error(key, "'" + s + "' is not a number");
        }
        return v;
    }
    config_error(key, "expected a number");
}

Vector vector_of(const Json& j, const std::string& key)
{
    if (!j.is_array()) {
        config_error(key, "expected an array");
    }
    Vector v(static_cast<Eigen::Index>(j.size()));
    for (std::size_t i = 0; i < j.size(); ++i) {
        v(static_cast<Eigen::Index>(i)) = number(j[i], key);
    }
    return v;
}

Matrix matrix_of(const Json& j, const std::string& key)
{
    if (!j.is_array() || j.empty() || !j[0].is_array()) {
        config_error(key, "expected an array of rows");
    }
    const auto rows = static_cast<Eigen::Index>(j.size());
    const auto cols = static_cast<Eigen::Index>(j[0].size());
    Matrix m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r) {
        if (static_cast<Eigen::Index>(j[r].size()) != cols) {
            config_error(key, "ragged matrix");
        }
        for (Eigen::Index c = 0; c < cols; ++c) {
            m(r, c) = number(j[r][c], key);
        }
    }
    return m;
}

Json vec_json(const Vector& v) { return Json(std::vector<double>(v.data(), v.data() + v.size())); }

Json mat_json(const Matrix& m)
{
    Json rows = Json::array();
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        rows.push_back(vec_json(m.row(r).transpose()));
    }
    return rows;
}

Matrix mat_from(const Json& j, Eigen::Index rows, Eigen::Index cols)
{
    Matrix m(rows, cols);
    if (static_cast<Eigen::Index>(j.size()) != rows) {
        throw Error(ErrorCode::MissingArtifact, "matrix has the wrong number of rows");
    }
    for (Eigen::Index r = 0; r < rows; ++r) {
        for (Eigen::Index c = 0; c < cols; ++c) {
            m(r, c) = j.at(r).at(c).get<double>();
        }
    }
    return m;
}

Vector vec_from(const Json& j)
{
    const auto v = j.get<std::vector<double>>();
    return Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size()));
}

Json box_json(const Box& b) { return Json{{"center", vec_json(b.center)}, {"radius", vec_json(b.radius)}}; }
Box box_from(const Json& j) { return Box(vec_from(j.at("center")), vec_from(j.at("radius"))); }

template <class F>
auto with_key(const std::string& key, F&& f)
{
    try {
        return f();
    } catch (const Json::exception& e) {
        config_error(key, e.what());
    }
}

}  // namespace

// ---------------------------------------------------------------------------

GroundTruthModel PlantConfig::build() const
{
    GroundTruthModel gt;
    if (A.size() > 0) {
        std::tie(gt.A, gt.B) = zoh(A, B, Ts);
        gt.Ts = Ts;
    } else {
        gt = discretize_zoh(den, gain, Ts);
    }
    gt.M = M.size() > 0 ? M : Matrix::Zero(gt.nx(), 1);
    gt.W = Box::symmetric(Vector::Constant(gt.M.cols(), w_bound));
    gt.validate();
    return gt;
}

bool ExperimentConfig::runs_controller(const std::string& name) const
{
    return std::find(controllers.begin(), controllers.end(), name) != controllers.end();
}

ExperimentConfig parse_config(const Json& j)
{
    ExperimentConfig c;
    if (!j.is_object()) {
        config_error("<root>", "expected an object");
    }
    auto section = [&](const char* name) -> const Json& {
        if (!j.contains(name) || !j.at(name).is_object()) {
            config_error(name, "missing section");
        }
        return j.at(name);
    };
    auto opt = [](const Json& s, const char* k) { return s.contains(k) ? &s.at(k) : nullptr; };

    const Json& plant = section("plant");
    if (const Json* a = opt(plant, "A")) {
        c.plant.A = matrix_of(*a, "plant.A");
        if (!plant.contains("B")) config_error("plant.B", "required with plant.A");
        c.plant.B = matrix_of(plant.at("B"), "plant.B");
    } else {
        if (!plant.contains("den")) config_error("plant.den", "give den/gain or A/B");
        const Vector den = vector_of(plant.at("den"), "plant.den");
        c.plant.den.assign(den.data(), den.data() + den.size());
        c.plant.gain = plant.contains("gain") ? number(plant.at("gain"), "plant.gain") : 1.0;
    }
    c.plant.Ts = number(plant.value("Ts", Json(0.1)), "plant.Ts");
    if (const Json* m = opt(plant, "M")) {
        const Vector mv = vector_of(*m, "plant.M");
        c.plant.M = mv;
    }
    c.plant.w_bound = plant.contains("w_bound") ? number(plant.at("w_bound"), "plant.w_bound") : 0.0;
    if (c.plant.Ts <= 0.0) config_error("plant.Ts", "must be positive");
    if (c.plant.w_bound < 0.0) config_error("plant.w_bound", "must be nonnegative");

    if (const Json* d = opt(j, "dataset")) {
        c.dataset.samples = with_key("dataset.samples", [&] { return d->value("samples", 2000); });
        c.dataset.input_bound = number(d->value("input_bound", Json(1.0)), "dataset.input_bound");
        c.dataset.seed = with_key("dataset.seed", [&] { return d->value("seed", std::uint64_t{1}); });
    }
    if (const Json* id = opt(j, "identify")) {
        c.identify.p = with_key("identify.p", [&] { return id->value("p", 10); });
        c.identify.bound = parse_fps_bound(with_key("identify.fps_bound", [&] { return id->value("fps_bound", std::string("known")); }));
        c.identify.scale = number(id->value("scale", Json(1.1)), "identify.scale");
        c.identify.exact = with_key("identify.exact", [&] { return id->value("exact", false); });
    }
    if (c.identify.p < 1) config_error("identify.p", "must be >= 1");
    if (c.dataset.samples < 1) config_error("dataset.samples", "must be positive");

    const Json& cons = section("constraints");
    for (const char* k : {"x_lo", "x_hi", "u_lo", "u_hi"}) {
        if (!cons.contains(k)) config_error(std::string("constraints.") + k, "missing");
    }
    c.x_lo = vector_of(cons.at("x_lo"), "constraints.x_lo");
    c.x_hi = vector_of(cons.at("x_hi"), "constraints.x_hi");
    c.u_lo = vector_of(cons.at("u_lo"), "constraints.u_lo");
    c.u_hi = vector_of(cons.at("u_hi"), "constraints.u_hi");

    const GroundTruthModel gt = [&] {
        try {
            return c.plant.build();
        } catch (const Error& e) {
            config_error("plant", e.what());
        }
    }();
    const int nx = gt.nx(), nu = gt.nu();
    if (c.x_lo.size() != nx || c.x_hi.size() != nx) config_error("constraints.x_lo/x_hi", "need " + std::to_string(nx) + " entries");
    if (c.u_lo.size() != nu || c.u_hi.size() != nu) config_error("constraints.u_lo/u_hi", "need " + std::to_string(nu) + " entries");
    if (((c.x_lo.array() >= 0.0) || (c.x_hi.array() <= 0.0)).any()) config_error("constraints", "state box must contain 0 in its interior");
    if (((c.u_lo.array() >= 0.0) || (c.u_hi.array() <= 0.0)).any()) config_error("constraints", "input box must contain 0 in its interior");

    c.weights.q = Vector::Ones(nx);
    c.weights.R = Matrix::Identity(nu, nu);
    if (const Json* w = opt(j, "weights")) {
        if (w->contains("q")) c.weights.q = vector_of(w->at("q"), "weights.q");
        if (w->contains("R")) c.weights.R = matrix_of(w->at("R"), "weights.R");
    }
    try {
        c.weights.validate(nx, nu);
    } catch (const Error& e) {
        config_error("weights", e.what());
    }

    c.x0 = Vector::Zero(nx);
    if (const Json* m = opt(j, "mpc")) {
        c.mpc.horizon = with_key("mpc.horizon", [&] { return m->value("horizon", 5); });
        c.mpc.cost = parse_cost_mode(with_key("mpc.cost", [&] { return m->value("cost", std::string("quadratic")); }));
        c.mpc.lambda = parse_lambda_mode(with_key("mpc.lambda", [&] { return m->value("lambda", std::string("closed_form")); }));
        c.mpc.terminal = with_key("mpc.terminal", [&] { return m->value("terminal", true); });
        c.mpc.alpha_weight = number(m->value("alpha_weight", Json(1e-3)), "mpc.alpha_weight");
        if (m->contains("c")) c.mpc.c = vector_of(m->at("c"), "mpc.c");
        if (m->contains("x0")) c.x0 = vector_of(m->at("x0"), "mpc.x0");
    }
    if (c.mpc.horizon < 1) config_error("mpc.horizon", "must be >= 1");
    if (c.mpc.cost == CostMode::Linear && c.mpc.c.size() != nx) config_error("mpc.c", "linear cost needs c with " + std::to_string(nx) + " entries");
    if (c.x0.size() != nx) config_error("mpc.x0", "wrong dimension");

    if (const Json* b = opt(j, "baselines")) {
        c.one_step_horizon = with_key("baselines.one_step_horizon", [&] { return b->value("one_step_horizon", 50); });
        c.tau_mode = parse_tau_mode(with_key("baselines.tau_mode", [&] { return b->value("tau_mode", std::string("worstcase")); }));
        if (b->contains("controllers")) {
            c.controllers = with_key("baselines.controllers", [&] { return b->at("controllers").get<std::vector<std::string>>(); });
        }
    }
    for (const auto& name : c.controllers) {
        if (name != "proposed" && name != "rigid" && name != "homothetic") {
            config_error("baselines.controllers", "unknown controller '" + name + "'");
        }
    }
    if (c.one_step_horizon < 1) config_error("baselines.one_step_horizon", "must be >= 1");

    c.simulate.x0_radius = Vector::Zero(nx);
    if (const Json* s = opt(j, "simulate")) {
        c.simulate.runs = with_key("simulate.runs", [&] { return s->value("runs", 100); });
        c.simulate.blocks = with_key("simulate.blocks", [&] { return s->value("blocks", 30); });
        c.simulate.seed = with_key("simulate.seed", [&] { return s->value("seed", std::uint64_t{7}); });
        c.simulate.cost = parse_cost_mode(with_key("simulate.cost", [&] { return s->value("cost", std::string("quadratic")); }));
        c.simulate.terminal = with_key("simulate.terminal", [&] { return s->value("terminal", true); });
        c.simulate.warm_start = with_key("simulate.warm_start", [&] { return s->value("warm_start", true); });
        if (s->contains("x0_radius")) c.simulate.x0_radius = vector_of(s->at("x0_radius"), "simulate.x0_radius");
    }
    if (c.simulate.x0_radius.size() != nx || (c.simulate.x0_radius.array() < 0.0).any()) {
        config_error("simulate.x0_radius", "need " + std::to_string(nx) + " nonnegative entries");
    }
    if (c.simulate.runs < 0 || c.simulate.blocks < 1) config_error("simulate", "runs >= 0 and blocks >= 1 required");
    if (c.simulate.cost == CostMode::Linear && c.mpc.c.size() != nx) config_error("simulate.cost", "linear cost needs mpc.c");
    return c;
}

ExperimentConfig load_config(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in) {
        throw Error(ErrorCode::ConfigError, "cannot open " + path.string());
    }
    Json j;
    try {
        j = Json::parse(in);
    } catch (const Json::parse_error& e) {
        throw Error(ErrorCode::ConfigError, path.string() + ": " + e.what());
    }
    return parse_config(j);
}

// ---------------------------------------------------------------------------

Json to_json(const MultiStepModel& m)
{
    Json rows = Json::array();
    for (const auto& r : m.rows()) {
        rows.push_back({{"state", r.state},
                        {"steps", r.steps},
                        {"theta_hat", vec_json(r.theta_hat)},
                        {"residual", box_json(r.residual)}});
    }
    return Json{{"p", m.p()}, {"nx", m.nx()}, {"nu", m.nu()}, {"rows", rows}, {"Wx", box_json(m.Wx())},
                {"Wy", box_json(m.Wy())}};
}

MultiStepModel model_from_json(const Json& j)
{
    try {
        std::vector<PredictorRow> rows;
        for (const auto& r : j.at("rows")) {
            PredictorRow row;
            row.state = r.at("state").get<int>();
            row.steps = r.at("steps").get<int>();
            row.theta_hat = vec_from(r.at("theta_hat"));
            row.residual = box_from(r.at("residual"));
            rows.push_back(std::move(row));
        }
        return MultiStepModel(j.at("p").get<int>(), j.at("nx").get<int>(), j.at("nu").get<int>(), std::move(rows),
                              box_from(j.at("Wx")), box_from(j.at("Wy")));
    } catch (const Json::exception& e) {
        throw Error(ErrorCode::MissingArtifact, std::string("malformed model: ") + e.what());
    }
}

Json to_json(const ControllerDesign& d)
{
    return Json{{"p", d.p},
                {"K", mat_json(d.K)},
                {"P", mat_json(d.P)},
                {"V", mat_json(d.V)},
                {"eta", d.eta},
                {"q", vec_json(d.weights.q)},
                {"R", mat_json(d.weights.R)},
                {"F", mat_json(d.sets.F)},
                {"G", mat_json(d.sets.G)},
                {"rho", d.rho},
                {"robust_rho", d.robust_rho},
                {"margin", std::isfinite(d.margin) ? Json(d.margin) : Json(nullptr)},
                {"used_fallback", d.used_fallback},
                {"certified", d.certified},
                {"has_terminal_set", d.has_terminal_set},
                {"hash", d.hash()}};
}

ControllerDesign design_from_json(const Json& j, const MultiStepModel& model)
{
    ControllerDesign d;
    try {
        d.p = j.at("p").get<int>();
        const int nx = model.nx(), nup = model.nu() * model.p();
        require_dims(d.p == model.p(), "design and model disagree on p");
        d.K = mat_from(j.at("K"), nup, nx);
        d.P = mat_from(j.at("P"), nx, nx);
        d.V = mat_from(j.at("V"), nx, nx);
        d.eta = j.at("eta").get<double>();
        d.weights.q = vec_from(j.at("q"));
        d.weights.R = mat_from(j.at("R"), model.nu(), model.nu());
        const auto& F = j.at("F");
        const auto& G = j.at("G");
        d.sets.F = mat_from(F, static_cast<Eigen::Index>(F.size()), nx);
        d.sets.G = mat_from(G, static_cast<Eigen::Index>(G.size()), model.nu());
        d.rho = j.at("rho").get<double>();
        d.robust_rho = j.at("robust_rho").get<double>();
        d.margin = j.at("margin").is_null() ? std::numeric_limits<double>::quiet_NaN() : j.at("margin").get<double>();
        d.used_fallback = j.at("used_fallback").get<bool>();
        d.certified = j.at("certified").get<bool>();
        d.has_terminal_set = j.at("has_terminal_set").get<bool>();
        const LowComplexityPolytope X0(d.V);
        d.tight = precompute_tightenings(d.sets, X0, d.K, model.Wx(), model.Wy(), model.p());
        if (d.hash() != j.at("hash").get<std::string>()) {
            throw Error(ErrorCode::UnverifiedDesign, "design hash does not match its contents or the model");
        }
    } catch (const Json::exception& e) {
        throw Error(ErrorCode::MissingArtifact, std::string("malformed design: ") + e.what());
    }
    return d;
}

void write_dataset_csv(const Dataset& ds, std::ostream& os)
{
    os << "k";
    for (int i = 0; i < ds.nx(); ++i) os << ",x" << i + 1;
    for (int i = 0; i < ds.nu(); ++i) os << ",u" << i + 1;
    os << '\n' << std::setprecision(17);
    for (int k = 0; k <= ds.size(); ++k) {
        os << k;
        for (int i = 0; i < ds.nx(); ++i) os << ',' << ds.x[k](i);
        for (int i = 0; i < ds.nu(); ++i) {
            os << ',';
            if (k < ds.size()) os << ds.u[k](i);
        }
        os << '\n';
    }
}

Dataset read_dataset_csv(std::istream& is)
{
    std::string line;
    if (!std::getline(is, line)) {
        throw Error(ErrorCode::MissingArtifact, "empty dataset");
    }
    int nx = 0, nu = 0;
    {
        std::istringstream hs(line);
        std::string col;
        while (std::getline(hs, col, ',')) {
            if (!col.empty() && col[0] == 'x') ++nx;
            if (!col.empty() && col[0] == 'u') ++nu;
        }
    }
    Dataset ds;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string cell;
        std::getline(ls, cell, ',');
        Vector x(nx), u(nu);
        for (int i = 0; i < nx; ++i) {
            if (!std::getline(ls, cell, ',')) throw Error(ErrorCode::MissingArtifact, "short dataset row");
            x(i) = std::stod(cell);
        }
        ds.x.push_back(x);
        bool has_u = true;
        for (int i = 0; i < nu; ++i) {
            if (!std::getline(ls, cell, ',') || cell.empty()) {
                has_u = false;
                break;
            }
            u(i) = std::stod(cell);
        }
        if (has_u) ds.u.push_back(u);
    }
    if (ds.x.size() != ds.u.size() + 1) {
        throw Error(ErrorCode::MissingArtifact, "dataset needs one more state than inputs");
    }
    return ds;
}

ModelArtifacts run_identify(const ExperimentConfig& cfg)
{
    ModelArtifacts out;
    out.plant = cfg.plant.build();
    const int p = cfg.identify.p;
    if (cfg.identify.exact) {
        const auto [Wx, Wy] = lumped_disturbance_boxes(out.plant, p);
        const auto [Wx1, Wy1] = lumped_disturbance_boxes(out.plant, 1);
        out.proposed = MultiStepModel::from_lifted(out.plant, p, Wx, Wy);
        out.one_step = MultiStepModel::from_lifted(out.plant, 1, Wx1, Wy1);
        return out;
    }
    std::mt19937_64 rng(cfg.dataset.seed);
    out.dataset = generate_dataset(out.plant, cfg.dataset.samples,
                                   Box::symmetric(Vector::Constant(out.plant.nu(), cfg.dataset.input_bound)), rng);
    IdentifySettings s;
    s.bound = cfg.identify.bound;
    s.scale = cfg.identify.scale;
    s.p = p;
    out.proposed = identify_model(out.dataset, s, &out.plant).model;
    s.p = 1;
    out.one_step = p == 1 ? out.proposed : identify_model(out.dataset, s, &out.plant).model;
    return out;
}

DesignArtifacts run_design(const ExperimentConfig& cfg, const ModelArtifacts& models)
{
    DesignArtifacts out;
    const ConstraintSets sets = cfg.sets();
    out.proposed = design_controller(models.proposed, sets, cfg.weights, DesignSettings{});
    // The one-step baseline uses the nominal LQR pair; a diagonal robust
    // certificate need not exist for p = 1.
    DesignSettings one;
    one.certify = false;
    out.one_step = design_controller(models.one_step, sets, cfg.weights, one);
    return out;
}

// ---------------------------------------------------------------------------

namespace {

class HomotheticLoop : public ClosedLoopController {
public:
    HomotheticLoop(std::string name, const MultiStepModel& model, const ControllerDesign& design,
                   const MpcConfig& cfg, bool warm)
        : name_(std::move(name)), model_(model), design_(design), cfg_(cfg), warm_(warm)
    {
    }
    std::string name() const override { return name_; }
    int block_length() const override { return model_.p(); }
    void reset() override { previous_.reset(); }

    BlockDecision decide(const Vector& x) override
    {
        const QPSpec spec = build_qp(x, model_, design_, cfg_);
        SolveOptions opts;
        opts.throw_on_failure = false;
        if (warm_ && previous_) {
            opts.warm_start = shifted_warm_start(spec, *previous_, model_);
        }
        MPCSolution sol = solve_step(spec, opts);
        BlockDecision d;
        d.status = sol.status;
        if (sol.status != MpcStatus::Optimal) {
            previous_.reset();
            return d;
        }
        d.U = sol.U;
        d.objective = sol.objective;
        d.alpha = sol.tube.alpha;
        auto shared = std::make_shared<MPCSolution>(std::move(sol));
        const Matrix V = design_.V;
        d.next_violation = [shared, V](const Vector& xn) { return tube_violation(*shared, V, 1, xn); };
        previous_ = std::move(shared);
        return d;
    }

private:
    std::string name_;
    MultiStepModel model_;
    ControllerDesign design_;
    MpcConfig cfg_;
    bool warm_;
    std::shared_ptr<MPCSolution> previous_;
};

class RigidLoop : public ClosedLoopController {
public:
    RigidLoop(const MultiStepModel& model, const ControllerDesign& design, const TauTable& tau,
              const MpcConfig& cfg)
        : rigid_(model, design, tau, cfg), p_(model.p())
    {
    }
    std::string name() const override { return "rigid"; }
    int block_length() const override { return p_; }

    BlockDecision decide(const Vector& x) override
    {
        SolveOptions opts;
        opts.throw_on_failure = false;
        const RigidSolution sol = rigid_.solve(x, opts);
        BlockDecision d;
        d.status = sol.status;
        if (sol.status != MpcStatus::Optimal) {
            return d;
        }
        d.U = sol.U;
        d.objective = sol.objective;
        d.alpha.assign(sol.z.size(), 1.0);
        const Vector z1 = sol.z[1];
        const Box S = rigid_.config().rpi_box;
        d.next_violation = [z1, S](const Vector& xn) {
            const Vector e = xn - z1 - S.center;
            return std::max(0.0, (e.cwiseAbs() - S.radius).maxCoeff());
        };
        return d;
    }

private:
    RigidTubeController rigid_;
    int p_;
};

}  // namespace

std::unique_ptr<ClosedLoopController> make_homothetic_loop(std::string name, const MultiStepModel& model,
                                                           const ControllerDesign& design, const MpcConfig& cfg,
                                                           bool warm_start)
{
    return std::make_unique<HomotheticLoop>(std::move(name), model, design, cfg, warm_start);
}

std::unique_ptr<ClosedLoopController> make_rigid_loop(const MultiStepModel& model, const ControllerDesign& design,
                                                      const TauTable& tau, const MpcConfig& cfg)
{
    return std::make_unique<RigidLoop>(model, design, tau, cfg);
}

SimulationTrace simulate_closed_loop(ClosedLoopController& ctrl, const GroundTruthModel& plant,
                                     const ConstraintSets& sets, const Vector& x0, const std::vector<Vector>& w,
                                     int run, double tol)
{
    SimulationTrace tr;
    tr.controller = ctrl.name();
    ctrl.reset();
    const int steps = static_cast<int>(w.size());
    const int nu = plant.nu();
    Vector x = x0;
    std::function<double(const Vector&)> pending;
    auto outside_x = [&](const Vector& v) { return (sets.F * v).maxCoeff() > 1.0 + tol; };
    int k = 0;
    for (int j = 0; k < steps; ++j) {
        double tube = 0.0;
        if (pending) {
            tube = pending(x);
            tr.max_tube_violation = std::max(tr.max_tube_violation, tube);
        }
        const auto t0 = std::chrono::steady_clock::now();
        const BlockDecision d = ctrl.decide(x);
        const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        ++tr.solves;
        if (d.status != MpcStatus::Optimal) {
            ++tr.failed_solves;
            StepRecord rec;
            rec.run = run;
            rec.k = k;
            rec.j = j;
            rec.x = x;
            rec.u = Vector::Constant(nu, std::numeric_limits<double>::quiet_NaN());
            rec.w = w[k];
            rec.status = to_string(d.status);
            rec.wall_time = wall;
            rec.tube_violation = tube;
            rec.violation = outside_x(x);
            tr.constraint_violations += rec.violation ? 1 : 0;
            tr.steps.push_back(std::move(rec));
            return tr;
        }
        for (int i = 0; i < ctrl.block_length() && k < steps; ++i, ++k) {
            StepRecord rec;
            rec.run = run;
            rec.k = k;
            rec.j = j;
            rec.x = x;
            rec.u = d.U.segment(i * nu, nu);
            rec.w = w[k];
            rec.status = to_string(d.status);
            rec.objective = d.objective;
            if (i == 0) {
                rec.alpha = d.alpha;
                rec.wall_time = wall;
                rec.tube_violation = tube;
            }
            rec.violation = outside_x(x) || (sets.G * rec.u).maxCoeff() > 1.0 + tol;
            tr.constraint_violations += rec.violation ? 1 : 0;
            x = plant.A * x + plant.B * rec.u + plant.M * rec.w;
            tr.steps.push_back(std::move(rec));
        }
        pending = d.next_violation;
    }
    // The final state closes the last block.
    if (pending) {
        tr.max_tube_violation = std::max(tr.max_tube_violation, pending(x));
    }
    if (outside_x(x)) {
        ++tr.constraint_violations;
    }
    return tr;
}

RunDraw draw_run(const ExperimentConfig& cfg, const GroundTruthModel& plant, int run, int steps)
{
    std::seed_seq seq{static_cast<std::uint32_t>(cfg.simulate.seed), static_cast<std::uint32_t>(cfg.simulate.seed >> 32),
                      static_cast<std::uint32_t>(run)};
    std::mt19937_64 rng(seq);
    RunDraw d;
    d.x0 = sample_uniform(Box(cfg.x0, cfg.simulate.x0_radius), rng);
    d.w.reserve(static_cast<std::size_t>(steps));
    for (int k = 0; k < steps; ++k) {
        d.w.push_back(sample_uniform(plant.W, rng));
    }
    return d;
}

void write_trace_csv(const std::vector<SimulationTrace>& traces, std::ostream& os)
{
    if (traces.empty() || traces.front().steps.empty()) {
        os << "controller,run,k,j,qp_status,objective,alpha,wall_time,tube_violation,violation\n";
        return;
    }
    const auto& first = traces.front().steps.front();
    os << "controller,run,k,j";
    for (Eigen::Index i = 0; i < first.x.size(); ++i) os << ",x" << i + 1;
    for (Eigen::Index i = 0; i < first.u.size(); ++i) os << ",u" << i + 1;
    for (Eigen::Index i = 0; i < first.w.size(); ++i) os << ",w" << i + 1;
    os << ",qp_status,objective,alpha,wall_time,tube_violation,violation\n";
    os << std::setprecision(12);
    for (const auto& tr : traces) {
        for (const auto& r : tr.steps) {
            os << tr.controller << ',' << r.run << ',' << r.k << ',' << r.j;
            for (Eigen::Index i = 0; i < r.x.size(); ++i) os << ',' << r.x(i);
            for (Eigen::Index i = 0; i < r.u.size(); ++i) os << ',' << r.u(i);
            for (Eigen::Index i = 0; i < r.w.size(); ++i) os << ',' << r.w(i);
            os << ',' << r.status << ',' << r.objective << ',';
            for (std::size_t l = 0; l < r.alpha.size(); ++l) os << (l ? ";" : "") << r.alpha[l];
            os << ',' << r.wall_time << ',' << r.tube_violation << ',' << (r.violation ? 1 : 0) << '\n';
        }
    }
}

// ---------------------------------------------------------------------------

namespace {

/// Bounding box of the minimal RPI set, sum_k |Acl^k| r_W (truncated once negligible).
Vector mrpi_bounding_radius(const Matrix& Acl, const Vector& r)
{
    Vector s = Vector::Zero(r.size());
    Matrix Ak = Matrix::Identity(Acl.rows(), Acl.cols());
    for (int k = 0; k < 10000; ++k) {
        const Vector term = Ak.cwiseAbs() * r;
        s += term;
        if (term.maxCoeff() <= 1e-14 * std::max(1.0, s.maxCoeff())) {
            break;
        }
        Ak = Acl * Ak;
    }
    return s;
}

Json vec_list(const Vector& v) { return vec_json(v); }

}  // namespace

OpenLoopComparison run_open_loop(const ExperimentConfig& cfg, const ModelArtifacts& models,
                                 const DesignArtifacts& designs)
{
    OpenLoopComparison out;
    const int N = cfg.mpc.horizon;
    const int p = models.proposed.p();
    const int nx = models.proposed.nx();
    const ConstraintSets sets = cfg.sets();
    Json checks;
    SolveOptions opts;
    opts.throw_on_failure = true;

    // Proposed controller: failures here are the run's failure.
    if (cfg.runs_controller("proposed")) {
        const QPSpec spec = build_qp(cfg.x0, models.proposed, designs.proposed, cfg.mpc);
        out.proposed = solve_step(spec, opts);
        out.proposed_status = to_string(out.proposed->status);
        const Vector hw = LowComplexityPolytope(designs.proposed.V).halfwidths();
        double min_margin = std::numeric_limits<double>::infinity();
        for (int l = 0; l <= N; ++l) {
            const Vector& z = out.proposed->tube.z[l];
            const double a = out.proposed->tube.alpha[l];
            out.bounds.push_back({"proposed", l, z - a * hw, z + a * hw});
            min_margin = std::min(min_margin, ((z - a * hw) - cfg.x_lo).minCoeff());
        }
        // Intermediate instants inside each block: interval bound of every
        // j-step row over the tube vertices, the parameter box and Wy.
        const MultiStepModel& pm = models.proposed;
        const LowComplexityPolytope X0(designs.proposed.V);
        double mid_margin = std::numeric_limits<double>::infinity();
        for (int l = 0; l < N && p > 1; ++l) {
            for (const Vector& v : X0.vertices()) {
                const Vector x = out.proposed->tube.z[l] + out.proposed->tube.alpha[l] * v;
                const Vector U = designs.proposed.K * x + out.proposed->tube.V[l];
                for (int j = 1; j < p; ++j) {
                    Vector psi(nx + pm.nu() * j);
                    psi << x, U.head(pm.nu() * j);
                    for (int i = 0; i < nx; ++i) {
                        const PredictorRow& row = pm.row(j, i);
                        const int o = (j - 1) * nx + i;
                        const double lo = (row.theta_hat + row.residual.center).dot(psi) -
                                          row.residual.radius.dot(psi.cwiseAbs()) + pm.Wy().center(o) -
                                          pm.Wy().radius(o);
                        mid_margin = std::min(mid_margin, lo - cfg.x_lo(i));
                    }
                }
            }
        }
        checks["proposed_feasible"] = true;
        checks["proposed_lower_edge_margin"] = min_margin;
        if (p > 1) {
            checks["proposed_intermediate_lower_edge_margin"] = mid_margin;
        }
        checks["proposed_lower_edges_respect_bounds"] = std::min(min_margin, mid_margin) >= -1e-7;
        const TubeReport rep = verify_tube(*out.proposed, models.proposed, designs.proposed, 2000);
        checks["proposed_sampled_tube_violation"] = rep.max_violation;
    }

    if (cfg.runs_controller("homothetic")) {
        MpcConfig c1 = cfg.mpc;
        c1.horizon = cfg.one_step_horizon;
        c1.lambda = LambdaMode::ClosedForm;
        SolveOptions o1;
        o1.throw_on_failure = false;
        try {
            const OneStepHomothetic one(models.one_step, designs.one_step, c1);
            out.one_step = one.solve(cfg.x0, o1);
            out.one_step_status = to_string(out.one_step->status);
        } catch (const Error& e) {
            out.one_step_status = std::string("error: ") + e.what();
        }
        if (out.one_step && out.one_step->status == MpcStatus::Optimal) {
            const Vector hw = LowComplexityPolytope(designs.one_step.V).halfwidths();
            for (int l = 0; l <= N && l * p <= c1.horizon; ++l) {
                const Vector& z = out.one_step->tube.z[l * p];
                const double a = out.one_step->tube.alpha[l * p];
                out.bounds.push_back({"homothetic", l, z - a * hw, z + a * hw});
            }
            const auto& al = out.one_step->tube.alpha;
            bool increasing = true;
            for (std::size_t l = 0; l + 1 < al.size(); ++l) {
                increasing = increasing && al[l + 1] > al[l];
            }
            checks["one_step_alpha_strictly_increasing"] = increasing;
            checks["one_step_alpha"] = al;
        }
        checks["one_step_status"] = out.one_step_status;
    }

    if (cfg.runs_controller("rigid")) {
        const Dataset* ds = models.dataset.size() > 0 ? &models.dataset : nullptr;
        try {
            const TauTable tau = worst_case_tau(models.proposed, cfg.tau_mode, &sets, ds);
            const RigidTubeController rigid(models.proposed, designs.proposed, tau, cfg.mpc);
            out.rigid_cross_section = rigid.config().rpi_box;
            SolveOptions o2;
            o2.throw_on_failure = false;
            out.rigid = rigid.solve(cfg.x0, o2);
            out.rigid_status = to_string(out.rigid->status);
            const Box& S = out.rigid_cross_section;
            for (int l = 0; l <= N; ++l) {
                // Without a feasible centre sequence the cross-section itself is reported.
                const Vector z = out.rigid->status == MpcStatus::Optimal ? out.rigid->z[l] : Vector::Zero(nx);
                out.bounds.push_back({"rigid", l, z + S.lower(), z + S.upper()});
            }
            checks["rigid_tau_mode"] = to_string(cfg.tau_mode);
            checks["rigid_tau_p"] = vec_list(tau.tau_p);
            checks["rigid_cross_section_width"] = vec_list(2.0 * S.radius);
            const auto nom = models.proposed.nominal();
            const Vector mrpi = mrpi_bounding_radius(nom.A + nom.B * designs.proposed.K, rigid.config().dist_x.radius);
            checks["rigid_mrpi_bounding_width"] = vec_list(2.0 * mrpi);
            // The same comparison with the other bound, for reference.
            const TauMode other = cfg.tau_mode == TauMode::WorstCase ? TauMode::Observed : TauMode::WorstCase;
            if (other == TauMode::WorstCase || ds != nullptr) {
                const TauTable t2 = worst_case_tau(models.proposed, other, &sets, ds);
                const RigidTubeController r2(models.proposed, designs.proposed, t2, cfg.mpc);
                SolveOptions o3;
                o3.throw_on_failure = false;
                const RigidSolution s2 = r2.solve(cfg.x0, o3);
                checks["rigid_alternative"] = {{"tau_mode", to_string(other)},
                                               {"tau_p", vec_list(t2.tau_p)},
                                               {"cross_section_width", vec_list(2.0 * r2.config().rpi_box.radius)},
                                               {"status", to_string(s2.status)}};
            }
        } catch (const Error& e) {
            out.rigid_status = std::string("error: ") + e.what();
        }
        checks["rigid_status"] = out.rigid_status;
    }

    // Per-axis width ordering for l >= 1.
    auto find = [&](const std::string& c, int l) -> const TubeBounds* {
        for (const auto& b : out.bounds) {
            if (b.controller == c && b.stage == l) return &b;
        }
        return nullptr;
    };
    auto ordering = [&](const std::string& other) {
        Json stages = Json::array();
        bool all = true, any = false;
        for (int l = 1; l <= N; ++l) {
            const TubeBounds* a = find("proposed", l);
            const TubeBounds* b = find(other, l);
            if (!a || !b) continue;
            any = true;
            const Vector wa = a->upper - a->lower, wb = b->upper - b->lower;
            const bool ok = ((wa.array() <= wb.array() + 1e-9)).all();
            all = all && ok;
            stages.push_back({{"stage", l}, {"proposed", vec_list(wa)}, {other, vec_list(wb)}, {"proposed_not_wider", ok}});
        }
        return Json{{"holds", any && all}, {"stages", stages}};
    };
    if (cfg.runs_controller("proposed") && cfg.runs_controller("rigid")) {
        checks["width_ordering_vs_rigid"] = ordering("rigid");
    }
    if (cfg.runs_controller("proposed") && cfg.runs_controller("homothetic")) {
        checks["width_ordering_vs_homothetic"] = ordering("homothetic");
    }
    out.checks = std::move(checks);
    return out;
}

void write_tube_widths_csv(const OpenLoopComparison& cmp, std::ostream& os)
{
    os << "controller,stage,axis,lower,upper\n" << std::setprecision(12);
    for (const auto& b : cmp.bounds) {
        for (Eigen::Index i = 0; i < b.lower.size(); ++i) {
            os << b.controller << ',' << b.stage << ',' << i + 1 << ',' << b.lower(i) << ',' << b.upper(i) << '\n';
        }
    }
}

std::vector<ComplexityRow> run_complexity(const ExperimentConfig& cfg, const ModelArtifacts& models,
                                          const DesignArtifacts& designs)
{
    // Counts refer to the explicit multiplier formulation of the homothetic controllers.
    MpcConfig c = cfg.mpc;
    c.lambda = LambdaMode::Explicit;
    std::vector<QpProblem> qps;
    std::vector<std::string> names;
    if (cfg.runs_controller("proposed")) {
        qps.push_back(build_qp(cfg.x0, models.proposed, designs.proposed, c).qp);
        names.push_back("proposed");
    }
    if (cfg.runs_controller("homothetic")) {
        MpcConfig c1 = c;
        c1.horizon = cfg.one_step_horizon;
        qps.push_back(OneStepHomothetic(models.one_step, designs.one_step, c1).build(cfg.x0).qp);
        names.push_back("homothetic");
    }
    if (cfg.runs_controller("rigid")) {
        const ConstraintSets sets = cfg.sets();
        const Dataset* ds = models.dataset.size() > 0 ? &models.dataset : nullptr;
        const TauTable tau = worst_case_tau(models.proposed, cfg.tau_mode, &sets, ds);
        qps.push_back(RigidTubeController(models.proposed, designs.proposed, tau, cfg.mpc).build(cfg.x0));
        names.push_back("rigid");
    }
    std::vector<std::pair<std::string, const QpProblem*>> list;
    for (std::size_t i = 0; i < qps.size(); ++i) {
        list.emplace_back(names[i], &qps[i]);
    }
    return complexity_report(list);
}

int exit_code(ErrorCode code)
{
    switch (code) {
    case ErrorCode::ConfigError:
    case ErrorCode::MissingArtifact:
    case ErrorCode::MissingDataset:
    case ErrorCode::UnverifiedDesign:
        return 2;
    case ErrorCode::Infeasible:
        return 3;
    case ErrorCode::SolverFailure:
    case ErrorCode::NoConvergence:
    case ErrorCode::LPFailure:
        return 4;
    default:
        return 1;
    }
}

}  // namespace tubempc
