// Command-line front end: one subcommand per pipeline stage, plus `run` for all of them.
#include <tubempc/cli.hpp>

#include <CLI11.hpp>

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

using namespace tubempc;
namespace fs = std::filesystem;

namespace {

struct Options {
    std::string config;
    std::string out = "artifacts";
    std::optional<std::uint64_t> seed;
    std::optional<int> runs;
};

// Error::what() already starts with the code name.
std::string message(const Error& e)
{
    const std::string prefix = std::string(to_string(e.code())) + ": ";
    const std::string w = e.what();
    return w.rfind(prefix, 0) == 0 ? w.substr(prefix.size()) : w;
}

template <class F>
auto stage(const std::string& name, F&& f)
{
    try {
        return f();
    } catch (const StageError&) {
        throw;
    } catch (const Error& e) {
        throw StageError(name, e);
    }
}

ExperimentConfig load(const Options& o)
{
    ExperimentConfig cfg = stage("config", [&] { return load_config(o.config); });
    if (o.seed) cfg.simulate.seed = *o.seed;
    if (o.runs) cfg.simulate.runs = *o.runs;
    return cfg;
}

Json read_json(const fs::path& path)
{
    std::ifstream in(path);
    if (!in) {
        throw Error(ErrorCode::MissingArtifact, path.string() + " not found (run the earlier stage first)");
    }
    try {
        return Json::parse(in);
    } catch (const Json::parse_error& e) {
        throw Error(ErrorCode::MissingArtifact, path.string() + ": " + e.what());
    }
}

void write_json(const fs::path& path, const Json& j)
{
    std::ofstream os(path);
    os << std::setw(2) << j << '\n';
}

template <class F>
void write_file(const fs::path& path, F&& f)
{
    std::ofstream os(path);
    if (!os) {
        throw Error(ErrorCode::ConfigError, "cannot write " + path.string());
    }
    f(os);
}

void save_models(const fs::path& dir, const ModelArtifacts& m)
{
    write_json(dir / "model.json", Json{{"proposed", to_json(m.proposed)}, {"one_step", to_json(m.one_step)}});
    if (m.dataset.size() > 0) {
        write_file(dir / "dataset.csv", [&](std::ostream& os) { write_dataset_csv(m.dataset, os); });
    }
}

ModelArtifacts load_models(const fs::path& dir, const ExperimentConfig& cfg)
{
    return stage("identify", [&] {
        const Json j = read_json(dir / "model.json");
        ModelArtifacts m;
        m.plant = cfg.plant.build();
        m.proposed = model_from_json(j.at("proposed"));
        m.one_step = model_from_json(j.at("one_step"));
        if (std::ifstream ds(dir / "dataset.csv"); ds) {
            m.dataset = read_dataset_csv(ds);
        }
        return m;
    });
}

void save_designs(const fs::path& dir, const DesignArtifacts& d)
{
    write_json(dir / "design.json", Json{{"proposed", to_json(d.proposed)}, {"one_step", to_json(d.one_step)}});
}

DesignArtifacts load_designs(const fs::path& dir, const ModelArtifacts& m)
{
    return stage("design", [&] {
        const Json j = read_json(dir / "design.json");
        return DesignArtifacts{design_from_json(j.at("proposed"), m.proposed), design_from_json(j.at("one_step"), m.one_step)};
    });
}

Json design_summary(const DesignArtifacts& d)
{
    auto one = [](const ControllerDesign& x) {
        return Json{{"p", x.p},         {"eta", x.eta},       {"rho", x.rho},
                    {"robust_rho", x.robust_rho}, {"certified", x.certified},
                    {"margin", std::isfinite(x.margin) ? Json(x.margin) : Json(nullptr)},
                    {"hash", x.hash()}};
    };
    return Json{{"proposed", one(d.proposed)}, {"one_step", one(d.one_step)}};
}

Json open_loop(const fs::path& dir, const ExperimentConfig& cfg, const ModelArtifacts& m, const DesignArtifacts& d)
{
    const OpenLoopComparison cmp = stage("mpc", [&] { return run_open_loop(cfg, m, d); });
    write_file(dir / "tube_widths.csv", [&](std::ostream& os) { write_tube_widths_csv(cmp, os); });
    Json j = cmp.checks;
    j["proposed_status"] = cmp.proposed_status;
    if (cmp.proposed) j["proposed_objective"] = cmp.proposed->objective;
    return j;
}

Json complexity(const fs::path& dir, const ExperimentConfig& cfg, const ModelArtifacts& m, const DesignArtifacts& d)
{
    const auto rows = stage("complexity", [&] { return run_complexity(cfg, m, d); });
    write_file(dir / "complexity.csv", [&](std::ostream& os) { write_complexity_csv(rows, os); });
    Json out = Json::array();
    for (const auto& r : rows) {
        Json e{{"controller", r.controller}, {"n_var", r.n_var}, {"n_ineq", r.n_ineq}, {"n_eq", r.n_eq}};
        if (r.reference_var) {
            e["var_within_order"] = within_order_of_magnitude(static_cast<double>(r.n_var), *r.reference_var);
            e["ineq_within_order"] = within_order_of_magnitude(static_cast<double>(r.n_ineq), *r.reference_ineq);
            e["eq_within_order"] = within_order_of_magnitude(static_cast<double>(r.n_eq), *r.reference_eq);
        }
        out.push_back(e);
    }
    return out;
}

MpcConfig closed_loop_config(const ExperimentConfig& cfg)
{
    MpcConfig c = cfg.mpc;
    c.cost = cfg.simulate.cost;
    c.terminal = cfg.simulate.terminal;
    c.lambda = LambdaMode::ClosedForm;
    return c;
}

Json summarize(const std::vector<SimulationTrace>& traces)
{
    std::map<std::string, Json> by;
    for (const auto& t : traces) {
        Json& e = by[t.controller];
        if (e.is_null()) {
            e = Json{{"runs", 0}, {"solves", 0}, {"failed_solves", 0}, {"constraint_violations", 0}, {"max_tube_violation", 0.0}};
        }
        e["runs"] = e["runs"].get<int>() + 1;
        e["solves"] = e["solves"].get<int>() + t.solves;
        e["failed_solves"] = e["failed_solves"].get<int>() + t.failed_solves;
        e["constraint_violations"] = e["constraint_violations"].get<int>() + t.constraint_violations;
        e["max_tube_violation"] = std::max(e["max_tube_violation"].get<double>(), t.max_tube_violation);
    }
    Json out = Json::object();
    for (auto& [k, v] : by) {
        v["passed"] = v["failed_solves"].get<int>() == 0 && v["constraint_violations"].get<int>() == 0 &&
                      v["max_tube_violation"].get<double>() <= 1e-6;
        out[k] = v;
    }
    return out;
}

Json simulate(const fs::path& dir, const ExperimentConfig& cfg, const ModelArtifacts& m, const DesignArtifacts& d,
              bool compare)
{
    return stage("simulate", [&] {
        const MpcConfig c = closed_loop_config(cfg);
        const ConstraintSets sets = cfg.sets();
        const int steps = cfg.simulate.blocks * m.proposed.p();
        std::vector<std::unique_ptr<ClosedLoopController>> ctrls;
        if (!compare || cfg.runs_controller("proposed")) {
            ctrls.push_back(make_homothetic_loop("proposed", m.proposed, d.proposed, c, cfg.simulate.warm_start));
        }
        if (compare && cfg.runs_controller("homothetic")) {
            MpcConfig c1 = c;
            c1.horizon = cfg.one_step_horizon;
            // Without a certified terminal ingredient the baseline runs without the terminal set.
            c1.terminal = c.terminal && d.one_step.certified && d.one_step.has_terminal_set;
            ctrls.push_back(make_homothetic_loop("homothetic", m.one_step, d.one_step, c1, cfg.simulate.warm_start));
        }
        if (compare && cfg.runs_controller("rigid")) {
            const Dataset* ds = m.dataset.size() > 0 ? &m.dataset : nullptr;
            const TauTable tau = worst_case_tau(m.proposed, cfg.tau_mode, &sets, ds);
            ctrls.push_back(make_rigid_loop(m.proposed, d.proposed, tau, c));
        }
        std::vector<SimulationTrace> traces;
        for (int run = 0; run < cfg.simulate.runs; ++run) {
            const RunDraw draw = draw_run(cfg, m.plant, run, steps);
            for (auto& ctrl : ctrls) {
                traces.push_back(simulate_closed_loop(*ctrl, m.plant, sets, draw.x0, draw.w, run));
            }
        }
        write_file(dir / (compare ? "compare_trace.csv" : "trace.csv"),
                   [&](std::ostream& os) { write_trace_csv(traces, os); });
        return summarize(traces);
    });
}

std::string timestamp()
{
    const std::time_t t = std::time(nullptr);
    std::tm tm{};
    gmtime_r(&t, &tm);
    std::ostringstream os;
    os << std::put_time(&tm, "%Y%m%d-%H%M%S");
    return os.str();
}

}  // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Multi-rate homothetic tube MPC with multi-step predictors"};
    app.require_subcommand(1);
    Options o;
    auto common = [&](CLI::App* sub) {
        sub->add_option("--config", o.config, "experiment configuration (JSON)")->required();
        sub->add_option("--out", o.out, "artifact directory");
        sub->add_option("--seed", o.seed, "override simulate.seed");
        sub->add_option("--runs", o.runs, "override simulate.runs");
    };
    auto* identify = app.add_subcommand("identify", "generate data and identify the multi-step and one-step models");
    auto* design = app.add_subcommand("design", "synthesize K, P, the tube shape and the terminal scaling");
    auto* solve = app.add_subcommand("solve", "one open-loop solve of every controller; writes tube_widths.csv");
    auto* sim = app.add_subcommand("simulate", "Monte-Carlo closed loop of the proposed controller");
    auto* compare = app.add_subcommand("compare", "closed loop of all controllers on common disturbances");
    auto* cx = app.add_subcommand("complexity", "QP sizes of the three controllers");
    auto* run = app.add_subcommand("run", "full pipeline into a timestamped directory");
    for (auto* s : {identify, design, solve, sim, compare, cx, run}) {
        common(s);
    }
    CLI11_PARSE(app, argc, argv);

    try {
        const ExperimentConfig cfg = load(o);
        fs::path dir = o.out;
        if (run->parsed()) {
            dir /= "run-" + timestamp();
        }
        fs::create_directories(dir);

        if (identify->parsed()) {
            save_models(dir, stage("identify", [&] { return run_identify(cfg); }));
        } else if (design->parsed()) {
            const ModelArtifacts m = load_models(dir, cfg);
            save_designs(dir, stage("design", [&] { return run_design(cfg, m); }));
        } else if (solve->parsed()) {
            const ModelArtifacts m = load_models(dir, cfg);
            const DesignArtifacts d = load_designs(dir, m);
            write_json(dir / "solve_summary.json", open_loop(dir, cfg, m, d));
        } else if (sim->parsed() || compare->parsed()) {
            const ModelArtifacts m = load_models(dir, cfg);
            const DesignArtifacts d = load_designs(dir, m);
            const bool cmp = compare->parsed();
            write_json(dir / (cmp ? "compare_summary.json" : "simulate_summary.json"), simulate(dir, cfg, m, d, cmp));
        } else if (cx->parsed()) {
            const ModelArtifacts m = load_models(dir, cfg);
            const DesignArtifacts d = load_designs(dir, m);
            complexity(dir, cfg, m, d);
        } else if (run->parsed()) {
            const ModelArtifacts m = stage("identify", [&] { return run_identify(cfg); });
            save_models(dir, m);
            const DesignArtifacts d = stage("design", [&] { return run_design(cfg, m); });
            save_designs(dir, d);
            Json summary;
            summary["design"] = design_summary(d);
            summary["open_loop"] = open_loop(dir, cfg, m, d);
            summary["complexity"] = complexity(dir, cfg, m, d);
            summary["closed_loop"] = simulate(dir, cfg, m, d, false);
            write_json(dir / "summary.json", summary);
        }
        std::cout << dir.string() << '\n';
        return 0;
    } catch (const StageError& e) {
        std::cerr << "error: stage=" << e.stage() << " code=" << to_string(e.code()) << ": " << message(e) << '\n';
        return exit_code(e.code());
    } catch (const Error& e) {
        std::cerr << "error: code=" << to_string(e.code()) << ": " << message(e) << '\n';
        return exit_code(e.code());
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
}
