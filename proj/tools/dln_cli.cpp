// dln_cli: coefficient dumps, convergence tables and adaptive runs.
//
// Exit status: 0 when every in-run check holds, 2 when a check fails,
// 1 on usage or runtime errors.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <future>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "dln/digest.hpp"
#include "dln/experiments.hpp"

namespace ex = dln::experiments;

namespace {

constexpr int kOk = 0;
constexpr int kError = 1;
constexpr int kCheckFailed = 2;

/// Flag values; only flags given on the command line override the config.
struct Flags {
    std::vector<std::string> theta;
    std::vector<double> eps;
    int grid = 0;
    double tol = 0, kappa = 0, k0 = 0, kmin = 0, kmax = 0, tau = 0, t_end = 0, krylov_tol = 0;
    std::string mcase, algorithm, estimator, forcing, out, svg, config;
    int levels = 0;
    std::uint64_t seed = 0;
    std::vector<CLI::Option*> opts;
};

void add_flags(CLI::App& app, Flags& f) {
    f.opts = {
        app.add_option("--theta", f.theta, "theta values, e.g. 2/3,2/sqrt5,1")->delimiter(','),
        app.add_option("--eps", f.eps, "step variabilities for coeffs")->delimiter(','),
        app.add_option("--grid", f.grid, "grid points per side"),
        app.add_option("--tol", f.tol, "controller tolerance"),
        app.add_option("--kappa", f.kappa, "controller safety factor"),
        app.add_option("--k0", f.k0, "initial or coarsest step"),
        app.add_option("--kmin", f.kmin, "smallest step"),
        app.add_option("--kmax", f.kmax, "largest step"),
        app.add_option("--case", f.mcase, "decay or growth"),
        app.add_option("--tau", f.tau, "time scale; nu = 1/tau"),
        app.add_option("--t-end", f.t_end, "final time"),
        app.add_option("--levels", f.levels, "number of halving levels"),
        app.add_option("--algorithm", f.algorithm, "lte or nd"),
        app.add_option("--estimator", f.estimator, "relative or absolute"),
        app.add_option("--forcing", f.forcing, "manufactured or zero"),
        app.add_option("--krylov-tol", f.krylov_tol, "linear solver relative tolerance"),
        app.add_option("--seed", f.seed, "seed for random step schedules"),
        app.add_option("--out", f.out, "output CSV path (stdout when absent)"),
        app.add_option("--svg", f.svg, "SVG trace path prefix"),
    };
    app.add_option("--config", f.config, "JSON config file; flags override its values")->check(CLI::ExistingFile);
}

ex::ExperimentConfig resolve(const std::string& command, const Flags& f) {
    ex::ExperimentConfig c = ex::defaults_for(command);
    nlohmann::json file = nlohmann::json::object();
    if (!f.config.empty()) {
        std::ifstream is(f.config);
        file = nlohmann::json::parse(is, nullptr, false);
        if (file.is_discarded()) throw dln::InvalidConfig("cannot parse " + f.config);
        ex::merge_json(c, file);
        c.command = command;
    }
    nlohmann::json o = nlohmann::json::object();
    auto given = [&](const char* name) {
        for (auto* opt : f.opts) {
            if (opt->check_lname(name) && opt->count() > 0) return true;
        }
        return false;
    };
    if (given("theta")) o["theta"] = f.theta;
    if (given("eps")) o["eps"] = f.eps;
    if (given("grid")) o["grid"] = f.grid;
    if (given("tol")) o["tol"] = f.tol;
    if (given("kappa")) o["kappa"] = f.kappa;
    if (given("k0")) o["k0"] = f.k0;
    if (given("kmin")) o["kmin"] = f.kmin;
    if (given("kmax")) o["kmax"] = f.kmax;
    if (given("case")) o["case"] = f.mcase;
    if (given("tau")) o["tau"] = f.tau;
    if (given("t-end")) o["t_end"] = f.t_end;
    if (given("levels")) o["levels"] = f.levels;
    if (given("algorithm")) o["algorithm"] = f.algorithm;
    if (given("estimator")) o["estimator"] = f.estimator;
    if (given("forcing")) o["forcing"] = f.forcing;
    if (given("krylov-tol")) o["krylov_tol"] = f.krylov_tol;
    if (given("seed")) o["seed"] = f.seed;
    if (given("out")) o["out"] = f.out;
    if (given("svg")) o["svg"] = f.svg;
    ex::merge_json(c, o);
    // The Algorithm 2 default tolerance is on the dissipation ratio.
    if (command == "nse-adapt" && c.algorithm == "nd" && !given("tol") && !file.contains("tol")) c.tol = 1e-14;
    c.validate();
    return c;
}

/// Metadata lines followed by the table body.
void emit(const ex::ExperimentConfig& c, const std::string& body) {
    std::ostringstream doc;
    doc << "# config: " << ex::json(c).dump() << '\n' << "# content-sha256: " << dln::sha256_hex(body) << '\n' << body;
    if (c.out.empty()) {
        std::cout << doc.str();
        return;
    }
    const std::filesystem::path p(c.out);
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
    std::ofstream os(p, std::ios::binary);
    if (!os) throw dln::IoError("cannot open " + c.out);
    os << doc.str();
    if (!os) throw dln::IoError("failed writing " + c.out);
}

void write_text(const std::string& path, const std::string& text) {
    const std::filesystem::path p(path);
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
    std::ofstream os(p, std::ios::binary);
    if (!os) throw dln::IoError("cannot open " + path);
    os << text;
}

int run_coeffs(const ex::ExperimentConfig& c) {
    std::ostringstream body;
    ex::write_coefficient_table(body, c.theta_values(), c.eps.empty() ? ex::default_eps_grid() : c.eps);
    emit(c, body.str());
    return kOk;
}

int run_ivp(const ex::ExperimentConfig& c) {
    const auto st = ex::ivp_converge(c);
    std::ostringstream body;
    ex::write_ivp_table(body, st);
    emit(c, body.str());
    for (double th : c.theta_values()) {
        std::printf("theta=%s constant_order=%.4f variable_order=%.4f\n", dln::format_real(th).c_str(),
                    ex::ivp_cell_order(st, "forced", ex::Schedule::constant, th),
                    ex::ivp_cell_order(st, "forced", ex::Schedule::variable, th));
    }
    for (const auto& n : st.notes) std::printf("check: %s\n", n.c_str());
    return st.invariants_hold ? kOk : kCheckFailed;
}

int run_nse_converge(const ex::ExperimentConfig& c) {
    const dln::Spectral sp(dln::Grid2D(c.grid, 2.0));
    const auto thetas = c.theta_values();
    // One worker per theta; rows are merged in theta order.
    std::vector<std::future<std::vector<ex::NseConvergenceRow>>> cells;
    for (double th : thetas) {
        cells.push_back(std::async(std::launch::async, [&sp, &c, th] { return ex::nse_converge_theta(sp, c, th); }));
    }
    std::vector<ex::NseConvergenceRow> rows;
    for (auto& f : cells) {
        auto part = f.get();
        rows.insert(rows.end(), part.begin(), part.end());
    }
    std::ostringstream body;
    ex::write_nse_convergence_table(body, rows);
    emit(c, body.str());
    bool ok = true;
    for (const auto& r : rows) {
        const bool row_ok = ex::nse_row_invariants(r, c.forcing == "zero");
        ok = ok && row_ok;
        std::printf("theta=%s k=%s wall_seconds=%.3f checks=%s\n", dln::format_real(r.theta).c_str(),
                    dln::format_real(r.k).c_str(), r.wall_seconds, row_ok ? "ok" : "FAILED");
    }
    return ok ? kOk : kCheckFailed;
}

int run_nse_adapt(const ex::ExperimentConfig& c) {
    const dln::Spectral sp(dln::Grid2D(c.grid, 2.0));
    const auto alg = c.algorithm == "nd" ? ex::Algorithm::nd : ex::Algorithm::lte;
    const auto start = std::chrono::steady_clock::now();
    const auto outcome = ex::nse_adapt(sp, c, alg);
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::ostringstream body;
    dln::write_ledger_csv(body, outcome.ledger);
    emit(c, body.str());
    if (!c.svg.empty()) {
        const std::string title = std::string(ex::to_string(alg)) + " theta=" + c.thetas.front();
        for (const auto& [suffix, svg] : ex::ledger_svgs(outcome.ledger, title)) {
            write_text(c.svg + "_" + suffix + ".svg", svg);
        }
    }
    std::printf("%s\nwall_seconds=%.3f\n", ex::summary_line(outcome.summary).c_str(), wall);
    if (!outcome.summary.time_diameter_ok) std::printf("note: k_max exceeds h^(1/4) for this grid\n");
    return outcome.summary.invariants_hold() ? kOk : kCheckFailed;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Variable-step DLN experiments"};
    app.require_subcommand(1);
    Flags coeffs_f, ivp_f, conv_f, adapt_f;
    auto* coeffs = app.add_subcommand("coeffs", "coefficient table over a (theta, eps) grid");
    auto* ivp = app.add_subcommand("ivp-converge", "ODE convergence table");
    auto* conv = app.add_subcommand("nse-converge", "Navier-Stokes temporal convergence table");
    auto* adapt = app.add_subcommand("nse-adapt", "adaptive Navier-Stokes run with ledger output");
    add_flags(*coeffs, coeffs_f);
    add_flags(*ivp, ivp_f);
    add_flags(*conv, conv_f);
    add_flags(*adapt, adapt_f);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kError;
    }

    try {
        if (coeffs->parsed()) return run_coeffs(resolve("coeffs", coeffs_f));
        if (ivp->parsed()) return run_ivp(resolve("ivp-converge", ivp_f));
        if (conv->parsed()) return run_nse_converge(resolve("nse-converge", conv_f));
        if (adapt->parsed()) return run_nse_adapt(resolve("nse-adapt", adapt_f));
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kError;
    }
    return kError;
}
