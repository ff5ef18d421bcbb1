#pragma once

/// Experiment drivers shared by the command-line tool and the acceptance
/// binary: coefficient tables, convergence studies and adaptive runs.

#include <algorithm>
#include <cctype>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "dln/adaptive.hpp"
#include "dln/core.hpp"
#include "dln/ivp.hpp"
#include "dln/nse2d.hpp"
#include "dln/spectral.hpp"

namespace dln::experiments {

using json = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Parsing

namespace detail {

inline std::string_view trim(std::string_view s) {
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
    return s;
}

inline double parse_number(std::string_view s) {
    double v = 0.0;
    const auto* end = s.data() + s.size();
    const auto res = std::from_chars(s.data(), end, v);
    if (res.ec != std::errc() || res.ptr != end) throw InvalidArgument("not a number: '" + std::string(s) + "'");
    return v;
}

/// A decimal, "sqrtX" or "sqrt(X)".
inline double parse_atom(std::string_view s) {
    s = trim(s);
    if (s.starts_with("sqrt")) {
        s.remove_prefix(4);
        if (s.starts_with("(") && s.ends_with(")")) s = s.substr(1, s.size() - 2);
        const double v = parse_number(trim(s));
        if (v < 0.0) throw InvalidArgument("square root of a negative number");
        return std::sqrt(v);
    }
    return parse_number(s);
}

}  // namespace detail

/// Accepts "0.75", "2/3", "2/sqrt5" and "2/sqrt(5)".
[[nodiscard]] inline double parse_theta(std::string_view text) {
    const auto slash = text.find('/');
    double v;
    if (slash == std::string_view::npos) {
        v = detail::parse_atom(text);
    } else {
        const double den = detail::parse_atom(text.substr(slash + 1));
        if (den == 0.0) throw InvalidArgument("zero denominator in '" + std::string(text) + "'");
        v = detail::parse_atom(text.substr(0, slash)) / den;
    }
    return Theta(v).value();
}

// ---------------------------------------------------------------------------
// Rates

/// log(e(k) / e(k/2)) / log 2.
[[nodiscard]] inline double rate(double coarse, double fine) { return std::log(coarse / fine) / std::log(2.0); }

/// Least-squares slope of log e against log k.
[[nodiscard]] inline double fitted_order(const std::vector<double>& ks, const std::vector<double>& errs) {
    if (ks.size() != errs.size() || ks.size() < 2) throw InvalidArgument("order fit needs two or more matching points");
    const std::size_t n = ks.size();
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const double x = std::log(ks[i]), y = std::log(errs[i]);
        sx += x;
        sy += y;
        sxx += x * x;
        sxy += x * y;
    }
    return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

// ---------------------------------------------------------------------------
// Configuration

/// One run of one subcommand. Every field is echoed into the outputs.
struct ExperimentConfig {
    std::string command;
    std::vector<std::string> thetas{"2/3"};
    std::vector<double> eps;  ///< coefficient table grid; empty selects the default
    int grid = 64;
    double tol = 1e-7;
    double kappa = 0.95;
    double k0 = 1.0 / 16.0;
    double kmin = 5e-4;
    double kmax = 5e-2;
    std::string mcase = "decay";
    double tau = 100.0;
    double t_end = 1.0;
    int levels = 4;
    std::string algorithm = "lte";
    std::string estimator = "relative";
    std::string forcing = "manufactured";
    double krylov_tol = 1e-10;
    std::uint64_t seed = 20240601;
    std::string out;
    std::string svg;

    [[nodiscard]] std::vector<double> theta_values() const {
        std::vector<double> v;
        for (const auto& s : thetas) v.push_back(parse_theta(s));
        return v;
    }

    [[nodiscard]] nse::ManufacturedCase manufactured_case() const {
        return {mcase == "growth" ? nse::CaseKind::taylor_green_growth : nse::CaseKind::taylor_green_decay, 1.0, tau};
    }

    [[nodiscard]] ControllerConfig controller() const {
        ControllerConfig c;
        c.tol = tol;
        c.kappa = kappa;
        c.k_min = kmin;
        c.k_max = kmax;
        c.estimator_kind = estimator == "absolute" ? EstimatorKind::absolute : EstimatorKind::relative;
        return c;
    }

    void validate() const {
        static const std::vector<std::string> commands{"coeffs", "ivp-converge", "nse-converge", "nse-adapt"};
        if (std::find(commands.begin(), commands.end(), command) == commands.end()) {
            throw InvalidConfig("unknown command '" + command + "'");
        }
        if (thetas.empty()) throw InvalidConfig("theta list is empty");
        (void)theta_values();
        for (double e : eps) {
            if (!(e > -1.0 && e < 1.0)) throw InvalidConfig("eps entries must lie in (-1, 1)");
        }
        if (mcase != "decay" && mcase != "growth") throw InvalidConfig("case must be 'decay' or 'growth'");
        if (algorithm != "lte" && algorithm != "nd") throw InvalidConfig("algorithm must be 'lte' or 'nd'");
        if (estimator != "relative" && estimator != "absolute") throw InvalidConfig("estimator must be 'relative' or 'absolute'");
        if (forcing != "manufactured" && forcing != "zero") throw InvalidConfig("forcing must be 'manufactured' or 'zero'");
        if (!(tau > 0.0) || !(t_end > 0.0) || !(k0 > 0.0)) throw InvalidConfig("tau, t-end and k0 must be positive");
        if (!(krylov_tol > 0.0)) throw InvalidConfig("krylov tolerance must be positive");
        if (levels < 2) throw InvalidConfig("need at least two levels");
        if (command == "nse-converge" || command == "nse-adapt") (void)Grid2D(grid, 2.0);
        if (command == "nse-adapt") {
            controller().validate();
            if (thetas.size() != 1) throw InvalidConfig("nse-adapt takes exactly one theta");
        }
    }
};

inline void to_json(json& j, const ExperimentConfig& c) {
    j = json{{"command", c.command},     {"theta", c.thetas},       {"eps", c.eps},
             {"grid", c.grid},           {"tol", c.tol},            {"kappa", c.kappa},
             {"k0", c.k0},               {"kmin", c.kmin},          {"kmax", c.kmax},
             {"case", c.mcase},          {"tau", c.tau},            {"t_end", c.t_end},
             {"levels", c.levels},       {"algorithm", c.algorithm}, {"estimator", c.estimator},
             {"forcing", c.forcing},     {"krylov_tol", c.krylov_tol}, {"seed", c.seed},
             {"out", c.out},             {"svg", c.svg}};
}

/// Overwrites the fields present in j; unknown keys are an error.
inline void merge_json(ExperimentConfig& c, const nlohmann::json& j) {
    if (!j.is_object()) throw InvalidConfig("config must be a JSON object");
    for (const auto& [key, v] : j.items()) {
        try {
            if (key == "command") c.command = v.get<std::string>();
            else if (key == "theta") c.thetas = v.is_array() ? v.get<std::vector<std::string>>() : std::vector{v.get<std::string>()};
            else if (key == "eps") c.eps = v.get<std::vector<double>>();
            else if (key == "grid") c.grid = v.get<int>();
            else if (key == "tol") c.tol = v.get<double>();
            else if (key == "kappa") c.kappa = v.get<double>();
            else if (key == "k0") c.k0 = v.get<double>();
            else if (key == "kmin") c.kmin = v.get<double>();
            else if (key == "kmax") c.kmax = v.get<double>();
            else if (key == "case") c.mcase = v.get<std::string>();
            else if (key == "tau") c.tau = v.get<double>();
            else if (key == "t_end") c.t_end = v.get<double>();
            else if (key == "levels") c.levels = v.get<int>();
            else if (key == "algorithm") c.algorithm = v.get<std::string>();
            else if (key == "estimator") c.estimator = v.get<std::string>();
            else if (key == "forcing") c.forcing = v.get<std::string>();
            else if (key == "krylov_tol") c.krylov_tol = v.get<double>();
            else if (key == "seed") c.seed = v.get<std::uint64_t>();
            else if (key == "out") c.out = v.get<std::string>();
            else if (key == "svg") c.svg = v.get<std::string>();
            else throw InvalidConfig("unknown config key '" + key + "'");
        } catch (const nlohmann::json::exception& e) {
            throw InvalidConfig("bad value for '" + key + "': " + e.what());
        }
    }
}

/// Defaults of each subcommand before any file or flag is applied.
[[nodiscard]] inline ExperimentConfig defaults_for(const std::string& command) {
    ExperimentConfig c;
    c.command = command;
    if (command == "coeffs") {
        c.thetas = {"0", "2/3", "2/sqrt5", "1"};
    } else if (command == "ivp-converge") {
        c.thetas = {"2/3", "2/sqrt5", "1"};
        c.k0 = 1.0 / 20.0;
        c.t_end = 5.0;
        c.levels = 5;
    } else if (command == "nse-converge") {
        c.thetas = {"2/3", "2/sqrt5", "1"};
        c.grid = 64;
        c.k0 = 1.0 / 16.0;
        c.levels = 4;
        c.t_end = 1.0;
        c.tau = 100.0;
        c.mcase = "decay";
    } else if (command == "nse-adapt") {
        c.thetas = {"2/3"};
        c.grid = 48;
        c.mcase = "growth";
        c.tau = 2500.0;
        c.t_end = 10.0;
        c.k0 = 5e-4;
        c.kmin = 5e-4;
        c.kmax = 5e-2;
        c.tol = 1e-7;
    }
    return c;
}

// ---------------------------------------------------------------------------
// Coefficient table

/// The default variability grid -0.95, -0.90, ..., 0.95.
[[nodiscard]] inline std::vector<double> default_eps_grid() {
    std::vector<double> e;
    for (int i = -19; i <= 19; ++i) e.push_back(i / 20.0);
    return e;
}

inline constexpr const char* kCoefficientHeader =
    "theta,eps,alpha0,alpha1,alpha2,beta0,beta1,beta2,gamma0,gamma1,gamma2,khat,"
    "a1,a0,b,c2,c1,c0,sum_alpha,sum_beta";

/// One row per (theta, eps) with k_n + k_{n-1} = 2.
inline void write_coefficient_table(std::ostream& os, const std::vector<double>& thetas, const std::vector<double>& eps) {
    os << kCoefficientHeader << '\n';
    for (double th : thetas) {
        for (double e : eps) {
            const auto c = one_leg_coefficients(Theta(th), StepPair::from_variability(e));
            const auto r = refactor_coefficients(c);
            const double values[] = {th,          e,           c.alpha[0], c.alpha[1], c.alpha[2], c.beta[0], c.beta[1],
                                     c.beta[2],   c.gamma[0],  c.gamma[1], c.gamma[2], c.khat,     r.a1,      r.a0,
                                     r.b,         r.c2,        r.c1,       r.c0,
                                     c.alpha[0] + c.alpha[1] + c.alpha[2], c.beta[0] + c.beta[1] + c.beta[2]};
            for (std::size_t i = 0; i < std::size(values); ++i) os << (i ? "," : "") << format_real(values[i]);
            os << '\n';
        }
    }
}

// ---------------------------------------------------------------------------
// ODE convergence

/// y' = -y + sin t, y(0) = 1.
[[nodiscard]] inline ivp::IvpProblem forced_decay_problem() {
    ivp::IvpProblem p;
    p.dimension = 1;
    p.rhs = [](double t, const ivp::Vector& y) { return ivp::Vector(ivp::Vector::Constant(1, -y[0] + std::sin(t))); };
    p.jacobian = [](double, const ivp::Vector&) { return ivp::Matrix(ivp::Matrix::Constant(1, 1, -1.0)); };
    p.exact_solution = [](double t) {
        return ivp::Vector(ivp::Vector::Constant(1, 1.5 * std::exp(-t) + 0.5 * (std::sin(t) - std::cos(t))));
    };
    return p;
}

/// y' = 0, y(0) = 1.
[[nodiscard]] inline ivp::IvpProblem zero_rhs_problem() {
    ivp::IvpProblem p;
    p.dimension = 1;
    p.rhs = [](double, const ivp::Vector&) { return ivp::Vector(ivp::Vector::Zero(1)); };
    p.jacobian = [](double, const ivp::Vector&) { return ivp::Matrix(ivp::Matrix::Zero(1, 1)); };
    p.exact_solution = [](double) { return ivp::Vector(ivp::Vector::Ones(1)); };
    return p;
}

enum class Schedule { constant, variable };

[[nodiscard]] inline const char* to_string(Schedule s) { return s == Schedule::constant ? "constant" : "variable"; }

/// Steps summing to t_end. Variable schedules draw iid weights in [1, 2],
/// so adjacent ratios stay within [1/2, 2].
[[nodiscard]] inline std::vector<double> step_schedule(Schedule s, std::size_t count, double t_end, std::uint64_t seed) {
    if (count < 2) throw InvalidArgument("schedule needs at least two steps");
    if (s == Schedule::constant) return std::vector<double>(count, t_end / static_cast<double>(count));
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> w(1.0, 2.0);
    std::vector<double> k(count);
    for (double& v : k) v = w(rng);
    const double total = std::accumulate(k.begin(), k.end(), 0.0);
    for (double& v : k) v *= t_end / total;
    return k;
}

struct IvpRow {
    std::string problem;
    Schedule schedule = Schedule::constant;
    double theta = 0.0;
    int level = 0;
    std::size_t steps = 0;
    double k_mean = 0.0;
    double k_max = 0.0;
    double error = 0.0;
    double rate = std::numeric_limits<double>::quiet_NaN();
    std::size_t ratio_warnings = 0;
};

struct IvpStudy {
    std::vector<IvpRow> rows;
    bool invariants_hold = true;
    std::vector<std::string> notes;
};

namespace detail {

inline IvpRow ivp_cell(const ivp::IvpProblem& p, const std::string& name, Schedule s, double th, int level,
                       const ExperimentConfig& cfg) {
    const auto base = static_cast<std::size_t>(std::llround(cfg.t_end / cfg.k0));
    const std::size_t n = base << level;
    const auto steps = step_schedule(s, n, cfg.t_end, cfg.seed + static_cast<std::uint64_t>(level));
    const auto tr = ivp::integrate_fixed(p, 0.0, p.exact_solution(0.0), p.exact_solution(steps[0]), steps, Theta(th));
    IvpRow r;
    r.problem = name;
    r.schedule = s;
    r.theta = th;
    r.level = level;
    r.steps = n;
    r.k_mean = cfg.t_end / static_cast<double>(n);
    r.k_max = *std::max_element(steps.begin(), steps.end());
    for (std::size_t i = 0; i < tr.times.size(); ++i) {
        r.error = std::max(r.error, std::abs(tr.states[i][0] - p.exact_solution(tr.times[i])[0]));
    }
    r.ratio_warnings = tr.warnings.size();
    return r;
}

}  // namespace detail

/// Halving study for each theta on the forced problem (constant and random
/// schedules) plus the zero right-hand side.
[[nodiscard]] inline IvpStudy ivp_converge(const ExperimentConfig& cfg) {
    IvpStudy st;
    const auto forced = forced_decay_problem();
    const auto zero = zero_rhs_problem();
    for (double th : cfg.theta_values()) {
        for (Schedule s : {Schedule::constant, Schedule::variable}) {
            for (int l = 0; l < cfg.levels; ++l) {
                IvpRow r = detail::ivp_cell(forced, "forced", s, th, l, cfg);
                if (l > 0) r.rate = rate(st.rows.back().error, r.error);
                if (!std::isfinite(r.error)) st.invariants_hold = false;
                st.rows.push_back(r);
            }
        }
        for (int l = 0; l < cfg.levels; ++l) {
            IvpRow r = detail::ivp_cell(zero, "zero", Schedule::variable, th, l, cfg);
            if (!(r.error <= 1e-13)) {
                st.invariants_hold = false;
                st.notes.push_back("zero right-hand side drifted at theta " + format_real(th));
            }
            st.rows.push_back(r);
        }
    }
    return st;
}

/// Least-squares order over the rows of one (problem, schedule, theta) cell,
/// using the mean step as the abscissa.
[[nodiscard]] inline double ivp_cell_order(const IvpStudy& st, const std::string& problem, Schedule s, double th) {
    std::vector<double> k, e;
    for (const auto& r : st.rows) {
        if (r.problem == problem && r.schedule == s && r.theta == th) {
            k.push_back(r.k_mean);
            e.push_back(r.error);
        }
    }
    return fitted_order(k, e);
}

inline constexpr const char* kIvpHeader = "problem,schedule,theta,level,steps,k_mean,k_max,error,rate";

inline void write_ivp_table(std::ostream& os, const IvpStudy& st) {
    os << kIvpHeader << '\n';
    for (const auto& r : st.rows) {
        os << r.problem << ',' << to_string(r.schedule) << ',' << format_real(r.theta) << ',' << r.level << ',' << r.steps
           << ',' << format_real(r.k_mean) << ',' << format_real(r.k_max) << ',' << format_real(r.error) << ','
           << format_real(r.rate) << '\n';
    }
}

// ---------------------------------------------------------------------------
// NSE convergence

struct NseConvergenceRow {
    double theta = 0.0;
    double k = 0.0;
    nse::NseErrors errors;
    double rate_u_l2 = std::numeric_limits<double>::quiet_NaN();
    double rate_u_h1 = std::numeric_limits<double>::quiet_NaN();
    double rate_p = std::numeric_limits<double>::quiet_NaN();
    double max_identity_residual = 0.0;
    double max_divergence = 0.0;
    bool monitor_holds = false;
    bool budget_monotone = false;
    double wall_seconds = 0.0;  ///< informational; not written to tables
};

/// Identity residual and divergence bounds checked on every step.
inline constexpr double kIdentityTol = 1e-8;
inline constexpr double kDivergenceTol = 1e-10;

/// Runs k = k0 / 2^l for l < levels at one theta on a shared transform.
[[nodiscard]] inline std::vector<NseConvergenceRow> nse_converge_theta(const Spectral& sp, const ExperimentConfig& cfg,
                                                                       double th) {
    std::vector<NseConvergenceRow> rows;
    for (int l = 0; l < cfg.levels; ++l) {
        nse::FixedRunConfig fc;
        fc.mcase = cfg.manufactured_case();
        fc.theta = th;
        fc.k = cfg.k0 / static_cast<double>(1 << l);
        fc.t_end = cfg.t_end;
        fc.forcing = cfg.forcing == "zero" ? nse::ForcingMode::zero : nse::ForcingMode::manufactured;
        fc.solver.krylov.rel_tol = cfg.krylov_tol;
        const auto start = std::chrono::steady_clock::now();
        const auto run = nse::run_nse_fixed(sp, fc);
        NseConvergenceRow r;
        r.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        r.theta = th;
        r.k = fc.k;
        r.errors = run.errors;
        for (const auto& rec : run.ledger.records) {
            r.max_identity_residual = std::max(r.max_identity_residual, std::abs(rec.identity_residual));
            r.max_divergence = std::max(r.max_divergence, rec.divergence);
        }
        const auto mon = nse::stability_monitor(run.ledger);
        r.monitor_holds = mon.bound_holds;
        r.budget_monotone = mon.budget_monotone;
        if (!rows.empty()) {
            const auto& p = rows.back().errors;
            r.rate_u_l2 = rate(p.u_inf_l2, r.errors.u_inf_l2);
            r.rate_u_h1 = rate(p.u_inf_h1, r.errors.u_inf_h1);
            r.rate_p = rate(p.p_l2_beta, r.errors.p_l2_beta);
        }
        rows.push_back(r);
    }
    return rows;
}

/// In-run checks: identity, divergence and the stability bound, plus the
/// monotone budget when the forcing is switched off.
[[nodiscard]] inline bool nse_row_invariants(const NseConvergenceRow& r, bool unforced) {
    return r.max_identity_residual <= kIdentityTol && r.max_divergence <= kDivergenceTol && r.monitor_holds &&
           (!unforced || r.budget_monotone);
}

inline constexpr const char* kNseConvergenceHeader =
    "theta,k,err_u_inf_l2,rate_u_inf_l2,err_u_inf_h1,rate_u_inf_h1,err_p_l2_beta,rate_p_l2_beta,"
    "max_identity_residual,max_divergence,monitor_holds,budget_monotone";

inline void write_nse_convergence_table(std::ostream& os, const std::vector<NseConvergenceRow>& rows) {
    os << kNseConvergenceHeader << '\n';
    for (const auto& r : rows) {
        os << format_real(r.theta) << ',' << format_real(r.k) << ',' << format_real(r.errors.u_inf_l2) << ','
           << format_real(r.rate_u_l2) << ',' << format_real(r.errors.u_inf_h1) << ',' << format_real(r.rate_u_h1) << ','
           << format_real(r.errors.p_l2_beta) << ',' << format_real(r.rate_p) << ','
           << format_real(r.max_identity_residual) << ',' << format_real(r.max_divergence) << ','
           << (r.monitor_holds ? 1 : 0) << ',' << (r.budget_monotone ? 1 : 0) << '\n';
    }
}

// ---------------------------------------------------------------------------
// Adaptive NSE runs

enum class Algorithm { lte, nd };

[[nodiscard]] inline const char* to_string(Algorithm a) { return a == Algorithm::lte ? "lte" : "nd"; }

struct AdaptSummary {
    Algorithm algorithm = Algorithm::lte;
    double theta = 0.0;
    std::size_t accepted = 0;
    std::size_t rejected = 0;
    bool aborted = false;
    std::string abort_reason;
    double final_time = 0.0;
    double max_accepted_estimator = 0.0;  ///< over accepted rows after startup
    bool estimator_below_tol = true;
    bool steps_within_bounds = true;
    bool all_estimators_zero = true;
    double min_step = std::numeric_limits<double>::infinity();
    double max_step = 0.0;
    double max_identity_residual = 0.0;
    double max_divergence = 0.0;
    bool time_diameter_ok = false;

    /// Every in-run predicate, with an aborted run counting as a failure.
    [[nodiscard]] bool invariants_hold() const {
        return !aborted && estimator_below_tol && steps_within_bounds && max_identity_residual <= kIdentityTol &&
               max_divergence <= kDivergenceTol;
    }
};

struct AdaptOutcome {
    RunLedger ledger;
    AdaptSummary summary;
};

/// Summarizes a ledger; the final step may be clipped to land on t_end.
[[nodiscard]] inline AdaptSummary summarize_ledger(const RunLedger& ledger, const ControllerConfig& cfg) {
    AdaptSummary s;
    s.accepted = ledger.accepted_count();
    s.rejected = ledger.rejected_count();
    const double lo = cfg.k_min * (1.0 - 1e-12), hi = cfg.k_max * (1.0 + 1e-12);
    for (const auto& r : ledger.rows) {
        s.min_step = std::min(s.min_step, r.k_n);
        s.max_step = std::max(s.max_step, r.k_n);
        if (r.k_n < lo || r.k_n > hi) s.steps_within_bounds = false;
        if (!r.accepted || r.startup) continue;
        s.final_time = std::max(s.final_time, r.t_n + r.k_n);
        s.max_accepted_estimator = std::max(s.max_accepted_estimator, r.estimator);
        if (!(r.estimator < cfg.tol)) s.estimator_below_tol = false;
        if (r.estimator != 0.0) s.all_estimators_zero = false;
    }
    return s;
}

/// Adaptive run seeded with the exact u(0) and u(k0).
[[nodiscard]] inline AdaptOutcome nse_adapt(const Spectral& sp, const ExperimentConfig& cfg, Algorithm alg) {
    cfg.validate();
    const double th = cfg.theta_values().front();
    nse::NseSolverConfig solver;
    solver.krylov.rel_tol = cfg.krylov_tol;
    const auto mode = cfg.forcing == "zero" ? nse::ForcingMode::zero : nse::ForcingMode::manufactured;
    nse::NseAdaptiveStepper stepper(sp, cfg.manufactured_case(), Theta(th), mode, solver);
    const ControllerConfig cc = cfg.controller();
    const auto y0 = stepper.exact(0.0), y1 = stepper.exact(cfg.k0);

    AdaptOutcome out;
    std::string reason;
    try {
        auto run = alg == Algorithm::lte ? adapt_loop_lte(stepper, y0, y1, 0.0, cfg.k0, cc, cfg.t_end)
                                         : adapt_loop_nd(stepper, y0, y1, 0.0, cfg.k0, cc, cfg.t_end);
        out.ledger = std::move(run.ledger);
    } catch (const TooManyRejects& e) {
        out.ledger = e.ledger();
        reason = e.what();
    } catch (const Error& e) {
        reason = e.what();
    }
    out.summary = summarize_ledger(out.ledger, cc);
    out.summary.algorithm = alg;
    out.summary.theta = th;
    out.summary.aborted = !reason.empty();
    out.summary.abort_reason = reason;
    out.summary.max_identity_residual = stepper.max_identity_residual();
    out.summary.max_divergence = stepper.max_divergence();
    out.summary.time_diameter_ok = nse::time_diameter_ok(cc.k_max, sp.grid());
    return out;
}

[[nodiscard]] inline std::string summary_line(const AdaptSummary& s) {
    std::ostringstream os;
    os << "algorithm=" << to_string(s.algorithm) << " theta=" << format_real(s.theta) << " accepted=" << s.accepted
       << " rejected=" << s.rejected << " final_time=" << format_real(s.final_time)
       << " max_estimator=" << format_real(s.max_accepted_estimator) << " k_range=[" << format_real(s.min_step) << ","
       << format_real(s.max_step) << "]" << " identity=" << format_real(s.max_identity_residual)
       << " divergence=" << format_real(s.max_divergence) << " status=" << (s.aborted ? "aborted" : "complete");
    if (s.aborted) os << " reason=\"" << s.abort_reason << '"';
    return os.str();
}

// ---------------------------------------------------------------------------
// SVG traces

struct Trace {
    std::string label;
    std::vector<double> x;
    std::vector<double> y;
};

/// Minimal line plot; the y axis is log10 when requested and nonpositive
/// values are skipped there.
inline void write_svg(std::ostream& os, const std::string& title, const std::vector<Trace>& traces, bool log_y) {
    constexpr double W = 720, H = 360, L = 70, R = 20, T = 30, B = 40;
    double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
    auto ty = [&](double v) { return log_y ? std::log10(v) : v; };
    for (const auto& tr : traces) {
        for (std::size_t i = 0; i < tr.x.size(); ++i) {
            if (log_y && !(tr.y[i] > 0.0)) continue;
            if (!std::isfinite(tr.y[i])) continue;
            x0 = std::min(x0, tr.x[i]);
            x1 = std::max(x1, tr.x[i]);
            y0 = std::min(y0, ty(tr.y[i]));
            y1 = std::max(y1, ty(tr.y[i]));
        }
    }
    if (!(x1 > x0)) x1 = x0 + 1.0;
    if (!(y1 > y0)) y1 = y0 + 1.0;
    auto px = [&](double v) { return L + (v - x0) / (x1 - x0) * (W - L - R); };
    auto py = [&](double v) { return H - B - (v - y0) / (y1 - y0) * (H - T - B); };
    static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd"};

    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n"
       << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
       << "<text x=\"" << L << "\" y=\"20\" font-size=\"14\">" << title << "</text>\n"
       << "<rect x=\"" << L << "\" y=\"" << T << "\" width=\"" << W - L - R << "\" height=\"" << H - T - B
       << "\" fill=\"none\" stroke=\"black\"/>\n";
    os << "<text x=\"4\" y=\"" << T + 10 << "\" font-size=\"10\">" << (log_y ? "1e" : "") << format_real(y1) << "</text>\n"
       << "<text x=\"4\" y=\"" << H - B << "\" font-size=\"10\">" << (log_y ? "1e" : "") << format_real(y0) << "</text>\n"
       << "<text x=\"" << L << "\" y=\"" << H - 20 << "\" font-size=\"10\">" << format_real(x0) << "</text>\n"
       << "<text x=\"" << W - R - 40 << "\" y=\"" << H - 20 << "\" font-size=\"10\">" << format_real(x1) << "</text>\n";
    for (std::size_t c = 0; c < traces.size(); ++c) {
        const auto& tr = traces[c];
        os << "<polyline fill=\"none\" stroke=\"" << colors[c % 4] << "\" points=\"";
        for (std::size_t i = 0; i < tr.x.size(); ++i) {
            if ((log_y && !(tr.y[i] > 0.0)) || !std::isfinite(tr.y[i])) continue;
            os << px(tr.x[i]) << ',' << py(ty(tr.y[i])) << ' ';
        }
        os << "\"/>\n<text x=\"" << W - R - 150 << "\" y=\"" << T + 15 + 14 * c << "\" font-size=\"11\" fill=\""
           << colors[c % 4] << "\">" << tr.label << "</text>\n";
    }
    os << "</svg>\n";
}

/// Accepted-step traces of an adaptive ledger: step size, dissipations,
/// and energy error.
[[nodiscard]] inline std::vector<std::pair<std::string, std::string>> ledger_svgs(const RunLedger& ledger,
                                                                                   const std::string& title) {
    Trace k{"k_n", {}, {}}, nd{"E_ND", {}, {}}, vd{"E_VD", {}, {}}, ee{"|energy error|", {}, {}};
    for (const auto& r : ledger.rows) {
        if (!r.accepted) continue;
        const double t = r.t_n + r.k_n;
        k.x.push_back(t);
        k.y.push_back(r.k_n);
        nd.x.push_back(t);
        nd.y.push_back(r.e_nd);
        vd.x.push_back(t);
        vd.y.push_back(r.e_vd);
        ee.x.push_back(t);
        ee.y.push_back(std::abs(r.energy_error));
    }
    std::vector<std::pair<std::string, std::string>> out;
    auto render = [&](const std::string& suffix, const std::vector<Trace>& tr, bool log_y) {
        std::ostringstream os;
        write_svg(os, title + " " + suffix, tr, log_y);
        out.emplace_back(suffix, os.str());
    };
    render("steps", {k}, false);
    render("dissipation", {nd, vd}, true);
    render("energy_error", {ee}, true);
    return out;
}

}  // namespace dln::experiments
