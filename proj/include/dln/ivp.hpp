#pragma once

/// DLN stepping for y' = f(t, y) with Eigen vector states.

#include <array>
#include <cmath>
#include <limits>
#include <cstddef>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "dln/core.hpp"
#include "dln/errors.hpp"

namespace dln {

template <>
struct state_traits<Eigen::VectorXd> {
    static double dot(const Eigen::VectorXd& a, const Eigen::VectorXd& b) { return a.dot(b); }
    static double norm(const Eigen::VectorXd& a) { return a.norm(); }
    static bool all_finite(const Eigen::VectorXd& a) { return a.allFinite(); }
};

[[nodiscard]] inline std::span<const double> as_span(const Eigen::VectorXd& v) {
    return {v.data(), static_cast<std::size_t>(v.size())};
}

namespace ivp {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

/// f(t, y) = L(t) y + B(w) y + g(t) with the advecting slot w frozen by the
/// semi-implicit scheme.
struct BilinearSplit {
    std::function<Matrix(double)> linear;
    std::function<Matrix(const Vector&)> advective;
    std::function<Vector(double)> source;
};

struct IvpProblem {
    Eigen::Index dimension = 0;
    std::function<Vector(double, const Vector&)> rhs;
    std::function<Matrix(double, const Vector&)> jacobian;  ///< optional
    std::optional<BilinearSplit> bilinear_split;
    std::function<Vector(double)> exact_solution;  ///< optional

    void validate() const {
        if (dimension <= 0) throw InvalidConfig("problem dimension must be positive");
        if (!rhs) throw InvalidConfig("problem has no right-hand side");
        if (bilinear_split) {
            const auto& s = *bilinear_split;
            if (!s.linear || !s.advective || !s.source) {
                throw InvalidConfig("bilinear split must provide linear, advective and source parts");
            }
        }
    }
};

/// Largest relative mismatch between rhs(t, y) and the re-assembled split
/// L(t) y + B(y) y + g(t) over random probes in [t_lo, t_hi] x [-1, 1]^d.
[[nodiscard]] inline double bilinear_split_mismatch(const IvpProblem& p, double t_lo, double t_hi,
                                                    int probes = 32, unsigned seed = 7) {
    p.validate();
    if (!p.bilinear_split) throw InvalidConfig("problem has no bilinear split");
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> ut(t_lo, t_hi);
    std::uniform_real_distribution<double> uy(-1.0, 1.0);
    double worst = 0.0;
    for (int i = 0; i < probes; ++i) {
        const double t = ut(rng);
        Vector y(p.dimension);
        for (Eigen::Index j = 0; j < y.size(); ++j) y[j] = uy(rng);
        const auto& s = *p.bilinear_split;
        const Vector f = p.rhs(t, y);
        const Vector g = s.linear(t) * y + s.advective(y) * y + s.source(t);
        worst = std::max(worst, (f - g).norm() / std::max(1.0, f.norm()));
    }
    return worst;
}

struct StateWindow {
    double t_prev = 0.0;
    double t_curr = 0.0;
    Vector y_prev;
    Vector y_curr;

    void validate(Eigen::Index dimension) const {
        if (!(t_curr > t_prev)) throw InvalidArgument("window times must be strictly increasing");
        if (y_prev.size() != dimension || y_curr.size() != dimension) {
            throw DimensionMismatch("window states do not match the problem dimension");
        }
    }
};

enum class StageMethod { newton, fixed_point, linear_direct };

struct StageSolveConfig {
    StageMethod method = StageMethod::newton;
    double abs_tol = 1e-12;
    double rel_tol = 1e-10;
    int max_iters = 50;
    /// Use the bilinear split (one linear solve) when the problem has one.
    bool semi_implicit = true;

    void validate() const {
        if (!(abs_tol > 0.0) || !(rel_tol > 0.0)) throw InvalidConfig("stage tolerances must be positive");
        if (max_iters < 1) throw InvalidConfig("max_iters must be at least 1");
    }
};

struct StageReport {
    int iterations = 0;  ///< nonlinear iterations; zero for linear solves
    double residual = 0.0;
    bool semi_implicit = false;
};

struct StepResult {
    Vector y_next;
    StageReport report;
};

namespace detail {

/// Forward-difference Jacobian of f(t, .) at y.
inline Matrix fd_jacobian(const IvpProblem& p, double t, const Vector& y, const Vector& fy) {
    const Eigen::Index n = y.size();
    Matrix J(n, n);
    const double root_eps = std::sqrt(std::numeric_limits<double>::epsilon());
    Vector yp = y;
    for (Eigen::Index j = 0; j < n; ++j) {
        const double h = root_eps * std::max(1.0, std::abs(y[j]));
        yp[j] = y[j] + h;
        J.col(j) = (p.rhs(t, yp) - fy) / h;
        yp[j] = y[j];
    }
    return J;
}

inline void require_finite(const Vector& v, const char* what) {
    if (!v.allFinite()) throw NonFiniteState(std::string(what) + " contains non-finite entries");
}

/// Solves a x - r - h f(t, p + q x) = 0 for x, starting from x0.
inline std::pair<Vector, StageReport> solve_stage(const IvpProblem& prob, double t, double a, const Vector& r,
                                                  double h, const Vector& p, double q, Vector x,
                                                  const StageSolveConfig& cfg) {
    const Eigen::Index n = r.size();
    auto residual_of = [&](const Vector& xv, Vector& arg, Vector& fv) {
        arg = p + q * xv;
        fv = prob.rhs(t, arg);
        return Vector(a * xv - r - h * fv);
    };
    Vector arg(n), fv(n);
    StageReport rep;
    for (int it = 0; it <= cfg.max_iters; ++it) {
        Vector res = residual_of(x, arg, fv);
        rep.residual = res.norm();
        if (!std::isfinite(rep.residual)) throw NonFiniteState("stage residual is not finite");
        // Relative part measured against the size of the terms that cancel.
        const double scale = std::max({a * x.norm(), r.norm(), h * fv.norm()});
        const bool converged = rep.residual <= cfg.abs_tol + cfg.rel_tol * scale;
        if (converged && (it > 0 || cfg.method != StageMethod::linear_direct)) {
            rep.iterations = it;
            return {x, rep};
        }
        if (it == cfg.max_iters) break;
        if (cfg.method == StageMethod::fixed_point) {
            x = (r + h * fv) / a;
        } else {
            const Matrix fy = prob.jacobian ? prob.jacobian(t, arg) : fd_jacobian(prob, t, arg, fv);
            const Matrix J = a * Matrix::Identity(n, n) - h * q * fy;
            const Vector dx = J.partialPivLu().solve(res);
            x -= dx;
            require_finite(x, "stage iterate");
            if (cfg.method == StageMethod::linear_direct) {
                rep.iterations = 0;
                rep.residual = residual_of(x, arg, fv).norm();
                return {x, rep};
            }
            // A Newton correction below tolerance also ends the solve; the
            // residual of stiff problems stalls at rounding of h f.
            if (dx.norm() <= cfg.abs_tol + cfg.rel_tol * x.norm()) {
                rep.iterations = it + 1;
                rep.residual = residual_of(x, arg, fv).norm();
                return {x, rep};
            }
        }
        require_finite(x, "stage iterate");
    }
    throw SolverDiverged("stage solve did not converge in " + std::to_string(cfg.max_iters) +
                         " iterations (residual " + std::to_string(rep.residual) + ")");
}

/// Solves a x - r = h [L(t) + B(w)] (p + q x) + h g(t), linear in x.
inline std::pair<Vector, StageReport> solve_stage_bilinear(const IvpProblem& prob, double t, double a,
                                                           const Vector& r, double h, const Vector& p,
                                                           double q, const Vector& w) {
    const auto& s = *prob.bilinear_split;
    const Eigen::Index n = r.size();
    const Matrix M = s.linear(t) + s.advective(w);
    const Matrix J = a * Matrix::Identity(n, n) - h * q * M;
    const Vector rhs = r + h * (M * p + s.source(t));
    Vector x = J.partialPivLu().solve(rhs);
    require_finite(x, "semi-implicit stage solution");
    StageReport rep;
    rep.semi_implicit = true;
    rep.residual = (J * x - rhs).norm();
    return {x, rep};
}

inline bool use_split(const IvpProblem& p, const StageSolveConfig& cfg) {
    return cfg.semi_implicit && p.bilinear_split.has_value();
}

}  // namespace detail

/// One DLN step solved for y_{n+1} directly from the one-leg relation
/// sum alpha y = khat f(t_beta, sum beta y).
[[nodiscard]] inline StepResult dln_step_direct(const IvpProblem& problem, const StateWindow& w, Theta theta,
                                                const StepPair& pair, const StageSolveConfig& cfg = {}) {
    problem.validate();
    cfg.validate();
    w.validate(problem.dimension);
    const OneLegCoefficients c = one_leg_coefficients(theta, pair);
    const double t_next = w.t_curr + pair.current();
    const double tb = broadcast_time(c, w.t_prev, w.t_curr, t_next);
    const Vector r = -(c.alpha[1] * w.y_curr + c.alpha[0] * w.y_prev);
    const Vector p = c.beta[1] * w.y_curr + c.beta[0] * w.y_prev;
    std::pair<Vector, StageReport> out;
    if (detail::use_split(problem, cfg)) {
        const Vector yt = extrapolant(w.y_prev, w.y_curr, c, pair.ratio());
        out = detail::solve_stage_bilinear(problem, tb, c.alpha[2], r, c.khat, p, c.beta[2], yt);
    } else {
        const Vector guess = w.y_curr + pair.ratio() * (w.y_curr - w.y_prev);
        out = detail::solve_stage(problem, tb, c.alpha[2], r, c.khat, p, c.beta[2], guess, cfg);
    }
    detail::require_finite(out.first, "DLN step");
    return {out.first, out.second};
}

/// The same step as pre-process, backward-Euler stage at t_beta with step
/// b khat, and post-process.
[[nodiscard]] inline StepResult dln_step_refactorized(const IvpProblem& problem, const StateWindow& w,
                                                      Theta theta, const StepPair& pair,
                                                      const StageSolveConfig& cfg = {}) {
    problem.validate();
    cfg.validate();
    w.validate(problem.dimension);
    const OneLegCoefficients c = one_leg_coefficients(theta, pair);
    const RefactorCoefficients rc = refactor_coefficients(c);
    const double t_next = w.t_curr + pair.current();
    const double tb = broadcast_time(c, w.t_prev, w.t_curr, t_next);
    // a1 + a0 = 1 and c2 + c1 + c0 = 1; the difference forms keep constants exact.
    const Vector y_old = w.y_curr + rc.a0 * (w.y_prev - w.y_curr);
    const double k_be = rc.b * c.khat;
    const Vector zero = Vector::Zero(problem.dimension);
    std::pair<Vector, StageReport> stage;
    if (detail::use_split(problem, cfg)) {
        const Vector yt = extrapolant(w.y_prev, w.y_curr, c, pair.ratio());
        stage = detail::solve_stage_bilinear(problem, tb, 1.0, y_old, k_be, zero, 1.0, yt);
    } else {
        const Vector guess = extrapolant(w.y_prev, w.y_curr, c, pair.ratio());
        stage = detail::solve_stage(problem, tb, 1.0, y_old, k_be, zero, 1.0, guess, cfg);
    }
    Vector y_next = w.y_curr + rc.c2 * (stage.first - w.y_curr) + rc.c0 * (w.y_prev - w.y_curr);
    detail::require_finite(y_next, "DLN step");
    return {std::move(y_next), stage.second};
}

/// One implicit-midpoint step, used to produce y_1 when no exact value exists.
[[nodiscard]] inline Vector midpoint_startup(const IvpProblem& problem, double t0, const Vector& y0, double k0,
                                             const StageSolveConfig& cfg = {}) {
    problem.validate();
    cfg.validate();
    if (!(k0 > 0.0)) throw InvalidArgument("startup step must be positive");
    StageSolveConfig c = cfg;
    if (c.method == StageMethod::linear_direct) c.method = StageMethod::newton;
    auto out = detail::solve_stage(problem, t0 + 0.5 * k0, 1.0, y0, k0, 0.5 * y0, 0.5, y0, c);
    detail::require_finite(out.first, "startup step");
    return out.first;
}

enum class StepPath { direct, refactorized };

struct Trajectory {
    std::vector<double> times;
    std::vector<Vector> states;
    std::vector<double> g_energy;  ///< |(y_{n+1}, y_n)|_G^2 after each step
    std::vector<StageReport> reports;
    std::vector<std::string> warnings;
};

/// Step ratios outside this band draw a warning from integrate_fixed.
inline constexpr double kRatioLow = 0.2;
inline constexpr double kRatioHigh = 1.5;

/// Integrates from (t0, y0) and (t0 + steps[0], y1) through the remaining
/// steps of the schedule.
[[nodiscard]] inline Trajectory integrate_fixed(const IvpProblem& problem, double t0, const Vector& y0,
                                                const Vector& y1, std::span<const double> steps, Theta theta,
                                                const StageSolveConfig& cfg = {},
                                                StepPath path = StepPath::refactorized) {
    problem.validate();
    if (steps.empty()) throw InvalidArgument("step schedule is empty");
    for (double k : steps) {
        if (!(k > 0.0) || !std::isfinite(k)) throw InvalidArgument("step schedule entries must be positive");
    }
    if (y0.size() != problem.dimension || y1.size() != problem.dimension) {
        throw DimensionMismatch("initial states do not match the problem dimension");
    }
    Trajectory tr;
    tr.times = {t0, t0 + steps[0]};
    tr.states = {y0, y1};
    const GNormWeights gw = g_norm_weights(theta);
    for (std::size_t n = 1; n < steps.size(); ++n) {
        const StepPair pair(steps[n], steps[n - 1]);
        const double ratio = pair.ratio();
        if (ratio < kRatioLow || ratio > kRatioHigh) {
            tr.warnings.push_back("step " + std::to_string(n) + ": ratio " + std::to_string(ratio) +
                                  " outside [0.2, 1.5]");
        }
        StateWindow w{tr.times[n - 1], tr.times[n], tr.states[n - 1], tr.states[n]};
        StepResult r;
        try {
            r = path == StepPath::direct ? dln_step_direct(problem, w, theta, pair, cfg)
                                         : dln_step_refactorized(problem, w, theta, pair, cfg);
        } catch (Error& e) {
            e.set_step_index(n);
            throw;
        }
        tr.g_energy.push_back(gw.top * r.y_next.squaredNorm() + gw.bottom * tr.states[n].squaredNorm());
        tr.reports.push_back(r.report);
        tr.times.push_back(tr.times[n] + steps[n]);
        tr.states.push_back(std::move(r.y_next));
    }
    return tr;
}

}  // namespace ivp
}  // namespace dln
