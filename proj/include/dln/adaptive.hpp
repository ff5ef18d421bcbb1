#pragma once

/// Step-size adaptivity for DLN runs: an AB2-like predictor and local
/// truncation error estimate with a cube-root controller, and a
/// halve/double controller driven by the ratio of numerical to viscous
/// dissipation.

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <functional>
#include <limits>
#include <optional>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "dln/core.hpp"
#include "dln/errors.hpp"
#include "dln/ivp.hpp"

namespace dln {

// ---------------------------------------------------------------------------
// AB2-like predictor

/// Time geometry of a depth-4 history ending at t_{n+1}.
///
/// `tb_last` and `khat_last` belong to the step that produced y_n (from
/// t_{n-2}, t_{n-1}, t_n); `tb_before` and `khat_before` to the step that
/// produced y_{n-1}.
struct HistoryGeometry {
    double t_next = 0.0;
    double t_curr = 0.0;
    double tb_last = 0.0;
    double tb_before = 0.0;
    double khat_last = 0.0;
    double khat_before = 0.0;
    double eps_n = 0.0;
    double eps_nm1 = 0.0;
    double eps_nm2 = 0.0;
};

/// Builds the geometry from t_{n-3}, ..., t_{n+1}.
[[nodiscard]] inline HistoryGeometry history_geometry(Theta theta, const std::array<double, 5>& t) {
    for (std::size_t i = 1; i < t.size(); ++i) {
        if (!(t[i] > t[i - 1])) throw DegenerateHistory("history times must be strictly increasing");
    }
    const double k_nm3 = t[1] - t[0];
    const double k_nm2 = t[2] - t[1];
    const double k_nm1 = t[3] - t[2];
    const double k_n = t[4] - t[3];
    const OneLegCoefficients before = one_leg_coefficients(theta, StepPair(k_nm2, k_nm3));
    const OneLegCoefficients last = one_leg_coefficients(theta, StepPair(k_nm1, k_nm2));
    HistoryGeometry g;
    g.t_next = t[4];
    g.t_curr = t[3];
    g.tb_before = broadcast_time(before, t[0], t[1], t[2]);
    g.tb_last = broadcast_time(last, t[1], t[2], t[3]);
    g.khat_before = before.khat;
    g.khat_last = last.khat;
    g.eps_n = StepPair(k_n, k_nm1).variability();
    g.eps_nm1 = last.eps;
    g.eps_nm2 = before.eps;
    return g;
}

template <class V>
struct History4 {
    V y_n;
    V y_nm1;
    V y_nm2;
    V y_nm3;
    HistoryGeometry geometry;
};

/// Weights (w_n, w_{n-1}, w_{n-2}, w_{n-3}) of the AB2-like prediction.
///
/// The predictor extrapolates linearly in time the two derivative
/// estimates (sum alpha y)/khat held at tb_last and tb_before, and
/// integrates that line over [t_n, t_{n+1}].
[[nodiscard]] inline std::array<double, 4> ab2_like_weights(const HistoryGeometry& g, Theta theta) {
    const double spread = g.tb_last - g.tb_before;
    if (!(std::abs(spread) > 0.0)) throw DegenerateHistory("broadcast points coincide");
    const double th = theta.value();
    const double a2 = (th + 1.0) / 2.0;
    const double a1 = -th;
    const double a0 = (th - 1.0) / 2.0;
    const double dt = g.t_next - g.t_curr;
    const double sum = g.t_next + g.t_curr;
    const double front = dt / (2.0 * spread);
    const double p = (sum - 2.0 * g.tb_before) / g.khat_last;
    const double q = (sum - 2.0 * g.tb_last) / g.khat_before;
    return {1.0 + front * a2 * p, front * (a1 * p - a2 * q), front * (a0 * p - a1 * q), -front * a0 * q};
}

template <class V>
[[nodiscard]] V ab2_like_predict(const History4<V>& h, Theta theta) {
    const auto w = ab2_like_weights(h.geometry, theta);
    V out = h.y_n;
    out *= w[0];
    out += w[1] * h.y_nm1;
    out += w[2] * h.y_nm2;
    out += w[3] * h.y_nm3;
    return out;
}

// ---------------------------------------------------------------------------
// Local truncation error estimate

struct LteCoefficients {
    double G = 0.0;
    double R = 0.0;
    double scale = 0.0;  ///< |G| / |G + R|
};

inline constexpr double kLteDivisorFloor = 1e-14;

/// G^(n) alone; defined for every step pattern, including G + R = 0.
[[nodiscard]] inline double lte_g_coefficient(Theta theta, double eps_n) {
    if (!(eps_n > -1.0 && eps_n < 1.0)) throw InvalidArgument("step variability must lie in (-1, 1)");
    const double th = theta.value();
    const double a2 = (th + 1.0) / 2.0;
    const double a0 = (th - 1.0) / 2.0;
    const auto b = one_leg_coefficients(theta, StepPair::from_variability(eps_n)).beta;
    const double r0 = (1.0 - eps_n) / (1.0 + eps_n);
    const double lead = b[2] - b[0] * r0;
    return (0.5 - a0 / (2.0 * a2) * r0) * lead * lead + a0 / (6.0 * a2) * r0 * r0 * r0 - 1.0 / 6.0;
}

[[nodiscard]] inline LteCoefficients lte_coefficients(Theta theta, double eps_n, double eps_nm1, double eps_nm2) {
    for (double e : {eps_n, eps_nm1, eps_nm2}) {
        if (!(e > -1.0 && e < 1.0)) throw InvalidArgument("step variability must lie in (-1, 1)");
    }
    const auto b1 = one_leg_coefficients(theta, StepPair::from_variability(eps_nm1)).beta;
    const auto b2 = one_leg_coefficients(theta, StepPair::from_variability(eps_nm2)).beta;
    const double r0 = (1.0 - eps_n) / (1.0 + eps_n);
    const double r1 = (1.0 - eps_nm1) / (1.0 + eps_nm1);
    const double r2 = (1.0 - eps_nm2) / (1.0 + eps_nm2);

    LteCoefficients c;
    c.G = lte_g_coefficient(theta, eps_n);
    const double first = 3.0 * r0 * (1.0 - b2[2] * r1 + b2[0] * r2 * r1) * (1.0 - b1[2] * r0 + b1[0] * r1 * r0);
    const double second = 3.0 * r0 * (2.0 / (1.0 + eps_n) - b2[2] * r1 * r0 + b2[0] * r2 * r1 * r0) *
                          (-b1[2] + b1[0] * r1);
    c.R = (2.0 + first + second) / 12.0;
    const double denom = c.G + c.R;
    if (std::abs(denom) <= kLteDivisorFloor) {
        throw ZeroDivisor("G + R vanishes for this step pattern");
    }
    c.scale = std::abs(c.G) / std::abs(denom);
    return c;
}

enum class EstimatorKind { absolute, relative };

[[nodiscard]] inline double lte_estimate(EstimatorKind kind, double diff_norm, double dln_norm, double scale) {
    if (kind == EstimatorKind::absolute) return scale * diff_norm;
    if (!(dln_norm > 0.0)) throw ZeroNorm("relative estimator needs a nonzero DLN solution");
    return scale * diff_norm / dln_norm;
}

template <class V>
[[nodiscard]] double lte_estimate(EstimatorKind kind, const V& y_dln, const V& y_ab2, const LteCoefficients& c) {
    V diff = y_dln;
    diff -= y_ab2;
    return lte_estimate(kind, state_traits<V>::norm(diff), state_traits<V>::norm(y_dln), c.scale);
}

// ---------------------------------------------------------------------------
// Controllers

struct ControllerConfig {
    double tol = 1e-7;
    double kappa = 0.95;
    double k_min = 5e-4;
    double k_max = 5e-2;
    EstimatorKind estimator_kind = EstimatorKind::relative;
    int max_rejects_per_step = 10;
    int startup_steps = 3;

    void validate() const {
        if (!(tol > 0.0)) throw InvalidConfig("tol must be positive");
        if (!(kappa > 0.0 && kappa <= 1.0)) throw InvalidConfig("kappa must lie in (0, 1]");
        if (!(k_min > 0.0) || !(k_max >= k_min)) throw InvalidConfig("need 0 < k_min <= k_max");
        if (max_rejects_per_step < 1) throw InvalidConfig("max_rejects_per_step must be at least 1");
        if (startup_steps < 0) throw InvalidConfig("startup_steps must be nonnegative");
    }
};

inline constexpr double kFactorMin = 0.2;
inline constexpr double kFactorMax = 1.5;

/// min{1.5, max{0.2, kappa (Tol/est)^(1/3)}}; 1.5 when est = 0.
[[nodiscard]] inline double controller_factor(double est, const ControllerConfig& cfg) {
    if (!(est >= 0.0)) throw InvalidArgument("estimator must be nonnegative");
    if (est == 0.0) return kFactorMax;
    return std::min(kFactorMax, std::max(kFactorMin, cfg.kappa * std::cbrt(cfg.tol / est)));
}

[[nodiscard]] inline double controller_next_step(double k_n, double est, const ControllerConfig& cfg) {
    if (!(k_n > 0.0)) throw InvalidArgument("step must be positive");
    return std::clamp(k_n * controller_factor(est, cfg), cfg.k_min, cfg.k_max);
}

enum class Outcome { accept, reject };

struct StepDecision {
    Outcome outcome = Outcome::reject;
    double estimator = 0.0;
    double next_step = 0.0;
};

/// Decision of the dissipation-ratio controller: double on accept, halve on
/// reject, both clamped to [k_min, k_max].
[[nodiscard]] inline StepDecision nd_decision(double k_n, double chi, const ControllerConfig& cfg) {
    if (chi < cfg.tol) return {Outcome::accept, chi, std::min(2.0 * k_n, cfg.k_max)};
    return {Outcome::reject, chi, std::max(0.5 * k_n, cfg.k_min)};
}

[[nodiscard]] inline StepDecision lte_decision(double k_n, double est, const ControllerConfig& cfg) {
    return {est < cfg.tol ? Outcome::accept : Outcome::reject, est, controller_next_step(k_n, est, cfg)};
}

// ---------------------------------------------------------------------------
// Dissipation

struct DissipationPair {
    double numerical = 0.0;  ///< |sum gamma y|^2 / khat
    double viscous = 0.0;    ///< nu |grad y_beta|^2
};

template <class V>
[[nodiscard]] DissipationPair dissipation_pair(const V& y_prev, const V& y_curr, const V& y_next,
                                               const OneLegCoefficients& c, double grad_sq_beta, double nu) {
    const V g = combine3(c.gamma, y_prev, y_curr, y_next);
    const double n = state_traits<V>::norm(g);
    return {n * n / c.khat, nu * grad_sq_beta};
}

// ---------------------------------------------------------------------------
// Ledger

struct LedgerRow {
    std::size_t attempt_index = 0;
    double t_n = 0.0;  ///< start of the attempted step
    double k_n = 0.0;
    bool accepted = false;
    double estimator = std::numeric_limits<double>::quiet_NaN();
    double e_nd = 0.0;
    double e_vd = 0.0;
    double energy = 0.0;  ///< (1/2)|y_{n+1}|^2 of the attempt
    bool startup = false;
    bool scale_fallback = false;
    double energy_error = std::numeric_limits<double>::quiet_NaN();
};

struct RunLedger {
    std::vector<LedgerRow> rows;

    [[nodiscard]] std::size_t accepted_count() const {
        return static_cast<std::size_t>(std::count_if(rows.begin(), rows.end(), [](const auto& r) { return r.accepted; }));
    }
    [[nodiscard]] std::size_t rejected_count() const { return rows.size() - accepted_count(); }
};

/// Shortest round-trip decimal form; "nan" and "inf" spelled out.
[[nodiscard]] inline std::string format_real(double x) {
    if (std::isnan(x)) return "nan";
    if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof buf, x);
    return std::string(buf, res.ptr);
}

inline constexpr const char* kLedgerHeader =
    "attempt_index,t_n,k_n,accepted,estimator,E_ND,E_VD,energy,startup,scale_fallback,energy_error";

inline void write_ledger_csv(std::ostream& os, const RunLedger& ledger) {
    os << kLedgerHeader << '\n';
    for (const auto& r : ledger.rows) {
        os << r.attempt_index << ',' << format_real(r.t_n) << ',' << format_real(r.k_n) << ','
           << (r.accepted ? 1 : 0) << ',' << format_real(r.estimator) << ',' << format_real(r.e_nd) << ','
           << format_real(r.e_vd) << ',' << format_real(r.energy) << ',' << (r.startup ? 1 : 0) << ','
           << (r.scale_fallback ? 1 : 0) << ',' << format_real(r.energy_error) << '\n';
    }
}

/// Raised when one step is rejected more than max_rejects_per_step times.
/// Carries the ledger up to the failure.
class TooManyRejects : public Error {
public:
    TooManyRejects(const std::string& what, RunLedger ledger)
        : Error("TooManyRejects: " + what), ledger_(std::move(ledger)) {}
    [[nodiscard]] const RunLedger& ledger() const noexcept { return ledger_; }

private:
    RunLedger ledger_;
};

// ---------------------------------------------------------------------------
// Loops

template <class State>
struct StepOutput {
    State y_next;
    double grad_sq_beta = 0.0;  ///< squared seminorm of y_{n,beta}
};

template <class S>
concept AdaptiveStepper = requires(S& s, const typename S::State& y, double t, const StepPair& pair) {
    { s.theta() } -> std::convertible_to<Theta>;
    { s.viscosity() } -> std::convertible_to<double>;
    { s.advance(y, y, t, pair) } -> std::same_as<StepOutput<typename S::State>>;
    { s.energy(y) } -> std::convertible_to<double>;
    { s.exact_energy(t) } -> std::same_as<std::optional<double>>;
};

template <class State>
struct AdaptiveRun {
    RunLedger ledger;
    std::vector<double> times;  ///< accepted times, starting at t0
    State y_prev;
    State y_final;
};

struct LoopHooks {
    /// Replaces the computed estimator (or dissipation ratio) of an attempt.
    std::function<double(std::size_t attempt, double value)> override_estimator;
};

namespace detail {

template <AdaptiveStepper S>
LedgerRow make_row(S& s, std::size_t attempt, double t_n, double k, const typename S::State& y_prev,
                   const typename S::State& y_curr, const StepOutput<typename S::State>& out,
                   const OneLegCoefficients& c) {
    LedgerRow row;
    row.attempt_index = attempt;
    row.t_n = t_n;
    row.k_n = k;
    const DissipationPair d = dissipation_pair(y_prev, y_curr, out.y_next, c, out.grad_sq_beta, s.viscosity());
    row.e_nd = d.numerical;
    row.e_vd = d.viscous;
    row.energy = s.energy(out.y_next);
    if (const auto ex = s.exact_energy(t_n + k)) row.energy_error = row.energy - *ex;
    return row;
}

inline void require_interval(double t0, double k0, double t_end, const ControllerConfig& cfg) {
    cfg.validate();
    if (!(k0 > 0.0)) throw InvalidArgument("k0 must be positive");
    if (!(t_end > t0 + k0)) throw InvalidArgument("t_end must lie beyond the seeded step");
}

inline bool time_left(double t, double t_end, const ControllerConfig& cfg) {
    return t_end - t >= cfg.k_min * (1.0 - 1e-12);
}

}  // namespace detail

/// Local-truncation-error controlled run seeded with (t0, y0), (t0 + k0, y1).
///
/// The first `startup_steps` steps use k0 and are accepted unconditionally.
/// Afterwards each attempt is accepted when the estimate is below tol; the
/// controller sets the next step on accept and the retried step on reject.
/// The run stops once less than k_min remains before t_end.
template <AdaptiveStepper S>
[[nodiscard]] AdaptiveRun<typename S::State> adapt_loop_lte(S& s, const typename S::State& y0,
                                                            const typename S::State& y1, double t0, double k0,
                                                            const ControllerConfig& cfg, double t_end,
                                                            const LoopHooks& hooks = {}) {
    using State = typename S::State;
    detail::require_interval(t0, k0, t_end, cfg);
    if (cfg.startup_steps < 2) throw InvalidConfig("the AB2-like predictor needs at least 2 startup steps");
    const Theta theta = s.theta();

    std::vector<double> times{t0, t0 + k0};
    std::vector<State> ys{y0, y1};  // last four accepted states
    RunLedger ledger;
    std::size_t attempt = 0;

    auto push = [&](State y, double t) {
        times.push_back(t);
        ys.push_back(std::move(y));
        if (ys.size() > 4) ys.erase(ys.begin());
    };

    for (int i = 0; i < cfg.startup_steps; ++i) {
        const double t = times.back();
        const StepPair pair(k0, times[times.size() - 1] - times[times.size() - 2]);
        const State& y_prev = ys[ys.size() - 2];
        const State& y_curr = ys.back();
        auto out = s.advance(y_prev, y_curr, t, pair);
        LedgerRow row = detail::make_row(s, attempt++, t, k0, y_prev, y_curr, out, one_leg_coefficients(theta, pair));
        row.accepted = true;
        row.startup = true;
        ledger.rows.push_back(row);
        push(std::move(out.y_next), t + k0);
    }

    double k = k0;
    int rejects = 0;
    while (detail::time_left(times.back(), t_end, cfg)) {
        const std::size_t m = times.size();
        const double t = times[m - 1];
        const double k_try = std::min(k, t_end - t);
        const StepPair pair(k_try, t - times[m - 2]);
        const State& y_prev = ys[2];
        const State& y_curr = ys[3];
        auto out = s.advance(y_prev, y_curr, t, pair);

        History4<State> h{ys[3], ys[2], ys[1], ys[0],
                          history_geometry(theta, {times[m - 4], times[m - 3], times[m - 2], t, t + k_try})};
        const State y_ab2 = ab2_like_predict(h, theta);
        LteCoefficients lc;
        bool fallback = false;
        try {
            lc = lte_coefficients(theta, h.geometry.eps_n, h.geometry.eps_nm1, h.geometry.eps_nm2);
        } catch (const ZeroDivisor&) {
            lc.scale = 1.0;
            fallback = true;
        }
        double est = lte_estimate(cfg.estimator_kind, out.y_next, y_ab2, lc);
        if (hooks.override_estimator) est = hooks.override_estimator(attempt, est);

        LedgerRow row = detail::make_row(s, attempt++, t, k_try, y_prev, y_curr, out, one_leg_coefficients(theta, pair));
        row.estimator = est;
        row.scale_fallback = fallback;
        const StepDecision d = lte_decision(k_try, est, cfg);
        row.accepted = d.outcome == Outcome::accept;
        ledger.rows.push_back(row);
        k = d.next_step;
        if (row.accepted) {
            push(std::move(out.y_next), t + k_try);
            rejects = 0;
        } else if (++rejects > cfg.max_rejects_per_step) {
            throw TooManyRejects("step at t = " + format_real(t) + " rejected " + std::to_string(rejects) + " times",
                                 std::move(ledger));
        }
    }
    return {std::move(ledger), std::vector<double>(times.begin(), times.end()), ys[ys.size() - 2], ys.back()};
}

/// Dissipation-ratio controlled run: chi = E_ND / E_VD, accept and double
/// while chi < tol, otherwise halve and retry. With E_VD = 0 the attempt is
/// accepted only when E_ND = 0 as well.
template <AdaptiveStepper S>
[[nodiscard]] AdaptiveRun<typename S::State> adapt_loop_nd(S& s, const typename S::State& y0,
                                                           const typename S::State& y1, double t0, double k0,
                                                           const ControllerConfig& cfg, double t_end,
                                                           const LoopHooks& hooks = {}) {
    using State = typename S::State;
    detail::require_interval(t0, k0, t_end, cfg);
    const Theta theta = s.theta();

    std::vector<double> times{t0, t0 + k0};
    State y_prev = y0;
    State y_curr = y1;
    RunLedger ledger;
    std::size_t attempt = 0;
    double k = k0;
    int rejects = 0;
    bool undefined_ratio = false;
    while (detail::time_left(times.back(), t_end, cfg)) {
        const double t = times.back();
        const double k_try = std::min(k, t_end - t);
        const StepPair pair(k_try, t - times[times.size() - 2]);
        auto out = s.advance(y_prev, y_curr, t, pair);
        LedgerRow row = detail::make_row(s, attempt++, t, k_try, y_prev, y_curr, out, one_leg_coefficients(theta, pair));
        double chi;
        undefined_ratio = false;
        if (row.e_vd > 0.0) {
            chi = row.e_nd / row.e_vd;
        } else if (row.e_nd == 0.0) {
            chi = 0.0;
        } else {
            chi = std::numeric_limits<double>::infinity();
            undefined_ratio = true;
        }
        if (hooks.override_estimator) chi = hooks.override_estimator(attempt - 1, chi);
        row.estimator = chi;
        const StepDecision d = nd_decision(k_try, chi, cfg);
        row.accepted = d.outcome == Outcome::accept;
        ledger.rows.push_back(row);
        k = d.next_step;
        if (row.accepted) {
            times.push_back(t + k_try);
            y_prev = std::move(y_curr);
            y_curr = std::move(out.y_next);
            rejects = 0;
        } else if (++rejects > cfg.max_rejects_per_step) {
            const std::string where = "step at t = " + format_real(t);
            if (undefined_ratio) throw ZeroViscousDissipation(where + ": E_VD = 0 while E_ND > 0");
            throw TooManyRejects(where + " rejected " + std::to_string(rejects) + " times", std::move(ledger));
        }
    }
    return {std::move(ledger), std::move(times), std::move(y_prev), std::move(y_curr)};
}

// ---------------------------------------------------------------------------
// ODE adaptor

/// Adapts an IvpProblem to the loops. The viscous seminorm defaults to the
/// squared Euclidean norm of y_{n,beta}.
class OdeStepper {
public:
    using State = Eigen::VectorXd;

    OdeStepper(ivp::IvpProblem problem, Theta theta, ivp::StageSolveConfig cfg = {}, double nu = 1.0)
        : problem_(std::move(problem)), theta_(theta), cfg_(cfg), nu_(nu) {}

    void set_seminorm(std::function<double(const State&)> f) { seminorm_sq_ = std::move(f); }

    [[nodiscard]] Theta theta() const { return theta_; }
    [[nodiscard]] double viscosity() const { return nu_; }

    [[nodiscard]] StepOutput<State> advance(const State& y_prev, const State& y_curr, double t_curr,
                                            const StepPair& pair) {
        const ivp::StateWindow w{t_curr - pair.previous(), t_curr, y_prev, y_curr};
        ivp::StepResult r = ivp::dln_step_refactorized(problem_, w, theta_, pair, cfg_);
        const OneLegCoefficients c = one_leg_coefficients(theta_, pair);
        const State yb = combine3(c.beta, y_prev, y_curr, r.y_next);
        const double g = seminorm_sq_ ? seminorm_sq_(yb) : yb.squaredNorm();
        return {std::move(r.y_next), g};
    }

    [[nodiscard]] double energy(const State& y) const { return 0.5 * y.squaredNorm(); }

    [[nodiscard]] std::optional<double> exact_energy(double t) const {
        if (!problem_.exact_solution) return std::nullopt;
        return 0.5 * problem_.exact_solution(t).squaredNorm();
    }

private:
    ivp::IvpProblem problem_;
    Theta theta_;
    ivp::StageSolveConfig cfg_;
    double nu_;
    std::function<double(const State&)> seminorm_sq_;
};

}  // namespace dln
