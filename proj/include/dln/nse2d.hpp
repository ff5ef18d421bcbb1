#pragma once

/// Semi-implicit DLN for the 2D periodic incompressible Navier-Stokes
/// equations, discretized by a dealiased Fourier-Galerkin method.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "dln/adaptive.hpp"
#include "dln/core.hpp"
#include "dln/errors.hpp"
#include "dln/krylov.hpp"
#include "dln/spectral.hpp"

namespace dln::nse {

// ---------------------------------------------------------------------------
// Advection

/// Skew-symmetric advection (1/2)[(u.grad)v + div(u (x) v)] with the advecting
/// field frozen. Inputs and outputs are 2/3-truncated so every product is
/// alias free.
class Advector {
public:
    Advector(const Spectral& sp, const VelocityField& u_tilde) : sp_(sp) {
        require_same_grid(sp.grid(), u_tilde.grid);
        SpectralVelocity s = sp.forward(u_tilde);
        sp.truncate(s);
        u_ = sp.inverse(s);
    }

    [[nodiscard]] SpectralVelocity apply(const SpectralVelocity& v_hat) const {
        SpectralVelocity v = v_hat;
        sp_.truncate(v);
        const SpectralVelocity gx = sp_.gradient(v.x);
        const SpectralVelocity gy = sp_.gradient(v.y);
        const auto dxvx = sp_.inverse(gx.x), dyvx = sp_.inverse(gx.y);
        const auto dxvy = sp_.inverse(gy.x), dyvy = sp_.inverse(gy.y);
        const auto vx = sp_.inverse(v.x), vy = sp_.inverse(v.y);
        const std::size_t np = vx.size();
        std::vector<double> cx(np), cy(np), uxvx(np), uyvx(np), uxvy(np), uyvy(np);
        for (std::size_t i = 0; i < np; ++i) {
            const double ux = u_.x[i], uy = u_.y[i];
            cx[i] = ux * dxvx[i] + uy * dyvx[i];
            cy[i] = ux * dxvy[i] + uy * dyvy[i];
            uxvx[i] = ux * vx[i];
            uyvx[i] = uy * vx[i];
            uxvy[i] = ux * vy[i];
            uyvy[i] = uy * vy[i];
        }
        SpectralVelocity out{sp_.forward(cx), sp_.forward(cy)};
        const Modes fxx = sp_.forward(uxvx), fyx = sp_.forward(uyvx);
        const Modes fxy = sp_.forward(uxvy), fyy = sp_.forward(uyvy);
        const Complex I(0.0, 1.0);
        for (std::size_t m = 0; m < out.x.size(); ++m) {
            out.x[m] = 0.5 * (out.x[m] + I * (sp_.kx(m) * fxx[m] + sp_.ky(m) * fyx[m]));
            out.y[m] = 0.5 * (out.y[m] + I * (sp_.kx(m) * fxy[m] + sp_.ky(m) * fyy[m]));
        }
        sp_.truncate(out);
        return out;
    }

    [[nodiscard]] const VelocityField& advecting_field() const noexcept { return u_; }

private:
    const Spectral& sp_;
    VelocityField u_;
};

[[nodiscard]] inline VelocityField advection_apply(const Spectral& sp, const VelocityField& u_tilde,
                                                   const VelocityField& v) {
    require_same_grid(u_tilde.grid, v.grid);
    return sp.inverse(Advector(sp, u_tilde).apply(sp.forward(v)));
}

/// b(u, v, w) = (1/2)(u.grad v, w) - (1/2)(u.grad w, v) by grid quadrature.
[[nodiscard]] inline double trilinear_b(const Spectral& sp, const VelocityField& u, const VelocityField& v,
                                       const VelocityField& w) {
    require_same_grid(u.grid, v.grid);
    require_same_grid(u.grid, w.grid);
    require_same_grid(sp.grid(), u.grid);
    auto convect = [&](const VelocityField& a) {
        const SpectralVelocity s = sp.forward(a);
        const SpectralVelocity gx = sp.gradient(s.x), gy = sp.gradient(s.y);
        const auto dxx = sp.inverse(gx.x), dyx = sp.inverse(gx.y);
        const auto dxy = sp.inverse(gy.x), dyy = sp.inverse(gy.y);
        VelocityField out(a.grid);
        for (std::size_t i = 0; i < out.x.size(); ++i) {
            out.x[i] = u.x[i] * dxx[i] + u.y[i] * dyx[i];
            out.y[i] = u.x[i] * dxy[i] + u.y[i] * dyy[i];
        }
        return out;
    };
    return 0.5 * inner(convect(v), w) - 0.5 * inner(convect(w), v);
}

// ---------------------------------------------------------------------------
// Manufactured Taylor-Green solutions

enum class CaseKind { taylor_green_decay, taylor_green_growth };

enum class ForcingMode { manufactured, zero };

struct ManufacturedCase {
    CaseKind kind = CaseKind::taylor_green_decay;
    double omega = 1.0;
    double tau = 100.0;

    void validate() const {
        if (!(omega > 0.0) || !std::isfinite(omega)) throw InvalidConfig("omega must be positive");
        if (!(tau > 0.0) || !std::isfinite(tau)) throw InvalidConfig("tau must be positive");
    }
    [[nodiscard]] double viscosity() const noexcept { return 1.0 / tau; }
    [[nodiscard]] double sign() const noexcept { return kind == CaseKind::taylor_green_decay ? -1.0 : 1.0; }
    /// Time factor of the velocity; the pressure carries its square.
    [[nodiscard]] double amplitude(double t) const {
        return std::exp(sign() * 2.0 * omega * omega * std::numbers::pi * std::numbers::pi * t / tau);
    }
};

[[nodiscard]] inline const char* to_string(CaseKind k) noexcept {
    return k == CaseKind::taylor_green_decay ? "taylor_green_decay" : "taylor_green_growth";
}

[[nodiscard]] inline VelocityField exact_velocity(const Grid2D& g, const ManufacturedCase& c, double t) {
    const double a = c.omega * std::numbers::pi, e = c.amplitude(t);
    VelocityField u(g);
    for (int iy = 0; iy < g.n; ++iy) {
        const double y = g.coordinate(iy);
        for (int ix = 0; ix < g.n; ++ix) {
            const double x = g.coordinate(ix);
            const std::size_t i = static_cast<std::size_t>(iy) * g.n + ix;
            u.x[i] = -std::cos(a * x) * std::sin(a * y) * e;
            u.y[i] = std::sin(a * x) * std::cos(a * y) * e;
        }
    }
    return u;
}

[[nodiscard]] inline ScalarField exact_pressure(const Grid2D& g, const ManufacturedCase& c, double t) {
    const double a = c.omega * std::numbers::pi, e = c.amplitude(t);
    ScalarField p(g);
    for (int iy = 0; iy < g.n; ++iy) {
        for (int ix = 0; ix < g.n; ++ix) {
            p.at(ix, iy) = -0.25 * (std::cos(2 * a * g.coordinate(ix)) + std::cos(2 * a * g.coordinate(iy))) * e * e;
        }
    }
    return p;
}

struct ExactFields {
    VelocityField u;
    ScalarField p;
};

[[nodiscard]] inline ExactFields exact_fields(const Grid2D& g, const ManufacturedCase& c, double t) {
    if (!(t >= 0.0)) throw InvalidArgument("time must be non-negative");
    return {exact_velocity(g, c, t), exact_pressure(g, c, t)};
}

/// f = u_t + u.grad u - nu Lap u + grad p, each term evaluated in closed form.
[[nodiscard]] inline VelocityField manufactured_forcing(const Grid2D& g, const ManufacturedCase& c, double t) {
    if (!(t >= 0.0)) throw InvalidArgument("time must be non-negative");
    const double a = c.omega * std::numbers::pi, e = c.amplitude(t);
    const double rate = c.sign() * 2.0 * a * a / c.tau;
    const double nu = c.viscosity();
    VelocityField f(g);
    for (int iy = 0; iy < g.n; ++iy) {
        const double y = g.coordinate(iy);
        const double sy = std::sin(a * y), cy = std::cos(a * y);
        for (int ix = 0; ix < g.n; ++ix) {
            const double x = g.coordinate(ix);
            const double sx = std::sin(a * x), cx = std::cos(a * x);
            const double u1 = -cx * sy * e, u2 = sx * cy * e;
            const double u1x = a * sx * sy * e, u1y = -a * cx * cy * e;
            const double u2x = a * cx * cy * e, u2y = -a * sx * sy * e;
            const double lap1 = -2.0 * a * a * u1, lap2 = -2.0 * a * a * u2;
            const double px = 0.5 * a * std::sin(2 * a * x) * e * e;
            const double py = 0.5 * a * std::sin(2 * a * y) * e * e;
            const std::size_t i = static_cast<std::size_t>(iy) * g.n + ix;
            f.x[i] = rate * u1 + (u1 * u1x + u2 * u1y) - nu * lap1 + px;
            f.y[i] = rate * u2 + (u1 * u2x + u2 * u2y) - nu * lap2 + py;
        }
    }
    return f;
}

[[nodiscard]] inline VelocityField forcing(const Grid2D& g, const ManufacturedCase& c, ForcingMode mode, double t) {
    return mode == ForcingMode::zero ? VelocityField(g) : manufactured_forcing(g, c, t);
}

// ---------------------------------------------------------------------------
// One semi-implicit step

enum class SolvePath { refactorized, direct };

struct NseSolverConfig {
    KrylovConfig krylov{};
    SolvePath path = SolvePath::refactorized;
};

struct NseStepResult {
    VelocityField u_next;
    VelocityField u_beta;
    ScalarField p_beta;
    int iterations = 0;
    double relative_residual = 0.0;
};

namespace detail {

inline VelocityField clean(const Spectral& sp, const VelocityField& v) {
    SpectralVelocity s = sp.forward(v);
    sp.truncate(s);
    sp.project(s);
    return sp.inverse(s);
}

/// x -> sigma x + lambda (nu (-Lap) x + P A x).
struct StepOperator {
    const Spectral& sp;
    const Advector& adv;
    double sigma;
    double lambda;
    double nu;

    [[nodiscard]] VelocityField operator()(const VelocityField& x) const {
        const SpectralVelocity X = sp.forward(x);
        SpectralVelocity Y = adv.apply(X);
        sp.project(Y);
        for (std::size_t m = 0; m < Y.x.size(); ++m) {
            const double d = sigma + lambda * nu * sp.k2(m);
            Y.x[m] = d * X.x[m] + lambda * Y.x[m];
            Y.y[m] = d * X.y[m] + lambda * Y.y[m];
        }
        return sp.inverse(Y);
    }

    [[nodiscard]] VelocityField precondition(const VelocityField& x) const {
        SpectralVelocity X = sp.forward(x);
        for (std::size_t m = 0; m < X.x.size(); ++m) {
            const double d = sigma + lambda * nu * sp.k2(m);
            X.x[m] /= d;
            X.y[m] /= d;
        }
        return sp.inverse(X);
    }
};

}  // namespace detail

/// Recovers the zero-mean pressure from Lap p = div(f - A(u_tilde) u_beta).
[[nodiscard]] inline ScalarField recover_pressure(const Spectral& sp, const Advector& adv, const VelocityField& u_beta,
                                                  const VelocityField& f_beta) {
    SpectralVelocity g = sp.forward(f_beta);
    sp.truncate(g);
    const SpectralVelocity a = adv.apply(sp.forward(u_beta));
    for (std::size_t m = 0; m < g.x.size(); ++m) {
        g.x[m] -= a.x[m];
        g.y[m] -= a.y[m];
    }
    Modes p(sp.mode_count());
    const Complex I(0.0, 1.0);
    for (std::size_t m = 0; m < p.size(); ++m) {
        const double kk = sp.kx(m) * sp.kx(m) + sp.ky(m) * sp.ky(m);
        p[m] = kk == 0.0 ? Complex(0.0) : -I * (sp.kx(m) * g.x[m] + sp.ky(m) * g.y[m]) / kk;
    }
    return ScalarField(sp.grid(), sp.inverse(p));
}

/// Advances (u_{n-1}, u_n) to u_{n+1}. The advecting field is the
/// second-order extrapolation of u_{n,beta}; f_beta is sampled at t_{n,beta}.
[[nodiscard]] inline NseStepResult nse_semi_implicit_step(const Spectral& sp, const VelocityField& u_prev,
                                                          const VelocityField& u_curr, Theta theta,
                                                          const StepPair& pair, double nu,
                                                          const VelocityField& f_beta,
                                                          const NseSolverConfig& cfg = {}) {
    require_same_grid(sp.grid(), u_prev.grid);
    require_same_grid(sp.grid(), u_curr.grid);
    require_same_grid(sp.grid(), f_beta.grid);
    if (!(nu > 0.0) || !std::isfinite(nu)) throw InvalidArgument("viscosity must be positive");
    const OneLegCoefficients c = one_leg_coefficients(theta, pair);
    const VelocityField up = detail::clean(sp, u_prev);
    const VelocityField uc = detail::clean(sp, u_curr);
    const VelocityField u_tilde = extrapolant(up, uc, c, pair.ratio());
    const Advector adv(sp, u_tilde);

    SpectralVelocity fs = sp.forward(f_beta);
    sp.truncate(fs);
    sp.project(fs);
    const VelocityField pf = sp.inverse(fs);

    NseStepResult out;
    if (cfg.path == SolvePath::refactorized) {
        const RefactorCoefficients r = refactor_coefficients(c);
        const detail::StepOperator op{sp, adv, 1.0 / (r.b * c.khat), 1.0, nu};
        VelocityField rhs = up - uc;
        rhs *= r.a0;
        rhs += uc;
        rhs *= op.sigma;
        rhs += pf;
        VelocityField x = u_tilde;
        const KrylovResult kr = gmres(op, [&](const VelocityField& v) { return op.precondition(v); }, rhs, x, cfg.krylov);
        out.iterations = kr.iterations;
        out.relative_residual = kr.relative_residual;
        out.u_beta = detail::clean(sp, x);
        out.u_next = uc + r.c2 * (out.u_beta - uc) + r.c0 * (up - uc);
    } else {
        const detail::StepOperator op{sp, adv, c.alpha[2] / c.khat, c.beta[2], nu};
        const detail::StepOperator tail{sp, adv, 0.0, 1.0, nu};
        VelocityField known = c.beta[1] * uc;
        known += c.beta[0] * up;
        VelocityField rhs = pf;
        rhs -= (1.0 / c.khat) * (c.alpha[1] * uc + c.alpha[0] * up);
        rhs -= tail(known);
        VelocityField x = uc + pair.ratio() * (uc - up);
        const KrylovResult kr = gmres(op, [&](const VelocityField& v) { return op.precondition(v); }, rhs, x, cfg.krylov);
        out.iterations = kr.iterations;
        out.relative_residual = kr.relative_residual;
        out.u_next = detail::clean(sp, x);
        out.u_beta = combine3(c.beta, up, uc, out.u_next);
    }
    if (!state_traits<VelocityField>::all_finite(out.u_next)) throw NonFiniteField("velocity became non-finite");
    out.p_beta = recover_pressure(sp, adv, out.u_beta, f_beta);
    return out;
}

// ---------------------------------------------------------------------------
// Energy accounting

/// Terms of the per-step identity
/// G_new - G_old + |sum gamma u|^2 + nu khat |grad u_beta|^2 = khat (f, u_beta).
struct EnergyBudget {
    double g_old = 0.0;
    double g_new = 0.0;
    double gamma_sq = 0.0;
    double viscous = 0.0;
    double work = 0.0;
    double grad_sq_beta = 0.0;

    [[nodiscard]] double residual() const noexcept { return g_new - g_old + gamma_sq + viscous - work; }
};

[[nodiscard]] inline EnergyBudget energy_budget(const Spectral& sp, Theta theta, const StepPair& pair, double nu,
                                                const VelocityField& u_prev, const VelocityField& u_curr,
                                                const VelocityField& u_next, const VelocityField& f_beta) {
    const OneLegCoefficients c = one_leg_coefficients(theta, pair);
    const GNormWeights w = g_norm_weights(theta);
    const VelocityField ub = combine3(c.beta, u_prev, u_curr, u_next);
    const VelocityField ug = combine3(c.gamma, u_prev, u_curr, u_next);
    EnergyBudget b;
    b.g_old = w.top * inner(u_curr, u_curr) + w.bottom * inner(u_prev, u_prev);
    b.g_new = w.top * inner(u_next, u_next) + w.bottom * inner(u_curr, u_curr);
    b.gamma_sq = inner(ug, ug);
    const double gs = h1_semi(sp, ub);
    b.grad_sq_beta = gs * gs;
    b.viscous = nu * c.khat * b.grad_sq_beta;
    b.work = c.khat * inner(f_beta, ub);
    return b;
}

/// ||P T f||_{-1}^2, the part of the forcing the discrete velocity sees.
[[nodiscard]] inline double projected_forcing_dual_sq(const Spectral& sp, const VelocityField& f) {
    SpectralVelocity s = sp.forward(f);
    sp.truncate(s);
    sp.project(s);
    s.x[0] = 0.0;
    s.y[0] = 0.0;
    return dln::detail::h_minus1_sq(sp, s.x, 0.0) + dln::detail::h_minus1_sq(sp, s.y, 0.0);
}

[[nodiscard]] inline double relative_divergence(const Spectral& sp, const VelocityField& u) {
    const double n = l2(u);
    const double d = max_abs(divergence(sp, u));
    return n == 0.0 ? d : d / n;
}

// ---------------------------------------------------------------------------
// Fixed-step runs

struct NseStepRecord {
    std::size_t step = 0;  ///< index n of the produced u_{n+1}, counted from 1
    double t_next = 0.0;
    double k_n = 0.0;
    double k_prev = 0.0;
    double khat = 0.0;
    double energy = 0.0;  ///< (1/2)|u_{n+1}|^2
    double g_energy = 0.0;
    double gamma_sq = 0.0;
    double viscous = 0.0;
    double work = 0.0;
    double e_nd = 0.0;
    double e_vd = 0.0;
    double identity_residual = 0.0;
    double divergence = 0.0;
    double pressure_mean = 0.0;
    double forcing_dual_sq = 0.0;
    double err_u_l2 = 0.0;
    double err_u_h1 = 0.0;
    double err_p_l2 = 0.0;
    int iterations = 0;
};

struct NseRunLedger {
    double theta = 0.0;
    double nu = 0.0;
    double initial_g = 0.0;
    std::vector<NseStepRecord> records;
};

struct NseErrors {
    double u_inf_l2 = 0.0;   ///< max_n |u(t_n) - u_n|
    double u_inf_h1 = 0.0;   ///< max_n |u(t_n) - u_n|_{H1}
    double p_l2_beta = 0.0;  ///< (sum (k_n + k_{n-1}) |p(t_{n,beta}) - p_{n,beta}|^2)^(1/2)
};

struct FixedRunConfig {
    ManufacturedCase mcase{};
    double theta = 2.0 / 3.0;
    double k = 1.0 / 16.0;
    double t_end = 1.0;
    ForcingMode forcing = ForcingMode::manufactured;
    NseSolverConfig solver{};

    [[nodiscard]] std::size_t step_count() const {
        mcase.validate();
        (void)Theta(theta);
        if (!(k > 0.0) || !(t_end > 0.0)) throw InvalidConfig("step and final time must be positive");
        const double n = t_end / k;
        const double r = std::round(n);
        if (r < 2.0 || std::abs(n - r) > 1e-9 * r) throw InvalidConfig("final time must be a multiple (>= 2) of the step");
        return static_cast<std::size_t>(r);
    }
};

struct NseRunResult {
    NseRunLedger ledger;
    NseErrors errors;
    VelocityField u_final;
};

/// Constant-step run on [0, t_end] seeded with exact u_0 and u_1.
[[nodiscard]] inline NseRunResult run_nse_fixed(const Spectral& sp, const FixedRunConfig& cfg,
                                                const std::function<void(const NseStepRecord&)>& observer = {}) {
    const std::size_t steps = cfg.step_count();
    const Grid2D& g = sp.grid();
    const Theta theta(cfg.theta);
    const double nu = cfg.mcase.viscosity();
    const double k = cfg.k;
    const StepPair pair(k, k);
    const OneLegCoefficients c = one_leg_coefficients(theta, pair);
    const GNormWeights w = g_norm_weights(theta);

    NseRunResult res;
    res.ledger.theta = cfg.theta;
    res.ledger.nu = nu;
    VelocityField u_prev = exact_velocity(g, cfg.mcase, 0.0);
    VelocityField u_curr = exact_velocity(g, cfg.mcase, k);
    res.ledger.initial_g = w.top * inner(u_curr, u_curr) + w.bottom * inner(u_prev, u_prev);
    double p_sum = 0.0;
    for (std::size_t n = 1; n < steps; ++n) {
        const double t_prev = static_cast<double>(n - 1) * k;
        const double t_curr = static_cast<double>(n) * k;
        const double t_next = static_cast<double>(n + 1) * k;
        const double tb = broadcast_time(c, t_prev, t_curr, t_next);
        const VelocityField f = forcing(g, cfg.mcase, cfg.forcing, tb);
        NseStepResult s;
        try {
            s = nse_semi_implicit_step(sp, u_prev, u_curr, theta, pair, nu, f, cfg.solver);
        } catch (Error& e) {
            e.set_step_index(n);
            throw;
        }
        const EnergyBudget b = energy_budget(sp, theta, pair, nu, u_prev, u_curr, s.u_next, f);
        NseStepRecord r;
        r.step = n;
        r.t_next = t_next;
        r.k_n = k;
        r.k_prev = k;
        r.khat = c.khat;
        r.energy = 0.5 * inner(s.u_next, s.u_next);
        r.g_energy = b.g_new;
        r.gamma_sq = b.gamma_sq;
        r.viscous = b.viscous;
        r.work = b.work;
        r.e_nd = b.gamma_sq / c.khat;
        r.e_vd = nu * b.grad_sq_beta;
        r.identity_residual = b.residual();
        r.divergence = relative_divergence(sp, s.u_next);
        r.pressure_mean = mean(s.p_beta);
        r.forcing_dual_sq = projected_forcing_dual_sq(sp, f);
        const VelocityField eu = exact_velocity(g, cfg.mcase, t_next) - s.u_next;
        r.err_u_l2 = l2(eu);
        r.err_u_h1 = h1(sp, eu);
        r.err_p_l2 = l2(exact_pressure(g, cfg.mcase, tb) - s.p_beta);
        r.iterations = s.iterations;
        res.errors.u_inf_l2 = std::max(res.errors.u_inf_l2, r.err_u_l2);
        res.errors.u_inf_h1 = std::max(res.errors.u_inf_h1, r.err_u_h1);
        p_sum += 2.0 * k * r.err_p_l2 * r.err_p_l2;
        if (observer) observer(r);
        res.ledger.records.push_back(r);
        u_prev = std::move(u_curr);
        u_curr = std::move(s.u_next);
    }
    res.errors.p_l2_beta = std::sqrt(p_sum);
    res.u_final = std::move(u_curr);
    return res;
}

// ---------------------------------------------------------------------------
// Stability bound

/// Young's inequality k (f, v) <= k/(2 nu) |f|_{-1}^2 + nu k/2 |grad v|^2
/// with khat <= k_n + k_{n-1} gives this constant.
inline constexpr double kStabilityConstant = 0.5;

struct StabilityRow {
    std::size_t step = 0;
    double lhs = 0.0;
    double rhs = 0.0;
    double gamma_sum = 0.0;
    double budget = 0.0;  ///< G_N + sum (|sum gamma u|^2 + nu khat |grad u_beta|^2)
    [[nodiscard]] double margin() const noexcept { return rhs - lhs; }
};

struct StabilityReport {
    double constant = kStabilityConstant;
    std::vector<StabilityRow> rows;
    bool bound_holds = true;
    bool budget_monotone = true;
    double min_margin = 0.0;
};

/// LHS_N = G_N + sum |sum gamma u|^2 + (nu/2) sum khat |grad u_beta|^2,
/// RHS_N = G_1 + (C/nu) sum (k_n + k_{n-1}) |P f_beta|_{-1}^2.
/// `budget_tol` bounds the allowed growth of the unforced budget per step.
[[nodiscard]] inline StabilityReport stability_monitor(const NseRunLedger& ledger, double budget_tol = 1e-8) {
    StabilityReport rep;
    double gamma_sum = 0.0, visc_sum = 0.0, force_sum = 0.0;
    double last_budget = ledger.initial_g;
    double last_g = ledger.initial_g;
    rep.min_margin = std::numeric_limits<double>::infinity();
    for (const auto& r : ledger.records) {
        gamma_sum += r.gamma_sq;
        visc_sum += r.viscous;
        force_sum += (r.k_n + r.k_prev) * r.forcing_dual_sq;
        StabilityRow row;
        row.step = r.step;
        row.gamma_sum = gamma_sum;
        row.lhs = r.g_energy + gamma_sum + 0.5 * visc_sum;
        row.rhs = ledger.initial_g + rep.constant / ledger.nu * force_sum;
        row.budget = r.g_energy + gamma_sum + visc_sum;
        // Rounding allowance relative to the energy scale.
        if (row.margin() < -1e-12 * std::max(1.0, row.rhs)) rep.bound_holds = false;
        if (row.budget > last_budget + budget_tol || r.g_energy > last_g + budget_tol) rep.budget_monotone = false;
        last_budget = row.budget;
        last_g = r.g_energy;
        rep.min_margin = std::min(rep.min_margin, row.margin());
        rep.rows.push_back(row);
    }
    if (rep.rows.empty()) rep.min_margin = 0.0;
    return rep;
}

// ---------------------------------------------------------------------------
// Adaptive stepping

/// k_max <= h^(1/4), logged by drivers and not enforced.
[[nodiscard]] inline bool time_diameter_ok(double k_max, const Grid2D& g) {
    return k_max <= std::pow(g.spacing(), 0.25);
}

/// Adapter for adapt_loop_lte / adapt_loop_nd. Tracks the worst identity
/// residual and divergence over every attempted step.
class NseAdaptiveStepper {
public:
    using State = VelocityField;

    NseAdaptiveStepper(const Spectral& sp, ManufacturedCase mcase, Theta theta,
                       ForcingMode mode = ForcingMode::manufactured, NseSolverConfig solver = {})
        : sp_(sp), case_(mcase), theta_(theta), mode_(mode), solver_(solver) {
        case_.validate();
    }

    [[nodiscard]] Theta theta() const noexcept { return theta_; }
    [[nodiscard]] double viscosity() const noexcept { return case_.viscosity(); }

    [[nodiscard]] StepOutput<State> advance(const State& y_prev, const State& y_curr, double t_curr,
                                            const StepPair& pair) {
        const OneLegCoefficients c = one_leg_coefficients(theta_, pair);
        const double tb = broadcast_time(c, t_curr - pair.previous(), t_curr, t_curr + pair.current());
        const VelocityField f = forcing(sp_.grid(), case_, mode_, tb);
        NseStepResult s = nse_semi_implicit_step(sp_, y_prev, y_curr, theta_, pair, viscosity(), f, solver_);
        const EnergyBudget b = energy_budget(sp_, theta_, pair, viscosity(), y_prev, y_curr, s.u_next, f);
        max_identity_residual_ = std::max(max_identity_residual_, std::abs(b.residual()));
        max_divergence_ = std::max(max_divergence_, relative_divergence(sp_, s.u_next));
        total_iterations_ += static_cast<std::size_t>(s.iterations);
        ++attempts_;
        return {std::move(s.u_next), b.grad_sq_beta};
    }

    [[nodiscard]] double energy(const State& y) const { return 0.5 * inner(y, y); }

    [[nodiscard]] std::optional<double> exact_energy(double t) const {
        const VelocityField u = exact_velocity(sp_.grid(), case_, t);
        return 0.5 * inner(u, u);
    }

    [[nodiscard]] State exact(double t) const { return exact_velocity(sp_.grid(), case_, t); }

    [[nodiscard]] double max_identity_residual() const noexcept { return max_identity_residual_; }
    [[nodiscard]] double max_divergence() const noexcept { return max_divergence_; }
    [[nodiscard]] std::size_t total_iterations() const noexcept { return total_iterations_; }
    [[nodiscard]] std::size_t attempts() const noexcept { return attempts_; }

private:
    const Spectral& sp_;
    ManufacturedCase case_;
    Theta theta_;
    ForcingMode mode_;
    NseSolverConfig solver_;
    double max_identity_residual_ = 0.0;
    double max_divergence_ = 0.0;
    std::size_t total_iterations_ = 0;
    std::size_t attempts_ = 0;
};

static_assert(AdaptiveStepper<NseAdaptiveStepper>);

}  // namespace dln::nse
