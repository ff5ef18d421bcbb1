#include <gtest/gtest.h>

#include <cmath>
#include <sstream>
#include <vector>

#include <Eigen/Dense>

#include "dln/adaptive.hpp"

using namespace dln;
using Vec = Eigen::VectorXd;

namespace {

const std::vector<double> kThetas{0.0, 0.25, 2.0 / 3.0, 2.0 / std::sqrt(5.0), 1.0};

Vec scalar(double x) { return Vec::Constant(1, x); }

ivp::IvpProblem exponential(double lam) {
    ivp::IvpProblem p;
    p.dimension = 1;
    p.rhs = [lam](double, const Vec& y) { return Vec(lam * y); };
    p.jacobian = [lam](double, const Vec&) { return Eigen::MatrixXd::Constant(1, 1, lam); };
    p.exact_solution = [lam](double t) { return scalar(std::exp(lam * t)); };
    return p;
}

/// Times t_{n-3}, ..., t_{n+1} for the step pattern (k_{n-3}, k_{n-2}, k_{n-1}, k_n).
std::array<double, 5> times_from_steps(const std::array<double, 4>& k, double t0 = 0.0) {
    std::array<double, 5> t{t0, 0, 0, 0, 0};
    for (int i = 0; i < 4; ++i) t[i + 1] = t[i] + k[i];
    return t;
}

/// One DLN step for y' = t^2/2 (y = t^3/6) from exact data with k_n = 1,
/// evaluated in closed form; returns the one-step error.
double taylor_oracle_g(double th, double eps) {
    const double kn = 1.0;
    const double knm1 = (1.0 - eps) / (1.0 + eps);
    const double a2 = (1 + th) / 2, a1 = -th, a0 = (th - 1) / 2;
    const double d = (1 + eps * th) * (1 + eps * th);
    const double q = (1 - th * th) / d;
    const double b2 = 0.25 * (1 + q + eps * eps * th * q + th);
    const double b1 = 0.5 * (1 - q);
    const double b0 = 1.0 - b1 - b2;
    const double tm1 = -knm1, t0 = 0.0, t1 = kn;
    const double tb = b2 * t1 + b1 * t0 + b0 * tm1;
    const double khat = a2 * kn - a0 * knm1;
    auto y = [](double t) { return t * t * t / 6.0; };
    const double y_next = (khat * tb * tb / 2.0 - a1 * y(t0) - a0 * y(tm1)) / a2;
    return y_next - y(t1);
}

}  // namespace

TEST(Predictor, ReproducesConstants) {
    const std::vector<double> eps{-0.6, -0.2, 0.0, 0.3, 0.7};
    for (double th : kThetas) {
        for (double e1 : eps) {
            for (double e2 : eps) {
                for (double e3 : eps) {
                    // k_{j}/k_{j-1} = (1+e)/(1-e)
                    std::array<double, 4> k{1.0, 0, 0, 0};
                    k[1] = k[0] * (1 + e3) / (1 - e3);
                    k[2] = k[1] * (1 + e2) / (1 - e2);
                    k[3] = k[2] * (1 + e1) / (1 - e1);
                    const auto g = history_geometry(Theta(th), times_from_steps(k));
                    EXPECT_NEAR(g.eps_n, e1, 1e-14);
                    EXPECT_NEAR(g.eps_nm1, e2, 1e-14);
                    EXPECT_NEAR(g.eps_nm2, e3, 1e-14);
                    const auto w = ab2_like_weights(g, Theta(th));
                    EXPECT_NEAR(w[0] + w[1] + w[2] + w[3], 1.0, 1e-13);
                }
            }
        }
    }
}

TEST(Predictor, MidpointMatchesPolynomialExtrapolation) {
    // Constant unit steps, theta = 1: solve the 4x4 system for weights that
    // reproduce 1, t, t^2 at t_{n+1} with no weight on y_{n-3}.
    const auto t = times_from_steps({1, 1, 1, 1});
    Eigen::Matrix4d M;
    Eigen::Vector4d rhs;
    for (int j = 0; j < 4; ++j) {
        const double tj = t[3 - j];  // y_n, y_{n-1}, y_{n-2}, y_{n-3}
        M(0, j) = 1.0;
        M(1, j) = tj;
        M(2, j) = tj * tj;
        M(3, j) = j == 3 ? 1.0 : 0.0;
    }
    rhs << 1.0, t[4], t[4] * t[4], 0.0;
    const Eigen::Vector4d oracle = M.fullPivLu().solve(rhs);
    const auto w = ab2_like_weights(history_geometry(Theta(1.0), t), Theta(1.0));
    for (int j = 0; j < 4; ++j) EXPECT_NEAR(w[j], oracle[j], 1e-13);
    EXPECT_NEAR(w[0], 3.0, 1e-13);
    EXPECT_NEAR(w[1], -3.0, 1e-13);
    EXPECT_NEAR(w[2], 1.0, 1e-13);
}

TEST(Predictor, ExactForQuadraticsOnVariableSteps) {
    for (double th : kThetas) {
        const auto t = times_from_steps({0.3, 0.5, 0.2, 0.35}, 1.0);
        const auto w = ab2_like_weights(history_geometry(Theta(th), t), Theta(th));
        auto y = [](double s) { return 2.0 - s + 0.7 * s * s; };
        const double pred = w[0] * y(t[3]) + w[1] * y(t[2]) + w[2] * y(t[1]) + w[3] * y(t[0]);
        EXPECT_NEAR(pred, y(t[4]), 1e-12) << th;
    }
}

TEST(Predictor, DegenerateHistory) {
    HistoryGeometry g;
    g.t_next = 1.0;
    g.t_curr = 0.5;
    g.tb_last = g.tb_before = 0.2;
    g.khat_last = g.khat_before = 0.1;
    EXPECT_THROW((void)ab2_like_weights(g, Theta(0.5)), DegenerateHistory);
    EXPECT_THROW((void)history_geometry(Theta(0.5), {0.0, 1.0, 1.0, 2.0, 3.0}), DegenerateHistory);
}

TEST(Predictor, DifferenceFromDlnIsThirdOrder) {
    const auto p = exponential(1.0);
    for (double th : {2.0 / 3.0, 2.0 / std::sqrt(5.0)}) {
        double prev = 0.0;
        for (int level = 0; level < 4; ++level) {
            const double k = 0.02 / (1 << level);
            const auto t = times_from_steps({k, k, k, k}, 0.5);
            History4<Vec> h{p.exact_solution(t[3]), p.exact_solution(t[2]), p.exact_solution(t[1]),
                            p.exact_solution(t[0]), history_geometry(Theta(th), t)};
            const Vec ab2 = ab2_like_predict(h, Theta(th));
            const auto dln = ivp::dln_step_direct(p, {t[2], t[3], h.y_nm1, h.y_n}, Theta(th), StepPair(k, k));
            const double diff = (dln.y_next - ab2).norm();
            if (level > 0) {
                EXPECT_NEAR(prev / diff, 8.0, 0.6);
            }
            prev = diff;
        }
    }
}

TEST(Lte, MidpointConstantSteps) {
    const double g = (0.5) * (0.5 - 0.0) * (0.5 - 0.0) - 1.0 / 6.0;
    EXPECT_NEAR(g, -1.0 / 24.0, 1e-16);
    EXPECT_NEAR(lte_g_coefficient(Theta(1.0), 0.0), -1.0 / 24.0, 1e-15);
    // G + R vanishes for this pattern, so the coefficients are undefined.
    EXPECT_THROW((void)lte_coefficients(Theta(1.0), 0.0, 0.0, 0.0), ZeroDivisor);
    const auto c = lte_coefficients(Theta(1.0), 0.1, 0.0, 0.0);
    EXPECT_TRUE(std::isfinite(c.scale));
}

TEST(Lte, GMatchesTaylorOracle) {
    EXPECT_NEAR(taylor_oracle_g(1.0, 0.0), -1.0 / 24.0, 1e-15);
    for (double th : kThetas) {
        for (double e : {-0.5, -0.1, 0.0, 0.2, 0.6}) {
            if (th == 1.0 && e == 0.0) continue;
            try {
                const auto c = lte_coefficients(Theta(th), e, 0.1, -0.2);
                EXPECT_NEAR(c.G, taylor_oracle_g(th, e), 1e-12) << th << " " << e;
            } catch (const ZeroDivisor&) {
                ADD_FAILURE() << "unexpected ZeroDivisor at theta " << th << " eps " << e;
            }
        }
    }
    const auto c = lte_coefficients(Theta(2.0 / 3.0), 0.0, 0.0, 0.0);
    EXPECT_NEAR(c.G, -2.0 / 15.0, 1e-14);
    EXPECT_NEAR(c.G, taylor_oracle_g(2.0 / 3.0, 0.0), 1e-12);
}

TEST(Lte, ConstantStepRValues) {
    // With constant steps R reduces to (5 + 12 D + 6 D^2)/12, D = -theta/2.
    for (double th : {0.0, 0.25, 2.0 / 3.0, 2.0 / std::sqrt(5.0)}) {
        const double D = -th / 2.0;
        EXPECT_NEAR(lte_coefficients(Theta(th), 0, 0, 0).R, (5 + 12 * D + 6 * D * D) / 12.0, 1e-14);
    }
    EXPECT_NEAR(lte_coefficients(Theta(0.0), 0, 0, 0).R, 5.0 / 12.0, 1e-15);
    EXPECT_NEAR(lte_coefficients(Theta(2.0 / 3.0), 0, 0, 0).R, 5.0 / 36.0, 1e-15);
    const auto c = lte_coefficients(Theta(0.0), 0.3, -0.4, 0.5);
    EXPECT_TRUE(std::isfinite(c.G) && std::isfinite(c.R));
}

TEST(Lte, ScaleInvariantUnderUniformRescaling) {
    const std::array<double, 4> k{0.2, 0.3, 0.25, 0.4};
    const Theta th(0.8);
    const auto a = history_geometry(th, times_from_steps(k));
    const auto b = history_geometry(th, times_from_steps({k[0] * 7, k[1] * 7, k[2] * 7, k[3] * 7}, 3.0));
    EXPECT_NEAR(lte_coefficients(th, a.eps_n, a.eps_nm1, a.eps_nm2).scale,
                lte_coefficients(th, b.eps_n, b.eps_nm1, b.eps_nm2).scale, 1e-13);
}

TEST(Lte, EstimateArithmetic) {
    EXPECT_DOUBLE_EQ(lte_estimate(EstimatorKind::absolute, 1e-6, 3.0, 0.5), 5e-7);
    EXPECT_DOUBLE_EQ(lte_estimate(EstimatorKind::relative, 1e-6, 2.0, 0.5), 2.5e-7);
    EXPECT_THROW((void)lte_estimate(EstimatorKind::relative, 1e-6, 0.0, 0.5), ZeroNorm);
    LteCoefficients c;
    c.scale = 0.5;
    EXPECT_EQ(lte_estimate(EstimatorKind::absolute, scalar(1.0), scalar(1.0), c), 0.0);
}

TEST(Controller, ClampCases) {
    ControllerConfig cfg;
    cfg.tol = 1e-6;
    cfg.kappa = 0.95;
    cfg.k_min = 1e-6;
    cfg.k_max = 10.0;
    EXPECT_NEAR(controller_factor(cfg.tol, cfg), 0.95, 1e-15);
    EXPECT_NEAR(controller_next_step(0.1, cfg.tol, cfg), 0.095, 1e-15);
    cfg.kappa = 1.0;
    EXPECT_NEAR(controller_factor(8.0 * cfg.tol, cfg), 0.5, 1e-15);
    EXPECT_DOUBLE_EQ(controller_factor(1e6 * cfg.tol, cfg), 0.2);
    EXPECT_DOUBLE_EQ(controller_factor(0.0, cfg), 1.5);
    EXPECT_DOUBLE_EQ(controller_factor(1e-30, cfg), 1.5);
    cfg.k_max = 0.12;
    EXPECT_DOUBLE_EQ(controller_next_step(0.1, 0.0, cfg), 0.12);
    cfg.k_min = 0.05;
    EXPECT_DOUBLE_EQ(controller_next_step(0.1, 1.0, cfg), 0.05);
}

TEST(Controller, NdDecision) {
    ControllerConfig cfg;
    cfg.tol = 1e-3;
    cfg.k_min = 0.01;
    cfg.k_max = 0.1;
    EXPECT_DOUBLE_EQ(nd_decision(0.04, 0.0, cfg).next_step, 0.08);
    EXPECT_DOUBLE_EQ(nd_decision(0.08, 0.0, cfg).next_step, 0.1);
    EXPECT_EQ(nd_decision(0.04, 2e-3, cfg).outcome, Outcome::reject);
    EXPECT_DOUBLE_EQ(nd_decision(0.04, 2e-3, cfg).next_step, 0.02);
    EXPECT_DOUBLE_EQ(nd_decision(0.015, 2e-3, cfg).next_step, 0.01);
}

TEST(Dissipation, Examples) {
    const auto c1 = one_leg_coefficients(Theta(1.0), StepPair(0.1, 0.2));
    EXPECT_EQ(dissipation_pair(scalar(1), scalar(-2), scalar(5), c1, 3.0, 0.5).numerical, 0.0);
    EXPECT_DOUBLE_EQ(dissipation_pair(scalar(1), scalar(-2), scalar(5), c1, 3.0, 0.5).viscous, 1.5);
    const auto c = one_leg_coefficients(Theta(2.0 / 3.0), StepPair(0.1, 0.1));
    EXPECT_NEAR(dissipation_pair(scalar(1), scalar(2), scalar(3), c, 0.0, 1.0).numerical, 0.0, 1e-15);
    EXPECT_NEAR(dissipation_pair(scalar(0), scalar(0), scalar(1), c, 0.0, 1.0).numerical, (5.0 / 108.0) / c.khat, 1e-14);
}

TEST(Ledger, CsvHeaderOrder) {
    RunLedger l;
    l.rows.push_back({});
    std::ostringstream os;
    write_ledger_csv(os, l);
    EXPECT_EQ(os.str().substr(0, os.str().find('\n')),
              "attempt_index,t_n,k_n,accepted,estimator,E_ND,E_VD,energy,startup,scale_fallback,energy_error");
    EXPECT_EQ(format_real(0.1), "0.1");
}

namespace {

ControllerConfig loop_config() {
    ControllerConfig cfg;
    cfg.tol = 1e-4;
    cfg.kappa = 0.95;
    cfg.k_min = 1e-3;
    cfg.k_max = 0.2;
    cfg.estimator_kind = EstimatorKind::relative;
    return cfg;
}

void expect_time_monotone(const RunLedger& l) {
    double last = -1.0;
    for (const auto& r : l.rows) {
        if (!r.accepted) continue;
        EXPECT_GT(r.t_n, last);
        last = r.t_n;
        EXPECT_GE(r.k_n, 0.0);
    }
}

}  // namespace

TEST(LoopLte, LargeToleranceGrowsToKmax) {
    const auto p = exponential(-1.0);
    OdeStepper s(p, Theta(2.0 / 3.0));
    auto cfg = loop_config();
    cfg.tol = 1e3;
    const double k0 = 0.01;
    const auto run = adapt_loop_lte(s, p.exact_solution(0), p.exact_solution(k0), 0.0, k0, cfg, 5.0);
    EXPECT_EQ(run.ledger.rejected_count(), 0u);
    double k = k0;
    for (std::size_t i = 0; i + 1 < run.ledger.rows.size(); ++i) {
        const auto& r = run.ledger.rows[i];
        if (r.startup) continue;
        EXPECT_NEAR(r.k_n, std::min(k, cfg.k_max), 1e-15);
        k = std::min(1.5 * r.k_n, cfg.k_max);
    }
    EXPECT_DOUBLE_EQ(run.ledger.rows[run.ledger.rows.size() - 2].k_n, cfg.k_max);
    EXPECT_NEAR(run.times.back(), 5.0, cfg.k_min);
}

TEST(LoopLte, GrowthKeepsAcceptedEstimatorsBelowTol) {
    const auto p = exponential(2.0);
    OdeStepper s(p, Theta(2.0 / std::sqrt(5.0)));
    const auto cfg = loop_config();
    const double k0 = cfg.k_min;
    const auto run = adapt_loop_lte(s, p.exact_solution(0), p.exact_solution(k0), 0.0, k0, cfg, 3.0);
    std::size_t checked = 0;
    for (const auto& r : run.ledger.rows) {
        if (r.accepted && !r.startup) {
            EXPECT_LT(r.estimator, cfg.tol);
            EXPECT_GE(r.k_n, cfg.k_min * (1 - 1e-12));
            EXPECT_LE(r.k_n, cfg.k_max);
            ++checked;
        }
        EXPECT_TRUE(std::isfinite(r.energy_error));
    }
    EXPECT_GT(checked, 10u);
    expect_time_monotone(run.ledger);
    const double rel = std::abs(run.y_final[0] - p.exact_solution(run.times.back())[0]) / run.y_final[0];
    EXPECT_LT(rel, 1e-2);
}

TEST(LoopLte, ForcedRejectRetriesSameTime) {
    const auto p = exponential(-1.0);
    OdeStepper s(p, Theta(2.0 / 3.0));
    auto cfg = loop_config();
    cfg.tol = 1.0;
    LoopHooks hooks;
    const std::size_t forced = 6;
    hooks.override_estimator = [&](std::size_t a, double est) { return a == forced ? 10.0 * cfg.tol : est; };
    const double k0 = 0.01;
    const auto run = adapt_loop_lte(s, p.exact_solution(0), p.exact_solution(k0), 0.0, k0, cfg, 1.0, hooks);
    const auto& bad = run.ledger.rows[forced];
    const auto& retry = run.ledger.rows[forced + 1];
    EXPECT_FALSE(bad.accepted);
    EXPECT_DOUBLE_EQ(retry.t_n, bad.t_n);
    EXPECT_NEAR(retry.k_n / bad.k_n, 0.95 * std::cbrt(0.1), 1e-12);
    EXPECT_GE(retry.k_n / bad.k_n, 0.2);
    EXPECT_LE(retry.k_n / bad.k_n, 0.46);
    EXPECT_EQ(run.ledger.rejected_count(), 1u);
}

TEST(LoopLte, TooManyRejectsCarriesLedger) {
    const auto p = exponential(-1.0);
    OdeStepper s(p, Theta(2.0 / 3.0));
    auto cfg = loop_config();
    cfg.max_rejects_per_step = 4;
    LoopHooks hooks;
    hooks.override_estimator = [](std::size_t, double) { return 1e9; };
    try {
        (void)adapt_loop_lte(s, p.exact_solution(0), p.exact_solution(0.01), 0.0, 0.01, cfg, 1.0, hooks);
        FAIL() << "expected TooManyRejects";
    } catch (const TooManyRejects& e) {
        EXPECT_EQ(e.ledger().rejected_count(), 5u);
        EXPECT_DOUBLE_EQ(e.ledger().rows.back().k_n, cfg.k_min);
    }
}

TEST(LoopLte, EstimatorScalesAsCubeOfStep) {
    const auto p = exponential(-1.0);
    std::vector<double> ratio;
    for (double k : {0.02, 0.01, 0.005}) {
        OdeStepper s(p, Theta(2.0 / 3.0));
        auto cfg = loop_config();
        cfg.tol = 1e6;
        cfg.k_min = cfg.k_max = k;
        cfg.estimator_kind = EstimatorKind::absolute;
        const auto run = adapt_loop_lte(s, p.exact_solution(0), p.exact_solution(k), 0.0, k, cfg, 6 * k);
        const auto& r = run.ledger.rows.back();
        ratio.push_back(r.estimator / (k * k * k * std::exp(-r.t_n)));
    }
    EXPECT_NEAR(ratio[1] / ratio[0], 1.0, 0.05);
    EXPECT_NEAR(ratio[2] / ratio[1], 1.0, 0.03);
}

TEST(LoopNd, MidpointRidesKmax) {
    const auto p = exponential(-0.5);
    OdeStepper s(p, Theta(1.0));
    auto cfg = loop_config();
    cfg.tol = 1e-14;
    const double k0 = cfg.k_min;
    const auto run = adapt_loop_nd(s, p.exact_solution(0), p.exact_solution(k0), 0.0, k0, cfg, 4.0);
    EXPECT_EQ(run.ledger.rejected_count(), 0u);
    double k = k0;
    for (std::size_t i = 0; i + 1 < run.ledger.rows.size(); ++i) {
        const auto& r = run.ledger.rows[i];
        EXPECT_EQ(r.estimator, 0.0);
        EXPECT_EQ(r.e_nd, 0.0);
        EXPECT_DOUBLE_EQ(r.k_n, k);
        k = std::min(2 * k, cfg.k_max);
    }
}

TEST(LoopNd, ForcedRatioHalvesStep) {
    const auto p = exponential(-0.5);
    OdeStepper s(p, Theta(2.0 / 3.0));
    auto cfg = loop_config();
    cfg.tol = 1.0;
    LoopHooks hooks;
    hooks.override_estimator = [&](std::size_t a, double chi) { return a == 3 ? 2.0 * cfg.tol : chi; };
    const auto run = adapt_loop_nd(s, p.exact_solution(0), p.exact_solution(0.01), 0.0, 0.01, cfg, 1.0, hooks);
    EXPECT_FALSE(run.ledger.rows[3].accepted);
    EXPECT_DOUBLE_EQ(run.ledger.rows[4].t_n, run.ledger.rows[3].t_n);
    EXPECT_DOUBLE_EQ(run.ledger.rows[4].k_n, 0.5 * run.ledger.rows[3].k_n);
}

TEST(LoopNd, AcceptedRatiosBelowTol) {
    const auto p = exponential(-1.0);
    OdeStepper s(p, Theta(2.0 / 3.0));
    auto cfg = loop_config();
    cfg.tol = 1e-6;
    const auto run = adapt_loop_nd(s, p.exact_solution(0), p.exact_solution(cfg.k_min), 0.0, cfg.k_min, cfg, 2.0);
    EXPECT_GT(run.ledger.rejected_count(), 0u);
    for (const auto& r : run.ledger.rows) {
        if (r.accepted) {
            EXPECT_LT(r.estimator, cfg.tol);
        }
    }
    expect_time_monotone(run.ledger);
}

TEST(LoopNd, ZeroViscousDissipation) {
    const auto p = exponential(-1.0);
    OdeStepper s(p, Theta(2.0 / 3.0));
    s.set_seminorm([](const Vec&) { return 0.0; });
    auto cfg = loop_config();
    cfg.max_rejects_per_step = 3;
    EXPECT_THROW((void)adapt_loop_nd(s, scalar(1.0), scalar(0.5), 0.0, 0.01, cfg, 1.0), ZeroViscousDissipation);
    OdeStepper flat(exponential(0.0), Theta(2.0 / 3.0));
    flat.set_seminorm([](const Vec&) { return 0.0; });
    const auto run = adapt_loop_nd(flat, scalar(0.0), scalar(0.0), 0.0, 0.01, cfg, 0.5);
    EXPECT_EQ(run.ledger.rejected_count(), 0u);
}

TEST(Loops, ConfigValidation) {
    const auto p = exponential(-1.0);
    OdeStepper s(p, Theta(0.5));
    auto cfg = loop_config();
    cfg.startup_steps = 1;
    EXPECT_THROW((void)adapt_loop_lte(s, scalar(1), scalar(1), 0.0, 0.01, cfg, 1.0), InvalidConfig);
    cfg = loop_config();
    cfg.k_min = 1.0;
    cfg.k_max = 0.5;
    EXPECT_THROW((void)adapt_loop_nd(s, scalar(1), scalar(1), 0.0, 0.01, cfg, 1.0), InvalidConfig);
}
