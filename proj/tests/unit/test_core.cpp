#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <vector>

#include "dln/core.hpp"

using namespace dln;

namespace {

const std::vector<double> kThetas{0.0, 0.25, 2.0 / 3.0, 2.0 / std::sqrt(5.0), 1.0};

std::vector<double> eps_grid() {
    std::vector<double> out;
    for (int i = -19; i <= 19; ++i) out.push_back(0.05 * i);
    return out;
}

}  // namespace

TEST(StepVariability, SimpleRatios) {
    EXPECT_DOUBLE_EQ(step_variability(StepPair(1.0, 1.0)), 0.0);
    EXPECT_DOUBLE_EQ(step_variability(StepPair(3.0, 1.0)), 0.5);
    EXPECT_DOUBLE_EQ(step_variability(StepPair(1.0, 3.0)), -0.5);
}

TEST(Validation, RejectsBadInputs) {
    EXPECT_THROW(Theta(-0.1), InvalidArgument);
    EXPECT_THROW(Theta(1.0001), InvalidArgument);
    EXPECT_THROW(Theta(std::nan("")), InvalidArgument);
    EXPECT_THROW(StepPair(0.0, 1.0), InvalidArgument);
    EXPECT_THROW(StepPair(1.0, -1.0), InvalidArgument);
    EXPECT_THROW((void)StepPair::from_variability(1.0), InvalidArgument);
}

TEST(OneLeg, ThetaOneIsMidpoint) {
    const auto c = one_leg_coefficients(Theta(1.0), StepPair(0.3, 0.7));
    EXPECT_DOUBLE_EQ(c.alpha[0], 0.0);
    EXPECT_DOUBLE_EQ(c.alpha[1], -1.0);
    EXPECT_DOUBLE_EQ(c.alpha[2], 1.0);
    for (double g : c.gamma) EXPECT_DOUBLE_EQ(g, 0.0);
    EXPECT_DOUBLE_EQ(c.khat, 0.3);
    EXPECT_DOUBLE_EQ(c.beta[0], 0.0);
    EXPECT_DOUBLE_EQ(c.beta[1], 0.5);
    EXPECT_DOUBLE_EQ(c.beta[2], 0.5);
}

TEST(OneLeg, TwoThirdsConstantSteps) {
    const auto c = one_leg_coefficients(Theta(2.0 / 3.0), StepPair(0.1, 0.1));
    EXPECT_NEAR(c.beta[0], 2.0 / 9.0, 1e-15);
    EXPECT_NEAR(c.beta[1], 2.0 / 9.0, 1e-15);
    EXPECT_NEAR(c.beta[2], 5.0 / 9.0, 1e-15);
    EXPECT_NEAR(c.alpha[0], -1.0 / 6.0, 1e-15);
    EXPECT_NEAR(c.alpha[1], -2.0 / 3.0, 1e-15);
    EXPECT_NEAR(c.alpha[2], 5.0 / 6.0, 1e-15);
    EXPECT_NEAR(c.khat, 0.1, 1e-16);
    EXPECT_NEAR(c.gamma[1], -std::sqrt(5.0 / 27.0), 1e-15);
    EXPECT_NEAR(c.gamma[1], -0.430331, 1e-6);
    EXPECT_NEAR(c.gamma[2], 0.215166, 1e-6);
    EXPECT_NEAR(c.gamma[0], c.gamma[2], 1e-16);
    // constant-step closed form beta_2 = (2 + theta - theta^2) / 4
    const double th = 2.0 / 3.0;
    EXPECT_NEAR(c.beta[2], (2.0 + th - th * th) / 4.0, 1e-15);
}

TEST(OneLeg, IdentitiesOverGrid) {
    for (double th : kThetas) {
        for (double e : eps_grid()) {
            const StepPair pair = StepPair::from_variability(e);
            const auto c = one_leg_coefficients(Theta(th), pair);
            EXPECT_NEAR(c.alpha[0] + c.alpha[1] + c.alpha[2], 0.0, 1e-14);
            EXPECT_NEAR(c.beta[0] + c.beta[1] + c.beta[2], 1.0, 1e-14);
            EXPECT_NEAR(c.gamma[0] + c.gamma[1] + c.gamma[2], 0.0, 1e-14);
            EXPECT_GT(c.alpha[2], 0.0);
            EXPECT_GT(c.khat, 0.0);
            EXPECT_NEAR(c.eps, e, 1e-15);

            // times t_{n-1}=0, t_n=k_{n-1}, t_{n+1}=k_{n-1}+k_n
            const double t0 = 0.0, t1 = pair.previous(), t2 = pair.previous() + pair.current();
            const double sum_alpha_t = c.alpha[0] * t0 + c.alpha[1] * t1 + c.alpha[2] * t2;
            EXPECT_NEAR(sum_alpha_t, c.khat, 1e-14 * c.khat);
            const double lhs = 0.5 * (c.alpha[0] * t0 * t0 + c.alpha[1] * t1 * t1 + c.alpha[2] * t2 * t2);
            const double rhs = c.khat * (c.beta[0] * t0 + c.beta[1] * t1 + c.beta[2] * t2);
            EXPECT_NEAR(lhs, rhs, 1e-12 * std::abs(rhs));

            const bool degenerate = th == 0.0 || th == 1.0;
            const double gnorm = std::abs(c.gamma[0]) + std::abs(c.gamma[1]) + std::abs(c.gamma[2]);
            if (degenerate) {
                EXPECT_EQ(gnorm, 0.0);
            } else {
                EXPECT_GT(gnorm, 1e-3);
            }
        }
    }
}

TEST(Refactor, MidpointValues) {
    const auto r = refactor_coefficients(Theta(1.0), StepPair(1.0, 1.0));
    EXPECT_DOUBLE_EQ(r.a1, 1.0);
    EXPECT_DOUBLE_EQ(r.a0, 0.0);
    EXPECT_DOUBLE_EQ(r.b, 0.5);
    EXPECT_DOUBLE_EQ(r.c2, 2.0);
    EXPECT_DOUBLE_EQ(r.c1, -1.0);
    EXPECT_DOUBLE_EQ(r.c0, 0.0);
}

TEST(Refactor, TwoThirdsScaling) {
    EXPECT_NEAR(refactor_coefficients(Theta(2.0 / 3.0), StepPair(1.0, 1.0)).b, 2.0 / 3.0, 1e-15);
}

TEST(Refactor, RecomputationAndIdentityMap) {
    for (double th : kThetas) {
        for (double e : eps_grid()) {
            const auto c = one_leg_coefficients(Theta(th), StepPair::from_variability(e));
            const auto r = refactor_coefficients(c);
            EXPECT_NEAR(r.c2 * c.beta[2], 1.0, 1e-15);
            EXPECT_NEAR(r.a1, c.beta[1] - c.alpha[1] * c.beta[2] / c.alpha[2], 1e-15);
            EXPECT_NEAR(r.a0, c.beta[0] - c.alpha[0] * c.beta[2] / c.alpha[2], 1e-15);
            // With f = 0 the stage returns y_old; a constant history must be reproduced.
            const double y = 1.75;
            const double y_old = r.a1 * y + r.a0 * y;
            EXPECT_NEAR(r.c2 * y_old + r.c1 * y + r.c0 * y, y, 1e-13);
            // y_beta - y_old = (beta_2 / alpha_2) sum alpha y for arbitrary y
            const double yp = 0.3, yc = -1.1, yn = 2.4;
            const double yb = c.beta[0] * yp + c.beta[1] * yc + c.beta[2] * yn;
            const double sa = c.alpha[0] * yp + c.alpha[1] * yc + c.alpha[2] * yn;
            EXPECT_NEAR(yb - (r.a1 * yc + r.a0 * yp), r.b * sa, 1e-13);
            EXPECT_NEAR(r.c2 * yb + r.c1 * yc + r.c0 * yp, yn, 1e-12);
        }
    }
}

TEST(GNorm, Examples) {
    const std::vector<double> zero{0.0, 0.0}, any{3.0, -4.0}, e1{1.0, 0.0};
    EXPECT_DOUBLE_EQ(g_norm_sq(Theta(1.0), zero, any), 0.0);
    EXPECT_DOUBLE_EQ(g_norm_sq(Theta(0.0), e1, e1), 0.5);
    const std::vector<double> u{2.0, 0.0}, v{0.0, 1.0};
    EXPECT_NEAR(g_norm_sq(Theta(2.0 / 3.0), u, v), 7.0 / 4.0, 1e-15);
    const auto w = g_norm_weights(Theta(0.4));
    EXPECT_NEAR(w.top + w.bottom, 0.5, 1e-16);
    EXPECT_GE(w.top, 0.25);
    EXPECT_LE(w.bottom, 0.25);
}

TEST(GNorm, DimensionMismatch) {
    const std::vector<double> a{1.0}, b{1.0, 2.0};
    EXPECT_THROW((void)g_norm_sq(Theta(0.5), a, b), DimensionMismatch);
    EXPECT_THROW((void)g_stability_residual(Theta(0.5), StepPair(1, 1), a, a, b), DimensionMismatch);
}

TEST(GStability, TrivialInputs) {
    const std::vector<double> z(4, 0.0), c{1.0, -2.0, 0.5, 3.0};
    for (double th : kThetas) {
        EXPECT_EQ(g_stability_residual(Theta(th), StepPair(0.2, 0.5), z, z, z), 0.0);
        EXPECT_NEAR(g_stability_residual(Theta(th), StepPair(0.2, 0.5), c, c, c), 0.0, 1e-14);
    }
}

TEST(GStability, RandomTriples) {
    std::mt19937_64 rng(2024);
    std::normal_distribution<double> nd;
    double worst = 0.0;
    for (double th : kThetas) {
        for (double e : {-0.9, 0.0, 0.6}) {
            const StepPair pair = StepPair::from_variability(e);
            for (int trial = 0; trial < 1000; ++trial) {
                std::vector<double> a(5), b(5), c(5);
                for (int i = 0; i < 5; ++i) {
                    a[i] = nd(rng);
                    b[i] = nd(rng);
                    c[i] = nd(rng);
                }
                const auto t = g_stability_terms(Theta(th), pair, a, b, c);
                worst = std::max(worst, std::abs(t.residual()) / t.scale());
            }
        }
    }
    EXPECT_LE(worst, 1e-12);
}

TEST(Extrapolant, ConstantAndAffineExactness) {
    const auto c = one_leg_coefficients(Theta(0.8), StepPair(0.3, 0.2));
    EXPECT_NEAR(extrapolant(2.5, 2.5, c, 1.5), 2.5, 1e-15);
    // y(t) = 1 + 3t with t_{n-1}=0, t_n=0.2, t_{n+1}=0.5
    const double tb = broadcast_time(c, 0.0, 0.2, 0.5);
    EXPECT_NEAR(extrapolant(1.0, 1.0 + 3.0 * 0.2, c, 1.5), 1.0 + 3.0 * tb, 1e-14);
}

TEST(Extrapolant, QuadraticErrorIsSecondOrder) {
    const Theta th(2.0 / 3.0);
    double prev_err = 0.0;
    for (int level = 0; level < 4; ++level) {
        const double k = 0.1 / (1 << level);
        const auto c = one_leg_coefficients(th, StepPair(k, k));
        const double t0 = 1.0, t1 = 1.0 + k, t2 = 1.0 + 2 * k;
        const double tb = broadcast_time(c, t0, t1, t2);
        const double err = std::abs(extrapolant(t0 * t0, t1 * t1, c, 1.0) - tb * tb);
        if (level > 0) {
            EXPECT_NEAR(prev_err / err, 4.0, 1e-6);
        }
        prev_err = err;
    }
}
