#pragma once

/// Variable-step Dahlquist-Liniger-Nevanlinna (DLN) one-leg coefficients,
/// the G-norm, and the refactorization into a backward-Euler stage.
///
/// Coefficient arrays are indexed by the offset of the state they multiply:
/// index 0 is y_{n-1}, index 1 is y_n, index 2 is y_{n+1}.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>

#include "dln/errors.hpp"

namespace dln {

/// Method parameter in [0, 1]. One gives the one-leg trapezoid rule.
class Theta {
public:
    explicit Theta(double value) : value_(value) {
        if (!std::isfinite(value) || value < 0.0 || value > 1.0) {
            throw InvalidArgument("theta must lie in [0, 1], got " + std::to_string(value));
        }
    }
    [[nodiscard]] double value() const noexcept { return value_; }

private:
    double value_;
};

/// The current step k_n and the previous step k_{n-1}.
class StepPair {
public:
    StepPair(double current, double previous) : current_(current), previous_(previous) {
        if (!std::isfinite(current) || !std::isfinite(previous) || current <= 0.0 || previous <= 0.0) {
            throw InvalidArgument("step sizes must be positive and finite");
        }
    }

    /// Builds the pair with k_n + k_{n-1} = 2 and the given variability.
    [[nodiscard]] static StepPair from_variability(double eps) {
        if (!std::isfinite(eps) || eps <= -1.0 || eps >= 1.0) {
            throw InvalidArgument("step variability must lie in (-1, 1)");
        }
        return StepPair(1.0 + eps, 1.0 - eps);
    }

    [[nodiscard]] double current() const noexcept { return current_; }
    [[nodiscard]] double previous() const noexcept { return previous_; }

    /// eps_n = (k_n - k_{n-1}) / (k_n + k_{n-1}), strictly inside (-1, 1).
    [[nodiscard]] double variability() const noexcept {
        return (current_ - previous_) / (current_ + previous_);
    }

    /// k_n / k_{n-1}.
    [[nodiscard]] double ratio() const noexcept { return current_ / previous_; }

private:
    double current_;
    double previous_;
};

struct OneLegCoefficients {
    std::array<double, 3> alpha{};
    std::array<double, 3> beta{};
    std::array<double, 3> gamma{};
    double khat = 0.0;     ///< alpha_2 k_n - alpha_0 k_{n-1}
    double eps = 0.0;      ///< step variability used to build the set
};

/// Weights of the G-norm: |(u, v)|_G^2 = top |u|^2 + bottom |v|^2.
struct GNormWeights {
    double top = 0.0;
    double bottom = 0.0;
};

/// Coefficients of the pre-process / backward-Euler / post-process form.
///
///   y_old  = a1 y_n + a0 y_{n-1}
///   y_temp solves (y_temp - y_old) / (b khat) = f(t_beta, y_temp)
///   y_next = c2 y_temp + c1 y_n + c0 y_{n-1}
struct RefactorCoefficients {
    double a1 = 0.0;
    double a0 = 0.0;
    double b = 0.0;
    double c2 = 0.0;
    double c1 = 0.0;
    double c0 = 0.0;
};

[[nodiscard]] inline double step_variability(const StepPair& pair) noexcept { return pair.variability(); }

[[nodiscard]] inline OneLegCoefficients one_leg_coefficients(Theta theta, const StepPair& pair) {
    const double th = theta.value();
    const double e = pair.variability();
    const double d = (1.0 + e * th) * (1.0 + e * th);
    const double q = (1.0 - th * th) / d;

    OneLegCoefficients c;
    c.eps = e;
    c.alpha = {(th - 1.0) / 2.0, -th, (th + 1.0) / 2.0};
    c.beta = {0.25 * (1.0 + q - e * e * th * q - th),
              0.5 * (1.0 - q),
              0.25 * (1.0 + q + e * e * th * q + th)};
    const double g1 = -std::sqrt(th * (1.0 - th * th)) / (std::sqrt(2.0) * (1.0 + e * th));
    c.gamma = {-(1.0 + e) / 2.0 * g1, g1, -(1.0 - e) / 2.0 * g1};
    c.khat = c.alpha[2] * pair.current() - c.alpha[0] * pair.previous();
    return c;
}

/// t_{n,beta} = beta_2 t_{n+1} + beta_1 t_n + beta_0 t_{n-1}.
[[nodiscard]] inline double broadcast_time(const OneLegCoefficients& c, double t_prev, double t_curr,
                                           double t_next) noexcept {
    return c.beta[2] * t_next + c.beta[1] * t_curr + c.beta[0] * t_prev;
}

[[nodiscard]] inline GNormWeights g_norm_weights(Theta theta) noexcept {
    return {(1.0 + theta.value()) / 4.0, (1.0 - theta.value()) / 4.0};
}

[[nodiscard]] inline RefactorCoefficients refactor_coefficients(const OneLegCoefficients& c) {
    if (c.beta[2] <= 0.0 || c.alpha[2] <= 0.0) {
        throw InvalidArgument("leading coefficients must be positive");
    }
    RefactorCoefficients r;
    r.a1 = c.beta[1] - c.alpha[1] * c.beta[2] / c.alpha[2];
    r.a0 = c.beta[0] - c.alpha[0] * c.beta[2] / c.alpha[2];
    r.b = c.beta[2] / c.alpha[2];
    r.c2 = 1.0 / c.beta[2];
    r.c1 = -c.beta[1] / c.beta[2];
    r.c0 = -c.beta[0] / c.beta[2];
    return r;
}

[[nodiscard]] inline RefactorCoefficients refactor_coefficients(Theta theta, const StepPair& pair) {
    return refactor_coefficients(one_leg_coefficients(theta, pair));
}

namespace detail {

inline void require_same_size(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) {
        throw DimensionMismatch("vector sizes " + std::to_string(a.size()) + " and " +
                                std::to_string(b.size()) + " differ");
    }
}

inline double sum_sq(std::span<const double> a) noexcept {
    double s = 0.0;
    for (double x : a) s += x * x;
    return s;
}

}  // namespace detail

[[nodiscard]] inline double g_norm_sq(Theta theta, std::span<const double> top,
                                      std::span<const double> bottom) {
    detail::require_same_size(top, bottom);
    const GNormWeights w = g_norm_weights(theta);
    return w.top * detail::sum_sq(top) + w.bottom * detail::sum_sq(bottom);
}

/// Both sides of the G-stability identity
///   (sum alpha y, sum beta y) = |(y_{n+1}, y_n)|_G^2 - |(y_n, y_{n-1})|_G^2 + |sum gamma y|^2
/// in the Euclidean inner product.
struct GStabilityTerms {
    double pairing = 0.0;      ///< (sum alpha y, sum beta y)
    double g_new = 0.0;        ///< |(y_{n+1}, y_n)|_G^2
    double g_old = 0.0;        ///< |(y_n, y_{n-1})|_G^2
    double dissipation = 0.0;  ///< |sum gamma y|^2

    [[nodiscard]] double residual() const noexcept { return pairing - (g_new - g_old + dissipation); }
    [[nodiscard]] double scale() const noexcept {
        return std::max({std::abs(pairing), g_new, g_old, dissipation});
    }
};

[[nodiscard]] inline GStabilityTerms g_stability_terms(Theta theta, const StepPair& pair,
                                                       std::span<const double> y_prev,
                                                       std::span<const double> y_curr,
                                                       std::span<const double> y_next) {
    detail::require_same_size(y_prev, y_curr);
    detail::require_same_size(y_prev, y_next);
    const OneLegCoefficients c = one_leg_coefficients(theta, pair);
    GStabilityTerms t;
    for (std::size_t i = 0; i < y_prev.size(); ++i) {
        const double a = c.alpha[2] * y_next[i] + c.alpha[1] * y_curr[i] + c.alpha[0] * y_prev[i];
        const double b = c.beta[2] * y_next[i] + c.beta[1] * y_curr[i] + c.beta[0] * y_prev[i];
        const double g = c.gamma[2] * y_next[i] + c.gamma[1] * y_curr[i] + c.gamma[0] * y_prev[i];
        t.pairing += a * b;
        t.dissipation += g * g;
    }
    t.g_new = g_norm_sq(theta, y_next, y_curr);
    t.g_old = g_norm_sq(theta, y_curr, y_prev);
    return t;
}

/// Signed residual LHS - RHS of the G-stability identity.
[[nodiscard]] inline double g_stability_residual(Theta theta, const StepPair& pair,
                                                 std::span<const double> y_prev,
                                                 std::span<const double> y_curr,
                                                 std::span<const double> y_next) {
    return g_stability_terms(theta, pair, y_prev, y_curr, y_next).residual();
}

/// y_beta-style combination w2 y_next + w1 y_curr + w0 y_prev.
template <class V>
[[nodiscard]] V combine3(const std::array<double, 3>& w, const V& y_prev, const V& y_curr, const V& y_next) {
    V out = y_next;
    out *= w[2];
    out += w[1] * y_curr;
    out += w[0] * y_prev;
    return out;
}

/// Second-order extrapolation of y_{n,beta} from y_n and y_{n-1}:
/// beta_2 [(1 + r) y_n - r y_{n-1}] + beta_1 y_n + beta_0 y_{n-1}, r = k_n / k_{n-1},
/// evaluated as y_n + (beta_0 - beta_2 r)(y_{n-1} - y_n) so constants are kept exactly.
template <class V>
[[nodiscard]] V extrapolant(const V& y_prev, const V& y_curr, const OneLegCoefficients& c, double ratio) {
    V out = y_prev;
    out -= y_curr;
    out *= c.beta[0] - c.beta[2] * ratio;
    out += y_curr;
    return out;
}

/// Vector-space operations used by the generic algorithms. Specialized for
/// each state type the library integrates.
template <class V>
struct state_traits;

}  // namespace dln
