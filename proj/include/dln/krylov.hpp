#pragma once

/// Restarted GMRES with right preconditioning for matrix-free operators.

#include <cmath>
#include <string>
#include <vector>

#include "dln/core.hpp"
#include "dln/errors.hpp"

namespace dln {

struct KrylovConfig {
    double rel_tol = 1e-10;
    int max_iters = 200;
    int restart = 40;

    void validate() const {
        if (!(rel_tol > 0.0)) throw InvalidConfig("Krylov tolerance must be positive");
        if (max_iters < 1 || restart < 1) throw InvalidConfig("Krylov iteration limits must be positive");
    }
};

struct KrylovResult {
    int iterations = 0;
    double relative_residual = 0.0;
};

/// Solves A x = b, updating x in place from its initial value. `apply(v)`
/// returns A v and `precondition(v)` returns M^{-1} v. Convergence is
/// |b - A x| <= rel_tol |b| on the true residual.
template <class V, class Apply, class Precondition>
KrylovResult gmres(const Apply& apply, const Precondition& precondition, const V& b, V& x,
                   const KrylovConfig& cfg = {}) {
    using T = state_traits<V>;
    cfg.validate();
    const double b_norm = T::norm(b);
    if (b_norm == 0.0) {
        x *= 0.0;
        return {0, 0.0};
    }
    const int m = cfg.restart;
    int total = 0;
    auto residual_of = [&](const V& xv) {
        V r = b;
        r -= apply(xv);
        return r;
    };
    V r = residual_of(x);
    double beta = T::norm(r);
    if (!std::isfinite(beta)) throw NonFiniteField("Krylov residual is not finite");
    while (true) {
        if (beta <= cfg.rel_tol * b_norm) return {total, beta / b_norm};
        if (total >= cfg.max_iters) {
            throw LinearSolverStagnation("relative residual " + std::to_string(beta / b_norm) + " after " +
                                         std::to_string(total) + " iterations");
        }
        std::vector<V> basis;
        basis.reserve(m + 1);
        r *= 1.0 / beta;
        basis.push_back(r);
        std::vector<std::vector<double>> H(m + 1, std::vector<double>(m, 0.0));
        std::vector<double> cs(m, 0.0), sn(m, 0.0), g(m + 1, 0.0);
        g[0] = beta;
        int j = 0;
        for (; j < m && total < cfg.max_iters; ++j, ++total) {
            V w = apply(precondition(basis[j]));
            for (int i = 0; i <= j; ++i) {
                H[i][j] = T::dot(w, basis[i]);
                w -= H[i][j] * basis[i];
            }
            H[j + 1][j] = T::norm(w);
            for (int i = 0; i < j; ++i) {
                const double tmp = cs[i] * H[i][j] + sn[i] * H[i + 1][j];
                H[i + 1][j] = -sn[i] * H[i][j] + cs[i] * H[i + 1][j];
                H[i][j] = tmp;
            }
            const double den = std::hypot(H[j][j], H[j + 1][j]);
            if (den == 0.0) {
                ++j;
                ++total;
                break;
            }
            cs[j] = H[j][j] / den;
            sn[j] = H[j + 1][j] / den;
            const double h_next = H[j + 1][j];
            H[j][j] = den;
            H[j + 1][j] = 0.0;
            g[j + 1] = -sn[j] * g[j];
            g[j] = cs[j] * g[j];
            if (!std::isfinite(g[j + 1])) throw NonFiniteField("Krylov iteration produced non-finite values");
            if (std::abs(g[j + 1]) <= cfg.rel_tol * b_norm || h_next == 0.0) {
                ++j;
                ++total;
                break;
            }
            w *= 1.0 / h_next;
            basis.push_back(std::move(w));
        }
        // Back substitution for the least-squares coefficients.
        std::vector<double> y(j, 0.0);
        for (int i = j - 1; i >= 0; --i) {
            double s = g[i];
            for (int l = i + 1; l < j; ++l) s -= H[i][l] * y[l];
            y[i] = s / H[i][i];
        }
        V update = basis[0];
        update *= y.empty() ? 0.0 : y[0];
        for (int i = 1; i < j; ++i) update += y[i] * basis[i];
        x += precondition(update);
        r = residual_of(x);
        beta = T::norm(r);
        if (!std::isfinite(beta)) throw NonFiniteField("Krylov residual is not finite");
    }
}

}  // namespace dln
