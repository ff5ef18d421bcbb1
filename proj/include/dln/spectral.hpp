#pragma once

/// Periodic grids, sampled fields and the Fourier machinery behind them.
///
/// Physical samples are row-major with index iy * n + ix on [0, L)^2. Real
/// transforms keep the half spectrum ix in [0, n/2], mode index
/// iy * (n/2 + 1) + ix.

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstddef>
#include <memory>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include <fftw3.h>

#include "dln/core.hpp"
#include "dln/errors.hpp"

namespace dln {

struct Grid2D {
    int n = 0;
    double side_length = 0.0;

    Grid2D() = default;
    Grid2D(int points, double length) : n(points), side_length(length) { validate(); }

    void validate() const {
        if (n < 8 || n % 2 != 0 || !smooth(n)) throw InvalidArgument("grid size must be even, >= 8 and 2,3,5-smooth");
        if (!(side_length > 0.0) || !std::isfinite(side_length)) throw InvalidArgument("side length must be positive");
    }
    [[nodiscard]] std::size_t points() const noexcept { return static_cast<std::size_t>(n) * n; }
    [[nodiscard]] double spacing() const noexcept { return side_length / n; }
    [[nodiscard]] double cell_area() const noexcept { return spacing() * spacing(); }
    [[nodiscard]] double coordinate(int i) const noexcept { return i * spacing(); }
    bool operator==(const Grid2D&) const = default;

private:
    static bool smooth(int m) {
        for (int p : {2, 3, 5}) {
            while (m % p == 0) m /= p;
        }
        return m == 1;
    }
};

inline void require_same_grid(const Grid2D& a, const Grid2D& b) {
    if (!(a == b)) throw GridMismatch("fields live on different grids");
}

struct ScalarField {
    Grid2D grid;
    std::vector<double> data;

    ScalarField() = default;
    explicit ScalarField(const Grid2D& g) : grid(g), data(g.points(), 0.0) {}
    ScalarField(const Grid2D& g, std::vector<double> values) : grid(g), data(std::move(values)) {
        if (data.size() != g.points()) throw DimensionMismatch("scalar samples do not match the grid");
    }

    [[nodiscard]] double& at(int ix, int iy) { return data[static_cast<std::size_t>(iy) * grid.n + ix]; }
    [[nodiscard]] double at(int ix, int iy) const { return data[static_cast<std::size_t>(iy) * grid.n + ix]; }

    ScalarField& operator+=(const ScalarField& o) {
        require_same_grid(grid, o.grid);
        for (std::size_t i = 0; i < data.size(); ++i) data[i] += o.data[i];
        return *this;
    }
    ScalarField& operator-=(const ScalarField& o) {
        require_same_grid(grid, o.grid);
        for (std::size_t i = 0; i < data.size(); ++i) data[i] -= o.data[i];
        return *this;
    }
    ScalarField& operator*=(double s) {
        for (double& v : data) v *= s;
        return *this;
    }
};

struct VelocityField {
    Grid2D grid;
    std::vector<double> x;
    std::vector<double> y;

    VelocityField() = default;
    explicit VelocityField(const Grid2D& g) : grid(g), x(g.points(), 0.0), y(g.points(), 0.0) {}
    VelocityField(const Grid2D& g, std::vector<double> ux, std::vector<double> uy)
        : grid(g), x(std::move(ux)), y(std::move(uy)) {
        if (x.size() != g.points() || y.size() != g.points()) {
            throw DimensionMismatch("velocity samples do not match the grid");
        }
    }

    VelocityField& operator+=(const VelocityField& o) {
        require_same_grid(grid, o.grid);
        for (std::size_t i = 0; i < x.size(); ++i) {
            x[i] += o.x[i];
            y[i] += o.y[i];
        }
        return *this;
    }
    VelocityField& operator-=(const VelocityField& o) {
        require_same_grid(grid, o.grid);
        for (std::size_t i = 0; i < x.size(); ++i) {
            x[i] -= o.x[i];
            y[i] -= o.y[i];
        }
        return *this;
    }
    VelocityField& operator*=(double s) {
        for (std::size_t i = 0; i < x.size(); ++i) {
            x[i] *= s;
            y[i] *= s;
        }
        return *this;
    }
};

inline VelocityField operator*(double s, VelocityField v) { return v *= s; }
inline VelocityField operator+(VelocityField a, const VelocityField& b) { return a += b; }
inline VelocityField operator-(VelocityField a, const VelocityField& b) { return a -= b; }
inline ScalarField operator*(double s, ScalarField v) { return v *= s; }
inline ScalarField operator+(ScalarField a, const ScalarField& b) { return a += b; }
inline ScalarField operator-(ScalarField a, const ScalarField& b) { return a -= b; }

/// Discrete L2 inner products by the periodic rectangle rule.
[[nodiscard]] inline double inner(const ScalarField& a, const ScalarField& b) {
    require_same_grid(a.grid, b.grid);
    double s = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) s += a.data[i] * b.data[i];
    return s * a.grid.cell_area();
}

[[nodiscard]] inline double inner(const VelocityField& a, const VelocityField& b) {
    require_same_grid(a.grid, b.grid);
    double s = 0.0;
    for (std::size_t i = 0; i < a.x.size(); ++i) s += a.x[i] * b.x[i] + a.y[i] * b.y[i];
    return s * a.grid.cell_area();
}

template <>
struct state_traits<VelocityField> {
    static double dot(const VelocityField& a, const VelocityField& b) { return inner(a, b); }
    static double norm(const VelocityField& a) { return std::sqrt(inner(a, a)); }
    static bool all_finite(const VelocityField& a) {
        auto ok = [](double v) { return std::isfinite(v); };
        return std::all_of(a.x.begin(), a.x.end(), ok) && std::all_of(a.y.begin(), a.y.end(), ok);
    }
};

using Complex = std::complex<double>;
using Modes = std::vector<Complex>;

struct SpectralVelocity {
    Modes x;
    Modes y;
};

/// FFTW plans and per-mode tables for one grid. Transform calls use the
/// new-array execute interface and are safe to call concurrently.
class Spectral {
public:
    explicit Spectral(const Grid2D& grid) : grid_(grid), half_(grid.n / 2 + 1) {
        grid_.validate();
        const int n = grid_.n;
        std::vector<double> r(grid_.points());
        Modes c(mode_count());
        auto* cp = reinterpret_cast<fftw_complex*>(c.data());
        forward_ = fftw_plan_dft_r2c_2d(n, n, r.data(), cp, FFTW_ESTIMATE | FFTW_UNALIGNED);
        inverse_ = fftw_plan_dft_c2r_2d(n, n, cp, r.data(), FFTW_ESTIMATE | FFTW_UNALIGNED);
        if (forward_ == nullptr || inverse_ == nullptr) throw InvalidArgument("FFT planning failed");

        const double base = 2.0 * std::numbers::pi / grid_.side_length;
        kx_.resize(mode_count());
        ky_.resize(mode_count());
        k2_.resize(mode_count());
        weight_.resize(mode_count());
        retained_.resize(mode_count());
        for (int iy = 0; iy < n; ++iy) {
            const int sy = iy <= n / 2 ? iy : iy - n;
            for (int ix = 0; ix < half_; ++ix) {
                const std::size_t m = static_cast<std::size_t>(iy) * half_ + ix;
                const double fx = base * ix, fy = base * sy;
                // Odd derivatives of the Nyquist modes are dropped.
                kx_[m] = 2 * ix == n ? 0.0 : fx;
                ky_[m] = 2 * iy == n ? 0.0 : fy;
                k2_[m] = fx * fx + fy * fy;
                weight_[m] = (ix == 0 || 2 * ix == n) ? 1.0 : 2.0;
                retained_[m] = 3 * ix < n && 3 * std::abs(sy) < n;
            }
        }
    }
    Spectral(const Spectral&) = delete;
    Spectral& operator=(const Spectral&) = delete;
    ~Spectral() {
        fftw_destroy_plan(forward_);
        fftw_destroy_plan(inverse_);
    }

    [[nodiscard]] const Grid2D& grid() const noexcept { return grid_; }
    [[nodiscard]] std::size_t mode_count() const noexcept { return static_cast<std::size_t>(grid_.n) * half_; }
    [[nodiscard]] int half() const noexcept { return half_; }
    [[nodiscard]] double kx(std::size_t m) const { return kx_[m]; }
    [[nodiscard]] double ky(std::size_t m) const { return ky_[m]; }
    /// |k|^2 including the Nyquist components.
    [[nodiscard]] double k2(std::size_t m) const { return k2_[m]; }
    /// Multiplicity of a half-spectrum mode in the full spectrum.
    [[nodiscard]] double weight(std::size_t m) const { return weight_[m]; }
    /// True when the mode survives 2/3-rule truncation.
    [[nodiscard]] bool retained(std::size_t m) const { return retained_[m]; }

    [[nodiscard]] Modes forward(std::span<const double> in) const {
        if (in.size() != grid_.points()) throw DimensionMismatch("sample count does not match the grid");
        Modes out(mode_count());
        fftw_execute_dft_r2c(forward_, const_cast<double*>(in.data()), reinterpret_cast<fftw_complex*>(out.data()));
        return out;
    }

    /// Inverse transform normalized so that inverse(forward(f)) = f.
    [[nodiscard]] std::vector<double> inverse(const Modes& in) const {
        if (in.size() != mode_count()) throw DimensionMismatch("mode count does not match the grid");
        Modes scratch = in;
        std::vector<double> out(grid_.points());
        fftw_execute_dft_c2r(inverse_, reinterpret_cast<fftw_complex*>(scratch.data()), out.data());
        const double s = 1.0 / static_cast<double>(grid_.points());
        for (double& v : out) v *= s;
        return out;
    }

    [[nodiscard]] SpectralVelocity forward(const VelocityField& v) const {
        require_same_grid(grid_, v.grid);
        return {forward(v.x), forward(v.y)};
    }
    [[nodiscard]] VelocityField inverse(const SpectralVelocity& v) const {
        return VelocityField(grid_, inverse(v.x), inverse(v.y));
    }

    /// Sum over the full spectrum of |a|^2 scaled to the continuous L2 norm squared.
    [[nodiscard]] double parseval(const Modes& a) const {
        double s = 0.0;
        for (std::size_t m = 0; m < a.size(); ++m) s += weight_[m] * std::norm(a[m]);
        return s * grid_.cell_area() / static_cast<double>(grid_.points());
    }

    void truncate(Modes& a) const {
        for (std::size_t m = 0; m < a.size(); ++m) {
            if (!retained_[m]) a[m] = 0.0;
        }
    }
    void truncate(SpectralVelocity& v) const {
        truncate(v.x);
        truncate(v.y);
    }

    /// Removes the gradient part in place.
    void project(SpectralVelocity& v) const {
        for (std::size_t m = 0; m < v.x.size(); ++m) {
            const double kk = kx_[m] * kx_[m] + ky_[m] * ky_[m];
            if (kk == 0.0) continue;
            const Complex d = (kx_[m] * v.x[m] + ky_[m] * v.y[m]) / kk;
            v.x[m] -= kx_[m] * d;
            v.y[m] -= ky_[m] * d;
        }
    }

    [[nodiscard]] Modes divergence(const SpectralVelocity& v) const {
        Modes out(mode_count());
        const Complex I(0.0, 1.0);
        for (std::size_t m = 0; m < out.size(); ++m) out[m] = I * (kx_[m] * v.x[m] + ky_[m] * v.y[m]);
        return out;
    }

    [[nodiscard]] SpectralVelocity gradient(const Modes& a) const {
        SpectralVelocity out{Modes(mode_count()), Modes(mode_count())};
        const Complex I(0.0, 1.0);
        for (std::size_t m = 0; m < a.size(); ++m) {
            out.x[m] = I * kx_[m] * a[m];
            out.y[m] = I * ky_[m] * a[m];
        }
        return out;
    }

private:
    Grid2D grid_;
    int half_;
    fftw_plan forward_ = nullptr;
    fftw_plan inverse_ = nullptr;
    std::vector<double> kx_, ky_, k2_, weight_;
    std::vector<bool> retained_;
};

[[nodiscard]] inline VelocityField leray_project(const Spectral& sp, const VelocityField& f) {
    SpectralVelocity s = sp.forward(f);
    sp.project(s);
    return sp.inverse(s);
}

[[nodiscard]] inline VelocityField dealias(const Spectral& sp, const VelocityField& f) {
    SpectralVelocity s = sp.forward(f);
    sp.truncate(s);
    return sp.inverse(s);
}

[[nodiscard]] inline ScalarField divergence(const Spectral& sp, const VelocityField& f) {
    return ScalarField(sp.grid(), sp.inverse(sp.divergence(sp.forward(f))));
}

[[nodiscard]] inline VelocityField gradient(const Spectral& sp, const ScalarField& p) {
    require_same_grid(sp.grid(), p.grid);
    return sp.inverse(sp.gradient(sp.forward(p.data)));
}

[[nodiscard]] inline double max_abs(const ScalarField& f) {
    double m = 0.0;
    for (double v : f.data) m = std::max(m, std::abs(v));
    return m;
}

[[nodiscard]] inline double mean(const ScalarField& f) {
    double s = 0.0;
    for (double v : f.data) s += v;
    return s / static_cast<double>(f.data.size());
}

[[nodiscard]] inline double l2(const ScalarField& f) { return std::sqrt(inner(f, f)); }
[[nodiscard]] inline double l2(const VelocityField& f) { return std::sqrt(inner(f, f)); }

namespace detail {

inline double h1_semi_sq(const Spectral& sp, const Modes& a) {
    double s = 0.0;
    for (std::size_t m = 0; m < a.size(); ++m) s += sp.weight(m) * sp.k2(m) * std::norm(a[m]);
    return s * sp.grid().cell_area() / static_cast<double>(sp.grid().points());
}

inline double h_minus1_sq(const Spectral& sp, const Modes& a, double scale) {
    const double tol = 1e-12 * std::max(scale, 1e-300) * static_cast<double>(sp.grid().points());
    if (std::abs(a[0]) > tol) throw NonZeroMean("negative-order norm needs a mean-zero field");
    double s = 0.0;
    for (std::size_t m = 1; m < a.size(); ++m) s += sp.weight(m) * std::norm(a[m]) / sp.k2(m);
    return s * sp.grid().cell_area() / static_cast<double>(sp.grid().points());
}

inline double rms(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s / static_cast<double>(v.size()));
}

}  // namespace detail

/// |f|_1 = ||grad f|| computed spectrally.
[[nodiscard]] inline double h1_semi(const Spectral& sp, const ScalarField& f) {
    require_same_grid(sp.grid(), f.grid);
    return std::sqrt(detail::h1_semi_sq(sp, sp.forward(f.data)));
}

[[nodiscard]] inline double h1_semi(const Spectral& sp, const VelocityField& f) {
    const SpectralVelocity s = sp.forward(f);
    return std::sqrt(detail::h1_semi_sq(sp, s.x) + detail::h1_semi_sq(sp, s.y));
}

/// Full H1 norm (||f||^2 + |f|_1^2)^(1/2).
[[nodiscard]] inline double h1(const Spectral& sp, const VelocityField& f) {
    const double a = l2(f), b = h1_semi(sp, f);
    return std::sqrt(a * a + b * b);
}

/// Dual norm sup (f, v) / ||grad v||, which is ||(-Laplacian)^(-1/2) f||.
[[nodiscard]] inline double h_minus1(const Spectral& sp, const ScalarField& f) {
    require_same_grid(sp.grid(), f.grid);
    return std::sqrt(detail::h_minus1_sq(sp, sp.forward(f.data), detail::rms(f.data)));
}

[[nodiscard]] inline double h_minus1(const Spectral& sp, const VelocityField& f) {
    const SpectralVelocity s = sp.forward(f);
    const double scale = std::max(detail::rms(f.x), detail::rms(f.y));
    return std::sqrt(detail::h_minus1_sq(sp, s.x, scale) + detail::h_minus1_sq(sp, s.y, scale));
}

/// max_n ||f_n|| over a sequence of spatial norms.
[[nodiscard]] inline double bochner_sup(std::span<const double> norms) {
    double m = 0.0;
    for (double v : norms) m = std::max(m, v);
    return m;
}

/// (sum_n (k_n + k_{n-1}) ||f(t_{n,beta})||^2)^(1/2).
[[nodiscard]] inline double bochner_l2_beta(std::span<const double> step_sums, std::span<const double> norms) {
    if (step_sums.size() != norms.size()) throw DimensionMismatch("step sums and norms differ in length");
    double s = 0.0;
    for (std::size_t i = 0; i < norms.size(); ++i) s += step_sums[i] * norms[i] * norms[i];
    return std::sqrt(s);
}

}  // namespace dln
