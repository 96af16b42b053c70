/// @file fv_transport.hpp
/// @brief Second-order finite-volume solver for 1D transport d_t rho = -d_x(v rho).
///
/// MUSCL reconstruction with the van Leer limiter, upwind interface fluxes
/// chosen by the sign of the face velocity, Heun (two-stage) time stepping and
/// zero-gradient ghost cells at both ends.
#pragma once

#include "pfode/ensemble.hpp"
#include "pfode/score_field.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

namespace pfode {

/// Cell-averaged density on a uniform grid over [x_lo, x_hi].
class DensityField1D {
public:
    DensityField1D() = default;
    DensityField1D(double x_lo, double x_hi, std::size_t n_cells)
        : x_lo_(x_lo), x_hi_(x_hi), values_(n_cells, 0.0) {
        if (n_cells == 0) throw std::invalid_argument("DensityField1D: n_cells must be >= 1");
        if (!(x_hi > x_lo)) throw std::invalid_argument("DensityField1D: x_hi must exceed x_lo");
    }

    double x_lo() const { return x_lo_; }
    double x_hi() const { return x_hi_; }
    std::size_t n_cells() const { return values_.size(); }
    double dx() const { return (x_hi_ - x_lo_) / static_cast<double>(values_.size()); }
    double center(std::size_t i) const { return x_lo_ + (static_cast<double>(i) + 0.5) * dx(); }
    double face(std::size_t i) const {
        return i == values_.size() ? x_hi_ : x_lo_ + static_cast<double>(i) * dx();
    }

    std::vector<double>& values() { return values_; }
    const std::vector<double>& values() const { return values_; }
    double operator[](std::size_t i) const { return values_[i]; }
    double& operator[](std::size_t i) { return values_[i]; }

    double mass() const {
        double m = 0.0;
        for (double v : values_) m += v;
        return m * dx();
    }

    void normalize() {
        const double m = mass();
        if (!(m > 0.0)) throw std::domain_error("DensityField1D: cannot normalize zero mass");
        for (double& v : values_) v /= m;
    }

    bool same_grid(const DensityField1D& o) const {
        return x_lo_ == o.x_lo_ && x_hi_ == o.x_hi_ && values_.size() == o.values_.size();
    }

private:
    double x_lo_ = 0.0;
    double x_hi_ = 1.0;
    std::vector<double> values_;
};

/// Cell averages of `density` by 3-point Gauss-Legendre quadrature per cell,
/// normalized to unit mass on the domain.
template <typename Density>
DensityField1D init_from_density(Density&& density, double x_lo, double x_hi, std::size_t n_cells) {
    DensityField1D f(x_lo, x_hi, n_cells);
    const double dx = f.dx();
    static constexpr double kNode = 0.77459666924148337704;  // sqrt(3/5)
    static constexpr double kW0 = 8.0 / 18.0, kW1 = 5.0 / 18.0;
    for (std::size_t i = 0; i < n_cells; ++i) {
        const double c = f.center(i);
        const double p[3] = {density(c - 0.5 * dx * kNode), density(c), density(c + 0.5 * dx * kNode)};
        for (double v : p)
            if (!(v >= 0.0) || !std::isfinite(v))
                throw std::invalid_argument("init_from_density: density must be finite and non-negative");
        f[i] = kW1 * p[0] + kW0 * p[1] + kW1 * p[2];
    }
    f.normalize();
    return f;
}

/// Face velocities: v[i] = velocity(t, faces[i]).
using FaceVelocity = std::function<void(double t, const std::vector<double>& faces, std::vector<double>& v)>;

/// Wraps a pointwise velocity v(t, x).
inline FaceVelocity pointwise_velocity(std::function<double(double, double)> fn) {
    return [fn = std::move(fn)](double t, const std::vector<double>& x, std::vector<double>& v) {
        v.resize(x.size());
        for (std::size_t i = 0; i < x.size(); ++i) v[i] = fn(t, x[i]);
    };
}

/// Reverse-ODE field of a one-dimensional target, evaluated in batch.
inline FaceVelocity face_velocity(const VelocityField& field) {
    if (field.dim() != 1) throw std::invalid_argument("face_velocity: field must be one-dimensional");
    return [field](double t, const std::vector<double>& x, std::vector<double>& v) {
        StateMatrix xs = Eigen::Map<const StateMatrix>(x.data(), static_cast<Eigen::Index>(x.size()), 1);
        StateMatrix out;
        field.velocity_batch(t, xs, out);
        v.assign(out.data(), out.data() + out.size());
    };
}

class CflError : public std::runtime_error {
public:
    CflError(double max_speed, double cfl)
        : std::runtime_error("CFL condition violated: max|v| = " + std::to_string(max_speed) +
                             " gives CFL number " + std::to_string(cfl) + " > 1"),
          max_speed_(max_speed), cfl_(cfl) {}
    double max_speed() const { return max_speed_; }
    double cfl() const { return cfl_; }

private:
    double max_speed_;
    double cfl_;
};

/// Raised when an update leaves a negative cell average.
class PositivityError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

namespace detail {

inline double van_leer(double a, double b) {
    const double ab = a * b;
    return ab > 0.0 ? 2.0 * ab / (a + b) : 0.0;
}

/// -(F_{i+1/2} - F_{i-1/2}) / dx into `rate`; returns max |v| over faces.
inline double transport_rate(const std::vector<double>& rho, const std::vector<double>& v, double dx,
                             std::vector<double>& rate, std::vector<double>& slope, std::vector<double>& flux) {
    const std::size_t n = rho.size();
    auto cell = [&](long i) -> double {
        // zero-gradient ghosts
        return rho[static_cast<std::size_t>(std::clamp<long>(i, 0, static_cast<long>(n) - 1))];
    };
    slope.resize(n + 2);  // slope[i + 1] for cells -1..n
    for (long i = -1; i <= static_cast<long>(n); ++i)
        slope[static_cast<std::size_t>(i + 1)] = van_leer(cell(i) - cell(i - 1), cell(i + 1) - cell(i));
    flux.resize(n + 1);
    double vmax = 0.0;
    for (std::size_t f = 0; f <= n; ++f) {
        const long left = static_cast<long>(f) - 1;
        const long right = static_cast<long>(f);
        const double vf = v[f];
        vmax = std::max(vmax, std::abs(vf));
        if (vf >= 0.0)
            flux[f] = vf * (cell(left) + 0.5 * slope[static_cast<std::size_t>(left + 1)]);
        else
            flux[f] = vf * (cell(right) - 0.5 * slope[static_cast<std::size_t>(right + 1)]);
    }
    rate.resize(n);
    for (std::size_t i = 0; i < n; ++i) rate[i] = -(flux[i + 1] - flux[i]) / dx;
    return vmax;
}

}  // namespace detail

struct AdvanceStats {
    double max_speed = 0.0;
    double cfl = 0.0;
};

/// One Heun step of size h from time t. Throws CflError if max|v| h / dx > 1 at
/// either stage, PositivityError if a cell average turns negative.
inline AdvanceStats advance_in_place(DensityField1D& field, const FaceVelocity& velocity, double t, double h) {
    if (!(h > 0.0)) throw std::invalid_argument("advance: h must be positive");
    const std::size_t n = field.n_cells();
    const double dx = field.dx();
    std::vector<double> faces(n + 1);
    for (std::size_t i = 0; i <= n; ++i) faces[i] = field.face(i);

    std::vector<double> v, rate, slope, flux;
    AdvanceStats stats;
    auto stage = [&](double ts, const std::vector<double>& rho) {
        velocity(ts, faces, v);
        if (v.size() != faces.size()) throw std::logic_error("advance: velocity returned wrong size");
        const double vmax = detail::transport_rate(rho, v, dx, rate, slope, flux);
        stats.max_speed = std::max(stats.max_speed, vmax);
        stats.cfl = stats.max_speed * h / dx;
        if (!(stats.cfl <= 1.0)) throw CflError(stats.max_speed, stats.cfl);
    };

    const std::vector<double>& rho0 = field.values();
    stage(t, rho0);
    std::vector<double> rho1(n);
    for (std::size_t i = 0; i < n; ++i) rho1[i] = rho0[i] + h * rate[i];
    stage(t + h, rho1);
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        out[i] = 0.5 * (rho0[i] + rho1[i] + h * rate[i]);
        if (out[i] < 0.0)
            throw PositivityError("advance: negative density " + std::to_string(out[i]) + " in cell " +
                                  std::to_string(i) + " at t=" + std::to_string(t + h));
    }
    field.values() = std::move(out);
    return stats;
}

inline DensityField1D advance(DensityField1D field, const FaceVelocity& velocity, double t, double h) {
    advance_in_place(field, velocity, t, h);
    return field;
}

/// 1/2 sum |rho1 - rho2| dx on identical grids.
inline double total_variation_grid(const DensityField1D& a, const DensityField1D& b) {
    if (!a.same_grid(b)) throw std::invalid_argument("total_variation_grid: grids differ");
    double s = 0.0;
    for (std::size_t i = 0; i < a.n_cells(); ++i) s += std::abs(a[i] - b[i]);
    return std::clamp(0.5 * s * a.dx(), 0.0, 1.0);
}

/// CSV with header x_center,density.
inline void write_density_csv(const DensityField1D& f, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open " + path + " for writing");
    out << "x_center,density\n" << std::setprecision(17);
    for (std::size_t i = 0; i < f.n_cells(); ++i) out << f.center(i) << ',' << f[i] << '\n';
}

}  // namespace pfode
