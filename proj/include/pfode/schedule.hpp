/// @file schedule.hpp
/// @brief Forward Ornstein-Uhlenbeck noise schedule and uniform time grids.
///
/// The forward process X_t = lambda_t X_0 + sigma_t W has
///   lambda_t = exp(-t),  sigma_t = sqrt(1 - exp(-2t)),
/// so lambda_t^2 + sigma_t^2 = 1 for every t >= 0.
#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace pfode {

struct ScheduleValue {
    double lambda;
    double sigma;
};

struct NoiseSchedule {
    /// (lambda_t, sigma_t). Throws std::domain_error for negative or non-finite t.
    static ScheduleValue evaluate(double t) {
        if (!(t >= 0.0) || !std::isfinite(t))
            throw std::domain_error("NoiseSchedule: time must be finite and >= 0, got " +
                                    std::to_string(t));
        if (t == 0.0) return {1.0, 0.0};
        // expm1 keeps sigma accurate for small t
        return {std::exp(-t), std::sqrt(-std::expm1(-2.0 * t))};
    }

    static double lambda(double t) { return evaluate(t).lambda; }
    static double sigma(double t) { return evaluate(t).sigma; }
};

/// Uniform grid t_start = t_0 < ... < t_N = t_end.
class TimeGrid {
public:
    TimeGrid(double t_start, double t_end, std::size_t n_steps)
        : t_start_(t_start), t_end_(t_end), n_steps_(n_steps) {
        if (n_steps == 0) throw std::invalid_argument("TimeGrid: n_steps must be >= 1");
        if (!(t_end > t_start))
            throw std::invalid_argument("TimeGrid: t_end must be greater than t_start");
    }

    double t_start() const { return t_start_; }
    double t_end() const { return t_end_; }
    std::size_t n_steps() const { return n_steps_; }
    double step() const { return (t_end_ - t_start_) / static_cast<double>(n_steps_); }

    /// Node i, computed from the fraction i/N rather than by accumulation.
    /// The last node is t_end bitwise.
    double node(std::size_t i) const {
        if (i > n_steps_) throw std::out_of_range("TimeGrid: node index out of range");
        if (i == n_steps_) return t_end_;
        const double frac = static_cast<double>(i) / static_cast<double>(n_steps_);
        return t_start_ + frac * (t_end_ - t_start_);
    }

    std::vector<double> nodes() const {
        std::vector<double> out(n_steps_ + 1);
        for (std::size_t i = 0; i <= n_steps_; ++i) out[i] = node(i);
        return out;
    }

private:
    double t_start_;
    double t_end_;
    std::size_t n_steps_;
};

inline TimeGrid make_grid(double t_start, double t_end, long long n_steps) {
    if (n_steps < 1) throw std::invalid_argument("make_grid: n_steps must be >= 1");
    return TimeGrid(t_start, t_end, static_cast<std::size_t>(n_steps));
}

}  // namespace pfode
