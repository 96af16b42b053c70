/// @file metrics.hpp
/// @brief Kernel density estimates and the error measures reported by experiments.
#pragma once

#include "pfode/ensemble.hpp"
#include "pfode/fit.hpp"
#include "pfode/fv_transport.hpp"
#include "pfode/gaussian_mixture.hpp"

#include <algorithm>
#include <cmath>
#include <span>
#include <stdexcept>
#include <vector>

namespace pfode {

/// Silverman's Gaussian-kernel rule, tapered over the reverse run:
///   (4 / (n (d + 2)))^{1/(d+4)} * (1 - t / (2T)).
inline double silverman_bandwidth(std::size_t n, std::size_t d, double t, double T) {
    if (n < 2) throw std::invalid_argument("silverman_bandwidth: n must be >= 2");
    if (d < 1) throw std::invalid_argument("silverman_bandwidth: d must be >= 1");
    if (!(T > 0.0) || !(t >= 0.0) || !(t <= T))
        throw std::invalid_argument("silverman_bandwidth: need 0 <= t <= T, T > 0");
    const double dd = static_cast<double>(d);
    const double base = std::pow(4.0 / (static_cast<double>(n) * (dd + 2.0)), 1.0 / (dd + 4.0));
    return base * (1.0 - t / (2.0 * T));
}

/// Evaluation grid for densities: `points` cells over [lo, hi], values at centers.
struct DensityGrid {
    double lo = -10.0;
    double hi = 10.0;
    std::size_t points = 2000;

    void check() const {
        if (points < 2) throw std::invalid_argument("DensityGrid: need >= 2 points");
        if (!(hi > lo)) throw std::invalid_argument("DensityGrid: hi must exceed lo");
    }
    DensityField1D make() const {
        check();
        return DensityField1D(lo, hi, points);
    }
};

struct KdeConfig {
    double bandwidth;
    DensityGrid grid;

    /// Silverman bandwidth for n samples in d dimensions at reverse time t of T.
    static KdeConfig silverman(std::size_t n, std::size_t d, double t, double T, DensityGrid grid = {}) {
        return {silverman_bandwidth(n, d, t, T), grid};
    }
};

/// Gaussian-kernel estimate on the grid, normalized to unit mass on the grid.
inline DensityField1D kde_1d(std::span<const double> samples, const KdeConfig& cfg) {
    if (samples.size() < 2) throw std::invalid_argument("kde_1d: need at least two samples");
    if (!(cfg.bandwidth > 0.0)) throw std::invalid_argument("kde_1d: bandwidth must be positive");
    DensityField1D f = cfg.grid.make();
    const double b = cfg.bandwidth;
    const double dx = f.dx();
    const double cutoff = 9.0 * b;
    const auto n = static_cast<long>(f.n_cells());
    std::vector<double>& acc = f.values();
    for (double s : samples) {
        if (!std::isfinite(s)) throw std::invalid_argument("kde_1d: non-finite sample");
        // centers c_i = lo + (i + 1/2) dx within [s - cutoff, s + cutoff]
        const long i0 = std::max(0L, static_cast<long>(std::ceil((s - cutoff - f.x_lo()) / dx - 0.5)));
        const long i1 = std::min(n - 1, static_cast<long>(std::floor((s + cutoff - f.x_lo()) / dx - 0.5)));
        for (long i = i0; i <= i1; ++i) {
            const double u = (f.center(static_cast<std::size_t>(i)) - s) / b;
            acc[static_cast<std::size_t>(i)] += std::exp(-0.5 * u * u);
        }
    }
    if (!(f.mass() > 0.0)) throw std::domain_error("kde_1d: all samples fall outside the evaluation grid");
    f.normalize();
    return f;
}

/// Analytic density of a one-dimensional mixture at the grid centers.
inline DensityField1D density_on_grid(const GaussianMixture& gm, const DensityGrid& grid) {
    if (gm.dim() != 1) throw std::invalid_argument("density_on_grid: mixture must be one-dimensional");
    DensityField1D f = grid.make();
    Vector x(1);
    for (std::size_t i = 0; i < f.n_cells(); ++i) {
        x[0] = f.center(i);
        f[i] = std::exp(gm.log_density(x));
    }
    return f;
}

inline std::vector<double> column(const StateMatrix& states, std::size_t j) {
    if (j >= static_cast<std::size_t>(states.cols())) throw std::out_of_range("column index out of range");
    std::vector<double> out(static_cast<std::size_t>(states.rows()));
    for (Eigen::Index i = 0; i < states.rows(); ++i) out[static_cast<std::size_t>(i)] = states(i, static_cast<Eigen::Index>(j));
    return out;
}

/// TV between the KDE of coordinate `dim_index` and the analytic marginal of
/// `reference` along that coordinate.
inline double tv_marginal(const StateMatrix& samples, const GaussianMixture& reference, std::size_t dim_index,
                          const KdeConfig& cfg) {
    if (dim_index >= reference.dim() || dim_index >= static_cast<std::size_t>(samples.cols()))
        throw std::out_of_range("tv_marginal: dim_index out of range");
    const std::vector<double> xs = column(samples, dim_index);
    const DensityField1D est = kde_1d(xs, cfg);
    const GaussianMixture marginal =
        reference.dim() == 1 ? reference : marginalize(reference, std::vector<std::size_t>{dim_index});
    return total_variation_grid(est, density_on_grid(marginal, cfg.grid));
}

struct MomentErrors {
    double rel_mean_err = 0.0;
    double rel_cov_err = 0.0;
    /// True when the reference mean is zero and rel_mean_err holds the absolute error.
    bool mean_error_absolute = false;
};

inline Vector sample_mean(const StateMatrix& x) { return x.colwise().mean().transpose(); }

/// Unbiased (n - 1) sample covariance.
inline Matrix sample_covariance(const StateMatrix& x) {
    if (x.rows() < 2) throw std::invalid_argument("sample_covariance: need >= 2 samples");
    const Vector m = sample_mean(x);
    const StateMatrix centered = x.rowwise() - m.transpose();
    return (centered.transpose() * centered) / static_cast<double>(x.rows() - 1);
}

/// Relative errors of the empirical moments against the closed-form mixture
/// moments: ||mean - m|| / ||m|| (Euclidean) and ||cov - C||_F / ||C||_F.
inline MomentErrors moment_errors(const Vector& mean, const Matrix& cov, const GaussianMixture& reference) {
    const Vector ref_mean = reference.mean();
    const Matrix ref_cov = reference.covariance();
    detail::require_dim(mean.size(), ref_mean.size(), "moment_errors");
    MomentErrors e;
    const double mnorm = ref_mean.norm();
    if (mnorm == 0.0) {
        e.rel_mean_err = (mean - ref_mean).norm();
        e.mean_error_absolute = true;
    } else {
        e.rel_mean_err = (mean - ref_mean).norm() / mnorm;
    }
    e.rel_cov_err = (cov - ref_cov).norm() / ref_cov.norm();
    return e;
}

inline MomentErrors moment_errors(const StateMatrix& samples, const GaussianMixture& reference) {
    if (samples.rows() < 2) throw std::invalid_argument("moment_errors: need >= 2 samples");
    return moment_errors(sample_mean(samples), sample_covariance(samples), reference);
}

struct MetricsReport {
    double tv = 0.0;
    double rel_mean_err = 0.0;
    double rel_cov_err = 0.0;
    bool mean_error_absolute = false;
};

}  // namespace pfode
