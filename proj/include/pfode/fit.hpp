/// @file fit.hpp
/// @brief Least-squares power-law fits, y ~ A x^slope.
#pragma once

#include <cmath>
#include <cstddef>
#include <set>
#include <stdexcept>
#include <utility>
#include <vector>

namespace pfode {

struct SlopeFit {
    double slope = 0.0;
    double intercept = 0.0;  // in log space
    double r2 = 0.0;
    std::size_t cells = 0;
};

/// Ordinary least squares of log y on log x. Needs >= 2 distinct x, all values > 0.
inline SlopeFit fit_slope(const std::vector<std::pair<double, double>>& points) {
    std::set<double> distinct;
    for (const auto& [x, y] : points) {
        if (!(x > 0.0) || !(y > 0.0) || !std::isfinite(x) || !std::isfinite(y))
            throw std::invalid_argument("fit_slope: points must be finite and positive");
        distinct.insert(x);
    }
    if (distinct.size() < 2) throw std::invalid_argument("fit_slope: need at least two distinct x values");
    const double n = static_cast<double>(points.size());
    double sx = 0, sy = 0;
    for (const auto& [x, y] : points) {
        sx += std::log(x);
        sy += std::log(y);
    }
    const double mx = sx / n, my = sy / n;
    double sxx = 0, sxy = 0, syy = 0;
    for (const auto& [x, y] : points) {
        const double dx = std::log(x) - mx, dy = std::log(y) - my;
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    SlopeFit f;
    f.slope = sxy / sxx;
    f.intercept = my - f.slope * mx;
    f.r2 = syy > 0.0 ? (sxy * sxy) / (sxx * syy) : 1.0;
    f.cells = points.size();
    return f;
}

}  // namespace pfode
