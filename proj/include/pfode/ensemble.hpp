/// @file ensemble.hpp
/// @brief Particle ensembles and seed handling shared by samplers and integrators.
#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace pfode {

/// Row-major so that each particle's state is contiguous.
using StateMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

/// splitmix64 finalizer; used for deriving child seeds.
inline std::uint64_t mix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// Stable child seed for (parent, a, b). Independent of evaluation order.
inline std::uint64_t derive_seed(std::uint64_t parent, std::uint64_t a, std::uint64_t b = 0) {
    return mix64(mix64(mix64(parent) ^ (a + 0x632be59bd9b4e019ULL)) ^ (b + 0x85157af5ULL));
}

using Rng = std::mt19937_64;

/// Box-Muller standard normal. std::normal_distribution is implementation
/// defined, this keeps streams identical across standard libraries.
class StandardNormal {
public:
    double operator()(Rng& rng) {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        do {
            u1 = uniform(rng);
        } while (u1 <= 0.0);
        const double u2 = uniform(rng);
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * M_PI * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    /// Uniform on [0, 1) with 53 random bits.
    static double uniform(Rng& rng) {
        return static_cast<double>(rng() >> 11) * 0x1.0p-53;
    }

private:
    double spare_ = 0.0;
    bool has_spare_ = false;
};

struct ParticleEnsemble {
    StateMatrix states;  // n x d
    double time = 0.0;   // current reverse time
    std::vector<std::uint64_t> seed_lineage;

    std::size_t size() const { return static_cast<std::size_t>(states.rows()); }
    std::size_t dim() const { return static_cast<std::size_t>(states.cols()); }

    /// Index of the first non-finite row, or -1.
    long first_non_finite() const {
        for (Eigen::Index i = 0; i < states.rows(); ++i)
            if (!states.row(i).allFinite()) return static_cast<long>(i);
        return -1;
    }
};

/// J draws from N(0, I_d).
inline ParticleEnsemble sample_standard_normal(std::size_t n, std::size_t d, std::uint64_t seed) {
    if (n == 0 || d == 0) throw std::invalid_argument("sample_standard_normal: n and d must be >= 1");
    ParticleEnsemble ens;
    ens.states.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
    Rng rng(seed);
    StandardNormal normal;
    for (Eigen::Index i = 0; i < ens.states.rows(); ++i)
        for (Eigen::Index j = 0; j < ens.states.cols(); ++j) ens.states(i, j) = normal(rng);
    ens.seed_lineage = {seed};
    return ens;
}

}  // namespace pfode
