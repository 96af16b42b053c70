/// @file score_field.hpp
/// @brief Reverse-ODE velocity V(t, x) = x + s(t, x) built from the analytic
/// mixture score plus an artificial score error.
///
/// Time convention: callers pass reverse time t in [0, T - tau]; the score is
/// evaluated at forward time T - t. Nothing else in the library converts
/// between the two.
#pragma once

#include "pfode/ensemble.hpp"
#include "pfode/gaussian_mixture.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace pfode {

enum class PerturbationKind { none, constant, linear, sinusoidal };

inline std::string_view to_string(PerturbationKind k) {
    switch (k) {
        case PerturbationKind::none: return "none";
        case PerturbationKind::constant: return "constant";
        case PerturbationKind::linear: return "linear";
        case PerturbationKind::sinusoidal: return "sinusoidal";
    }
    return "none";
}

inline std::optional<PerturbationKind> parse_perturbation_kind(std::string_view s) {
    if (s == "none") return PerturbationKind::none;
    if (s == "constant") return PerturbationKind::constant;
    if (s == "linear") return PerturbationKind::linear;
    if (s == "sinusoidal") return PerturbationKind::sinusoidal;
    return std::nullopt;
}

/// Artificial score error delta(t, x); time independent for all kinds.
class ScorePerturbation {
public:
    ScorePerturbation() = default;
    ScorePerturbation(PerturbationKind kind, double delta, Vector center)
        : kind_(kind), delta_(delta), center_(std::move(center)) {
        if (!(delta >= 0.0) || !std::isfinite(delta))
            throw std::invalid_argument("ScorePerturbation: delta must be finite and >= 0");
    }

    static ScorePerturbation none(std::size_t d) {
        return ScorePerturbation(PerturbationKind::none, 0.0, Vector::Zero(static_cast<Eigen::Index>(d)));
    }

    PerturbationKind kind() const { return kind_; }
    double delta() const { return delta_; }
    const Vector& center() const { return center_; }

    bool is_zero() const { return kind_ == PerturbationKind::none || delta_ == 0.0; }

    /// constant:   delta / sqrt(d) in every coordinate
    /// linear:     delta (x - m) / sqrt(d)
    /// sinusoidal: delta sin(x) * (x - m) / sqrt(d), coordinatewise
    Vector evaluate(double /*t*/, const Vector& x) const {
        detail::require_dim(x.size(), center_.size(), "ScorePerturbation");
        Vector out(x.size());
        apply(x, out);
        return out;
    }

    /// out += delta(t, x) for each row of x.
    void add_batch(const StateMatrix& x, StateMatrix& out) const {
        detail::require_dim(x.cols(), center_.size(), "ScorePerturbation");
        if (is_zero()) return;
        const double scale = delta_ / std::sqrt(static_cast<double>(x.cols()));
        switch (kind_) {
            case PerturbationKind::none: return;
            case PerturbationKind::constant: out.array() += scale; return;
            case PerturbationKind::linear:
                out.noalias() += scale * (x.rowwise() - center_.transpose());
                return;
            case PerturbationKind::sinusoidal:
                out.array() += scale * x.array().sin() * (x.rowwise() - center_.transpose()).array();
                return;
        }
    }

private:
    void apply(const Vector& x, Vector& out) const {
        if (is_zero()) {
            out.setZero();
            return;
        }
        const double scale = delta_ / std::sqrt(static_cast<double>(x.size()));
        switch (kind_) {
            case PerturbationKind::none: out.setZero(); return;
            case PerturbationKind::constant: out.setConstant(scale); return;
            case PerturbationKind::linear: out = scale * (x - center_); return;
            case PerturbationKind::sinusoidal:
                out = scale * (x.array().sin() * (x - center_).array()).matrix();
                return;
        }
    }

    PerturbationKind kind_ = PerturbationKind::none;
    double delta_ = 0.0;
    Vector center_;
};

/// V(t, x) = x + grad log q_{T-t}(x) + delta(t, x)
class VelocityField {
public:
    VelocityField(std::shared_ptr<const GaussianMixture> target, ScorePerturbation perturbation,
                  double horizon, double tau = 0.0)
        : target_(std::move(target)), perturbation_(std::move(perturbation)), horizon_(horizon), tau_(tau) {
        if (!target_) throw std::invalid_argument("VelocityField: null target");
        if (!(tau >= 0.0) || !(horizon > tau))
            throw std::invalid_argument("VelocityField: need T > tau >= 0");
        if (perturbation_.center().size() != static_cast<Eigen::Index>(target_->dim()))
            throw std::invalid_argument("VelocityField: perturbation dimension does not match target");
    }

    /// Field for `target` with the perturbation centred at the global mixture mean.
    static VelocityField make(const GaussianMixture& target, PerturbationKind kind, double delta,
                              double horizon, double tau = 0.0) {
        auto shared = std::make_shared<const GaussianMixture>(target);
        ScorePerturbation p(kind, delta, shared->mean());
        return VelocityField(std::move(shared), std::move(p), horizon, tau);
    }

    std::size_t dim() const { return target_->dim(); }
    double horizon() const { return horizon_; }
    double tau() const { return tau_; }
    /// Largest reverse time the field accepts, T - tau.
    double end_time() const { return horizon_ - tau_; }
    const GaussianMixture& target() const { return *target_; }
    const ScorePerturbation& perturbation() const { return perturbation_; }

    Vector velocity(double t, const Vector& x) const {
        const auto dm = diffused_at(t);
        Vector v = x + dm->score(x);
        if (!perturbation_.is_zero()) v += perturbation_.evaluate(t, x);
        return v;
    }

    /// Stage-major evaluation over an ensemble: one factorization lookup for all rows.
    void velocity_batch(double t, const StateMatrix& x, StateMatrix& out) const {
        const auto dm = diffused_at(t);
        dm->score_batch(x, out);
        out += x;
        perturbation_.add_batch(x, out);
    }

    /// Diffused target at forward time T - t. Recently used times are cached so
    /// that stage times shared between consecutive steps are factored once.
    std::shared_ptr<const DiffusedMixture> diffused_at(double t) const {
        const double forward = forward_time(t);
        std::lock_guard<std::mutex> lock(cache_->mutex);
        for (const auto& e : cache_->entries)
            if (e.first == forward) return e.second;
        auto dm = std::make_shared<const DiffusedMixture>(*target_, forward);
        cache_->entries.emplace_back(forward, dm);
        if (cache_->entries.size() > kCacheCapacity) cache_->entries.erase(cache_->entries.begin());
        return dm;
    }

    /// Forward time T - t for reverse time t; throws std::domain_error outside [0, T - tau].
    double forward_time(double t) const {
        const double slack = 1e-12 * (1.0 + horizon_);
        if (!(t >= -slack) || !(t <= end_time() + slack))
            throw std::domain_error("VelocityField: reverse time " + std::to_string(t) +
                                    " outside [0, " + std::to_string(end_time()) + "]");
        return std::max(horizon_ - std::clamp(t, 0.0, horizon_), 0.0);
    }

private:
    static constexpr std::size_t kCacheCapacity = 8;
    struct Cache {
        std::mutex mutex;
        std::vector<std::pair<double, std::shared_ptr<const DiffusedMixture>>> entries;
    };

    std::shared_ptr<const GaussianMixture> target_;
    ScorePerturbation perturbation_;
    double horizon_;
    double tau_;
    std::shared_ptr<Cache> cache_ = std::make_shared<Cache>();
};

}  // namespace pfode
