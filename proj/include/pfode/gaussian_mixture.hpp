/// @file gaussian_mixture.hpp
/// @brief Gaussian mixture targets, their OU-diffused densities and analytic scores.
///
/// A K-mode mixture q_0 = sum_k w_k N(m_k, C_k) pushed through the forward OU
/// process stays a mixture:
///   q_t = sum_k w_k N(lambda_t m_k, lambda_t^2 C_k + sigma_t^2 I).
/// Every density and score evaluation goes through per-mode Cholesky factors
/// computed once, at construction.
#pragma once

#include "pfode/ensemble.hpp"
#include "pfode/schedule.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

namespace pfode {

namespace detail {

inline constexpr double kLog2Pi = 1.8378770664093454835606594728112;

inline void require_dim(Eigen::Index got, Eigen::Index want, const char* where) {
    if (got != want)
        throw std::invalid_argument(std::string(where) + ": dimension mismatch (got " +
                                    std::to_string(got) + ", expected " +
                                    std::to_string(want) + ")");
}

/// log(sum(exp(v))) with max subtraction.
inline double log_sum_exp(const Eigen::Ref<const Eigen::VectorXd>& v) {
    const double vmax = v.maxCoeff();
    if (!std::isfinite(vmax)) return vmax;
    return vmax + std::log((v.array() - vmax).exp().sum());
}

/// One Gaussian component with its factorization.
struct Component {
    Vector mean;
    Matrix cov;
    Matrix chol;       // lower triangular, cov = chol * chol^T
    Matrix precision;  // cov^{-1}, formed from chol
    double log_norm;   // -d/2 log 2pi - 1/2 log det cov

    static Component make(Vector mean, Matrix cov, const char* where, std::size_t mode) {
        Component c;
        const auto d = mean.size();
        Eigen::LLT<Matrix> llt(cov);
        if (llt.info() != Eigen::Success)
            throw std::invalid_argument(std::string(where) + ": covariance of mode " +
                                        std::to_string(mode) + " is not positive definite");
        c.chol = llt.matrixL();
        if ((c.chol.diagonal().array() <= 0.0).any() || !c.chol.allFinite())
            throw std::invalid_argument(std::string(where) + ": covariance of mode " +
                                        std::to_string(mode) + " is not positive definite");
        c.precision = llt.solve(Matrix::Identity(d, d));
        c.precision = 0.5 * (c.precision + c.precision.transpose()).eval();
        const double log_det = 2.0 * c.chol.diagonal().array().log().sum();
        c.log_norm = -0.5 * static_cast<double>(d) * kLog2Pi - 0.5 * log_det;
        c.mean = std::move(mean);
        c.cov = std::move(cov);
        return c;
    }

    double log_density(const Vector& x) const {
        const Vector z = chol.triangularView<Eigen::Lower>().solve(x - mean);
        return log_norm - 0.5 * z.squaredNorm();
    }

    /// cov^{-1} (x - mean) through two triangular solves.
    Vector whitened_residual(const Vector& x) const {
        Vector z = chol.triangularView<Eigen::Lower>().solve(x - mean);
        chol.transpose().triangularView<Eigen::Upper>().solveInPlace(z);
        return z;
    }
};

/// Shared evaluation for a set of components with log-weights.
class ComponentSet {
public:
    ComponentSet() = default;
    ComponentSet(std::vector<Component> comps, Vector log_weights)
        : comps_(std::move(comps)), log_weights_(std::move(log_weights)) {}

    std::size_t modes() const { return comps_.size(); }
    Eigen::Index dim() const { return comps_.empty() ? 0 : comps_.front().mean.size(); }
    const Component& component(std::size_t k) const { return comps_[k]; }

    Vector mode_log_terms(const Vector& x) const {
        Vector lt(static_cast<Eigen::Index>(comps_.size()));
        for (std::size_t k = 0; k < comps_.size(); ++k)
            lt[static_cast<Eigen::Index>(k)] =
                log_weights_[static_cast<Eigen::Index>(k)] + comps_[k].log_density(x);
        return lt;
    }

    double log_density(const Vector& x, const char* where) const {
        require_dim(x.size(), dim(), where);
        return log_sum_exp(mode_log_terms(x));
    }

    Vector responsibilities(const Vector& x, const char* where) const {
        require_dim(x.size(), dim(), where);
        const Vector lt = mode_log_terms(x);
        const double lse = log_sum_exp(lt);
        return (lt.array() - lse).exp().matrix();
    }

    Vector score(const Vector& x, const char* where) const {
        require_dim(x.size(), dim(), where);
        const Vector r = responsibilities(x, where);
        Vector s = Vector::Zero(dim());
        for (std::size_t k = 0; k < comps_.size(); ++k) {
            const double rk = r[static_cast<Eigen::Index>(k)];
            if (rk == 0.0) continue;
            s.noalias() -= rk * comps_[k].whitened_residual(x);
        }
        return s;
    }

    /// Scores for every row of `x`, written to `out` (same shape). Rows are
    /// processed in fixed-size blocks so results do not depend on threading.
    void score_batch(const StateMatrix& x, StateMatrix& out, const char* where) const {
        require_dim(x.cols(), dim(), where);
        out.resize(x.rows(), x.cols());
        const Eigen::Index n = x.rows();
        for (Eigen::Index start = 0; start < n; start += kBlock) {
            const Eigen::Index rows = std::min(kBlock, n - start);
            score_block(x.middleRows(start, rows), out.middleRows(start, rows));
        }
    }

    /// Log-densities for every row of `x`.
    Vector log_density_batch(const StateMatrix& x, const char* where) const {
        require_dim(x.cols(), dim(), where);
        Vector out(x.rows());
        for (Eigen::Index i = 0; i < x.rows(); ++i)
            out[i] = log_sum_exp(mode_log_terms(x.row(i).transpose()));
        return out;
    }

    static constexpr Eigen::Index kBlock = 512;

private:
    template <typename In, typename Out>
    void score_block(const In& x, Out&& out) const {
        const Eigen::Index rows = x.rows();
        const Eigen::Index d = x.cols();
        const auto K = static_cast<Eigen::Index>(comps_.size());
        Matrix log_terms(rows, K);
        std::vector<StateMatrix> residuals(comps_.size());
        StateMatrix diff(rows, d);
        for (Eigen::Index k = 0; k < K; ++k) {
            const Component& c = comps_[static_cast<std::size_t>(k)];
            diff = x.rowwise() - c.mean.transpose();
            residuals[static_cast<std::size_t>(k)].noalias() = diff * c.precision;
            const Vector quad =
                diff.cwiseProduct(residuals[static_cast<std::size_t>(k)]).rowwise().sum();
            log_terms.col(k) = (log_weights_[k] + c.log_norm) - 0.5 * quad.array();
        }
        out.setZero();
        for (Eigen::Index i = 0; i < rows; ++i) {
            const double lmax = log_terms.row(i).maxCoeff();
            double total = 0.0;
            for (Eigen::Index k = 0; k < K; ++k) {
                log_terms(i, k) = std::exp(log_terms(i, k) - lmax);
                total += log_terms(i, k);
            }
            for (Eigen::Index k = 0; k < K; ++k) {
                const double rk = log_terms(i, k) / total;
                if (rk != 0.0) out.row(i) -= rk * residuals[static_cast<std::size_t>(k)].row(i);
            }
        }
    }

    std::vector<Component> comps_;
    Vector log_weights_;
};

}  // namespace detail

/// Target distribution q_0.
class GaussianMixture {
public:
    GaussianMixture() = default;

    /// Validates weights (positive, summing to 1 within 1e-12) and covariances
    /// (symmetric within 1e-12, positive definite). Throws std::invalid_argument.
    GaussianMixture(Vector weights, std::vector<Vector> means, std::vector<Matrix> covariances)
        : weights_(std::move(weights)), means_(std::move(means)), covs_(std::move(covariances)) {
        const auto K = static_cast<std::size_t>(weights_.size());
        if (K == 0) throw std::invalid_argument("GaussianMixture: at least one mode required");
        if (means_.size() != K || covs_.size() != K)
            throw std::invalid_argument("GaussianMixture: weights, means and covariances differ in length");
        if ((weights_.array() <= 0.0).any() || !weights_.allFinite())
            throw std::invalid_argument("GaussianMixture: weights must be positive");
        if (std::abs(weights_.sum() - 1.0) > 1e-12)
            throw std::invalid_argument("GaussianMixture: weights must sum to 1");
        const auto d = means_.front().size();
        if (d == 0) throw std::invalid_argument("GaussianMixture: dimension must be >= 1");
        std::vector<detail::Component> comps;
        comps.reserve(K);
        for (std::size_t k = 0; k < K; ++k) {
            if (means_[k].size() != d || covs_[k].rows() != d || covs_[k].cols() != d)
                throw std::invalid_argument("GaussianMixture: mode " + std::to_string(k) +
                                            " has inconsistent dimension");
            if ((covs_[k] - covs_[k].transpose()).cwiseAbs().maxCoeff() > 1e-12)
                throw std::invalid_argument("GaussianMixture: covariance of mode " +
                                            std::to_string(k) + " is not symmetric");
            comps.push_back(detail::Component::make(means_[k], covs_[k], "GaussianMixture", k));
        }
        set_ = detail::ComponentSet(std::move(comps), weights_.array().log().matrix());
    }

    std::size_t dim() const { return static_cast<std::size_t>(means_.front().size()); }
    std::size_t modes() const { return means_.size(); }
    const Vector& weights() const { return weights_; }
    const std::vector<Vector>& means() const { return means_; }
    const std::vector<Matrix>& covariances() const { return covs_; }
    const Matrix& cholesky(std::size_t k) const { return set_.component(k).chol; }

    double log_density(const Vector& x) const { return set_.log_density(x, "GaussianMixture::log_density"); }
    Vector score(const Vector& x) const { return set_.score(x, "GaussianMixture::score"); }

    /// sum_k w_k m_k
    Vector mean() const {
        Vector m = Vector::Zero(static_cast<Eigen::Index>(dim()));
        for (std::size_t k = 0; k < modes(); ++k) m += weights_[static_cast<Eigen::Index>(k)] * means_[k];
        return m;
    }

    /// sum_k w_k (C_k + m_k m_k^T) - m m^T
    Matrix covariance() const {
        const auto d = static_cast<Eigen::Index>(dim());
        Matrix c = Matrix::Zero(d, d);
        for (std::size_t k = 0; k < modes(); ++k)
            c += weights_[static_cast<Eigen::Index>(k)] * (covs_[k] + means_[k] * means_[k].transpose());
        const Vector m = mean();
        c -= m * m.transpose();
        return c;
    }

private:
    Vector weights_;
    std::vector<Vector> means_;
    std::vector<Matrix> covs_;
    detail::ComponentSet set_;
};

/// q_t for a fixed forward time t. Immutable once built; safe to share.
class DiffusedMixture {
public:
    DiffusedMixture(const GaussianMixture& base, double t) : time_(t) {
        const ScheduleValue s = NoiseSchedule::evaluate(t);
        std::vector<detail::Component> comps;
        comps.reserve(base.modes());
        for (std::size_t k = 0; k < base.modes(); ++k) {
            Matrix cov = (s.lambda * s.lambda) * base.covariances()[k];
            cov.diagonal().array() += s.sigma * s.sigma;
            comps.push_back(detail::Component::make(s.lambda * base.means()[k], std::move(cov),
                                                    "DiffusedMixture", k));
        }
        set_ = detail::ComponentSet(std::move(comps), base.weights().array().log().matrix());
    }

    double time() const { return time_; }
    std::size_t dim() const { return static_cast<std::size_t>(set_.dim()); }
    std::size_t modes() const { return set_.modes(); }
    const Vector& mode_mean(std::size_t k) const { return set_.component(k).mean; }
    const Matrix& mode_covariance(std::size_t k) const { return set_.component(k).cov; }

    double log_density(const Vector& x) const { return set_.log_density(x, "DiffusedMixture::log_density"); }
    Vector responsibilities(const Vector& x) const {
        return set_.responsibilities(x, "DiffusedMixture::responsibilities");
    }
    /// grad log q_t(x) = -sum_k r_k(x) Sigma_k(t)^{-1} (x - lambda_t m_k)
    Vector score(const Vector& x) const { return set_.score(x, "DiffusedMixture::score"); }

    void score_batch(const StateMatrix& x, StateMatrix& out) const {
        set_.score_batch(x, out, "DiffusedMixture::score_batch");
    }
    Vector log_density_batch(const StateMatrix& x) const {
        return set_.log_density_batch(x, "DiffusedMixture::log_density_batch");
    }

private:
    double time_;
    detail::ComponentSet set_;
};

/// Exact i.i.d. draws from q_0: mode k ~ Categorical(w), then m_k + L_k z.
/// The drawn mode indices are written to `labels` when given.
inline ParticleEnsemble sample_prior(const GaussianMixture& gm, long long n, std::uint64_t seed,
                                     std::vector<std::size_t>* labels = nullptr) {
    if (n < 1) throw std::invalid_argument("sample_prior: n must be >= 1");
    const auto d = static_cast<Eigen::Index>(gm.dim());
    std::vector<double> cumulative(gm.modes());
    std::partial_sum(gm.weights().data(), gm.weights().data() + gm.weights().size(), cumulative.begin());
    ParticleEnsemble ens;
    ens.states.resize(n, d);
    Rng rng(seed);
    StandardNormal normal;
    Vector z(d);
    if (labels) labels->resize(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) {
        const double u = StandardNormal::uniform(rng) * cumulative.back();
        auto it = std::upper_bound(cumulative.begin(), cumulative.end(), u);
        const auto k = std::min<std::size_t>(static_cast<std::size_t>(it - cumulative.begin()), gm.modes() - 1);
        if (labels) (*labels)[static_cast<std::size_t>(i)] = k;
        for (Eigen::Index j = 0; j < d; ++j) z[j] = normal(rng);
        ens.states.row(i) = (gm.means()[k] + gm.cholesky(k).triangularView<Eigen::Lower>() * z).transpose();
    }
    ens.seed_lineage = {seed};
    return ens;
}

/// X_t = lambda_t X_0 + sigma_t W with X_0 ~ q_0.
inline ParticleEnsemble forward_sample(const GaussianMixture& gm, double t, long long n, std::uint64_t seed) {
    const ScheduleValue s = NoiseSchedule::evaluate(t);
    ParticleEnsemble ens = sample_prior(gm, n, derive_seed(seed, 0));
    if (t == 0.0) {
        ens.seed_lineage = {seed};
        return ens;
    }
    const ParticleEnsemble noise = sample_standard_normal(static_cast<std::size_t>(n), gm.dim(), derive_seed(seed, 1));
    ens.states = s.lambda * ens.states + s.sigma * noise.states;
    ens.seed_lineage = {seed};
    return ens;
}

/// Restriction of every mode to the coordinates `dims` (in the given order).
inline GaussianMixture marginalize(const GaussianMixture& gm, const std::vector<std::size_t>& dims) {
    if (dims.empty()) throw std::invalid_argument("marginalize: dims must be non-empty");
    std::set<std::size_t> seen;
    for (std::size_t i : dims) {
        if (i >= gm.dim())
            throw std::invalid_argument("marginalize: index " + std::to_string(i) + " out of range for d=" +
                                        std::to_string(gm.dim()));
        if (!seen.insert(i).second)
            throw std::invalid_argument("marginalize: duplicate index " + std::to_string(i));
    }
    const auto m = static_cast<Eigen::Index>(dims.size());
    std::vector<Vector> means;
    std::vector<Matrix> covs;
    for (std::size_t k = 0; k < gm.modes(); ++k) {
        Vector mk(m);
        Matrix ck(m, m);
        for (Eigen::Index a = 0; a < m; ++a) {
            mk[a] = gm.means()[k][static_cast<Eigen::Index>(dims[static_cast<std::size_t>(a)])];
            for (Eigen::Index b = 0; b < m; ++b)
                ck(a, b) = gm.covariances()[k](static_cast<Eigen::Index>(dims[static_cast<std::size_t>(a)]),
                                               static_cast<Eigen::Index>(dims[static_cast<std::size_t>(b)]));
        }
        means.push_back(std::move(mk));
        covs.push_back(std::move(ck));
    }
    return GaussianMixture(gm.weights(), std::move(means), std::move(covs));
}

/// First `k` coordinates.
inline GaussianMixture marginalize_first(const GaussianMixture& gm, std::size_t k) {
    std::vector<std::size_t> dims(k);
    std::iota(dims.begin(), dims.end(), std::size_t{0});
    return marginalize(gm, dims);
}

/// Random K-mode mixture in R^d:
///   w_k ~ U[0,1] normalized, m_k ~ N(0, 9 I), C_k = (W_k^T W_k / d + I) / 8, (W_k)_ij ~ N(0,1).
inline GaussianMixture make_random_mixture(std::size_t d, std::size_t K, std::uint64_t seed) {
    if (d == 0 || K == 0) throw std::invalid_argument("make_random_mixture: d and K must be >= 1");
    Rng rng(seed);
    StandardNormal normal;
    const auto dd = static_cast<Eigen::Index>(d);
    Vector w(static_cast<Eigen::Index>(K));
    for (Eigen::Index k = 0; k < w.size(); ++k) {
        do {
            w[k] = StandardNormal::uniform(rng);
        } while (w[k] == 0.0);
    }
    w /= w.sum();
    std::vector<Vector> means;
    std::vector<Matrix> covs;
    for (std::size_t k = 0; k < K; ++k) {
        Vector m(dd);
        for (Eigen::Index i = 0; i < dd; ++i) m[i] = 3.0 * normal(rng);
        Matrix W(dd, dd);
        for (Eigen::Index i = 0; i < dd; ++i)
            for (Eigen::Index j = 0; j < dd; ++j) W(i, j) = normal(rng);
        Matrix C = W.transpose() * W / static_cast<double>(d);
        C.diagonal().array() += 1.0;
        C /= 8.0;
        C = 0.5 * (C + C.transpose()).eval();
        means.push_back(std::move(m));
        covs.push_back(std::move(C));
    }
    // renormalize so the sum is 1 to the last bit the validator can see
    w /= w.sum();
    return GaussianMixture(std::move(w), std::move(means), std::move(covs));
}

/// w=[0.1,0.4,0.5], m=[-6,4,6], C=[0.25,0.25,0.25]
inline GaussianMixture paper_mixture_1d() {
    Vector w(3);
    w << 0.1, 0.4, 0.5;
    std::vector<Vector> means{Vector::Constant(1, -6.0), Vector::Constant(1, 4.0), Vector::Constant(1, 6.0)};
    std::vector<Matrix> covs(3, Matrix::Constant(1, 1, 0.25));
    return GaussianMixture(std::move(w), std::move(means), std::move(covs));
}

/// Single mode N(0, I_d).
inline GaussianMixture standard_normal_mixture(std::size_t d) {
    const auto dd = static_cast<Eigen::Index>(d);
    return GaussianMixture(Vector::Ones(1), {Vector::Zero(dd)}, {Matrix::Identity(dd, dd)});
}

}  // namespace pfode
