#include "pfode/gaussian_mixture.hpp"
#include "pfode/metrics.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

using namespace pfode;

namespace {

Vector vec(std::initializer_list<double> v) {
    Vector out(static_cast<Eigen::Index>(v.size()));
    Eigen::Index i = 0;
    for (double x : v) out[i++] = x;
    return out;
}

Vector random_point(std::mt19937_64& rng, Eigen::Index d, double scale) {
    std::normal_distribution<double> n(0.0, scale);
    Vector x(d);
    for (Eigen::Index i = 0; i < d; ++i) x[i] = n(rng);
    return x;
}

// Central differences of log q_t, step 1e-5.
Vector fd_gradient(const DiffusedMixture& dm, const Vector& x) {
    const double eps = 1e-5;
    Vector g(x.size());
    for (Eigen::Index i = 0; i < x.size(); ++i) {
        Vector xp = x, xm = x;
        xp[i] += eps;
        xm[i] -= eps;
        g[i] = (dm.log_density(xp) - dm.log_density(xm)) / (2.0 * eps);
    }
    return g;
}

double rel_err(const Vector& a, const Vector& b) { return (a - b).norm() / std::max(b.norm(), 1e-300); }

}  // namespace

TEST(GaussianMixture, RejectsInvalidParameters) {
    const std::vector<Vector> m1{vec({0.0})};
    const std::vector<Matrix> c1{Matrix::Identity(1, 1)};
    EXPECT_THROW(GaussianMixture(vec({0.9}), m1, c1), std::invalid_argument);  // sum != 1
    EXPECT_THROW(GaussianMixture(vec({1.5, -0.5}), {vec({0.0}), vec({1.0})}, {c1[0], c1[0]}), std::invalid_argument);
    Matrix asym(2, 2);
    asym << 1.0, 0.1, 0.0, 1.0;
    EXPECT_THROW(GaussianMixture(vec({1.0}), {vec({0.0, 0.0})}, {asym}), std::invalid_argument);
    Matrix indefinite(2, 2);
    indefinite << 1.0, 2.0, 2.0, 1.0;
    EXPECT_THROW(GaussianMixture(vec({1.0}), {vec({0.0, 0.0})}, {indefinite}), std::invalid_argument);
    EXPECT_THROW(GaussianMixture(vec({1.0}), {vec({0.0, 0.0})}, {Matrix::Identity(3, 3)}), std::invalid_argument);
    EXPECT_THROW(GaussianMixture(vec({1.0}), {vec({0.0})}, {Matrix::Zero(1, 1)}), std::invalid_argument);
}

TEST(GaussianMixture, DimensionMismatchIsAnError) {
    const auto gm = paper_mixture_1d();
    const DiffusedMixture dm(gm, 1.0);
    EXPECT_THROW(dm.log_density(vec({0.0, 1.0})), std::invalid_argument);
    EXPECT_THROW(dm.score(vec({0.0, 1.0})), std::invalid_argument);
    EXPECT_THROW(gm.log_density(Vector()), std::invalid_argument);
}

TEST(DiffusedMixture, StandardNormalIsStationary) {
    for (std::size_t d : {1u, 3u, 16u}) {
        const auto gm = standard_normal_mixture(d);
        std::mt19937_64 rng(d);
        for (double t : {0.0, 0.3, 1.0, 8.0}) {
            const DiffusedMixture dm(gm, t);
            for (int i = 0; i < 20; ++i) {
                const Vector x = random_point(rng, static_cast<Eigen::Index>(d), 2.0);
                const double expect = -0.5 * static_cast<double>(d) * std::log(2.0 * M_PI) - 0.5 * x.squaredNorm();
                EXPECT_NEAR(dm.log_density(x), expect, 1e-12 * (1.0 + std::abs(expect)));
            }
        }
    }
}

TEST(DiffusedMixture, StandardNormalScoreIsMinusX) {
    const auto gm = standard_normal_mixture(4);
    std::mt19937_64 rng(3);
    for (int k = 0; k <= 80; ++k) {
        const DiffusedMixture dm(gm, 0.1 * k);
        const Vector x = random_point(rng, 4, 3.0);
        EXPECT_LE((dm.score(x) + x).cwiseAbs().maxCoeff(), 1e-12);
    }
}

TEST(DiffusedMixture, PaperMixtureIntegratesToOne) {
    // trapezoid rule on [-10, 10], 10^4 points
    const DiffusedMixture dm(paper_mixture_1d(), 0.0);
    const int n = 10000;
    const double h = 20.0 / (n - 1);
    double sum = 0.0;
    for (int i = 0; i < n; ++i) {
        const double x = -10.0 + i * h;
        const double w = (i == 0 || i == n - 1) ? 0.5 : 1.0;
        sum += w * std::exp(dm.log_density(vec({x})));
    }
    EXPECT_NEAR(sum * h, 1.0, 1e-6);
}

TEST(DiffusedMixture, LargeTimeApproachesStandardNormal) {
    const DiffusedMixture dm(paper_mixture_1d(), 40.0);
    for (double x : {-3.0, -0.5, 0.0, 1.7, 4.0}) {
        const double expect = -0.5 * std::log(2.0 * M_PI) - 0.5 * x * x;
        EXPECT_NEAR(dm.log_density(vec({x})), expect, 1e-10);
    }
}

TEST(DiffusedMixture, TimeZeroMatchesBase) {
    const auto gm = make_random_mixture(6, 4, 11);
    const DiffusedMixture dm(gm, 0.0);
    std::mt19937_64 rng(5);
    for (int i = 0; i < 100; ++i) {
        const Vector x = random_point(rng, 6, 3.0);
        EXPECT_LE(std::abs(dm.log_density(x) - gm.log_density(x)), 1e-13);
    }
}

TEST(DiffusedMixture, DiffusedParametersFollowSchedule) {
    const auto gm = make_random_mixture(3, 2, 4);
    const double t = 0.7;
    const DiffusedMixture dm(gm, t);
    const auto s = NoiseSchedule::evaluate(t);
    for (std::size_t k = 0; k < gm.modes(); ++k) {
        EXPECT_LE((dm.mode_mean(k) - s.lambda * gm.means()[k]).norm(), 1e-15);
        const Matrix expect = s.lambda * s.lambda * gm.covariances()[k] + s.sigma * s.sigma * Matrix::Identity(3, 3);
        EXPECT_LE((dm.mode_covariance(k) - expect).norm(), 1e-15);
    }
    // t -> infinity: every mode tends to N(0, I)
    const DiffusedMixture far(gm, 50.0);
    for (std::size_t k = 0; k < gm.modes(); ++k) {
        EXPECT_LE(far.mode_mean(k).norm(), 1e-20);
        EXPECT_LE((far.mode_covariance(k) - Matrix::Identity(3, 3)).norm(), 1e-15);
    }
}

TEST(DiffusedMixture, ScoreMatchesFiniteDifferences) {
    struct Case {
        GaussianMixture gm;
        double spread;
    };
    std::vector<Case> cases{{paper_mixture_1d(), 6.0},
                            {make_random_mixture(4, 3, 21), 4.0},
                            {marginalize_first(make_random_mixture(128, 5, 128128), 8), 4.0},
                            {standard_normal_mixture(3), 2.0}};
    std::mt19937_64 rng(99);
    std::uniform_real_distribution<double> ut(0.0, 8.0);
    for (const auto& c : cases) {
        for (int i = 0; i < 100; ++i) {
            const DiffusedMixture dm(c.gm, ut(rng));
            const Vector x = random_point(rng, static_cast<Eigen::Index>(c.gm.dim()), c.spread);
            EXPECT_LE(rel_err(dm.score(x), fd_gradient(dm, x)), 1e-6) << "t=" << dm.time();
        }
    }
}

TEST(DiffusedMixture, NearDeltaScore) {
    // c = 1e-10 stands in for a point mass at y0: grad log q_t = -(x - lambda_t y0) / sigma_t^2
    const Vector y0 = vec({0.5, -1.0});
    const GaussianMixture gm(Vector::Ones(1), {y0}, {1e-10 * Matrix::Identity(2, 2)});
    std::mt19937_64 rng(1);
    for (double t : {0.05, 0.5, 1.0, 3.0, 8.0}) {
        const DiffusedMixture dm(gm, t);
        const auto s = NoiseSchedule::evaluate(t);
        for (int i = 0; i < 10; ++i) {
            const Vector x = random_point(rng, 2, 2.0);
            const Vector expect = -(x - s.lambda * y0) / (s.sigma * s.sigma);
            EXPECT_LE(rel_err(dm.score(x), expect), 1e-8);
        }
    }
}

TEST(DiffusedMixture, ResponsibilitiesAreAProbabilityVector) {
    const auto gm = make_random_mixture(5, 5, 8);
    std::mt19937_64 rng(2);
    for (double t : {0.0, 0.01, 1.0, 5.0}) {
        const DiffusedMixture dm(gm, t);
        for (int i = 0; i < 100; ++i) {
            const Vector r = dm.responsibilities(random_point(rng, 5, 20.0));
            EXPECT_GE(r.minCoeff(), 0.0);
            EXPECT_LE(r.maxCoeff(), 1.0);
            EXPECT_NEAR(r.sum(), 1.0, 1e-12);
        }
    }
}

TEST(DiffusedMixture, FarFieldScoreDoesNotUnderflow) {
    // every mode density underflows at x = 200; log-space responsibilities keep the score exact
    const DiffusedMixture dm(paper_mixture_1d(), 0.0);
    const Vector s = dm.score(vec({200.0}));
    EXPECT_TRUE(std::isfinite(s[0]));
    EXPECT_NEAR(s[0], -(200.0 - 6.0) / 0.25, 1e-9);
    StateMatrix xs(2, 1), out;
    xs << 200.0, -300.0;
    dm.score_batch(xs, out);
    EXPECT_NEAR(out(0, 0), -(200.0 - 6.0) / 0.25, 1e-9);
    EXPECT_NEAR(out(1, 0), -(-300.0 + 6.0) / 0.25, 1e-9);
}

TEST(DiffusedMixture, BatchScoreMatchesPointwise) {
    const auto gm = make_random_mixture(7, 5, 31);
    std::mt19937_64 rng(4);
    StateMatrix xs(1500, 7);  // spans several internal blocks
    for (Eigen::Index i = 0; i < xs.rows(); ++i) xs.row(i) = random_point(rng, 7, 4.0).transpose();
    for (double t : {0.0, 0.2, 2.0}) {
        const DiffusedMixture dm(gm, t);
        StateMatrix out;
        dm.score_batch(xs, out);
        for (Eigen::Index i = 0; i < xs.rows(); i += 37) {
            const Vector p = dm.score(xs.row(i).transpose());
            EXPECT_LE(rel_err(out.row(i).transpose(), p), 1e-10);
        }
    }
}

TEST(Sampling, PriorMeanWithinCltBound) {
    const std::size_t n = 100000;
    const auto ens = sample_prior(standard_normal_mixture(3), n, 17);
    const Vector m = ens.states.colwise().mean();
    EXPECT_LE(m.cwiseAbs().maxCoeff(), 4.0 / std::sqrt(static_cast<double>(n)));
}

TEST(Sampling, SameSeedSameEnsemble) {
    const auto gm = make_random_mixture(4, 3, 2);
    const auto a = sample_prior(gm, 1000, 42);
    const auto b = sample_prior(gm, 1000, 42);
    EXPECT_TRUE((a.states.array() == b.states.array()).all());
    const auto c = sample_prior(gm, 1000, 43);
    EXPECT_FALSE((a.states.array() == c.states.array()).all());
}

TEST(Sampling, ModeProportionsConcentrate) {
    const auto gm = paper_mixture_1d();
    const long long n = 200000;
    std::vector<std::size_t> labels;
    sample_prior(gm, n, 5, &labels);
    std::vector<double> counts(3, 0.0);
    for (auto k : labels) counts[k] += 1.0;
    for (std::size_t k = 0; k < 3; ++k) {
        const double w = gm.weights()[static_cast<Eigen::Index>(k)];
        EXPECT_LE(std::abs(counts[k] / n - w), 3.0 * std::sqrt(w / n)) << "mode " << k;
    }
}

TEST(Sampling, ForwardAtZeroIsPriorSampling) {
    const auto gm = paper_mixture_1d();
    const auto fwd = forward_sample(gm, 0.0, 500, 9);
    const auto prior = sample_prior(gm, 500, derive_seed(9, 0));
    EXPECT_TRUE((fwd.states.array() == prior.states.array()).all());
    EXPECT_THROW(forward_sample(gm, -1.0, 10, 1), std::domain_error);
    EXPECT_THROW(sample_prior(gm, 0, 1), std::invalid_argument);
}

TEST(Sampling, ForwardMeanFollowsContraction) {
    const Vector m = vec({2.0, -1.0});
    const GaussianMixture gm(Vector::Ones(1), {m}, {0.01 * Matrix::Identity(2, 2)});
    const long long n = 100000;
    for (double t : {0.1, 0.5, 2.0}) {
        const auto s = NoiseSchedule::evaluate(t);
        const auto ens = forward_sample(gm, t, n, 77);
        const Vector mean = ens.states.colwise().mean();
        const double sd = std::sqrt(s.lambda * s.lambda * 0.01 + s.sigma * s.sigma);
        EXPECT_LE((mean - s.lambda * m).cwiseAbs().maxCoeff(), 4.0 * sd / std::sqrt(static_cast<double>(n)));
    }
}

TEST(Sampling, ForwardAtEightLooksStandardNormal) {
    const auto ens = forward_sample(paper_mixture_1d(), 8.0, 40000, 3);
    const KdeConfig kde = KdeConfig::silverman(40000, 1, 0.0, 8.0);
    const DensityField1D est = kde_1d(column(ens.states, 0), kde);
    const DensityField1D ref = density_on_grid(standard_normal_mixture(1), kde.grid);
    EXPECT_LE(total_variation_grid(est, ref), 0.02);
}

TEST(Marginalize, AllDimsIsIdentity) {
    const auto gm = make_random_mixture(4, 3, 6);
    const auto mg = marginalize(gm, {0, 1, 2, 3});
    std::mt19937_64 rng(1);
    for (int i = 0; i < 20; ++i) {
        const Vector x = random_point(rng, 4, 3.0);
        EXPECT_EQ(mg.log_density(x), gm.log_density(x));
    }
}

TEST(Marginalize, MatchesNumericIntegralOfJoint) {
    Matrix c1(2, 2), c2(2, 2);
    c1 << 0.5, 0.3, 0.3, 0.8;
    c2 << 0.3, -0.1, -0.1, 0.2;
    const GaussianMixture joint(vec({0.3, 0.7}), {vec({-1.0, 0.5}), vec({1.5, -0.5})}, {c1, c2});
    const auto m0 = marginalize(joint, {0});
    // trapezoid over the second coordinate on [-12, 12]
    for (double x0 : {-2.0, -0.3, 0.0, 1.1, 2.5}) {
        const int n = 4001;
        const double h = 24.0 / (n - 1);
        double sum = 0.0;
        for (int i = 0; i < n; ++i) {
            const double w = (i == 0 || i == n - 1) ? 0.5 : 1.0;
            sum += w * std::exp(joint.log_density(vec({x0, -12.0 + i * h})));
        }
        EXPECT_NEAR(std::exp(m0.log_density(vec({x0}))), sum * h, 1e-10);
    }
}

TEST(Marginalize, DiagonalSelectionKeepsVariances) {
    Matrix c = Matrix::Zero(3, 3);
    c.diagonal() << 0.5, 2.0, 3.0;
    const GaussianMixture gm(Vector::Ones(1), {vec({1.0, 2.0, 3.0})}, {c});
    const auto mg = marginalize(gm, {2, 0});
    EXPECT_EQ(mg.covariances()[0](0, 0), 3.0);
    EXPECT_EQ(mg.covariances()[0](1, 1), 0.5);
    EXPECT_EQ(mg.means()[0][0], 3.0);
}

TEST(Marginalize, CommutesWithDiffusion) {
    const auto gm = make_random_mixture(6, 4, 12);
    const std::vector<std::size_t> dims{1, 4};
    const auto mg = marginalize(gm, dims);
    for (double t : {0.0, 0.4, 3.0}) {
        const DiffusedMixture joint_t(gm, t);
        const DiffusedMixture marg_t(mg, t);
        // marginal of the diffused joint, built from its per-mode parameters
        std::vector<Vector> means;
        std::vector<Matrix> covs;
        for (std::size_t k = 0; k < gm.modes(); ++k) {
            Vector m(2);
            Matrix c(2, 2);
            for (Eigen::Index a = 0; a < 2; ++a) {
                m[a] = joint_t.mode_mean(k)[static_cast<Eigen::Index>(dims[static_cast<std::size_t>(a)])];
                for (Eigen::Index b = 0; b < 2; ++b)
                    c(a, b) = joint_t.mode_covariance(k)(static_cast<Eigen::Index>(dims[static_cast<std::size_t>(a)]),
                                                         static_cast<Eigen::Index>(dims[static_cast<std::size_t>(b)]));
            }
            means.push_back(m);
            covs.push_back(c);
        }
        const GaussianMixture diffused_then_marg(gm.weights(), means, covs);
        for (double u = -6.0; u <= 6.0; u += 0.75)
            for (double v = -6.0; v <= 6.0; v += 0.75) {
                const Vector x = vec({u, v});
                EXPECT_NEAR(std::exp(marg_t.log_density(x)), std::exp(diffused_then_marg.log_density(x)), 1e-10);
            }
    }
}

TEST(Marginalize, RejectsBadIndexSets) {
    const auto gm = make_random_mixture(3, 2, 1);
    EXPECT_THROW(marginalize(gm, {}), std::invalid_argument);
    EXPECT_THROW(marginalize(gm, {0, 3}), std::invalid_argument);
    EXPECT_THROW(marginalize(gm, {1, 1}), std::invalid_argument);
}

TEST(RandomMixture, ConstructionProperties) {
    const auto gm = make_random_mixture(128, 5, 128128);
    EXPECT_EQ(gm.dim(), 128u);
    EXPECT_EQ(gm.modes(), 5u);
    EXPECT_NEAR(gm.weights().sum(), 1.0, 1e-12);
    for (const Matrix& c : gm.covariances()) {
        Eigen::SelfAdjointEigenSolver<Matrix> es(c);
        EXPECT_GE(es.eigenvalues().minCoeff(), 1.0 / 8.0 - 1e-12);
    }
    const auto again = make_random_mixture(128, 5, 128128);
    EXPECT_EQ(again.means()[3], gm.means()[3]);
}

TEST(GaussianMixture, ClosedFormMoments) {
    const auto gm = paper_mixture_1d();
    EXPECT_NEAR(gm.mean()[0], 4.0, 1e-14);
    EXPECT_NEAR(gm.covariance()(0, 0), 12.25, 1e-12);
}
