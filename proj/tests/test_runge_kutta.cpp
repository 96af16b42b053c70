#include "pfode/runge_kutta.hpp"
#include "pfode/metrics.hpp"
#include "pfode/score_field.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

using namespace pfode;
using Kind = TableauViolation::Kind;

namespace {

ParticleEnsemble scalar_ensemble(double y0) {
    ParticleEnsemble e;
    e.states = StateMatrix::Constant(1, 1, y0);
    return e;
}

ParticleEnsemble random_ensemble(Eigen::Index n, Eigen::Index d, std::uint64_t seed) {
    return sample_standard_normal(static_cast<std::size_t>(n), static_cast<std::size_t>(d), seed);
}

}  // namespace

TEST(Tableau, BuiltinsValidate) {
    for (const auto& name : tableaus::names()) {
        const auto tab = tableaus::by_name(name);
        ASSERT_TRUE(tab.has_value()) << name;
        EXPECT_TRUE(validate(*tab).ok()) << name;
    }
    EXPECT_FALSE(tableaus::by_name("rk45").has_value());
    const auto heun = tableaus::heun();
    EXPECT_EQ(heun.a(1, 0), 1.0);
    EXPECT_EQ(heun.b[0], 0.5);
    EXPECT_EQ(heun.c[1], 1.0);
}

TEST(Tableau, ReportsViolations) {
    auto bad = tableaus::heun();
    bad.b << 0.6, 0.6;
    auto rep = validate(bad);
    EXPECT_TRUE(rep.has(Kind::consistency));
    EXPECT_FALSE(rep.has(Kind::row_sum));

    auto implicit = tableaus::heun();
    implicit.a(0, 1) = 0.5;
    implicit.a(0, 0) = 0.0;
    EXPECT_TRUE(validate(implicit).has(Kind::not_explicit));

    auto rows = tableaus::heun();
    rows.c[1] = 0.5;
    EXPECT_TRUE(validate(rows).has(Kind::row_sum));

    auto shape = tableaus::heun();
    shape.c = Vector::Zero(3);
    EXPECT_TRUE(validate(shape).has(Kind::shape));

    auto order = tableaus::heun();
    order.nominal_order = 0;
    EXPECT_TRUE(validate(order).has(Kind::order));
}

TEST(Step, HeunOnGrowth) {
    const auto out = step(tableaus::heun(), FunctionField::linear(1.0), scalar_ensemble(1.0), 0.0, 0.1);
    EXPECT_NEAR(out.states(0, 0), 1.105, 1e-15);
    EXPECT_DOUBLE_EQ(out.time, 0.1);
}

TEST(Step, EulerOnDecay) {
    const auto out = step(tableaus::euler(), FunctionField::linear(-1.0), scalar_ensemble(1.0), 0.0, 0.1);
    EXPECT_NEAR(out.states(0, 0), 0.9, 1e-15);
}

TEST(Step, ZeroFieldIsBitwiseIdentity) {
    const auto ens = random_ensemble(100, 3, 4);
    for (const auto& name : tableaus::names()) {
        const auto out = step(*tableaus::by_name(name), FunctionField::linear(0.0), ens, 0.0, 0.37);
        EXPECT_TRUE((out.states.array() == ens.states.array()).all()) << name;
    }
}

TEST(Step, RejectsBadArguments) {
    const FunctionField bounded([](double, const StateMatrix& x, StateMatrix& out) { out = x; }, 1.0);
    EXPECT_THROW(step(tableaus::heun(), bounded, scalar_ensemble(1.0), 0.0, 0.0), std::invalid_argument);
    EXPECT_THROW(step(tableaus::heun(), bounded, scalar_ensemble(1.0), 0.95, 0.1), std::domain_error);
}

TEST(Step, NonFiniteStateIsRejected) {
    const FunctionField blowup([](double, const StateMatrix& x, StateMatrix& out) {
        out = x;
        out(3, 0) = std::numeric_limits<double>::infinity();
    });
    auto ens = random_ensemble(10, 2, 1);
    const StateMatrix before = ens.states;
    try {
        step_in_place(tableaus::heun(), blowup, ens, 0.0, 0.1);
        FAIL() << "expected NumericalError";
    } catch (const NumericalError& e) {
        EXPECT_EQ(e.particle(), 3);
        EXPECT_EQ(e.stage(), 1);
        EXPECT_NE(std::string(e.what()).find("particle 3"), std::string::npos);
    }
    EXPECT_TRUE((ens.states.array() == before.array()).all());

    // overflow in the combination rather than in a stage
    const FunctionField huge([](double, const StateMatrix& x, StateMatrix& out) { out = 1e308 * x; });
    auto big = scalar_ensemble(10.0);
    try {
        step_in_place(tableaus::euler(), huge, big, 0.0, 1.0);
        FAIL() << "expected NumericalError";
    } catch (const NumericalError& e) {
        EXPECT_EQ(e.particle(), 0);
    }
}

TEST(Step, HeunIsAverageOfEulerAndCorrectedEuler) {
    // v frozen in time: heun = (y + h v(y)) / 2 + (y + h v(y + h v(y))) / 2
    const auto field = VelocityField::make(paper_mixture_1d(), PerturbationKind::sinusoidal, 0.05, 8.0);
    const double t = 3.0, h = 0.05;
    const FunctionField frozen([&](double, const StateMatrix& x, StateMatrix& out) { field.velocity_batch(t, x, out); });
    const auto ens = random_ensemble(200, 1, 7);
    const auto heun = step(tableaus::heun(), frozen, ens, t, h);
    StateMatrix v0, v1;
    field.velocity_batch(t, ens.states, v0);
    const StateMatrix euler = ens.states + h * v0;
    field.velocity_batch(t, euler, v1);
    const StateMatrix corrected = ens.states + h * v1;
    EXPECT_LE((heun.states - 0.5 * (euler + corrected)).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(Step, AffineEquivariance) {
    // v(t, x) = x commutes with linear maps A and maps x + b to (x + b) e^{...}; check y -> A y + b with b
    // propagated through the exact same linear update
    const FunctionField field = FunctionField::linear(1.0);
    std::mt19937_64 rng(3);
    std::normal_distribution<double> n01;
    for (int trial = 0; trial < 5; ++trial) {
        Matrix A(3, 3);
        for (Eigen::Index i = 0; i < 9; ++i) A.data()[i] = n01(rng);
        const auto ens = random_ensemble(50, 3, static_cast<std::uint64_t>(trial));
        for (const auto& name : tableaus::names()) {
            const auto tab = *tableaus::by_name(name);
            const double h = 0.1;
            ParticleEnsemble mapped = ens;
            mapped.states = ens.states * A.transpose();
            const auto a = step(tab, field, mapped, 0.0, h);
            const auto b = step(tab, field, ens, 0.0, h);
            const StateMatrix bm = b.states * A.transpose();
            EXPECT_LE((a.states - bm).cwiseAbs().maxCoeff(), 1e-12) << name;
            // translation: v(x) = x - c is the contraction about c; stepping shifted states matches shifting
            Vector c(3);
            c << n01(rng), n01(rng), n01(rng);
            const FunctionField about_c([c](double, const StateMatrix& x, StateMatrix& out) {
                out = x.rowwise() - c.transpose();
            });
            ParticleEnsemble shifted = ens;
            shifted.states = ens.states.rowwise() + c.transpose();
            const auto s = step(tab, about_c, shifted, 0.0, h);
            const StateMatrix expect = b.states.rowwise() + c.transpose();
            EXPECT_LE((s.states - expect).cwiseAbs().maxCoeff(), 1e-12) << name;
        }
    }
}

TEST(Integrate, StandardNormalTargetStaysPut) {
    const auto field = VelocityField::make(standard_normal_mixture(3), PerturbationKind::none, 0.0, 8.0);
    const auto ens = random_ensemble(500, 3, 9);
    const auto res = integrate(tableaus::heun(), field, ens, TimeGrid(0.0, 8.0, 40));
    EXPECT_LE((res.final.states - ens.states).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_EQ(res.final.time, 8.0);
}

TEST(Integrate, CheckpointsAtRequestedNodes) {
    const auto ens = random_ensemble(5, 2, 2);
    const TimeGrid grid(0.0, 8.0, 8);
    const auto res = integrate(tableaus::heun(), FunctionField::linear(-0.1), ens, grid, {0, 4, 6, 7, 8});
    ASSERT_EQ(res.checkpoints.size(), 5u);
    EXPECT_EQ(res.checkpoints[0].time, 0.0);
    EXPECT_TRUE((res.checkpoints[0].states.array() == ens.states.array()).all());
    EXPECT_EQ(res.checkpoints[1].time, 4.0);
    EXPECT_EQ(res.checkpoints[4].time, 8.0);
    EXPECT_TRUE((res.checkpoints[4].states.array() == res.final.states.array()).all());
    EXPECT_THROW(integrate(tableaus::heun(), FunctionField::linear(0.0), ens, grid, {9}), std::out_of_range);
}

TEST(Integrate, RejectsGridBeyondHorizon) {
    const auto field = VelocityField::make(paper_mixture_1d(), PerturbationKind::none, 0.0, 8.0, 0.5);
    EXPECT_THROW(integrate(tableaus::heun(), field, random_ensemble(4, 1, 1), TimeGrid(0.0, 8.0, 10)),
                 std::domain_error);
}

TEST(Integrate, DeterministicAcrossThreadCounts) {
    const auto gm = make_random_mixture(4, 3, 5);
    const auto field = VelocityField::make(gm, PerturbationKind::linear, 0.01, 8.0);
    const auto ens = random_ensemble(5000, 4, 13);
    const TimeGrid grid(0.0, 8.0, 20);
    const auto a = integrate(tableaus::heun(), field, ens, grid, {}, {1});
    const auto b = integrate(tableaus::heun(), field, ens, grid, {}, {1});
    const auto c = integrate(tableaus::heun(), field, ens, grid, {}, {4});
    EXPECT_TRUE((a.final.states.array() == b.final.states.array()).all());
    EXPECT_TRUE((a.final.states.array() == c.final.states.array()).all());
}

TEST(Integrate, PaperMixtureRecoversModes) {
    const auto gm = paper_mixture_1d();
    const auto field = VelocityField::make(gm, PerturbationKind::constant, 0.005, 8.0);
    const std::size_t n = 40000;
    const auto ens = sample_standard_normal(n, 1, 2024);
    const auto res = integrate(tableaus::heun(), field, ens, TimeGrid(0.0, 8.0, 96), {}, {4});
    const double tv = tv_marginal(res.final.states, gm, 0, KdeConfig::silverman(n, 1, 8.0, 8.0));
    EXPECT_LE(tv, 0.05);
}

TEST(OrderEstimate, EulerAndHeun) {
    const auto e = estimate_order(tableaus::euler());
    EXPECT_FALSE(e.exact);
    EXPECT_NEAR(e.slope, 1.0, 0.1);
    const auto h = estimate_order(tableaus::heun());
    EXPECT_NEAR(h.slope, 2.0, 0.1);
    const auto r = estimate_order(tableaus::rk4());
    EXPECT_NEAR(r.slope, 4.0, 0.2);
    EXPECT_EQ(h.errors.size(), 6u);
    EXPECT_DOUBLE_EQ(h.errors.front().first, 0.125);
    EXPECT_DOUBLE_EQ(h.errors.back().first, 1.0 / 256.0);
}

TEST(OrderEstimate, ZeroFieldIsExact) {
    for (const auto& name : tableaus::names()) {
        const auto est = estimate_order(*tableaus::by_name(name), ReferenceProblem{0.0, 1.0, 1.0});
        EXPECT_TRUE(est.exact) << name;
    }
}
