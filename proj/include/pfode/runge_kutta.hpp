/// @file runge_kutta.hpp
/// @brief Explicit s-stage Runge-Kutta stepping of particle ensembles.
///
///   Y_{i+1} = Y_i + h sum_j b_j k_j,
///   k_j     = V(t_i + c_j h, Y_i + h sum_{l<j} a_{jl} k_l).
///
/// Each stage is evaluated for the whole ensemble at once (stage-major), so a
/// field can factor its time-dependent data once per stage.
#pragma once

#include "pfode/ensemble.hpp"
#include "pfode/fit.hpp"
#include "pfode/schedule.hpp"

#include <algorithm>
#include <cmath>
#include <concepts>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace pfode {

struct ButcherTableau {
    std::string name;
    Matrix a;  // s x s, strictly lower triangular
    Vector b;
    Vector c;
    int nominal_order = 1;

    std::size_t stages() const { return static_cast<std::size_t>(b.size()); }
};

struct TableauViolation {
    enum class Kind { shape, not_explicit, consistency, row_sum, order };
    Kind kind;
    std::string message;
};

struct TableauReport {
    std::vector<TableauViolation> violations;
    bool ok() const { return violations.empty(); }
    bool has(TableauViolation::Kind k) const {
        return std::any_of(violations.begin(), violations.end(), [k](const auto& v) { return v.kind == k; });
    }
};

/// Checks shape, strict lower triangularity, sum(b) = 1 and c_j = sum_l a_jl
/// (both within 1e-14). Never throws.
inline TableauReport validate(const ButcherTableau& tab) {
    TableauReport rep;
    using K = TableauViolation::Kind;
    const auto s = tab.b.size();
    if (s == 0 || tab.c.size() != s || tab.a.rows() != s || tab.a.cols() != s) {
        rep.violations.push_back({K::shape, "a must be s x s and b, c of length s >= 1"});
        return rep;
    }
    if (tab.nominal_order < 1) rep.violations.push_back({K::order, "nominal order must be >= 1"});
    for (Eigen::Index j = 0; j < s; ++j)
        for (Eigen::Index l = j; l < s; ++l)
            if (tab.a(j, l) != 0.0)
                rep.violations.push_back({K::not_explicit, "a(" + std::to_string(j) + "," + std::to_string(l) +
                                                               ") is nonzero on or above the diagonal"});
    const double bsum = tab.b.sum();
    if (std::abs(bsum - 1.0) > 1e-14)
        rep.violations.push_back({K::consistency, "sum of b is " + std::to_string(bsum) + ", expected 1"});
    for (Eigen::Index j = 0; j < s; ++j) {
        const double row = tab.a.row(j).sum();
        if (std::abs(row - tab.c[j]) > 1e-14)
            rep.violations.push_back({K::row_sum, "c(" + std::to_string(j) + ") = " + std::to_string(tab.c[j]) +
                                                      " but row sum of a is " + std::to_string(row)});
    }
    return rep;
}

namespace tableaus {

inline ButcherTableau euler() {
    ButcherTableau t;
    t.name = "euler";
    t.a = Matrix::Zero(1, 1);
    t.b = Vector::Ones(1);
    t.c = Vector::Zero(1);
    t.nominal_order = 1;
    return t;
}

inline ButcherTableau heun() {
    ButcherTableau t;
    t.name = "heun";
    t.a = Matrix::Zero(2, 2);
    t.a(1, 0) = 1.0;
    t.b = Vector::Constant(2, 0.5);
    t.c = Vector(2);
    t.c << 0.0, 1.0;
    t.nominal_order = 2;
    return t;
}

/// Classical fourth-order method.
inline ButcherTableau rk4() {
    ButcherTableau t;
    t.name = "rk4";
    t.a = Matrix::Zero(4, 4);
    t.a(1, 0) = 0.5;
    t.a(2, 1) = 0.5;
    t.a(3, 2) = 1.0;
    t.b = Vector(4);
    t.b << 1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0;
    t.c = Vector(4);
    t.c << 0.0, 0.5, 0.5, 1.0;
    t.nominal_order = 4;
    return t;
}

inline std::vector<std::string> names() { return {"euler", "heun", "rk4"}; }

inline std::optional<ButcherTableau> by_name(const std::string& name) {
    if (name == "euler") return euler();
    if (name == "heun") return heun();
    if (name == "rk4") return rk4();
    return std::nullopt;
}

}  // namespace tableaus

/// Raised when a step produces non-finite states.
class NumericalError : public std::runtime_error {
public:
    NumericalError(const std::string& what, long particle, long stage, double time)
        : std::runtime_error(what), particle_(particle), stage_(stage), time_(time) {}
    long particle() const { return particle_; }
    long stage() const { return stage_; }  // 1-based stage, 0 for the final combination
    double time() const { return time_; }

private:
    long particle_;
    long stage_;
    double time_;
};

/// Anything that can evaluate a velocity for every row of a state matrix.
template <typename F>
concept BatchField = requires(const F& f, double t, const StateMatrix& x, StateMatrix& out) {
    f.velocity_batch(t, x, out);
    { f.end_time() } -> std::convertible_to<double>;
};

/// Field given by a callable; handy for reference problems.
class FunctionField {
public:
    using Fn = std::function<void(double, const StateMatrix&, StateMatrix&)>;
    explicit FunctionField(Fn fn, double end_time = std::numeric_limits<double>::infinity())
        : fn_(std::move(fn)), end_time_(end_time) {}
    void velocity_batch(double t, const StateMatrix& x, StateMatrix& out) const {
        out.resize(x.rows(), x.cols());
        fn_(t, x, out);
    }
    double end_time() const { return end_time_; }

    /// y' = rate * y
    static FunctionField linear(double rate) {
        return FunctionField([rate](double, const StateMatrix& x, StateMatrix& out) { out = rate * x; });
    }

private:
    Fn fn_;
    double end_time_;
};

struct StepOptions {
    unsigned threads = 1;
};

namespace detail {

/// Splits rows across threads in blocks; row results are independent so the
/// output is identical for any thread count.
template <BatchField Field>
void evaluate_stage(const Field& field, double t, const StateMatrix& x, StateMatrix& out, unsigned threads) {
    const Eigen::Index n = x.rows();
    out.resize(n, x.cols());
    const unsigned workers = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>((n + 1023) / 1024)));
    if (workers <= 1) {
        field.velocity_batch(t, x, out);
        return;
    }
    const Eigen::Index chunk = (n + workers - 1) / workers;
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(workers);
    for (unsigned w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
            try {
                const Eigen::Index start = static_cast<Eigen::Index>(w) * chunk;
                const Eigen::Index rows = std::min(chunk, n - start);
                if (rows <= 0) return;
                StateMatrix xs = x.middleRows(start, rows);
                StateMatrix os;
                field.velocity_batch(t, xs, os);
                out.middleRows(start, rows) = os;
            } catch (...) {
                errors[w] = std::current_exception();
            }
        });
    }
    for (auto& th : pool) th.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

inline long first_non_finite_row(const StateMatrix& m) {
    if (m.allFinite()) return -1;
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        if (!m.row(i).allFinite()) return static_cast<long>(i);
    return -1;
}

}  // namespace detail

/// Advances `ens` in place from t_i to t_i + h. If `t_next` is given it is used
/// as the stage time whenever c_j == 1, so the last grid node is hit exactly.
/// Throws NumericalError if any stage or the result is non-finite; `ens` is then
/// left unchanged.
template <BatchField Field>
void step_in_place(const ButcherTableau& tab, const Field& field, ParticleEnsemble& ens, double t_i, double h,
                   std::optional<double> t_next = std::nullopt, const StepOptions& opts = {}) {
    if (!(h > 0.0)) throw std::invalid_argument("step: h must be positive");
    const double t_end = t_next.value_or(t_i + h);
    if (t_end > field.end_time() + 1e-12 * (1.0 + std::abs(field.end_time())))
        throw std::domain_error("step: t_i + h exceeds the field horizon");
    const auto s = static_cast<Eigen::Index>(tab.stages());
    std::vector<StateMatrix> k(static_cast<std::size_t>(s));
    StateMatrix stage_state;
    for (Eigen::Index j = 0; j < s; ++j) {
        const double tj = (tab.c[j] == 1.0) ? t_end : t_i + tab.c[j] * h;
        const StateMatrix* input = &ens.states;
        if (j > 0) {
            stage_state = ens.states;
            for (Eigen::Index l = 0; l < j; ++l)
                if (tab.a(j, l) != 0.0) stage_state.noalias() += (h * tab.a(j, l)) * k[static_cast<std::size_t>(l)];
            input = &stage_state;
        }
        detail::evaluate_stage(field, tj, *input, k[static_cast<std::size_t>(j)], opts.threads);
        if (const long bad = detail::first_non_finite_row(k[static_cast<std::size_t>(j)]); bad >= 0)
            throw NumericalError("non-finite velocity at particle " + std::to_string(bad) + ", stage " +
                                     std::to_string(j + 1) + ", t=" + std::to_string(tj) +
                                     " (step size outside the stability region?)",
                                 bad, static_cast<long>(j + 1), tj);
    }
    StateMatrix next = ens.states;
    for (Eigen::Index j = 0; j < s; ++j)
        if (tab.b[j] != 0.0) next.noalias() += (h * tab.b[j]) * k[static_cast<std::size_t>(j)];
    if (const long bad = detail::first_non_finite_row(next); bad >= 0)
        throw NumericalError("non-finite state at particle " + std::to_string(bad) + " after step from t=" +
                                 std::to_string(t_i),
                             bad, 0, t_i);
    ens.states = std::move(next);
    ens.time = t_end;
}

template <BatchField Field>
ParticleEnsemble step(const ButcherTableau& tab, const Field& field, ParticleEnsemble ens, double t_i, double h,
                      const StepOptions& opts = {}) {
    step_in_place(tab, field, ens, t_i, h, std::nullopt, opts);
    return ens;
}

struct Checkpoint {
    std::size_t node;
    double time;
    StateMatrix states;
};

struct IntegrationResult {
    ParticleEnsemble final;
    std::vector<Checkpoint> checkpoints;
};

/// Steps over every interval of `grid`. States are recorded at the requested
/// node indices (node 0 is the initial state).
template <BatchField Field>
IntegrationResult integrate(const ButcherTableau& tab, const Field& field, ParticleEnsemble ens, const TimeGrid& grid,
                            const std::vector<std::size_t>& checkpoint_nodes = {}, const StepOptions& opts = {}) {
    if (grid.t_start() < 0.0 || grid.t_end() > field.end_time() + 1e-12 * (1.0 + std::abs(field.end_time())))
        throw std::domain_error("integrate: grid extends beyond the field horizon");
    for (std::size_t n : checkpoint_nodes)
        if (n > grid.n_steps()) throw std::out_of_range("integrate: checkpoint node out of range");
    IntegrationResult res;
    auto record = [&](std::size_t node) {
        if (std::find(checkpoint_nodes.begin(), checkpoint_nodes.end(), node) != checkpoint_nodes.end())
            res.checkpoints.push_back({node, grid.node(node), ens.states});
    };
    ens.time = grid.node(0);
    record(0);
    for (std::size_t i = 0; i < grid.n_steps(); ++i) {
        const double ti = grid.node(i);
        const double tn = grid.node(i + 1);
        step_in_place(tab, field, ens, ti, grid.step(), tn, opts);
        record(i + 1);
    }
    res.final = std::move(ens);
    return res;
}

/// y' = rate * y, y(0) = y0, on [0, t_end].
struct ReferenceProblem {
    double rate = -1.0;
    double y0 = 1.0;
    double t_end = 1.0;
    double exact() const { return y0 * std::exp(rate * t_end); }
};

struct OrderEstimate {
    bool exact = false;  // error below the floor at every h
    double slope = 0.0;
    double r2 = 0.0;
    std::vector<std::pair<double, double>> errors;  // (h, |error|)
};

/// Global error at t_end for h = 2^-3 ... 2^-8 and the log-log slope.
inline OrderEstimate estimate_order(const ButcherTableau& tab, const ReferenceProblem& prob = {}) {
    constexpr double kFloor = 1e-13;
    const FunctionField field = FunctionField::linear(prob.rate);
    OrderEstimate est;
    bool all_below = true;
    for (int e = 3; e <= 8; ++e) {
        const auto n = static_cast<std::size_t>(std::lround(prob.t_end * std::ldexp(1.0, e)));
        ParticleEnsemble ens;
        ens.states = StateMatrix::Constant(1, 1, prob.y0);
        const TimeGrid grid(0.0, prob.t_end, std::max<std::size_t>(n, 1));
        const auto res = integrate(tab, field, std::move(ens), grid);
        const double err = std::abs(res.final.states(0, 0) - prob.exact());
        est.errors.emplace_back(grid.step(), err);
        if (err >= kFloor) all_below = false;
    }
    if (all_below) {
        est.exact = true;
        return est;
    }
    std::vector<std::pair<double, double>> usable;
    for (const auto& p : est.errors)
        if (p.second >= kFloor) usable.push_back(p);
    if (usable.size() < 2) {
        est.exact = true;
        return est;
    }
    const SlopeFit f = fit_slope(usable);
    est.slope = f.slope;
    est.r2 = f.r2;
    return est;
}

}  // namespace pfode
