/// @file experiment.hpp
/// @brief Sweep harness: particle-ODE and finite-volume runs over (perturbation, delta, repeat) cells.
///
/// Cell seeds come from derive_seed(master, delta_index, repeat), so a cell's
/// stream does not depend on which other cells run or in what order. Results
/// are collected by cell index and written in that order.
#pragma once

#include "pfode/config.hpp"
#include "pfode/fv_transport.hpp"
#include "pfode/metrics.hpp"
#include "pfode/runge_kutta.hpp"
#include "pfode/score_field.hpp"

#include <atomic>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <mutex>
#include <thread>
#include <vector>

namespace pfode {

struct CellResult {
    PerturbationKind perturbation = PerturbationKind::none;
    std::size_t delta_index = 0;
    std::size_t repeat = 0;
    double delta = 0.0;
    long long n_steps = 0;
    double h = 0.0;
    std::uint64_t seed = 0;
    MetricsReport metrics;
    double wall_time_s = 0.0;
    bool ok = true;
    std::string error;
};

struct SlopeEntry {
    std::string metric;          // tv | rel_mean_err | rel_cov_err
    std::string perturbation;
    std::string against;         // delta | h
    SlopeFit fit;
};

struct RunRecord {
    std::string config_hash;
    std::size_t dim = 0;
    std::vector<CellResult> cells;
    std::vector<SlopeEntry> slopes;
    double wall_time_s = 0.0;

    bool all_ok() const {
        return std::all_of(cells.begin(), cells.end(), [](const CellResult& c) { return c.ok; });
    }
};

struct RunOptions {
    unsigned threads = 1;
    std::string output_dir;  // empty: write nothing
    bool write_snapshots = true;
    bool dump_particles = false;  // `sample` subcommand
    std::ostream* log = nullptr;
};

// ---------------------------------------------------------------------------
// output

inline const char* kCsvHeader = "config_hash,d,delta,perturbation,n_steps,h,seed,tv,rel_mean_err,rel_cov_err,wall_time_s";

/// Shortest %g form (up to `digits`) that reads back to the same double.
inline std::string format_double(double v, int digits = 17) {
    char buf[64];
    for (int p = std::min(digits, 15); p <= digits; ++p) {
        std::snprintf(buf, sizeof buf, "%.*g", p, v);
        if (p == digits || std::strtod(buf, nullptr) == v) break;
    }
    return buf;
}

inline std::string csv_row(const std::string& hash, std::size_t d, const CellResult& c) {
    auto metric = [&](double v) { return c.ok ? format_double(v) : std::string("nan"); };
    std::string row = hash + "," + std::to_string(d) + "," + format_double(c.delta) + "," +
                      std::string(to_string(c.perturbation)) + "," + std::to_string(c.n_steps) + "," +
                      format_double(c.h) + "," + std::to_string(c.seed) + "," + metric(c.metrics.tv) + "," +
                      metric(c.metrics.rel_mean_err) + "," + metric(c.metrics.rel_cov_err) + "," +
                      format_double(c.wall_time_s, 6);
    return row;
}

inline void write_results_csv(const RunRecord& rec, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open " + path + " for writing");
    out << kCsvHeader << '\n';
    for (const auto& c : rec.cells) out << csv_row(rec.config_hash, rec.dim, c) << '\n';
}

inline json slopes_to_json(const RunRecord& rec) {
    json arr = json::array();
    for (const auto& s : rec.slopes)
        arr.push_back({{"metric", s.metric},
                       {"perturbation", s.perturbation},
                       {"against", s.against},
                       {"slope", s.fit.slope},
                       {"intercept", s.fit.intercept},
                       {"r2", s.fit.r2},
                       {"cells", s.fit.cells}});
    json failures = json::array();
    for (const auto& c : rec.cells)
        if (!c.ok)
            failures.push_back({{"perturbation", std::string(to_string(c.perturbation))},
                                {"delta", c.delta},
                                {"n_steps", c.n_steps},
                                {"repeat", c.repeat},
                                {"error", c.error}});
    return {{"config_hash", rec.config_hash}, {"d", rec.dim}, {"slopes", arr}, {"failures", failures}};
}

inline void write_json(const json& j, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open " + path + " for writing");
    out << j.dump(2) << '\n';
}

/// Log-log fits per perturbation kind: against delta when every delta is
/// positive, against h when every delta is zero. Failed or non-positive cells
/// are skipped.
inline std::vector<SlopeEntry> fit_slopes(const std::vector<CellResult>& cells,
                                          const std::vector<PerturbationKind>& kinds) {
    std::vector<SlopeEntry> out;
    for (PerturbationKind kind : kinds) {
        std::vector<const CellResult*> group;
        for (const auto& c : cells)
            if (c.perturbation == kind && c.ok) group.push_back(&c);
        if (group.empty()) continue;
        const bool all_zero = std::all_of(group.begin(), group.end(), [](auto* c) { return c->delta == 0.0; });
        const bool all_pos = std::all_of(group.begin(), group.end(), [](auto* c) { return c->delta > 0.0; });
        if (!all_zero && !all_pos) continue;
        const std::string against = all_zero ? "h" : "delta";
        auto fit_metric = [&](const std::string& name, double MetricsReport::*field) {
            std::vector<std::pair<double, double>> pts;
            for (auto* c : group) {
                const double x = all_zero ? c->h : c->delta;
                const double y = c->metrics.*field;
                if (y > 0.0 && std::isfinite(y)) pts.emplace_back(x, y);
            }
            try {
                out.push_back({name, std::string(to_string(kind)), against, fit_slope(pts)});
            } catch (const std::invalid_argument&) {
                // fewer than two distinct abscissae
            }
        };
        fit_metric("tv", &MetricsReport::tv);
        fit_metric("rel_mean_err", &MetricsReport::rel_mean_err);
        fit_metric("rel_cov_err", &MetricsReport::rel_cov_err);
    }
    return out;
}

// ---------------------------------------------------------------------------
// cell scheduling

/// Runs fn(i) for i in [0, n) on up to `threads` workers. The first exception
/// thrown by fn stops further scheduling and is rethrown after all workers join.
inline void parallel_for(std::size_t n, unsigned threads, const std::function<void(std::size_t)>& fn) {
    const unsigned workers = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(n)));
    if (workers == 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    std::vector<std::thread> pool;
    for (unsigned w = 0; w < workers; ++w)
        pool.emplace_back([&] {
            for (std::size_t i = next++; i < n; i = next++) {
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(failure_mutex);
                    if (!failure) failure = std::current_exception();
                    next = n;
                }
            }
        });
    for (auto& t : pool) t.join();
    if (failure) std::rethrow_exception(failure);
}

struct CellSpec {
    PerturbationKind perturbation;
    std::size_t delta_index;
    std::size_t repeat;
};

inline std::vector<CellSpec> enumerate_cells(const ExperimentConfig& c, std::size_t repeats) {
    std::vector<CellSpec> cells;
    for (auto kind : c.perturbations)
        for (std::size_t i = 0; i < c.deltas.size(); ++i)
            for (std::size_t r = 0; r < repeats; ++r) cells.push_back({kind, i, r});
    return cells;
}

inline std::string snapshot_name(const std::string& prefix, PerturbationKind kind, double delta, double t) {
    return prefix + "_" + std::string(to_string(kind)) + "_delta" + format_double(delta, 6) + "_t" +
           format_double(t, 6) + ".csv";
}

/// Node index of reverse time t on the grid, if t is (within 1e-9) a node.
inline std::optional<std::size_t> node_of(const TimeGrid& grid, double t) {
    const double pos = (t - grid.t_start()) / grid.step();
    const long long i = std::llround(pos);
    if (i < 0 || i > static_cast<long long>(grid.n_steps())) return std::nullopt;
    if (std::abs(grid.node(static_cast<std::size_t>(i)) - t) > 1e-9) return std::nullopt;
    return static_cast<std::size_t>(i);
}

// ---------------------------------------------------------------------------
// particle ODE

/// Marginal TV on coordinate 0 plus moment errors of the full state. The KDE
/// smooths a one-dimensional sample, so its bandwidth uses d = 1.
inline MetricsReport measure(const StateMatrix& states, const GaussianMixture& target, double t, double T,
                             const DensityGrid& grid) {
    MetricsReport m;
    const auto kde = KdeConfig::silverman(static_cast<std::size_t>(states.rows()), 1, t, T, grid);
    m.tv = tv_marginal(states, target, 0, kde);
    const MomentErrors e = moment_errors(states, target);
    m.rel_mean_err = e.rel_mean_err;
    m.rel_cov_err = e.rel_cov_err;
    m.mean_error_absolute = e.mean_error_absolute;
    return m;
}

/// One reverse-ODE run from J standard-normal particles.
struct OdeCellOutput {
    CellResult result;
    std::vector<Checkpoint> checkpoints;
    StateMatrix final_states;
};

inline OdeCellOutput run_ode_cell(const ExperimentConfig& c, const CellSpec& spec,
                                  const std::vector<std::size_t>& checkpoint_nodes_hint = {}) {
    OdeCellOutput out;
    CellResult& r = out.result;
    r.perturbation = spec.perturbation;
    r.delta_index = spec.delta_index;
    r.repeat = spec.repeat;
    r.delta = c.deltas[spec.delta_index];
    r.n_steps = c.n_steps[spec.delta_index];
    r.h = c.step_size(spec.delta_index);
    r.seed = derive_seed(c.seed, spec.delta_index, spec.repeat);
    const auto start = std::chrono::steady_clock::now();
    try {
        const VelocityField field = VelocityField::make(c.target, spec.perturbation, r.delta, c.horizon, c.tau);
        ParticleEnsemble ens = sample_standard_normal(c.particles, c.dim(), r.seed);
        const TimeGrid grid(0.0, c.run_time(), static_cast<std::size_t>(r.n_steps));
        std::vector<std::size_t> nodes = checkpoint_nodes_hint;
        if (nodes.empty())
            for (double t : c.snapshot_times)
                if (auto n = node_of(grid, t)) nodes.push_back(*n);
        IntegrationResult res = integrate(c.tableau, field, std::move(ens), grid, nodes);
        r.metrics = measure(res.final.states, c.target, c.run_time(), c.horizon, c.metric_grid);
        out.checkpoints = std::move(res.checkpoints);
        out.final_states = std::move(res.final.states);
    } catch (const NumericalError& e) {
        r.ok = false;
        r.error = e.what();
    }
    r.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return out;
}

inline void write_particles_csv(const StateMatrix& x, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open " + path + " for writing");
    for (Eigen::Index j = 0; j < x.cols(); ++j) out << (j ? ",x" : "x") << j;
    out << '\n';
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        for (Eigen::Index j = 0; j < x.cols(); ++j) out << (j ? "," : "") << format_double(x(i, j));
        out << '\n';
    }
}

/// Particle sweep over every (perturbation, delta, repeat) cell. Writes
/// results.csv, slopes.json and density snapshots under opts.output_dir.
inline RunRecord run_ode_experiment(const ExperimentConfig& c, const RunOptions& opts = {}) {
    const auto start = std::chrono::steady_clock::now();
    RunRecord rec;
    rec.config_hash = config_hash(c);
    rec.dim = c.dim();
    const std::vector<CellSpec> specs = enumerate_cells(c, c.repeats);
    rec.cells.resize(specs.size());
    std::mutex log_mutex;
    const bool snapshots = opts.write_snapshots && !opts.output_dir.empty() && !c.snapshot_times.empty();
    if (!opts.output_dir.empty()) {
        std::filesystem::create_directories(opts.output_dir);
        if (snapshots) std::filesystem::create_directories(opts.output_dir + "/snapshots");
        if (opts.dump_particles) std::filesystem::create_directories(opts.output_dir + "/particles");
    }

    parallel_for(specs.size(), opts.threads, [&](std::size_t i) {
        const CellSpec& s = specs[i];
        OdeCellOutput o = run_ode_cell(c, s);
        if (s.repeat == 0 && snapshots) {
            for (const Checkpoint& cp : o.checkpoints) {
                const auto kde = KdeConfig::silverman(c.particles, 1, cp.time, c.horizon, c.metric_grid);
                const DensityField1D f = kde_1d(column(cp.states, 0), kde);
                write_density_csv(f, opts.output_dir + "/snapshots/" +
                                         snapshot_name("ode", s.perturbation, o.result.delta, cp.time));
            }
        }
        if (s.repeat == 0 && opts.dump_particles && o.result.ok)
            write_particles_csv(o.final_states, opts.output_dir + "/particles/" +
                                                    snapshot_name("final", s.perturbation, o.result.delta, c.run_time()));
        if (opts.log) {
            std::lock_guard<std::mutex> lock(log_mutex);
            *opts.log << "[ode] " << to_string(s.perturbation) << " delta=" << o.result.delta
                      << " n_steps=" << o.result.n_steps << " repeat=" << s.repeat;
            if (o.result.ok)
                *opts.log << " tv=" << o.result.metrics.tv << " (" << o.result.wall_time_s << " s)\n";
            else
                *opts.log << " FAILED: " << o.result.error << '\n';
        }
        rec.cells[i] = std::move(o.result);
    });

    rec.slopes = fit_slopes(rec.cells, c.perturbations);
    rec.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (!opts.output_dir.empty()) {
        write_results_csv(rec, opts.output_dir + "/results.csv");
        write_json(slopes_to_json(rec), opts.output_dir + "/slopes.json");
    }
    return rec;
}

// ---------------------------------------------------------------------------
// finite-volume PDE

/// Density moments on the grid.
inline MomentErrors density_moment_errors(const DensityField1D& f, const GaussianMixture& target) {
    double mass = 0.0, mean = 0.0;
    for (std::size_t i = 0; i < f.n_cells(); ++i) {
        mass += f[i];
        mean += f[i] * f.center(i);
    }
    mean /= mass;
    double var = 0.0;
    for (std::size_t i = 0; i < f.n_cells(); ++i) var += f[i] * (f.center(i) - mean) * (f.center(i) - mean);
    var /= mass;
    return moment_errors(Vector::Constant(1, mean), Matrix::Constant(1, 1, var), target);
}

struct TransportRun {
    DensityField1D final;
    std::vector<std::pair<double, DensityField1D>> snapshots;
    double initial_mass = 0.0;
    double max_cfl = 0.0;
    std::size_t substeps = 0;  // extra sub-steps taken because a step exceeded CFL 1
};

/// Reverse transport of N(0, 1) on [x_lo, x_hi] with uniform steps
/// h = (T - tau) / round((T - tau) / h_nominal). A step whose CFL number would
/// exceed 1 is split into equal sub-steps that satisfy it.
inline TransportRun solve_reverse_transport(const VelocityField& field, const PdeSettings& pde,
                                            const std::vector<double>& snapshot_times = {}) {
    const double run = field.end_time();
    const auto n = static_cast<std::size_t>(std::max(1LL, std::llround(run / pde.h)));
    const TimeGrid grid(0.0, run, n);
    const FaceVelocity vel = face_velocity(field);
    TransportRun tr;
    tr.final = init_from_density([](double x) { return std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI); }, pde.x_lo,
                                 pde.x_hi, pde.cells);
    tr.initial_mass = tr.final.mass();
    std::vector<std::size_t> snap_nodes;
    for (double t : snapshot_times)
        if (auto nd = node_of(grid, t)) snap_nodes.push_back(*nd);
    auto snap = [&](std::size_t node) {
        if (std::find(snap_nodes.begin(), snap_nodes.end(), node) != snap_nodes.end())
            tr.snapshots.emplace_back(grid.node(node), tr.final);
    };
    snap(0);
    for (std::size_t i = 0; i < n; ++i) {
        const double t0 = grid.node(i), t1 = grid.node(i + 1);
        try {
            const AdvanceStats st = advance_in_place(tr.final, vel, t0, t1 - t0);
            tr.max_cfl = std::max(tr.max_cfl, st.cfl);
        } catch (const CflError& e) {
            const auto parts = static_cast<std::size_t>(std::ceil(e.cfl() / 0.9));
            const TimeGrid sub(t0, t1, parts);
            for (std::size_t k = 0; k < parts; ++k) {
                const AdvanceStats st = advance_in_place(tr.final, vel, sub.node(k), sub.node(k + 1) - sub.node(k));
                tr.max_cfl = std::max(tr.max_cfl, st.cfl);
            }
            tr.substeps += parts - 1;
        }
        snap(i + 1);
    }
    return tr;
}

/// Finite-volume counterpart of run_ode_experiment (d = 1 only). Writes
/// fp1d_results.csv, fp1d_slopes.json and snapshot CSVs.
inline RunRecord run_pde_experiment(const ExperimentConfig& c, const RunOptions& opts = {}) {
    if (c.dim() != 1) throw ConfigError("target", "fp1d requires a one-dimensional target");
    const auto start = std::chrono::steady_clock::now();
    RunRecord rec;
    rec.config_hash = config_hash(c);
    rec.dim = 1;
    const std::vector<CellSpec> specs = enumerate_cells(c, 1);
    rec.cells.resize(specs.size());
    const bool snapshots = opts.write_snapshots && !opts.output_dir.empty() && !c.snapshot_times.empty();
    if (snapshots) std::filesystem::create_directories(opts.output_dir + "/snapshots");
    else if (!opts.output_dir.empty()) std::filesystem::create_directories(opts.output_dir);
    std::mutex log_mutex;

    parallel_for(specs.size(), opts.threads, [&](std::size_t i) {
        const CellSpec& s = specs[i];
        CellResult r;
        r.perturbation = s.perturbation;
        r.delta_index = s.delta_index;
        r.delta = c.deltas[s.delta_index];
        r.n_steps = std::max(1LL, std::llround(c.run_time() / c.pde.h));
        r.h = c.run_time() / static_cast<double>(r.n_steps);
        r.seed = c.seed;
        const auto t0 = std::chrono::steady_clock::now();
        try {
            const VelocityField field = VelocityField::make(c.target, s.perturbation, r.delta, c.horizon, c.tau);
            const TransportRun tr = solve_reverse_transport(field, c.pde, snapshots ? c.snapshot_times : std::vector<double>{});
            const DensityField1D ref = init_from_density(
                [&](double x) { return std::exp(c.target.log_density(Vector::Constant(1, x))); }, c.pde.x_lo, c.pde.x_hi,
                c.pde.cells);
            r.metrics.tv = total_variation_grid(tr.final, ref);
            const MomentErrors e = density_moment_errors(tr.final, c.target);
            r.metrics.rel_mean_err = e.rel_mean_err;
            r.metrics.rel_cov_err = e.rel_cov_err;
            r.metrics.mean_error_absolute = e.mean_error_absolute;
            for (const auto& [t, f] : tr.snapshots)
                write_density_csv(f, opts.output_dir + "/snapshots/" + snapshot_name("fp1d", s.perturbation, r.delta, t));
        } catch (const CflError& e) {
            r.ok = false;
            r.error = e.what();
        } catch (const PositivityError& e) {
            r.ok = false;
            r.error = e.what();
        }
        r.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        if (opts.log) {
            std::lock_guard<std::mutex> lock(log_mutex);
            *opts.log << "[fp1d] " << to_string(s.perturbation) << " delta=" << r.delta;
            if (r.ok)
                *opts.log << " tv=" << r.metrics.tv << " (" << r.wall_time_s << " s)\n";
            else
                *opts.log << " FAILED: " << r.error << '\n';
        }
        rec.cells[i] = std::move(r);
    });

    rec.slopes = fit_slopes(rec.cells, c.perturbations);
    rec.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (!opts.output_dir.empty()) {
        write_results_csv(rec, opts.output_dir + "/fp1d_results.csv");
        write_json(slopes_to_json(rec), opts.output_dir + "/fp1d_slopes.json");
    }
    return rec;
}

}  // namespace pfode
