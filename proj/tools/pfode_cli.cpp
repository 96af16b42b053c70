// Command-line front end for the probability-flow ODE laboratory.
//
//   pfode [--seed N] [--threads N] [--out DIR] experiment <config.json>
//   pfode fp1d <config.json>
//   pfode rk-verify [--tableau NAME | --tableau-file FILE]
//   pfode sample <config.json>
//
// Exit codes: 0 success, 2 configuration error, 3 numerical failure, 1 anything else.

#include "pfode/config.hpp"
#include "pfode/experiment.hpp"
#include "pfode/runge_kutta.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <optional>

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitNumerical = 3;

struct GlobalOptions {
    std::optional<std::uint64_t> seed;
    unsigned threads = 1;
    std::string out;
};

pfode::ExperimentConfig load(const std::string& path, const GlobalOptions& g, pfode::ParseOptions popts = {}) {
    const pfode::json j = pfode::read_json_file(path);
    const std::string base = std::filesystem::path(path).parent_path().string();
    pfode::ExperimentConfig c = pfode::parse_config(j, base, popts);
    if (g.seed) c.seed = *g.seed;
    return c;
}

// --out wins; the environment variable is consulted only when --out is absent.
std::string output_dir(const pfode::ExperimentConfig& c, const GlobalOptions& g) {
    if (!g.out.empty()) return g.out;
    if (const char* env = std::getenv("PFODE_OUT_DIR"); env && *env) return env;
    return c.output;
}

void print_slopes(const pfode::RunRecord& rec) {
    for (const auto& s : rec.slopes)
        std::cout << "slope " << s.metric << " vs " << s.against << " [" << s.perturbation
                  << "]: " << std::fixed << std::setprecision(4) << s.fit.slope << " (r2=" << s.fit.r2
                  << ", cells=" << s.fit.cells << ")\n"
                  << std::defaultfloat;
}

int run_sweep(const std::string& path, const GlobalOptions& g, bool pde, bool sample) {
    pfode::ParseOptions popts;
    popts.require_steps = !pde;
    pfode::ExperimentConfig c = load(path, g, popts);
    if (sample) c.repeats = 1;
    pfode::RunOptions opts;
    opts.threads = g.threads;
    opts.output_dir = output_dir(c, g);
    opts.dump_particles = sample;
    opts.log = &std::cerr;
    std::filesystem::create_directories(opts.output_dir);
    pfode::write_json(pfode::mixture_to_json(c.target), opts.output_dir + "/target.json");
    const pfode::RunRecord rec = pde ? pfode::run_pde_experiment(c, opts) : pfode::run_ode_experiment(c, opts);
    std::cout << "config_hash " << rec.config_hash << "\n";
    std::cout << "cells " << rec.cells.size() << ", wall time " << rec.wall_time_s << " s\n";
    print_slopes(rec);
    std::cout << "results written to " << opts.output_dir << "\n";
    return rec.all_ok() ? kExitOk : kExitNumerical;
}

int rk_verify(const std::string& name, const std::string& file) {
    std::vector<pfode::ButcherTableau> tabs;
    if (!file.empty()) {
        tabs.push_back(pfode::tableau_from_json(pfode::read_json_file(file), "tableau"));
    } else if (!name.empty()) {
        auto t = pfode::tableaus::by_name(name);
        if (!t) throw pfode::ConfigError("--tableau", "unknown tableau '" + name + "'");
        tabs.push_back(*t);
    } else {
        for (const auto& n : pfode::tableaus::names()) tabs.push_back(*pfode::tableaus::by_name(n));
    }
    int status = kExitOk;
    for (const auto& t : tabs) {
        const pfode::TableauReport rep = pfode::validate(t);
        if (!rep.ok()) {
            std::cout << t.name << ": invalid tableau\n";
            for (const auto& v : rep.violations) std::cout << "  " << v.message << "\n";
            status = kExitConfig;
            continue;
        }
        const pfode::OrderEstimate est = pfode::estimate_order(t);
        std::cout << t.name << " (stages " << t.stages() << ", nominal order " << t.nominal_order << ")\n";
        for (const auto& [h, err] : est.errors)
            std::cout << "  h=" << std::setw(10) << h << "  error=" << std::scientific << std::setprecision(6) << err
                      << std::defaultfloat << "\n";
        if (est.exact)
            std::cout << "  exact on this problem\n";
        else
            std::cout << "  measured order " << std::fixed << std::setprecision(4) << est.slope << std::defaultfloat
                      << "\n";
    }
    return status;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Probability-flow ODE sampling laboratory"};
    app.require_subcommand(1);
    app.fallthrough();
    GlobalOptions g;
    std::uint64_t seed = 0;
    auto* seed_opt = app.add_option("--seed", seed, "Override the master seed");
    app.add_option("--threads", g.threads, "Sweep cells run concurrently")->check(CLI::PositiveNumber);
    app.add_option("--out", g.out, "Output directory (overrides PFODE_OUT_DIR and the config)");

    std::string config_path;
    auto* experiment = app.add_subcommand("experiment", "Particle-ODE sweep over delta");
    experiment->add_option("config", config_path, "Experiment JSON")->required();
    auto* fp1d = app.add_subcommand("fp1d", "Finite-volume transport run (d = 1)");
    fp1d->add_option("config", config_path, "Experiment JSON")->required();
    auto* sample = app.add_subcommand("sample", "Dump final particle coordinates");
    sample->add_option("config", config_path, "Experiment JSON")->required();
    std::string tableau_name, tableau_file;
    auto* rk = app.add_subcommand("rk-verify", "Measure the convergence order of RK tableaus on y' = -y");
    rk->add_option("--tableau", tableau_name, "Built-in tableau (euler, heun, rk4)");
    rk->add_option("--tableau-file", tableau_file, "Custom tableau JSON");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitConfig;
    }
    if (seed_opt->count() > 0) g.seed = seed;

    try {
        if (*experiment) return run_sweep(config_path, g, false, false);
        if (*fp1d) return run_sweep(config_path, g, true, false);
        if (*sample) return run_sweep(config_path, g, false, true);
        if (*rk) return rk_verify(tableau_name, tableau_file);
    } catch (const pfode::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const pfode::NumericalError& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return kExitNumerical;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return kExitOk;
}
