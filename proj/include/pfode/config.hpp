/// @file config.hpp
/// @brief JSON experiment configuration: schema, parsing and serialization.
///
/// Minimal 1D example:
/// {
///   "schema_version": 1,
///   "target": {"kind": "explicit", "weights": [0.1, 0.4, 0.5], "means": [[-6], [4], [6]],
///              "covariances": [{"type": "scaled_identity", "scale": 0.25}, ...]},
///   "delta": [0.005, 0.01], "perturbation": "constant"
/// }
#pragma once

#include "pfode/gaussian_mixture.hpp"
#include "pfode/metrics.hpp"
#include "pfode/runge_kutta.hpp"
#include "pfode/score_field.hpp"

#include <json.hpp>

#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace pfode {

using json = nlohmann::json;

inline constexpr int kSchemaVersion = 1;

/// Configuration problem; `path` is a JSON pointer-like field path ("target.weights[2]").
class ConfigError : public std::runtime_error {
public:
    ConfigError(std::string path, const std::string& message)
        : std::runtime_error(path.empty() ? message : path + ": " + message), path_(std::move(path)) {}
    const std::string& path() const { return path_; }

private:
    std::string path_;
};

// ---------------------------------------------------------------------------
// field access helpers

namespace cfg {

inline std::string join(const std::string& base, const std::string& key) {
    return base.empty() ? key : base + "." + key;
}
inline std::string index(const std::string& base, std::size_t i) { return base + "[" + std::to_string(i) + "]"; }

inline const json& require(const json& obj, const std::string& key, const std::string& base) {
    if (!obj.is_object()) throw ConfigError(base, "expected an object");
    auto it = obj.find(key);
    if (it == obj.end()) throw ConfigError(join(base, key), "missing required field");
    return *it;
}

inline double number(const json& v, const std::string& path) {
    if (!v.is_number()) throw ConfigError(path, "expected a number");
    const double x = v.get<double>();
    if (!std::isfinite(x)) throw ConfigError(path, "must be finite");
    return x;
}

inline long long integer(const json& v, const std::string& path) {
    if (v.is_number_integer()) return v.get<long long>();
    if (v.is_number_float()) {
        const double x = v.get<double>();
        if (std::floor(x) == x && std::abs(x) < 9e15) return static_cast<long long>(x);
    }
    throw ConfigError(path, "expected an integer");
}

inline std::uint64_t unsigned_integer(const json& v, const std::string& path) {
    if (v.is_number_unsigned()) return v.get<std::uint64_t>();
    const long long x = integer(v, path);
    if (x < 0) throw ConfigError(path, "must be non-negative");
    return static_cast<std::uint64_t>(x);
}

inline std::string string(const json& v, const std::string& path) {
    if (!v.is_string()) throw ConfigError(path, "expected a string");
    return v.get<std::string>();
}

inline std::vector<double> numbers(const json& v, const std::string& path) {
    if (!v.is_array()) throw ConfigError(path, "expected an array of numbers");
    std::vector<double> out;
    for (std::size_t i = 0; i < v.size(); ++i) out.push_back(number(v[i], index(path, i)));
    return out;
}

inline double number_or(const json& obj, const std::string& key, double def, const std::string& base) {
    auto it = obj.find(key);
    return it == obj.end() ? def : number(*it, join(base, key));
}

inline long long integer_or(const json& obj, const std::string& key, long long def, const std::string& base) {
    auto it = obj.find(key);
    return it == obj.end() ? def : integer(*it, join(base, key));
}

}  // namespace cfg

// ---------------------------------------------------------------------------
// mixtures

/// Covariance entries are row-major d*d arrays, a scalar c (meaning c I), or
/// {"type": "scaled_identity", "scale": c}.
inline GaussianMixture mixture_from_json(const json& j, const std::string& base = "") {
    const json& jw = cfg::require(j, "weights", base);
    const std::vector<double> w = cfg::numbers(jw, cfg::join(base, "weights"));
    const json& jm = cfg::require(j, "means", base);
    const std::string mpath = cfg::join(base, "means");
    if (!jm.is_array() || jm.size() != w.size())
        throw ConfigError(mpath, "expected an array with one mean per weight");
    std::vector<Vector> means;
    for (std::size_t k = 0; k < jm.size(); ++k) {
        if (jm[k].is_number()) {
            means.push_back(Vector::Constant(1, cfg::number(jm[k], cfg::index(mpath, k))));
        } else {
            const auto v = cfg::numbers(jm[k], cfg::index(mpath, k));
            if (v.empty()) throw ConfigError(cfg::index(mpath, k), "empty mean");
            means.push_back(Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size())));
        }
    }
    const auto d = means.empty() ? 0 : means.front().size();
    const json& jc = cfg::require(j, "covariances", base);
    const std::string cpath = cfg::join(base, "covariances");
    if (!jc.is_array() || jc.size() != w.size())
        throw ConfigError(cpath, "expected an array with one covariance per weight");
    std::vector<Matrix> covs;
    for (std::size_t k = 0; k < jc.size(); ++k) {
        const std::string p = cfg::index(cpath, k);
        const json& e = jc[k];
        if (e.is_number()) {
            covs.push_back(cfg::number(e, p) * Matrix::Identity(d, d));
        } else if (e.is_object()) {
            const std::string type = cfg::string(cfg::require(e, "type", p), cfg::join(p, "type"));
            if (type != "scaled_identity") throw ConfigError(cfg::join(p, "type"), "unknown covariance type '" + type + "'");
            covs.push_back(cfg::number(cfg::require(e, "scale", p), cfg::join(p, "scale")) * Matrix::Identity(d, d));
        } else {
            const auto v = cfg::numbers(e, p);
            if (static_cast<Eigen::Index>(v.size()) != d * d)
                throw ConfigError(p, "expected " + std::to_string(d * d) + " row-major entries");
            covs.push_back(Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
                v.data(), d, d));
        }
    }
    Vector wv = Eigen::Map<const Vector>(w.data(), static_cast<Eigen::Index>(w.size()));
    try {
        return GaussianMixture(std::move(wv), std::move(means), std::move(covs));
    } catch (const std::invalid_argument& e) {
        throw ConfigError(base, e.what());
    }
}

inline json mixture_to_json(const GaussianMixture& gm) {
    json j;
    j["weights"] = std::vector<double>(gm.weights().data(), gm.weights().data() + gm.weights().size());
    json means = json::array(), covs = json::array();
    for (std::size_t k = 0; k < gm.modes(); ++k) {
        const Vector& m = gm.means()[k];
        means.push_back(std::vector<double>(m.data(), m.data() + m.size()));
        const Matrix& c = gm.covariances()[k];
        std::vector<double> flat;
        flat.reserve(static_cast<std::size_t>(c.size()));
        for (Eigen::Index r = 0; r < c.rows(); ++r)
            for (Eigen::Index s = 0; s < c.cols(); ++s) flat.push_back(c(r, s));
        covs.push_back(std::move(flat));
    }
    j["means"] = std::move(means);
    j["covariances"] = std::move(covs);
    return j;
}

inline json read_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("", "cannot open '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    const std::string text = ss.str();
    try {
        return json::parse(text);
    } catch (const json::parse_error& e) {
        // translate the byte offset into line:column
        std::size_t line = 1, col = 1;
        for (std::size_t i = 0; i + 1 < e.byte && i < text.size(); ++i) {
            if (text[i] == '\n') {
                ++line;
                col = 1;
            } else {
                ++col;
            }
        }
        throw ConfigError("", path + ":" + std::to_string(line) + ":" + std::to_string(col) +
                                  ": malformed JSON: " + e.what());
    }
}

// ---------------------------------------------------------------------------
// tableaus

inline ButcherTableau tableau_from_json(const json& j, const std::string& base) {
    if (j.is_string()) {
        const std::string name = j.get<std::string>();
        auto t = tableaus::by_name(name);
        if (!t) throw ConfigError(base, "unknown integrator '" + name + "'");
        return *t;
    }
    if (!j.is_object()) throw ConfigError(base, "expected an integrator name or a tableau object");
    ButcherTableau t;
    t.name = j.contains("name") ? cfg::string(j["name"], cfg::join(base, "name")) : "custom";
    const std::vector<double> b = cfg::numbers(cfg::require(j, "b", base), cfg::join(base, "b"));
    const std::vector<double> c = cfg::numbers(cfg::require(j, "c", base), cfg::join(base, "c"));
    const json& ja = cfg::require(j, "a", base);
    const std::string apath = cfg::join(base, "a");
    if (!ja.is_array() || ja.size() != b.size()) throw ConfigError(apath, "expected s rows");
    const auto s = static_cast<Eigen::Index>(b.size());
    t.a = Matrix::Zero(s, s);
    for (std::size_t r = 0; r < ja.size(); ++r) {
        const auto row = cfg::numbers(ja[r], cfg::index(apath, r));
        if (static_cast<Eigen::Index>(row.size()) != s) throw ConfigError(cfg::index(apath, r), "expected s entries");
        for (Eigen::Index q = 0; q < s; ++q) t.a(static_cast<Eigen::Index>(r), q) = row[static_cast<std::size_t>(q)];
    }
    t.b = Eigen::Map<const Vector>(b.data(), s);
    if (static_cast<Eigen::Index>(c.size()) != s) throw ConfigError(cfg::join(base, "c"), "expected s entries");
    t.c = Eigen::Map<const Vector>(c.data(), s);
    t.nominal_order = static_cast<int>(cfg::integer(cfg::require(j, "nominal_order", base), cfg::join(base, "nominal_order")));
    const TableauReport rep = validate(t);
    if (!rep.ok()) throw ConfigError(base, "invalid tableau: " + rep.violations.front().message);
    return t;
}

inline json tableau_to_json(const ButcherTableau& t) {
    if (tableaus::by_name(t.name)) return t.name;
    json a = json::array();
    for (Eigen::Index r = 0; r < t.a.rows(); ++r) {
        std::vector<double> row(static_cast<std::size_t>(t.a.cols()));
        for (Eigen::Index q = 0; q < t.a.cols(); ++q) row[static_cast<std::size_t>(q)] = t.a(r, q);
        a.push_back(row);
    }
    return json{{"name", t.name},
                {"a", a},
                {"b", std::vector<double>(t.b.data(), t.b.data() + t.b.size())},
                {"c", std::vector<double>(t.c.data(), t.c.data() + t.c.size())},
                {"nominal_order", t.nominal_order}};
}

// ---------------------------------------------------------------------------
// experiment configuration

struct TargetSpec {
    enum class Kind { explicit_mixture, random, file };
    Kind kind = Kind::explicit_mixture;
    json source;                    // the "target" object as given
    std::size_t random_dim = 0;     // random: full dimension
    std::size_t random_modes = 5;   // random: K
    std::uint64_t random_seed = 0;  // random: generator seed
    std::vector<std::size_t> keep;  // coordinates kept after generation/load (empty: all)
};

struct PdeSettings {
    std::size_t cells = 1000;
    double h = 1e-3;
    double x_lo = -10.0;
    double x_hi = 10.0;
};

struct ExperimentConfig {
    std::string name = "experiment";
    TargetSpec target_spec;
    GaussianMixture target;  // resolved
    double horizon = 8.0;
    double tau = 0.0;
    ButcherTableau tableau = tableaus::heun();
    std::size_t particles = 40000;
    std::vector<double> deltas;
    std::vector<long long> n_steps;  // one per delta
    std::vector<PerturbationKind> perturbations{PerturbationKind::constant};
    std::size_t repeats = 3;
    std::uint64_t seed = 0;
    DensityGrid metric_grid;
    std::vector<double> snapshot_times;  // reverse times
    PdeSettings pde;
    std::string output = "results";

    std::size_t dim() const { return target.dim(); }
    double run_time() const { return horizon - tau; }
    double step_size(std::size_t i) const { return run_time() / static_cast<double>(n_steps[i]); }
};

/// Steps for each delta under h^2 ~ delta. Exact matches of the published
/// schedule {0.005:96, 0.01:64, 0.02:48, 0.04:32, 0.08:24, 0.16:16} use that
/// value; any other delta uses round(T / sqrt(delta)).
inline std::vector<long long> couple_delta_to_steps(const std::vector<double>& deltas, double T) {
    static const std::map<double, long long> kPublished{{0.005, 96}, {0.01, 64}, {0.02, 48},
                                                        {0.04, 32},  {0.08, 24}, {0.16, 16}};
    if (!(T > 0.0)) throw std::invalid_argument("couple_delta_to_steps: T must be positive");
    std::vector<long long> out;
    for (double d : deltas) {
        if (!(d > 0.0)) throw std::invalid_argument("couple_delta_to_steps: delta must be positive");
        auto it = kPublished.find(d);
        if (it != kPublished.end() && T == 8.0) {
            out.push_back(it->second);
        } else {
            out.push_back(std::max(1LL, std::llround(T / std::sqrt(d))));
        }
    }
    return out;
}

inline GaussianMixture resolve_target(const TargetSpec& spec, const std::string& base_dir) {
    GaussianMixture full;
    switch (spec.kind) {
        case TargetSpec::Kind::explicit_mixture: full = mixture_from_json(spec.source, "target"); break;
        case TargetSpec::Kind::random:
            full = make_random_mixture(spec.random_dim, spec.random_modes, spec.random_seed);
            break;
        case TargetSpec::Kind::file: {
            std::string path = spec.source.at("path").get<std::string>();
            if (!path.empty() && path.front() != '/' && !base_dir.empty()) path = base_dir + "/" + path;
            full = mixture_from_json(read_json_file(path), "target.path");
            break;
        }
    }
    if (spec.keep.empty()) return full;
    for (std::size_t i : spec.keep)
        if (i >= full.dim()) throw ConfigError("target.marginal", "coordinate " + std::to_string(i) + " out of range");
    try {
        return marginalize(full, spec.keep);
    } catch (const std::invalid_argument& e) {
        throw ConfigError("target.marginal", e.what());
    }
}

inline TargetSpec parse_target(const json& j) {
    const std::string base = "target";
    if (!j.is_object()) throw ConfigError(base, "expected an object");
    TargetSpec spec;
    spec.source = j;
    const std::string kind = j.contains("kind") ? cfg::string(j["kind"], "target.kind") : "explicit";
    if (kind == "explicit") {
        spec.kind = TargetSpec::Kind::explicit_mixture;
    } else if (kind == "random") {
        spec.kind = TargetSpec::Kind::random;
        const long long d = cfg::integer(cfg::require(j, "d", base), "target.d");
        const long long K = cfg::integer_or(j, "modes", 5, base);
        if (d < 1) throw ConfigError("target.d", "must be >= 1");
        if (K < 1) throw ConfigError("target.modes", "must be >= 1");
        spec.random_dim = static_cast<std::size_t>(d);
        spec.random_modes = static_cast<std::size_t>(K);
        spec.random_seed = cfg::unsigned_integer(cfg::require(j, "seed", base), "target.seed");
    } else if (kind == "file") {
        spec.kind = TargetSpec::Kind::file;
        cfg::string(cfg::require(j, "path", base), "target.path");
    } else {
        throw ConfigError("target.kind", "expected 'explicit', 'random' or 'file', got '" + kind + "'");
    }
    if (j.contains("marginal")) {
        const json& m = j["marginal"];
        if (m.is_number()) {
            const long long k = cfg::integer(m, "target.marginal");
            if (k < 1) throw ConfigError("target.marginal", "must be >= 1");
            for (long long i = 0; i < k; ++i) spec.keep.push_back(static_cast<std::size_t>(i));
        } else {
            const auto v = cfg::numbers(m, "target.marginal");
            for (std::size_t i = 0; i < v.size(); ++i) {
                if (v[i] < 0 || std::floor(v[i]) != v[i])
                    throw ConfigError(cfg::index("target.marginal", i), "expected a coordinate index");
                spec.keep.push_back(static_cast<std::size_t>(v[i]));
            }
        }
    }
    return spec;
}

struct ParseOptions {
    bool require_delta = true;
    /// delta = 0 entries need n_steps or h; the PDE run has its own step size.
    bool require_steps = true;
};

/// Parses and validates a configuration; relative target paths resolve against `base_dir`.
inline ExperimentConfig parse_config(const json& j, const std::string& base_dir = "", ParseOptions popts = {}) {
    if (!j.is_object()) throw ConfigError("", "top level must be an object");
    ExperimentConfig c;
    const long long version = cfg::integer(cfg::require(j, "schema_version", ""), "schema_version");
    if (version != kSchemaVersion)
        throw ConfigError("schema_version", "unsupported version " + std::to_string(version));
    if (j.contains("name")) c.name = cfg::string(j["name"], "name");
    c.target_spec = parse_target(cfg::require(j, "target", ""));
    c.horizon = cfg::number_or(j, "horizon", 8.0, "");
    c.tau = cfg::number_or(j, "tau", 0.0, "");
    if (!(c.tau >= 0.0)) throw ConfigError("tau", "must be >= 0");
    if (!(c.horizon > c.tau)) throw ConfigError("horizon", "must exceed tau");
    if (j.contains("integrator")) c.tableau = tableau_from_json(j["integrator"], "integrator");
    const long long J = cfg::integer_or(j, "particles", 40000, "");
    if (J < 2) throw ConfigError("particles", "must be >= 2");
    c.particles = static_cast<std::size_t>(J);

    if (j.contains("perturbation")) {
        const json& p = j["perturbation"];
        c.perturbations.clear();
        auto one = [&](const json& v, const std::string& path) {
            const std::string s = cfg::string(v, path);
            auto k = parse_perturbation_kind(s);
            if (!k) throw ConfigError(path, "expected none|constant|linear|sinusoidal, got '" + s + "'");
            c.perturbations.push_back(*k);
        };
        if (p.is_array()) {
            if (p.empty()) throw ConfigError("perturbation", "must not be empty");
            for (std::size_t i = 0; i < p.size(); ++i) one(p[i], cfg::index("perturbation", i));
        } else {
            one(p, "perturbation");
        }
    }

    if (popts.require_delta || j.contains("delta")) {
        c.deltas = cfg::numbers(cfg::require(j, "delta", ""), "delta");
        if (c.deltas.empty()) throw ConfigError("delta", "must not be empty");
        for (std::size_t i = 0; i < c.deltas.size(); ++i)
            if (!(c.deltas[i] >= 0.0)) throw ConfigError(cfg::index("delta", i), "must be >= 0");
    } else {
        c.deltas = {0.0};
    }

    if (j.contains("n_steps") && j.contains("h")) throw ConfigError("h", "give either n_steps or h, not both");
    if (j.contains("n_steps")) {
        const json& ns = j["n_steps"];
        if (!ns.is_array()) throw ConfigError("n_steps", "expected an array");
        if (ns.size() != c.deltas.size())
            throw ConfigError("n_steps", "must have the same length as delta (" + std::to_string(c.deltas.size()) + ")");
        for (std::size_t i = 0; i < ns.size(); ++i) {
            const long long n = cfg::integer(ns[i], cfg::index("n_steps", i));
            if (n < 1) throw ConfigError(cfg::index("n_steps", i), "must be >= 1");
            c.n_steps.push_back(n);
        }
    } else if (j.contains("h")) {
        const auto hs = cfg::numbers(j["h"], "h");
        if (hs.size() != c.deltas.size())
            throw ConfigError("h", "must have the same length as delta (" + std::to_string(c.deltas.size()) + ")");
        for (std::size_t i = 0; i < hs.size(); ++i) {
            if (!(hs[i] > 0.0)) throw ConfigError(cfg::index("h", i), "must be positive");
            c.n_steps.push_back(std::max(1LL, std::llround(c.run_time() / hs[i])));
        }
    } else {
        for (std::size_t i = 0; i < c.deltas.size(); ++i) {
            if (c.deltas[i] > 0.0) {
                c.n_steps.push_back(couple_delta_to_steps({c.deltas[i]}, c.run_time()).front());
            } else if (popts.require_steps) {
                throw ConfigError(cfg::index("delta", i), "delta = 0 needs an explicit n_steps or h list");
            } else {
                c.n_steps.push_back(1);
            }
        }
    }

    const long long reps = cfg::integer_or(j, "repeats", 3, "");
    if (reps < 1) throw ConfigError("repeats", "must be >= 1");
    c.repeats = static_cast<std::size_t>(reps);
    if (j.contains("seed")) c.seed = cfg::unsigned_integer(j["seed"], "seed");

    if (j.contains("metric_grid")) {
        const json& g = j["metric_grid"];
        if (!g.is_object()) throw ConfigError("metric_grid", "expected an object");
        c.metric_grid.lo = cfg::number_or(g, "lo", -10.0, "metric_grid");
        c.metric_grid.hi = cfg::number_or(g, "hi", 10.0, "metric_grid");
        const long long pts = cfg::integer_or(g, "points", 2000, "metric_grid");
        if (pts < 2) throw ConfigError("metric_grid.points", "must be >= 2");
        c.metric_grid.points = static_cast<std::size_t>(pts);
        if (!(c.metric_grid.hi > c.metric_grid.lo)) throw ConfigError("metric_grid.hi", "must exceed lo");
    }
    if (j.contains("snapshot_times")) {
        c.snapshot_times = cfg::numbers(j["snapshot_times"], "snapshot_times");
        for (std::size_t i = 0; i < c.snapshot_times.size(); ++i)
            if (c.snapshot_times[i] < 0.0 || c.snapshot_times[i] > c.run_time())
                throw ConfigError(cfg::index("snapshot_times", i), "must lie in [0, horizon - tau]");
    }
    if (j.contains("pde")) {
        const json& p = j["pde"];
        if (!p.is_object()) throw ConfigError("pde", "expected an object");
        const long long cells = cfg::integer_or(p, "cells", 1000, "pde");
        if (cells < 2) throw ConfigError("pde.cells", "must be >= 2");
        c.pde.cells = static_cast<std::size_t>(cells);
        c.pde.h = cfg::number_or(p, "h", 1e-3, "pde");
        if (!(c.pde.h > 0.0)) throw ConfigError("pde.h", "must be positive");
        if (p.contains("domain")) {
            const auto dom = cfg::numbers(p["domain"], "pde.domain");
            if (dom.size() != 2 || !(dom[1] > dom[0])) throw ConfigError("pde.domain", "expected [lo, hi] with hi > lo");
            c.pde.x_lo = dom[0];
            c.pde.x_hi = dom[1];
        }
    }
    if (j.contains("output")) c.output = cfg::string(j["output"], "output");

    c.target = resolve_target(c.target_spec, base_dir);
    return c;
}

/// Canonical form of the effective configuration; the basis of the config hash.
inline json config_to_json(const ExperimentConfig& c) {
    json j;
    j["schema_version"] = kSchemaVersion;
    j["name"] = c.name;
    j["target"] = c.target_spec.source;
    j["horizon"] = c.horizon;
    j["tau"] = c.tau;
    j["integrator"] = tableau_to_json(c.tableau);
    j["particles"] = c.particles;
    j["delta"] = c.deltas;
    j["n_steps"] = c.n_steps;
    json p = json::array();
    for (auto k : c.perturbations) p.push_back(std::string(to_string(k)));
    j["perturbation"] = p;
    j["repeats"] = c.repeats;
    j["seed"] = c.seed;
    j["metric_grid"] = {{"lo", c.metric_grid.lo}, {"hi", c.metric_grid.hi}, {"points", c.metric_grid.points}};
    j["snapshot_times"] = c.snapshot_times;
    j["pde"] = {{"cells", c.pde.cells}, {"h", c.pde.h}, {"domain", {c.pde.x_lo, c.pde.x_hi}}};
    return j;
}

/// FNV-1a 64 of the canonical JSON, as 16 hex digits. The output directory is
/// not part of the hash.
inline std::string config_hash(const ExperimentConfig& c) {
    const std::string text = config_to_json(c).dump();
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : text) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

}  // namespace pfode
