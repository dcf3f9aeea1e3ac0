#pragma once

// Run configuration for the command-line tool. A TOML file is converted to
// JSON, laid over the defaults, and command-line values are laid over that.
//
//   seed = 7
//   output = "out"
//   [data]     input, format, meta
//   [fit]      delta, knot_spacing, own_window, population_window,
//              use_population, exclusion, ridge, mode
//   [test]     hypothesis, neurons, lag, replicates, alpha, refit, population,
//              probability_ceiling
//   [roc]      neurons, folds, target_fpr, mode
//   [simulate] spec, reps
//   [converge] spec, grid, reps, neurons, conditional

#include <cstdint>
#include <filesystem>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#define TOML_EXCEPTIONS 1
#include <toml.hpp>
#include <json.hpp>

#include "spikesync/errors.hpp"
#include "spikesync/io.hpp"

namespace spikesync {

namespace detail {

inline nlohmann::json toml_node_to_json(const toml::node& node) {
    if (const auto* t = node.as_table()) {
        nlohmann::json j = nlohmann::json::object();
        for (const auto& [k, v] : *t) j[std::string(k.str())] = toml_node_to_json(v);
        return j;
    }
    if (const auto* a = node.as_array()) {
        nlohmann::json j = nlohmann::json::array();
        for (const auto& v : *a) j.push_back(toml_node_to_json(v));
        return j;
    }
    if (const auto* v = node.as_string()) return v->get();
    if (const auto* v = node.as_integer()) return v->get();
    if (const auto* v = node.as_floating_point()) return v->get();
    if (const auto* v = node.as_boolean()) return v->get();
    throw ParseError("unsupported TOML value type (dates and times are not used)", static_cast<std::size_t>(node.source().begin.line));
}

/// Recursive object merge: values of `over` replace those of `base`.
inline void merge_into(nlohmann::json& base, const nlohmann::json& over) {
    for (auto it = over.begin(); it != over.end(); ++it) {
        if (it.value().is_object() && base.contains(it.key()) && base[it.key()].is_object()) {
            merge_into(base[it.key()], it.value());
        } else {
            base[it.key()] = it.value();
        }
    }
}

}  // namespace detail

inline nlohmann::json parse_toml(const std::string& text, const std::string& source = "config") {
    try {
        const auto table = toml::parse(text, source);
        return detail::toml_node_to_json(table);
    } catch (const toml::parse_error& e) {
        throw ParseError(source + ": " + std::string(e.description()),
                         static_cast<std::size_t>(e.source().begin.line));
    }
}

inline nlohmann::json load_toml(const std::filesystem::path& path) { return parse_toml(read_file(path), path.string()); }

inline nlohmann::json default_config() {
    return {
        {"output", "out"},
        {"data", {{"format", ""}, {"meta", ""}, {"input", ""}}},
        {"fit",
         {{"delta", 0.005},
          {"knot_spacing", 0.1},
          {"own_window", 0.1},
          {"population_window", 0.1},
          {"use_population", true},
          {"exclusion", nlohmann::json::array()},
          {"ridge", 0.0},
          {"mode", "marginal"}}},
        {"test",
         {{"hypothesis", "pair-marginal"},
          {"neurons", {1, 2}},
          {"lag", 0.0},
          {"replicates", 1000},
          {"alpha", 0.05},
          {"refit", false},
          {"population", "observed"},
          {"probability_ceiling", 0.5}}},
        {"roc", {{"neurons", {1, 2}}, {"folds", 10}, {"target_fpr", 0.1}, {"mode", "both"}}},
        {"simulate", {{"spec", ""}, {"reps", 1}}},
        {"converge",
         {{"spec", ""}, {"grid", {0.008, 0.004, 0.002, 0.001}}, {"reps", 200}, {"neurons", {1, 2}}, {"conditional", false}}},
    };
}

/// Typed view of a resolved configuration.
struct RunConfig {
    nlohmann::json resolved;

    std::uint64_t seed = 0;
    std::filesystem::path output;
    std::filesystem::path input;
    std::string format;
    std::filesystem::path meta;

    double delta = 0.005;
    double knot_spacing = 0.1;
    double own_window = 0.1;
    double population_window = 0.1;
    bool use_population = true;
    std::vector<int> exclusion;  // 1-based labels
    double ridge = 0.0;
    std::string fit_mode = "marginal";

    std::string hypothesis = "pair-marginal";
    std::vector<int> test_neurons{1, 2};
    double lag = 0.0;
    std::size_t replicates = 1000;
    double alpha = 0.05;
    bool refit = false;
    std::string population = "observed";
    double probability_ceiling = 0.5;

    std::vector<int> roc_neurons{1, 2};
    std::size_t folds = 10;
    double target_fpr = 0.1;
    std::string roc_mode = "both";

    std::filesystem::path simulate_spec;
    std::size_t simulate_reps = 1;

    std::filesystem::path converge_spec;
    std::vector<double> grid;
    std::size_t converge_reps = 200;
    std::vector<int> converge_neurons{1, 2};
    bool converge_conditional = false;
};

namespace detail {

template <class T>
T get_as(const nlohmann::json& j, const char* section, const char* key) {
    try {
        return j.at(section).at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("config value ") + section + "." + key + " has the wrong type: " + e.what());
    }
}

inline void require_positive(double v, const std::string& name) {
    if (!(v > 0.0) || !std::isfinite(v)) throw ValidationError(name + " must be a positive duration");
}

}  // namespace detail

/// Defaults, then `file` (may be empty), then `overrides`.
inline RunConfig resolve_config(const nlohmann::json& file, const nlohmann::json& overrides) {
    nlohmann::json j = default_config();
    if (!file.is_null()) detail::merge_into(j, file);
    if (!overrides.is_null()) detail::merge_into(j, overrides);

    RunConfig c;
    if (!j.contains("seed") || j["seed"].is_null())
        throw ValidationError("a seed is required (config 'seed' or --seed)");
    if (!j["seed"].is_number_integer() || j["seed"].get<std::int64_t>() < 0)
        throw ValidationError("seed must be a non-negative integer");
    c.seed = j["seed"].get<std::uint64_t>();
    c.output = j.at("output").get<std::string>();
    c.input = detail::get_as<std::string>(j, "data", "input");
    c.format = detail::get_as<std::string>(j, "data", "format");
    c.meta = detail::get_as<std::string>(j, "data", "meta");

    c.delta = detail::get_as<double>(j, "fit", "delta");
    c.knot_spacing = detail::get_as<double>(j, "fit", "knot_spacing");
    c.own_window = detail::get_as<double>(j, "fit", "own_window");
    c.population_window = detail::get_as<double>(j, "fit", "population_window");
    c.use_population = detail::get_as<bool>(j, "fit", "use_population");
    c.exclusion = detail::get_as<std::vector<int>>(j, "fit", "exclusion");
    c.ridge = detail::get_as<double>(j, "fit", "ridge");
    c.fit_mode = detail::get_as<std::string>(j, "fit", "mode");

    c.hypothesis = detail::get_as<std::string>(j, "test", "hypothesis");
    c.test_neurons = detail::get_as<std::vector<int>>(j, "test", "neurons");
    c.lag = detail::get_as<double>(j, "test", "lag");
    c.replicates = detail::get_as<std::size_t>(j, "test", "replicates");
    c.alpha = detail::get_as<double>(j, "test", "alpha");
    c.refit = detail::get_as<bool>(j, "test", "refit");
    c.population = detail::get_as<std::string>(j, "test", "population");
    c.probability_ceiling = detail::get_as<double>(j, "test", "probability_ceiling");

    c.roc_neurons = detail::get_as<std::vector<int>>(j, "roc", "neurons");
    c.folds = detail::get_as<std::size_t>(j, "roc", "folds");
    c.target_fpr = detail::get_as<double>(j, "roc", "target_fpr");
    c.roc_mode = detail::get_as<std::string>(j, "roc", "mode");

    c.simulate_spec = detail::get_as<std::string>(j, "simulate", "spec");
    c.simulate_reps = detail::get_as<std::size_t>(j, "simulate", "reps");

    c.converge_spec = detail::get_as<std::string>(j, "converge", "spec");
    c.grid = detail::get_as<std::vector<double>>(j, "converge", "grid");
    c.converge_reps = detail::get_as<std::size_t>(j, "converge", "reps");
    c.converge_neurons = detail::get_as<std::vector<int>>(j, "converge", "neurons");
    c.converge_conditional = detail::get_as<bool>(j, "converge", "conditional");

    detail::require_positive(c.delta, "fit.delta");
    detail::require_positive(c.knot_spacing, "fit.knot_spacing");
    detail::require_positive(c.own_window, "fit.own_window");
    detail::require_positive(c.population_window, "fit.population_window");
    if (!(c.delta < c.knot_spacing)) throw ValidationError("fit.delta must be smaller than fit.knot_spacing");
    if (c.lag < 0.0) throw ValidationError("test.lag must be non-negative");
    if (!(c.alpha > 0.0 && c.alpha < 1.0)) throw ValidationError("test.alpha must lie in (0, 1)");
    if (c.fit_mode != "marginal" && c.fit_mode != "conditional")
        throw ValidationError("fit.mode must be 'marginal' or 'conditional'");
    if (c.roc_mode != "marginal" && c.roc_mode != "conditional" && c.roc_mode != "both")
        throw ValidationError("roc.mode must be 'marginal', 'conditional' or 'both'");
    if (c.population != "observed" && c.population != "resimulated")
        throw ValidationError("test.population must be 'observed' or 'resimulated'");
    if (!(c.probability_ceiling >= 0.0 && c.probability_ceiling < 1.0))
        throw ValidationError("test.probability_ceiling must lie in [0, 1)");
    for (double d : c.grid) detail::require_positive(d, "converge.grid entries");
    c.resolved = std::move(j);
    return c;
}

}  // namespace spikesync
