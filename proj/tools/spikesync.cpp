// spikesync: fit, test, simulate, converge, roc.
//
// Exit codes: 0 success (including statistically degenerate tests, which are
// reported in the output), 2 missing input file, 3 invalid configuration or
// data, 1 any other failure.

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "spikesync/config.hpp"
#include "spikesync/spikesync.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace spikesync;

namespace {

struct Cli {
    std::string config_path;
    unsigned threads = default_threads();
    json overrides = json::object();
};

json envelope(const std::string& command, const RunConfig& cfg) {
    return {{"command", command}, {"version", kVersion}, {"config", cfg.resolved}};
}

void write_json(const fs::path& path, const json& j) { write_file(path, j.dump(2) + "\n"); }

json null_if_nan(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

struct Loaded {
    ExperimentData data;
    BinnedTensor binned;
};

Loaded load_data(const RunConfig& cfg) {
    if (cfg.input.empty()) throw ValidationError("no input file given (data.input or --input)");
    const auto format = cfg.format.empty() ? format_from_path(cfg.input) : parse_format(cfg.format);
    std::optional<ExperimentMeta> meta;
    if (!cfg.meta.empty()) meta = load_meta(cfg.meta);
    Loaded out;
    out.data = load_experiment(cfg.input, format, meta);
    out.binned = bin_trains(out.data, cfg.delta);
    return out;
}

int index_of(const ExperimentData& data, int label) {
    for (int i = 0; i < data.neuron_count; ++i)
        if (data.label_of(i) == label) return i;
    throw ValidationError("neuron " + std::to_string(label) + " is not in the data");
}

NeuronSet indices_of(const ExperimentData& data, const std::vector<int>& labels) {
    NeuronSet out;
    for (int l : labels) out.push_back(index_of(data, l));
    return out;
}

SplineBasis basis_for(const RunConfig& cfg, const BinnedTensor& binned) {
    return SplineBasis(binned.duration(), cfg.knot_spacing);
}

HistoryCovariateSpec history_for(const RunConfig& cfg, const ExperimentData& data, const NeuronSet& partners) {
    HistoryCovariateSpec h;
    h.own_window = cfg.own_window;
    h.population_window = cfg.population_window;
    h.use_population = cfg.use_population;
    for (int l : cfg.exclusion) h.exclusion.push_back(index_of(data, l));
    for (int p : partners)
        if (std::find(h.exclusion.begin(), h.exclusion.end(), p) == h.exclusion.end()) h.exclusion.push_back(p);
    return h;
}

IntensityFit fit_one(const RunConfig& cfg, const Loaded& in, int neuron, Mode mode, const NeuronSet& group) {
    IrlsOptions opt;
    opt.ridge = cfg.ridge;
    const auto basis = basis_for(cfg, in.binned);
    if (mode == Mode::marginal) return fit_marginal_intensity(in.binned, neuron, basis, opt);
    NeuronSet partners;
    for (int g : group)
        if (g != neuron) partners.push_back(g);
    return fit_conditional_intensity(in.binned, neuron, basis, history_for(cfg, in.data, partners), opt);
}

// ---------------------------------------------------------------- fit

int cmd_fit(const RunConfig& cfg, const std::vector<int>& labels_in) {
    const auto in = load_data(cfg);
    std::vector<int> labels = labels_in;
    if (labels.empty())
        for (int i = 0; i < in.data.neuron_count; ++i) labels.push_back(in.data.label_of(i));
    const Mode mode = parse_mode(cfg.fit_mode);
    const auto group = indices_of(in.data, labels);
    json summary = envelope("fit", cfg);
    summary["fits"] = json::array();
    for (int label : labels) {
        const int i = index_of(in.data, label);
        const auto marginal = fit_one(cfg, in, i, Mode::marginal, group);
        json doc = envelope("fit", cfg);
        doc["neuron"] = label;
        doc["marginal"] = intensity_fit_to_json(marginal);
        doc["marginal"]["neuron"] = label;
        if (mode == Mode::conditional) {
            const auto cond = fit_one(cfg, in, i, Mode::conditional, group);
            doc["conditional"] = intensity_fit_to_json(cond);
            doc["conditional"]["neuron"] = label;
        }
        write_json(cfg.output / ("fit_" + std::to_string(label) + ".json"), doc);

        std::string csv = "t,lambda\n";
        for (std::size_t m = 0; m < in.binned.bins(); ++m) {
            const double t = (static_cast<double>(m) + 0.5) * cfg.delta;
            csv += format_number(t) + "," + format_number(eval_intensity(marginal, t)) + "\n";
        }
        write_file(cfg.output / ("psth_" + std::to_string(label) + ".csv"), csv);
        std::size_t spikes = 0;
        for (const auto& trial : in.data.trials) spikes += trial[static_cast<std::size_t>(i)].times.size();
        summary["fits"].push_back({{"neuron", label},
                                   {"spikes", spikes},
                                   {"deviance", marginal.deviance},
                                   {"iterations", marginal.iterations}});
    }
    summary["trials"] = in.data.trial_count();
    summary["bins"] = in.binned.bins();
    summary["clamped_spikes"] = in.binned.clamp_count;
    summary["discarded_spikes"] = in.binned.discarded_spikes;
    write_json(cfg.output / "fit.json", summary);
    return 0;
}

// ---------------------------------------------------------------- test

json test_report(const RunConfig& cfg, unsigned threads) {
    json rep = envelope("test", cfg);
    const auto hyp = parse_hypothesis(cfg.hypothesis);
    Mode mode = parse_mode(cfg.fit_mode);
    if (hyp == Hypothesis::pair_marginal) mode = Mode::marginal;
    if (hyp == Hypothesis::pair_conditional) mode = Mode::conditional;
    const bool triple = hyp == Hypothesis::triple;

    rep["status"] = "ok";
    rep["message"] = nullptr;
    rep["hypothesis"] = to_string(hyp);
    rep["mode"] = to_string(mode);
    rep["neurons"] = cfg.test_neurons;
    rep["lag"] = cfg.lag;
    rep["delta"] = cfg.delta;
    rep["B"] = cfg.replicates;
    rep["seed"] = cfg.seed;
    rep["alpha"] = cfg.alpha;
    for (const char* k : {"N", "expected", "xi_hat", "log_xi", "se", "z", "p_normal", "p_empirical", "undefined_count",
                          "reject"})
        rep[k] = nullptr;
    rep["warnings"] = json::array();

    if (cfg.test_neurons.size() != (triple ? 3U : 2U))
        throw ValidationError(std::string("test.neurons must list ") + (triple ? "three" : "two") + " neurons");
    const auto in = load_data(cfg);
    const auto group = indices_of(in.data, cfg.test_neurons);

    TestSpec spec;
    spec.hypothesis = hyp;
    spec.replicates = cfg.replicates;
    spec.alpha = cfg.alpha;
    spec.seed = cfg.seed;
    spec.refit = cfg.refit;
    spec.population = cfg.population == "observed" ? PopulationSource::observed : PopulationSource::resimulated;
    spec.probability_ceiling = cfg.probability_ceiling;
    spec.threads = threads;
    if (hyp == Hypothesis::pair_lagged) {
        const double ratio = cfg.lag / cfg.delta;
        if (std::abs(ratio - std::round(ratio)) > 1e-6 || std::round(ratio) < 1.0)
            throw ValidationError("test.lag must be a positive whole number of bins");
        spec.lag_bins = static_cast<std::size_t>(std::round(ratio));
    }

    try {
        std::vector<IntensityFit> fits;
        for (int i : group) fits.push_back(fit_one(cfg, in, i, mode, group));
        XiEstimate observed = detail::statistic_on(in.binned, fits, spec, mode);
        rep["N"] = observed.n_joint;
        rep["expected"] = observed.expected_joint;
        rep["xi_hat"] = observed.xi_hat;
        rep["log_xi"] = observed.log_xi ? json(*observed.log_xi) : json(nullptr);
        const auto boot = bootstrap_test(in.binned, fits, observed, spec);
        rep["se"] = boot.se;
        rep["z"] = boot.z ? json(*boot.z) : json(nullptr);
        rep["p_normal"] = boot.p_normal ? json(*boot.p_normal) : json(nullptr);
        rep["p_empirical"] = boot.p_empirical;
        rep["undefined_count"] = boot.undefined_count;
        rep["reject"] = boot.reject(cfg.alpha);
        rep["warnings"] = boot.warnings;
    } catch (const DegenerateError& e) {
        rep["status"] = "degenerate";
        rep["message"] = e.what();
    } catch (const InsufficientEventsError& e) {
        rep["status"] = "degenerate";
        rep["message"] = e.what();
    }
    return rep;
}

int cmd_test(const RunConfig& cfg, unsigned threads) {
    write_json(cfg.output / "test_report.json", test_report(cfg, threads));
    return 0;
}

// ---------------------------------------------------------------- simulate

MarkedProcessSpec load_spec(const fs::path& path) {
    if (path.empty()) throw ValidationError("no process spec given (spec or --spec)");
    if (!fs::exists(path)) throw IoError("spec file not found: " + path.string());
    const auto j = path.extension() == ".json" ? json::parse(read_file(path)) : load_toml(path);
    return marked_spec_from_json(j);
}

int cmd_simulate(const RunConfig& cfg, unsigned threads) {
    const auto spec = load_spec(cfg.simulate_spec);
    std::vector<MarkedEventSequence> seqs(cfg.simulate_reps);
    parallel_for(seqs.size(), threads, [&](std::size_t r) { seqs[r] = simulate_marked(spec, derive_seed(cfg.seed, r)); });
    write_file(cfg.output / "simulated.csv", sequences_to_csv(seqs, spec));
    write_file(cfg.output / "simulated.meta.json", meta_to_string(sequences_to_experiment(seqs, spec)));
    json doc = envelope("simulate", cfg);
    doc["spec"] = marked_spec_to_json(spec);
    std::size_t events = 0;
    std::size_t shared = 0;
    for (const auto& s : seqs) {
        events += s.events.size();
        for (const auto& e : s.events) shared += e.interaction >= 0 ? 1 : 0;
    }
    doc["realizations"] = seqs.size();
    doc["events"] = events;
    doc["shared_marks"] = shared;
    write_json(cfg.output / "simulate.json", doc);
    return 0;
}

// ---------------------------------------------------------------- converge

int cmd_converge(const RunConfig& cfg, unsigned threads) {
    const auto spec = load_spec(cfg.converge_spec);
    ConvergenceOptions opt;
    opt.subset.clear();
    for (int l : cfg.converge_neurons) opt.subset.push_back(l - 1);
    opt.conditional = cfg.converge_conditional;
    opt.threads = threads;
    const auto report = convergence_probe(spec, cfg.grid, cfg.converge_reps, cfg.seed, opt);
    json doc = envelope("converge", cfg);
    doc["report"] = convergence_report_to_json(report);
    doc["slope"] = doc["report"]["slope"];
    write_json(cfg.output / "converge.json", doc);
    return 0;
}

// ---------------------------------------------------------------- roc

int cmd_roc(const RunConfig& cfg, unsigned threads) {
    if (cfg.roc_neurons.size() != 2) throw ValidationError("roc.neurons must list two neurons");
    const auto in = load_data(cfg);
    const auto pair = indices_of(in.data, cfg.roc_neurons);
    std::vector<Mode> modes;
    if (cfg.roc_mode != "conditional") modes.push_back(Mode::marginal);
    if (cfg.roc_mode != "marginal") modes.push_back(Mode::conditional);

    RocOptions opt;
    opt.folds = cfg.folds;
    opt.seed = cfg.seed;
    opt.knot_spacing = cfg.knot_spacing;
    opt.history = history_for(cfg, in.data, {});
    opt.irls.ridge = cfg.ridge;
    opt.threads = threads;

    json doc = envelope("roc", cfg);
    doc["folds"] = cfg.folds;
    doc["seed"] = cfg.seed;
    doc["models"] = json::object();
    for (Mode m : modes) {
        const auto res = cv_roc(in.binned, pair, m, opt);
        const std::string name = to_string(m);
        std::string csv = "threshold,fpr,tpr\n";
        for (std::size_t k = 0; k < res.curve.thresholds.size(); ++k)
            csv += format_number(res.curve.thresholds[k]) + "," + format_number(res.curve.fpr[k]) + "," +
                   format_number(res.curve.tpr[k]) + "\n";
        write_file(cfg.output / ("roc_" + name + ".csv"), csv);

        const auto pred = res.predict_joint_at_fpr(cfg.target_fpr);
        std::string pcsv = "trial,bin,time,joint\n";
        for (auto idx : pred.predicted)
            pcsv += std::to_string(res.trial[idx] + 1) + "," + std::to_string(res.bin[idx]) + "," +
                    format_number((static_cast<double>(res.bin[idx]) + 0.5) * cfg.delta) + "," +
                    std::to_string(res.labels[idx]) + "\n";
        write_file(cfg.output / ("predictions_" + name + ".csv"), pcsv);

        doc["models"][name] = {{"auc", res.curve.auc},
                               {"positives", res.curve.positives},
                               {"negatives", res.curve.negatives},
                               {"target_fpr", cfg.target_fpr},
                               {"threshold_at_target", null_if_nan(pred.threshold)},
                               {"fpr_at_target", pred.fpr},
                               {"tpr_at_target", pred.tpr},
                               {"fold_xi", res.fold_xi}};
    }
    write_json(cfg.output / "roc.json", doc);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"spikesync: excess synchronous spiking with loglinear point-process models"};
    app.require_subcommand(1);
    app.fallthrough();  // global options may follow the subcommand
    Cli cli;
    std::optional<std::uint64_t> seed;
    std::string output;
    app.add_option("-c,--config", cli.config_path, "TOML run configuration");
    app.add_option("--seed", seed, "root random seed");
    app.add_option("-o,--output", output, "output directory");
    app.add_option("--threads", cli.threads, "worker threads (results do not depend on this)")
        ->check(CLI::PositiveNumber);
    app.set_version_flag("--version", std::string(kVersion));

    struct DataOpts {
        std::string input, format, meta;
        std::optional<double> delta, knot_spacing;
        std::string mode;
    };
    auto add_data = [](CLI::App* sub, DataOpts& d) {
        sub->add_option("-i,--input", d.input, "spike event file (CSV or NDJSON)");
        sub->add_option("--format", d.format, "csv or ndjson (default: from the extension)");
        sub->add_option("--meta", d.meta, "metadata JSON (default: <input stem>.meta.json)");
        sub->add_option("--delta", d.delta, "bin width in seconds");
        sub->add_option("--knot-spacing", d.knot_spacing, "spline knot spacing in seconds");
    };

    DataOpts fit_d, test_d, roc_d;
    std::vector<int> fit_neurons;
    auto* fit = app.add_subcommand("fit", "fit smoothed PSTHs and history-dependent intensities");
    add_data(fit, fit_d);
    fit->add_option("--mode", fit_d.mode, "marginal or conditional");
    fit->add_option("--neurons", fit_neurons, "neuron labels to fit (default: all)");

    std::vector<int> test_neurons;
    std::string hypothesis, population;
    std::optional<double> lag, alpha;
    std::optional<std::size_t> replicates;
    bool refit = false;
    auto* test = app.add_subcommand("test", "parametric bootstrap test of excess synchrony");
    add_data(test, test_d);
    test->add_option("--mode", test_d.mode, "intensity mode for lagged and triple tests");
    test->add_option("--neurons", test_neurons, "two (pair) or three (triple) neuron labels");
    test->add_option("--hypothesis", hypothesis, "pair-marginal, pair-conditional, pair-lagged or triple");
    test->add_option("--lag", lag, "lag in seconds (pair-lagged)");
    test->add_option("-B,--replicates", replicates, "bootstrap replicates");
    test->add_option("--alpha", alpha, "significance level");
    test->add_flag("--refit", refit, "refit intensities on every replicate");
    test->add_option("--population", population, "observed or resimulated population covariate");

    std::string sim_spec;
    std::optional<std::size_t> sim_reps;
    auto* simulate = app.add_subcommand("simulate", "simulate the marked point process family");
    simulate->add_option("--spec", sim_spec, "process spec (TOML or JSON)");
    simulate->add_option("--reps", sim_reps, "number of realizations");

    std::string conv_spec;
    std::vector<double> grid;
    std::vector<int> conv_neurons;
    std::optional<std::size_t> conv_reps;
    bool conditional = false;
    auto* converge = app.add_subcommand("converge", "delta-sweep convergence probe of the zeta recursion");
    converge->add_option("--spec", conv_spec, "process spec (TOML or JSON)");
    converge->add_option("--grid", grid, "decreasing bin widths in seconds");
    converge->add_option("--reps", conv_reps, "realizations per grid point");
    converge->add_option("--neurons", conv_neurons, "neuron labels of the probed subset");
    converge->add_flag("--conditional", conditional, "estimate on the quiescent-history stratum");

    std::vector<int> roc_neurons;
    std::optional<std::size_t> folds;
    std::optional<double> target_fpr;
    auto* roc = app.add_subcommand("roc", "cross-validated ROC of marginal and conditional joint-spike prediction");
    add_data(roc, roc_d);
    roc->add_option("--mode", roc_d.mode, "marginal, conditional or both");
    roc->add_option("--neurons", roc_neurons, "two neuron labels");
    roc->add_option("--folds", folds, "cross-validation folds");
    roc->add_option("--target-fpr", target_fpr, "false-positive rate for the prediction table");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    json& o = cli.overrides;
    if (seed) o["seed"] = *seed;
    if (!output.empty()) o["output"] = output;
    auto put_data = [&](const DataOpts& d) {
        if (!d.input.empty()) o["data"]["input"] = d.input;
        if (!d.format.empty()) o["data"]["format"] = d.format;
        if (!d.meta.empty()) o["data"]["meta"] = d.meta;
        if (d.delta) o["fit"]["delta"] = *d.delta;
        if (d.knot_spacing) o["fit"]["knot_spacing"] = *d.knot_spacing;
    };
    if (fit->parsed()) {
        put_data(fit_d);
        if (!fit_d.mode.empty()) o["fit"]["mode"] = fit_d.mode;
    }
    if (test->parsed()) {
        put_data(test_d);
        if (!test_d.mode.empty()) o["fit"]["mode"] = test_d.mode;
        if (!test_neurons.empty()) o["test"]["neurons"] = test_neurons;
        if (!hypothesis.empty()) o["test"]["hypothesis"] = hypothesis;
        if (lag) o["test"]["lag"] = *lag;
        if (replicates) o["test"]["replicates"] = *replicates;
        if (alpha) o["test"]["alpha"] = *alpha;
        if (refit) o["test"]["refit"] = true;
        if (!population.empty()) o["test"]["population"] = population;
    }
    if (simulate->parsed()) {
        if (!sim_spec.empty()) o["simulate"]["spec"] = sim_spec;
        if (sim_reps) o["simulate"]["reps"] = *sim_reps;
    }
    if (converge->parsed()) {
        if (!conv_spec.empty()) o["converge"]["spec"] = conv_spec;
        if (!grid.empty()) o["converge"]["grid"] = grid;
        if (conv_reps) o["converge"]["reps"] = *conv_reps;
        if (!conv_neurons.empty()) o["converge"]["neurons"] = conv_neurons;
        if (conditional) o["converge"]["conditional"] = true;
    }
    if (roc->parsed()) {
        put_data(roc_d);
        if (!roc_d.mode.empty()) o["roc"]["mode"] = roc_d.mode;
        if (!roc_neurons.empty()) o["roc"]["neurons"] = roc_neurons;
        if (folds) o["roc"]["folds"] = *folds;
        if (target_fpr) o["roc"]["target_fpr"] = *target_fpr;
    }

    try {
        json file;
        if (!cli.config_path.empty()) {
            if (!fs::exists(cli.config_path)) throw IoError("config file not found: " + cli.config_path);
            file = load_toml(cli.config_path);
        }
        const auto cfg = resolve_config(file, o);
        fs::create_directories(cfg.output);
        if (fit->parsed()) return cmd_fit(cfg, fit_neurons);
        if (test->parsed()) return cmd_test(cfg, cli.threads);
        if (simulate->parsed()) return cmd_simulate(cfg, cli.threads);
        if (converge->parsed()) return cmd_converge(cfg, cli.threads);
        if (roc->parsed()) return cmd_roc(cfg, cli.threads);
    } catch (const IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const ValidationError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const ParseError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const ArgumentError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
