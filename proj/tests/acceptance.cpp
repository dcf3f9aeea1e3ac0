// Acceptance runner: one PASS/FAIL line per criterion, exit status 1 when any
// criterion fails.
//
//   acceptance            run all eight criteria
//   acceptance 2 7        run only the listed ones

#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <set>
#include <string>
#include <vector>

#include "spikesync/config.hpp"
#include "spikesync/spikesync.hpp"
#include "support/fixtures.hpp"
#include "support/oracles.hpp"

namespace fs = std::filesystem;
using namespace spikesync;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// Independence calibration of the marginal bootstrap test.
Outcome calibration() {
    const int runs = 200;
    int rejections = 0;
    for (int k = 0; k < runs; ++k) {
        const auto data = fixtures::independent_pair(derive_seed(101, static_cast<std::uint64_t>(k)), 200);
        const auto b = bin_trains(data, 0.005);
        const SplineBasis basis(1.0, 0.1);
        const std::vector<IntensityFit> fits{fit_marginal_intensity(b, 0, basis), fit_marginal_intensity(b, 1, basis)};
        const auto obs = estimate_xi_pair(extract_joint_events(b, {0, 1}), fits[0], fits[1], Mode::marginal, b);
        TestSpec t;
        t.replicates = 500;
        t.seed = static_cast<std::uint64_t>(k);
        rejections += bootstrap_test(b, fits, obs, t).reject(0.05);
    }
    const double rate = static_cast<double>(rejections) / runs;
    return {rate >= 0.02 && rate <= 0.10, fmt("type-I rate %.3f (%d/%d) at alpha 0.05, B = 500", rate, rejections, runs)};
}

// Conditional estimate and power on the family with gamma = 2.
Outcome recovery() {
    const auto spec = fixtures::gamma_pair_spec(2.0, 0.001);
    const int runs = 50;
    std::vector<double> xi;
    int rejections = 0;
    for (int k = 0; k < runs; ++k) {
        const auto data = fixtures::family_experiment(spec, 200, derive_seed(2024, static_cast<std::uint64_t>(k)));
        const auto b = bin_trains(data, 0.001);
        const SplineBasis basis(1.0, 0.1);
        std::vector<IntensityFit> fits;
        for (int i : {0, 1}) {
            HistoryCovariateSpec h;
            h.exclusion = {1 - i};
            fits.push_back(fit_conditional_intensity(b, i, basis, h));
        }
        const auto obs = estimate_xi_pair(extract_joint_events(b, {0, 1}), fits[0], fits[1], Mode::conditional, b);
        TestSpec t;
        t.hypothesis = Hypothesis::pair_conditional;
        t.replicates = 100;
        t.seed = static_cast<std::uint64_t>(k);
        rejections += bootstrap_test(b, fits, obs, t).reject(0.05);
        xi.push_back(obs.xi_hat);
    }
    const double med = median(xi);
    const double power = static_cast<double>(rejections) / runs;
    return {med >= 2.55 && med <= 3.45 && power >= 0.8,
            fmt("median conditional xi %.3f (target 3, band [2.55, 3.45]), power %.2f over %d runs", med, power, runs)};
}

// Delta sweep of the zeta recursion on the demo pair family.
Outcome convergence() {
    const auto spec = marked_spec_from_json(load_toml(fs::path(SPIKESYNC_SOURCE_DIR) / "demo" / "pair_family.toml"));
    const auto rep = convergence_probe(spec, {0.008, 0.004, 0.002, 0.001}, 200, 7);
    // Monte-Carlo smoothing: a straight line through log error against log
    // delta; the smoothed error falls with delta exactly when its slope is positive.
    const double slope = rep.error_slope;
    const bool ok = slope >= 0.5 && slope <= 1.5 && std::abs(rep.single_slope - 1.0) <= 0.5 &&
                    std::abs(rep.pair_slope - 2.0) <= 0.5;
    std::string errors;
    for (double e : rep.error) errors += fmt("%.3f ", e);
    return {ok, fmt("errors %sat 8/4/2/1 ms, smoothed slope %.2f (raw monotone %s), sparsity slopes %.2f and %.2f",
                    errors.c_str(), slope, rep.monotone ? "yes" : "no", rep.single_slope, rep.pair_slope)};
}

// Marked-process log-density against the discretized cell product.
Outcome likelihood() {
    const std::vector<double> grid{0.001, 0.0005, 0.0002, 0.0001};
    std::vector<double> mean_rel;
    double worst_finest = 0.0;
    for (double delta : grid) {
        const auto spec = fixtures::gamma_pair_spec(1.0, delta);
        double sum = 0.0;
        for (std::uint64_t s = 0; s < 20; ++s) {
            const auto seq = simulate_marked(spec, derive_seed(44, s));
            const double continuous = loglik_marked(seq, spec).value;
            const double discrete = oracles::discretized_loglik(seq, spec, delta);
            const double rel = std::abs(continuous - discrete) / std::abs(continuous);
            sum += rel;
            if (delta == grid.back()) worst_finest = std::max(worst_finest, rel);
        }
        mean_rel.push_back(sum / 20.0);
    }
    bool decreasing = true;
    for (std::size_t g = 1; g < mean_rel.size(); ++g) decreasing = decreasing && mean_rel[g] < mean_rel[g - 1];
    std::string trend;
    for (double r : mean_rel) trend += fmt("%.2e ", r);
    return {worst_finest < 0.02 && decreasing,
            fmt("worst relative gap %.2e at 0.1 ms; mean gap %sat 1/0.5/0.2/0.1 ms", worst_finest, trend.c_str())};
}

// IPF against an independent textbook loop.
Outcome ipf() {
    Rng rng(19);
    double cell_gap = 0.0;
    double margin_gap = 0.0;
    for (int rep = 0; rep < 100; ++rep) {
        Table3 t{};
        for (auto& v : t) v = 1.0 + 200.0 * rng.uniform();
        double total = 0.0;
        for (double v : t) total += v;
        const auto r = ipf_fit_triple(t);
        const auto o = oracles::textbook_ipf(t);
        for (std::size_t c = 0; c < 8; ++c) cell_gap = std::max(cell_gap, std::abs(r.fitted[c] - o[c]));
        for (int a = 0; a < 3; ++a)
            for (int b = a + 1; b < 3; ++b) {
                double l1 = 0.0;
                for (int u = 0; u < 2; ++u)
                    for (int v = 0; v < 2; ++v) {
                        double fit = 0.0;
                        double obs = 0.0;
                        for (std::size_t c = 0; c < 8; ++c)
                            if (static_cast<int>((c >> a) & 1) == u && static_cast<int>((c >> b) & 1) == v) {
                                fit += r.fitted[c];
                                obs += t[c] / total;
                            }
                        l1 += std::abs(fit - obs);
                    }
                margin_gap = std::max(margin_gap, l1);
            }
    }
    return {cell_gap <= 1e-8 && margin_gap <= 1e-10,
            fmt("max cell gap %.1e, max two-way margin L1 %.1e over 100 tables", cell_gap, margin_gap)};
}

// Intensity fitting: closed form, sine recovery, score at the optimum.
Outcome intensity() {
    Rng rng(77);
    BinnedTensor t(50, 1, 400, 0.0025);
    std::size_t total = 0;
    for (std::size_t r = 0; r < 50; ++r)
        for (std::size_t m = 0; m < 400; ++m) {
            const bool s = rng.bernoulli(0.05);
            t.set(r, 0, m, s);
            total += s;
        }
    DesignMatrix d = build_marginal_design(t, 0, SplineBasis(1.0, 0.1));
    d.x = d.x.leftCols(1).eval();
    const double closed = static_cast<double>(total) / (50 * 400 * 0.0025);
    const double rel = std::abs(std::exp(fit_poisson_irls(d).beta[0]) - closed) / closed;

    auto truth = [](double s) { return 20.0 + 10.0 * std::sin(2.0 * M_PI * s); };
    auto sine = fixtures::empty_experiment(200, 1, 1.0);
    Rng srng(31);
    for (auto& trial : sine.trials) trial[0].times = fixtures::poisson_train(truth, 30.0, 1.0, srng);
    const auto fit = fit_marginal_intensity(bin_trains(sine, 0.001), 0, SplineBasis(1.0, 0.1));
    double se = 0.0;
    for (std::size_t m = 0; m < 1000; ++m) {
        const double s = (static_cast<double>(m) + 0.5) * 0.001;
        se += std::pow(eval_intensity(fit, s) - truth(s), 2);
    }
    const double rmse = std::sqrt(se / 1000.0);

    double worst_score = 0.0;
    const auto b = bin_trains(fixtures::independent_pair(5, 60), 0.005);
    for (int neuron : {0, 1}) {
        const auto dm = build_marginal_design(b, neuron, SplineBasis(1.0, 0.1));
        const auto f = fit_poisson_irls(dm);
        const double ll = poisson_loglik(dm, f.beta);
        worst_score = std::max(worst_score, poisson_score(dm, f.beta).cwiseAbs().maxCoeff() / (1e-6 * (1.0 + std::abs(ll))));
    }
    return {rel <= 1e-6 && rmse < 2.0 && worst_score < 1.0,
            fmt("closed-form relative error %.1e, sine RMSE %.2f sp/s, score at %.1e of its bound", rel, rmse, worst_score)};
}

// Cross-validated ROC on up-state data, plus AUC against Mann-Whitney.
Outcome roc() {
    const int reps = 50;
    int wins = 0;
    for (int k = 0; k < reps; ++k) {
        const auto data = fixtures::upstate_experiment(derive_seed(700, static_cast<std::uint64_t>(k)), {.trials = 100});
        const auto b = bin_trains(data, 0.005);
        RocOptions opt;
        opt.seed = static_cast<std::uint64_t>(k);
        const auto m = cv_roc(b, {0, 1}, Mode::marginal, opt);
        const auto c = cv_roc(b, {0, 1}, Mode::conditional, opt);
        wins += c.curve.auc > m.curve.auc;
    }
    Rng rng(5);
    double gap = 0.0;
    for (int rep = 0; rep < 200; ++rep) {
        const std::size_t n = 2 + rng.below(40);
        std::vector<double> s(n);
        std::vector<std::uint8_t> l(n);
        for (std::size_t i = 0; i < n; ++i) {
            s[i] = static_cast<double>(rng.below(8));
            l[i] = rng.bernoulli(0.4);
        }
        l[0] = 1;
        l[1] = 0;
        gap = std::max(gap, std::abs(roc_curve(s, l).auc - oracles::mann_whitney(s, l)));
    }
    return {wins >= 45 && gap <= 1e-9,
            fmt("conditional AUC above marginal in %d/%d repetitions; max AUC gap to Mann-Whitney %.1e", wins, reps, gap)};
}

// Every CLI command byte-identical across reruns and thread counts.
int run_cli(const std::string& args) {
    const std::string cmd = std::string("\"") + SPIKESYNC_CLI_PATH + "\" " + args + " 2>/dev/null";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

Outcome determinism() {
    const auto dir = fs::temp_directory_path() / "spikesync_acceptance";
    fs::remove_all(dir);
    fs::create_directories(dir);
    save_experiment(fixtures::upstate_experiment(5, {.trials = 40, .population = 4}), dir / "up.csv", EventFormat::csv);
    const auto spec = (fs::path(SPIKESYNC_SOURCE_DIR) / "demo" / "pair_family.toml").string();
    write_file(dir / "run.toml", "seed = 11\n[data]\ninput = \"" + (dir / "up.csv").string() +
                                     "\"\n[fit]\nmode = \"conditional\"\n[test]\nreplicates = 100\n"
                                     "[simulate]\nreps = 20\nspec = \"" + spec + "\"\n[converge]\nreps = 50\nspec = \"" +
                                     spec + "\"\n");
    const auto out = dir / "out";
    std::string failed;
    for (const std::string cmd : {"fit", "test", "simulate", "converge", "roc"}) {
        std::vector<std::vector<std::pair<std::string, std::string>>> runs;
        for (const std::string threads : {"1", "1", "2", "4"}) {
            fs::remove_all(out);
            if (run_cli(cmd + " -c \"" + (dir / "run.toml").string() + "\" -o \"" + out.string() + "\" --threads " +
                        threads) != 0) {
                failed += cmd + "(exit) ";
                break;
            }
            std::vector<std::pair<std::string, std::string>> files;
            for (const auto& e : fs::directory_iterator(out))
                files.emplace_back(e.path().filename().string(), read_file(e.path()));
            std::sort(files.begin(), files.end());
            runs.push_back(std::move(files));
        }
        if (runs.size() == 4 && !(runs[0] == runs[1] && runs[0] == runs[2] && runs[0] == runs[3])) failed += cmd + " ";
    }
    return {failed.empty(), failed.empty() ? "fit, test, simulate, converge and roc identical over threads 1, 1, 2, 4"
                                           : "outputs differ for: " + failed};
}

}  // namespace

int main(int argc, char** argv) {
    const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
        {"independence calibration", calibration}, {"xi recovery", recovery},   {"convergence probe", convergence},
        {"likelihood correspondence", likelihood},  {"IPF equivalence", ipf},    {"intensity fitting", intensity},
        {"ROC reproduction", roc},                  {"determinism", determinism}};
    std::set<int> only;
    for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
    bool all = true;
    for (std::size_t k = 0; k < criteria.size(); ++k) {
        const int id = static_cast<int>(k) + 1;
        if (!only.empty() && !only.count(id)) continue;
        const auto start = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = criteria[k].second();
        } catch (const std::exception& e) {
            o = {false, std::string("error: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        std::printf("criterion %d %s: %s: %s (%.1f s)\n", id, o.pass ? "PASS" : "FAIL", criteria[k].first,
                    o.detail.c_str(), secs);
        std::fflush(stdout);
        all = all && o.pass;
    }
    return all ? 0 : 1;
}
