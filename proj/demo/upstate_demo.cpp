// Simulates trials with network up-states that drive shared spikes, then
// compares the marginal (PSTH) and history-conditional accounts of the
// excess synchrony between the first two neurons.
//
//   upstate_demo [seed] [trials]

#include <cstdio>
#include <cstdlib>
#include <string>

#include "spikesync/spikesync.hpp"

using namespace spikesync;

namespace {

// Same construction as the test fixture, kept local so the demo stands alone.
ExperimentData upstate_trials(std::uint64_t seed, std::size_t trials) {
    const int neurons = 10;
    ExperimentData d;
    d.duration = 1.0;
    d.neuron_count = neurons;
    for (int i = 0; i < neurons; ++i) d.neuron_labels.push_back(i + 1);
    Rng rng(seed);
    auto train = [&](auto rate, double bound) {
        std::vector<double> out;
        for (double t = rng.exponential(bound); t < 1.0; t += rng.exponential(bound))
            if (rng.uniform() * bound < rate(t)) out.push_back(t);
        return out;
    };
    for (std::size_t r = 0; r < trials; ++r) {
        const double len = 0.15 + 0.15 * rng.uniform();
        const double start = rng.uniform() * (1.0 - len);
        auto up = [&](double t) { return t >= start && t < start + len; };
        std::vector<SpikeTrain> trial(neurons);
        for (auto& s : trial) s.times = train([&](double t) { return up(t) ? 35.0 : 4.0; }, 35.0);
        for (double t : train([&](double t) { return up(t) ? 25.0 : 0.0; }, 25.0)) {
            trial[0].times.push_back(t);
            trial[1].times.push_back(t);
        }
        for (auto& s : trial) {
            std::sort(s.times.begin(), s.times.end());
            s.times.erase(std::unique(s.times.begin(), s.times.end()), s.times.end());
        }
        d.trials.push_back(std::move(trial));
    }
    return d;
}

}  // namespace

int main(int argc, char** argv) {
    const std::uint64_t seed = argc > 1 ? std::strtoull(argv[1], nullptr, 10) : 1;
    const std::size_t trials = argc > 2 ? std::strtoull(argv[2], nullptr, 10) : 100;
    const double delta = 0.005;

    const auto binned = bin_trains(upstate_trials(seed, trials), delta);
    const SplineBasis basis(1.0, 0.1);
    const auto events = extract_joint_events(binned, {0, 1});
    std::printf("%zu trials, %zu joint spikes of neurons 1 and 2 at %.0f ms\n", trials, events.count(), delta * 1e3);

    for (Mode mode : {Mode::marginal, Mode::conditional}) {
        std::vector<IntensityFit> fits;
        for (int i : {0, 1}) {
            if (mode == Mode::marginal) {
                fits.push_back(fit_marginal_intensity(binned, i, basis));
            } else {
                HistoryCovariateSpec h;
                h.exclusion = {1 - i};
                fits.push_back(fit_conditional_intensity(binned, i, basis, h));
            }
        }
        const auto est = estimate_xi_pair(events, fits[0], fits[1], mode, binned);
        TestSpec spec;
        spec.hypothesis = mode == Mode::marginal ? Hypothesis::pair_marginal : Hypothesis::pair_conditional;
        spec.replicates = 200;
        spec.seed = seed;
        const auto boot = bootstrap_test(binned, fits, est, spec);

        RocOptions ropt;
        ropt.seed = seed;
        const auto roc = cv_roc(binned, {0, 1}, mode, ropt);
        const auto at10 = roc.predict_joint_at_fpr(0.10);

        std::printf("%-12s xi = %.3f  log xi = %.3f +- %.3f  z = %.2f  p = %.2g  AUC = %.3f  TPR@10%%FPR = %.2f\n",
                    to_string(mode), est.xi_hat, est.log_xi.value_or(0.0), boot.se, boot.z.value_or(0.0),
                    boot.p_normal.value_or(boot.p_empirical), roc.curve.auc, at10.tpr);
    }
    return 0;
}
