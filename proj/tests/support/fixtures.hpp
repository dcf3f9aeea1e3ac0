#pragma once

// Synthetic data sets shared by the unit tests and the acceptance runner.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "spikesync/rng.hpp"
#include "spikesync/simulate.hpp"
#include "spikesync/spikedata.hpp"

namespace fixtures {

using spikesync::ExperimentData;
using spikesync::Rng;
using spikesync::SpikeTrain;

using RateFn = std::function<double(double)>;

/// Inhomogeneous Poisson train on [0, T) by thinning.
inline std::vector<double> poisson_train(const RateFn& rate, double rate_max, double duration, Rng& rng) {
    std::vector<double> out;
    double t = 0.0;
    for (;;) {
        t += rng.exponential(rate_max);
        if (t >= duration) break;
        if (rng.uniform() * rate_max < rate(t)) out.push_back(t);
    }
    return out;
}

inline ExperimentData empty_experiment(std::size_t trials, int neurons, double duration) {
    ExperimentData d;
    d.duration = duration;
    d.neuron_count = neurons;
    for (int i = 0; i < neurons; ++i) d.neuron_labels.push_back(i + 1);
    d.trials.assign(trials, std::vector<SpikeTrain>(static_cast<std::size_t>(neurons)));
    return d;
}

inline double rate1(double t) { return 30.0 + 15.0 * std::sin(6.283185307179586 * t); }
inline double rate2(double t) { return 20.0 + 25.0 * std::exp(-0.5 * std::pow((t - 0.5) / 0.12, 2)); }

/// Two independent inhomogeneous Poisson neurons (rates at most 50 sp/s).
inline ExperimentData independent_pair(std::uint64_t seed, std::size_t trials = 200, double duration = 1.0) {
    auto d = empty_experiment(trials, 2, duration);
    Rng rng(seed);
    for (auto& trial : d.trials) {
        trial[0].times = poisson_train(rate1, 45.0, duration, rng);
        trial[1].times = poisson_train(rate2, 45.0, duration, rng);
    }
    return d;
}

/// Two-neuron member of the synchronous marked-process family with a
/// constant interaction gamma.
inline spikesync::MarkedProcessSpec gamma_pair_spec(double gamma, double delta, double rate = 20.0,
                                                    double duration = 1.0) {
    spikesync::MarkedProcessSpec s;
    s.duration = duration;
    s.delta = delta;
    s.theta = 0.002;
    s.neurons = {{spikesync::RateCurve::constant_value(rate)}, {spikesync::RateCurve::sine(rate, 0.4 * rate, 2.0)}};
    if (gamma > 0.0) s.interactions = {{{0, 1}, spikesync::RateCurve::constant_value(gamma)}};
    return s;
}

/// R realizations of a marked-process spec as an experiment.
inline ExperimentData family_experiment(const spikesync::MarkedProcessSpec& spec, std::size_t trials,
                                        std::uint64_t seed) {
    std::vector<spikesync::MarkedEventSequence> seqs(trials);
    for (std::size_t r = 0; r < trials; ++r) seqs[r] = spikesync::simulate_marked(spec, spikesync::derive_seed(seed, r));
    return spikesync::sequences_to_experiment(seqs, spec);
}

/// Up-state fixture: every trial holds one or two network bursts at random
/// times. During a burst all neurons fire faster and the first two neurons
/// share extra synchronous spikes; burst timing varies across trials, so a
/// trial-averaged PSTH cannot locate it while the population history can.
struct UpStateOptions {
    std::size_t trials = 100;
    int population = 8;  // neurons besides the analysed pair
    double duration = 1.0;
    double down_rate = 4.0;
    double up_rate = 35.0;
    double joint_rate = 25.0;  // extra shared events per second inside a burst
};

inline ExperimentData upstate_experiment(std::uint64_t seed, const UpStateOptions& o = {}) {
    auto d = empty_experiment(o.trials, o.population + 2, o.duration);
    Rng rng(seed);
    for (auto& trial : d.trials) {
        std::vector<std::pair<double, double>> ups;
        const int count = 1 + static_cast<int>(rng.below(2));
        for (int k = 0; k < count; ++k) {
            const double len = 0.15 + 0.15 * rng.uniform();
            const double start = rng.uniform() * (o.duration - len);
            ups.emplace_back(start, start + len);
        }
        auto up = [&](double t) {
            for (const auto& [a, b] : ups)
                if (t >= a && t < b) return true;
            return false;
        };
        const RateFn rate = [&](double t) { return up(t) ? o.up_rate : o.down_rate; };
        for (auto& train : trial) train.times = poisson_train(rate, o.up_rate, o.duration, rng);
        const RateFn joint = [&](double t) { return up(t) ? o.joint_rate : 0.0; };
        for (double t : poisson_train(joint, o.joint_rate, o.duration, rng))
            for (int i = 0; i < 2; ++i) trial[static_cast<std::size_t>(i)].times.push_back(t);
        for (auto& train : trial) {
            auto& v = train.times;
            std::sort(v.begin(), v.end());
            v.erase(std::unique(v.begin(), v.end()), v.end());
        }
    }
    return d;
}

}  // namespace fixtures
