#include <catch_amalgamated.hpp>

#include "spikesync/rng.hpp"
#include "spikesync/spikedata.hpp"

using namespace spikesync;

namespace {

ExperimentData one_trial(std::vector<std::vector<double>> trains, double T = 1.0) {
    ExperimentData d;
    d.duration = T;
    d.neuron_count = static_cast<int>(trains.size());
    std::vector<SpikeTrain> trial;
    for (auto& t : trains) trial.push_back({t});
    d.trials.push_back(trial);
    return d;
}

BinnedTensor from_rows(const std::vector<std::vector<int>>& rows, double delta = 0.001) {
    BinnedTensor t(1, rows.size(), rows[0].size(), delta);
    for (std::size_t i = 0; i < rows.size(); ++i)
        for (std::size_t m = 0; m < rows[i].size(); ++m) t.set(0, i, m, static_cast<std::uint8_t>(rows[i][m]));
    return t;
}

BinnedTensor random_tensor(Rng& rng, std::size_t trials, std::size_t neurons, std::size_t bins, double p) {
    BinnedTensor t(trials, neurons, bins, 0.001);
    for (std::size_t r = 0; r < trials; ++r)
        for (std::size_t i = 0; i < neurons; ++i)
            for (std::size_t m = 0; m < bins; ++m) t.set(r, i, m, rng.bernoulli(p) ? 1 : 0);
    return t;
}

}  // namespace

TEST_CASE("spike at 0.0123 s lands in bin 2 at 5 ms", "[spikedata]") {
    const auto b = bin_trains(one_trial({{0.0123}}), 0.005);
    REQUIRE(b.bins() == 200);
    CHECK(b.at(0, 0, 2) == 1);
    CHECK(b.ones() == 1);
    CHECK(b.clamp_count == 0);
}

TEST_CASE("two spikes in one bin clamp to a single indicator", "[spikedata]") {
    const auto b = bin_trains(one_trial({{0.0101, 0.0104}}), 0.005);
    CHECK(b.at(0, 0, 2) == 1);
    CHECK(b.ones() == 1);
    CHECK(b.clamp_count == 1);
}

TEST_CASE("empty train bins to an all-zero row", "[spikedata]") {
    const auto b = bin_trains(one_trial({{}, {0.5}}), 0.01);
    for (auto v : b.row(0, 0)) CHECK(v == 0);
    CHECK(b.ones() == 1);
}

TEST_CASE("bin width must be positive and at most T", "[spikedata]") {
    const auto d = one_trial({{0.1}});
    CHECK_THROWS_AS(bin_trains(d, 0.0), ArgumentError);
    CHECK_THROWS_AS(bin_trains(d, -0.1), ArgumentError);
    CHECK_THROWS_AS(bin_trains(d, 2.0), ArgumentError);
}

TEST_CASE("durations that are not a multiple of delta drop the tail", "[spikedata]") {
    const auto b = bin_trains(one_trial({{0.1, 1.015}}, 1.025), 0.01);
    CHECK(b.bins() == 102);
    CHECK(b.discarded_tail == Catch::Approx(0.005).margin(1e-12));
    CHECK(b.discarded_spikes == 0);
    const auto c = bin_trains(one_trial({{0.1, 1.022}}, 1.025), 0.01);
    CHECK(c.discarded_spikes == 1);
}

TEST_CASE("ones plus clamps equals spike count", "[spikedata][property]") {
    Rng rng(11);
    for (int rep = 0; rep < 50; ++rep) {
        ExperimentData d;
        d.duration = 1.0;
        d.neuron_count = 3;
        for (int r = 0; r < 4; ++r) {
            std::vector<SpikeTrain> trial(3);
            for (auto& tr : trial) {
                const auto n = rng.below(40);
                for (std::size_t k = 0; k < n; ++k) tr.times.push_back(rng.uniform());
                std::sort(tr.times.begin(), tr.times.end());
                tr.times.erase(std::unique(tr.times.begin(), tr.times.end()), tr.times.end());
            }
            d.trials.push_back(trial);
        }
        const double delta = 0.001 * static_cast<double>(1 + rng.below(20));
        const auto b = bin_trains(d, delta);
        CHECK(b.ones() + b.clamp_count + b.discarded_spikes == d.spike_count());
    }
}

TEST_CASE("binning at delta then coarsening equals binning at k delta", "[spikedata][property]") {
    Rng rng(5);
    int checked = 0;
    for (int rep = 0; rep < 200; ++rep) {
        ExperimentData d;
        d.duration = 1.2;
        d.neuron_count = 2;
        std::vector<SpikeTrain> trial(2);
        for (auto& tr : trial) {
            for (int k = 0; k < 15; ++k) tr.times.push_back(rng.uniform() * 1.2);
            std::sort(tr.times.begin(), tr.times.end());
        }
        d.trials.push_back(trial);
        const std::size_t k = 2 + rng.below(4);
        const auto coarse = bin_trains(d, 0.004 * static_cast<double>(k));
        if (coarse.clamp_count != 0) continue;
        const auto fine = bin_trains(d, 0.004);
        const auto merged = coarsen(fine, k);
        REQUIRE(merged.bins() == coarse.bins());
        for (std::size_t i = 0; i < 2; ++i)
            for (std::size_t m = 0; m < coarse.bins(); ++m) CHECK(merged.at(0, i, m) == coarse.at(0, i, m));
        ++checked;
    }
    CHECK(checked > 20);
}

TEST_CASE("synchronous and lagged joint events on a small trial", "[spikedata]") {
    const auto t = from_rows({{1, 0, 1}, {1, 1, 0}});
    const auto sync = extract_joint_events(t, {0, 1});
    CHECK(sync.count() == 1);
    CHECK(sync.bins[0] == std::vector<std::size_t>{0});
    const auto lag = extract_joint_events(t, {0, 1}, 1);
    CHECK(lag.count() == 1);
    CHECK(lag.bins[0] == std::vector<std::size_t>{0});
}

TEST_CASE("joint event argument errors", "[spikedata]") {
    const auto t = from_rows({{1, 0, 1}, {1, 1, 0}, {0, 0, 1}});
    CHECK_THROWS_AS(extract_joint_events(t, {0}), ArgumentError);
    CHECK_THROWS_AS(extract_joint_events(t, {0, 1}, 3), ArgumentError);
    CHECK_THROWS_AS(extract_joint_events(t, {0, 1, 2}, 1), ArgumentError);
    CHECK_THROWS_AS(extract_joint_events(t, {0, 1}, 1, true), ArgumentError);
    CHECK_THROWS_AS(extract_joint_events(t, {0, 5}), ArgumentError);
    CHECK_THROWS_AS(extract_joint_events(t, {1, 1}), ArgumentError);
}

TEST_CASE("exclusive mode requires the other neurons to be silent", "[spikedata]") {
    const auto t = from_rows({{1, 1, 1}, {1, 1, 1}, {0, 1, 0}});
    CHECK(extract_joint_events(t, {0, 1}).count() == 3);
    const auto ex = extract_joint_events(t, {0, 1}, 0, true);
    CHECK(ex.count() == 2);
    CHECK(ex.bins[0] == std::vector<std::size_t>{0, 2});
}

TEST_CASE("joint counts match a brute-force loop on random tensors", "[spikedata][property]") {
    Rng rng(99);
    for (int rep = 0; rep < 40; ++rep) {
        const auto t = random_tensor(rng, 3, 4, 50, 0.3);
        const std::size_t lag = rng.below(5);
        std::size_t brute = 0;
        for (std::size_t r = 0; r < 3; ++r)
            for (std::size_t m = 0; m + lag < 50; ++m) brute += t.at(r, 1, m) * t.at(r, 3, m + lag);
        CHECK(extract_joint_events(t, {1, 3}, lag).count() == brute);

        std::size_t triple = 0;
        for (std::size_t r = 0; r < 3; ++r)
            for (std::size_t m = 0; m < 50; ++m) triple += t.at(r, 0, m) * t.at(r, 1, m) * t.at(r, 2, m);
        CHECK(extract_joint_events(t, {0, 1, 2}).count() == triple);
        // every listed bin really holds the pattern
        const auto ev = extract_joint_events(t, {1, 3}, lag);
        for (std::size_t r = 0; r < 3; ++r)
            for (auto m : ev.bins[r]) CHECK((t.at(r, 1, m) && t.at(r, 3, m + lag)));
    }
}

TEST_CASE("synchronous pair extraction is symmetric", "[spikedata][property]") {
    Rng rng(3);
    for (int rep = 0; rep < 20; ++rep) {
        const auto t = random_tensor(rng, 2, 3, 80, 0.4);
        CHECK(extract_joint_events(t, {0, 2}).bins == extract_joint_events(t, {2, 0}).bins);
    }
}

TEST_CASE("trial and neuron selection copy rows", "[spikedata]") {
    Rng rng(8);
    const auto t = random_tensor(rng, 4, 3, 20, 0.5);
    const auto n = t.select_neurons({2, 0});
    const auto r = t.select_trials({3, 1});
    for (std::size_t m = 0; m < 20; ++m) {
        CHECK(n.at(1, 0, m) == t.at(1, 2, m));
        CHECK(n.at(1, 1, m) == t.at(1, 0, m));
        CHECK(r.at(0, 1, m) == t.at(3, 1, m));
        CHECK(r.at(1, 2, m) == t.at(1, 2, m));
    }
}

TEST_CASE("experiment validation catches unsorted and out-of-range times", "[spikedata]") {
    auto d = one_trial({{0.2, 0.1}});
    CHECK_THROWS_AS(d.validate(), ValidationError);
    d = one_trial({{0.2, 1.0}});
    CHECK_THROWS_AS(d.validate(), ValidationError);
    d = one_trial({{0.2, 0.3}});
    CHECK_NOTHROW(d.validate());
}
