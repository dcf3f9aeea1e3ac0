#pragma once

// Trial-structured spike data, binary binning and joint-event extraction.
//
// Neurons and trials are 0-based everywhere in the library. External
// (file and report) indices are 1-based; ExperimentData keeps the original
// neuron labels so reports can translate back.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "spikesync/errors.hpp"

namespace spikesync {

/// Ordered set of 0-based neuron indices. For lagged pairs the order is
/// significant: element 0 leads, element 1 follows by the lag.
using NeuronSet = std::vector<int>;

struct SpikeTrain {
    std::vector<double> times;  // strictly increasing, within [0, T)

    std::size_t size() const noexcept { return times.size(); }
};

struct ExperimentData {
    double duration = 0.0;
    int neuron_count = 0;
    std::vector<std::vector<SpikeTrain>> trials;  // [trial][neuron]
    std::vector<long> neuron_labels;              // external label of each neuron

    std::size_t trial_count() const noexcept { return trials.size(); }

    std::size_t spike_count() const noexcept {
        std::size_t n = 0;
        for (const auto& trial : trials)
            for (const auto& train : trial) n += train.size();
        return n;
    }

    long label_of(int neuron) const {
        if (neuron_labels.empty()) return neuron + 1;
        return neuron_labels.at(static_cast<std::size_t>(neuron));
    }

    void validate() const {
        if (!(duration > 0.0) || !std::isfinite(duration))
            throw ValidationError("duration T must be positive and finite");
        if (neuron_count <= 0) throw ValidationError("neuron count must be positive");
        if (!neuron_labels.empty() && neuron_labels.size() != static_cast<std::size_t>(neuron_count))
            throw ValidationError("neuron label table does not match neuron count");
        for (std::size_t r = 0; r < trials.size(); ++r) {
            if (trials[r].size() != static_cast<std::size_t>(neuron_count))
                throw ValidationError("trial " + std::to_string(r + 1) + " does not have " +
                                      std::to_string(neuron_count) + " trains");
            for (std::size_t i = 0; i < trials[r].size(); ++i) {
                const auto& t = trials[r][i].times;
                for (std::size_t j = 0; j < t.size(); ++j) {
                    if (!(t[j] >= 0.0) || !(t[j] < duration))
                        throw ValidationError("spike time " + std::to_string(t[j]) + " of trial " +
                                              std::to_string(r + 1) + ", neuron " +
                                              std::to_string(label_of(static_cast<int>(i))) +
                                              " outside [0, T)");
                    if (j > 0 && !(t[j] > t[j - 1]))
                        throw ValidationError("spike times of trial " + std::to_string(r + 1) + ", neuron " +
                                              std::to_string(label_of(static_cast<int>(i))) +
                                              " are not strictly increasing");
                }
            }
        }
    }
};

/// Number of whole bins of width delta in [0, T). A relative slack of 1e-9
/// absorbs representation error when T is an exact multiple of delta.
inline std::size_t bin_count(double duration, double delta) {
    return static_cast<std::size_t>(std::floor(duration / delta * (1.0 + 1e-9)));
}

/// Binary occupancy indicators X^i(t_m), trials x neurons x bins.
class BinnedTensor {
public:
    BinnedTensor() = default;
    BinnedTensor(std::size_t trials, std::size_t neurons, std::size_t bins, double delta)
        : delta_(delta), trials_(trials), neurons_(neurons), bins_(bins), data_(trials * neurons * bins, 0) {}

    double delta() const noexcept { return delta_; }
    std::size_t trials() const noexcept { return trials_; }
    std::size_t neurons() const noexcept { return neurons_; }
    std::size_t bins() const noexcept { return bins_; }
    double duration() const noexcept { return static_cast<double>(bins_) * delta_; }

    std::uint8_t at(std::size_t trial, std::size_t neuron, std::size_t bin) const {
        return data_[index(trial, neuron, bin)];
    }
    void set(std::size_t trial, std::size_t neuron, std::size_t bin, std::uint8_t v) {
        data_[index(trial, neuron, bin)] = v;
    }

    std::span<const std::uint8_t> row(std::size_t trial, std::size_t neuron) const {
        return {data_.data() + index(trial, neuron, 0), bins_};
    }
    std::span<std::uint8_t> row(std::size_t trial, std::size_t neuron) {
        return {data_.data() + index(trial, neuron, 0), bins_};
    }

    std::size_t ones() const { return static_cast<std::size_t>(std::count(data_.begin(), data_.end(), 1)); }

    /// Spikes collapsed because another spike of the same train shared the bin.
    std::size_t clamp_count = 0;
    /// Length of [M*delta, T) dropped when T is not a multiple of delta.
    double discarded_tail = 0.0;
    /// Spikes that fell into the discarded tail.
    std::size_t discarded_spikes = 0;

    /// Neurons listed in `keep`, in that order.
    BinnedTensor select_neurons(const NeuronSet& keep) const {
        BinnedTensor out(trials_, keep.size(), bins_, delta_);
        for (std::size_t r = 0; r < trials_; ++r)
            for (std::size_t k = 0; k < keep.size(); ++k) {
                auto src = row(r, static_cast<std::size_t>(keep[k]));
                std::copy(src.begin(), src.end(), out.row(r, k).begin());
            }
        return out;
    }

    /// Trials listed in `keep`, in that order.
    BinnedTensor select_trials(const std::vector<std::size_t>& keep) const {
        BinnedTensor out(keep.size(), neurons_, bins_, delta_);
        for (std::size_t k = 0; k < keep.size(); ++k)
            for (std::size_t i = 0; i < neurons_; ++i) {
                auto src = row(keep[k], i);
                std::copy(src.begin(), src.end(), out.row(k, i).begin());
            }
        return out;
    }

    bool operator==(const BinnedTensor& o) const {
        return delta_ == o.delta_ && trials_ == o.trials_ && neurons_ == o.neurons_ && bins_ == o.bins_ &&
               data_ == o.data_;
    }

private:
    std::size_t index(std::size_t trial, std::size_t neuron, std::size_t bin) const {
        return (trial * neurons_ + neuron) * bins_ + bin;
    }

    double delta_ = 0.0;
    std::size_t trials_ = 0;
    std::size_t neurons_ = 0;
    std::size_t bins_ = 0;
    std::vector<std::uint8_t> data_;
};

/// X^i(t_m) = 1 iff the train has at least one spike in [m*delta, (m+1)*delta).
inline BinnedTensor bin_trains(const ExperimentData& data, double delta) {
    if (!(delta > 0.0) || !std::isfinite(delta)) throw ArgumentError("bin width must be positive");
    if (delta > data.duration * (1.0 + 1e-12)) throw ArgumentError("bin width exceeds the trial duration");
    const std::size_t bins = bin_count(data.duration, delta);
    BinnedTensor out(data.trial_count(), static_cast<std::size_t>(data.neuron_count), bins, delta);
    out.discarded_tail = std::max(0.0, data.duration - static_cast<double>(bins) * delta);
    for (std::size_t r = 0; r < data.trial_count(); ++r) {
        for (std::size_t i = 0; i < data.trials[r].size(); ++i) {
            auto row = out.row(r, i);
            for (double t : data.trials[r][i].times) {
                auto m = static_cast<std::size_t>(std::floor(t / delta));
                if (m >= bins) {
                    ++out.discarded_spikes;
                    continue;
                }
                if (row[m]) ++out.clamp_count;
                row[m] = 1;
            }
        }
    }
    return out;
}

/// Indicator-wise OR over consecutive groups of `factor` bins. Trailing bins
/// that do not fill a group are dropped.
inline BinnedTensor coarsen(const BinnedTensor& in, std::size_t factor) {
    if (factor == 0) throw ArgumentError("coarsening factor must be positive");
    const std::size_t bins = in.bins() / factor;
    BinnedTensor out(in.trials(), in.neurons(), bins, in.delta() * static_cast<double>(factor));
    for (std::size_t r = 0; r < in.trials(); ++r)
        for (std::size_t i = 0; i < in.neurons(); ++i) {
            auto src = in.row(r, i);
            auto dst = out.row(r, i);
            for (std::size_t m = 0; m < bins * factor; ++m) dst[m / factor] |= src[m];
        }
    return out;
}

/// Bins where every neuron of a subset fires (synchrony), or where the first
/// neuron fires at m and the second at m + lag.
struct JointEventSet {
    NeuronSet subset;
    std::size_t lag_bins = 0;
    bool exclusive = false;
    std::vector<std::vector<std::size_t>> bins;  // [trial] -> bin indices m

    std::size_t count() const noexcept {
        std::size_t n = 0;
        for (const auto& b : bins) n += b.size();
        return n;
    }
};

inline void check_subset(const NeuronSet& subset, std::size_t neurons) {
    for (std::size_t a = 0; a < subset.size(); ++a) {
        if (subset[a] < 0 || static_cast<std::size_t>(subset[a]) >= neurons)
            throw ArgumentError("neuron index " + std::to_string(subset[a] + 1) + " out of range");
        for (std::size_t b = a + 1; b < subset.size(); ++b)
            if (subset[a] == subset[b]) throw ArgumentError("neuron subset contains a duplicate");
    }
}

inline JointEventSet extract_joint_events(const BinnedTensor& binned, const NeuronSet& subset,
                                          std::size_t lag_bins = 0, bool exclusive = false) {
    check_subset(subset, binned.neurons());
    if (subset.size() < 2) throw ArgumentError("joint events need at least two neurons");
    if (lag_bins > 0 && subset.size() != 2) throw ArgumentError("lagged joint events are defined for pairs only");
    if (lag_bins > 0 && exclusive) throw ArgumentError("exclusive mode applies to synchronous events only");
    if (lag_bins >= binned.bins()) throw ArgumentError("lag must be smaller than the number of bins");

    std::vector<char> in_subset(binned.neurons(), 0);
    for (int i : subset) in_subset[static_cast<std::size_t>(i)] = 1;

    JointEventSet out{subset, lag_bins, exclusive, {}};
    out.bins.resize(binned.trials());
    const std::size_t last = binned.bins() - lag_bins;
    for (std::size_t r = 0; r < binned.trials(); ++r) {
        if (lag_bins > 0) {
            auto a = binned.row(r, static_cast<std::size_t>(subset[0]));
            auto b = binned.row(r, static_cast<std::size_t>(subset[1]));
            for (std::size_t m = 0; m < last; ++m)
                if (a[m] && b[m + lag_bins]) out.bins[r].push_back(m);
            continue;
        }
        for (std::size_t m = 0; m < last; ++m) {
            bool hit = true;
            for (int i : subset) hit = hit && binned.at(r, static_cast<std::size_t>(i), m);
            if (hit && exclusive)
                for (std::size_t j = 0; j < binned.neurons() && hit; ++j)
                    if (!in_subset[j] && binned.at(r, j, m)) hit = false;
            if (hit) out.bins[r].push_back(m);
        }
    }
    return out;
}

}  // namespace spikesync
