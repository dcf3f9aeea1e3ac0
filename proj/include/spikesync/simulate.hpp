#pragma once

// Generative engines:
//   * the delta-indexed marked point process family, in which a synchronous
//     mark Xi = (i1..ik) has intensity delta^(k-1) gamma_Xi(t) prod lambda^i(t|H^i),
//     simulated by dominated thinning;
//   * the exact log-density of a marked sequence;
//   * discrete-time null generators driven by cell tables / cell models;
//   * empirical zeta recursions and the delta-sweep convergence probe.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "spikesync/errors.hpp"
#include "spikesync/io.hpp"
#include "spikesync/loglinear.hpp"
#include "spikesync/rng.hpp"
#include "spikesync/spikedata.hpp"

namespace spikesync {

inline constexpr double kTwoPi = 6.283185307179586476925286766559;

/// Smooth time profile: constant, sinusoid or Gaussian bump.
struct RateCurve {
    enum class Form { constant, sine, bump };
    Form form = Form::constant;
    double level = 0.0;      // constant value, sine mean, or bump baseline
    double amplitude = 0.0;  // sine amplitude or bump height above baseline
    double frequency = 1.0;  // Hz (sine)
    double phase = 0.0;      // radians (sine)
    double center = 0.0;     // seconds (bump)
    double width = 0.1;      // seconds (bump standard deviation)

    static RateCurve constant_value(double v) { return {Form::constant, v}; }
    static RateCurve sine(double mean, double amp, double freq, double phase = 0.0) {
        RateCurve c;
        c.form = Form::sine;
        c.level = mean;
        c.amplitude = amp;
        c.frequency = freq;
        c.phase = phase;
        return c;
    }
    static RateCurve bump(double baseline, double height, double center, double width) {
        RateCurve c;
        c.form = Form::bump;
        c.level = baseline;
        c.amplitude = height;
        c.center = center;
        c.width = width;
        return c;
    }

    double operator()(double t) const {
        switch (form) {
            case Form::constant: return level;
            case Form::sine: return level + amplitude * std::sin(kTwoPi * frequency * t + phase);
            case Form::bump: {
                const double z = (t - center) / width;
                return level + amplitude * std::exp(-0.5 * z * z);
            }
        }
        return level;
    }

    double max_value() const {
        switch (form) {
            case Form::constant: return level;
            case Form::sine: return level + std::abs(amplitude);
            case Form::bump: return level + std::max(0.0, amplitude);
        }
        return level;
    }
    double min_value() const {
        switch (form) {
            case Form::constant: return level;
            case Form::sine: return level - std::abs(amplitude);
            case Form::bump: return level + std::min(0.0, amplitude);
        }
        return level;
    }
};

enum class Refractory {
    hard,    // lambda = 0 while t - last <= theta, full rate afterwards
    smooth,  // lambda scaled by 1 - exp(-((t - last - theta) / recovery_tau)^2) after theta
};

struct NeuronSpec {
    RateCurve rate;
    double self_weight = 0.0;  // multiplies exp(weight * sum exp(-(t - s) / self_tau))
    double self_tau = 0.01;
};

struct InteractionSpec {
    NeuronSet neurons;  // 0-based, at least two
    RateCurve gamma;
    double lag = 0.0;   // seconds; pairs only: first neuron at s, second at s + lag
};

struct MarkedProcessSpec {
    double duration = 1.0;
    double delta = 0.001;  // family index
    double theta = 0.002;  // refractory period
    Refractory refractory = Refractory::hard;
    double recovery_tau = 0.002;
    std::vector<NeuronSpec> neurons;
    std::vector<InteractionSpec> interactions;
    std::optional<double> lambda_max;  // dominating bound; computed when absent

    std::size_t neuron_count() const noexcept { return neurons.size(); }

    bool has_lag() const {
        return std::any_of(interactions.begin(), interactions.end(), [](const auto& x) { return x.lag > 0.0; });
    }

    void validate() const {
        if (!(duration > 0.0)) throw SimulationError("duration must be positive");
        if (!(delta > 0.0)) throw SimulationError("delta must be positive");
        if (!(theta > 0.0)) throw SimulationError("refractory period must be positive");
        if (refractory == Refractory::smooth && !(recovery_tau > 0.0))
            throw SimulationError("smooth recovery needs a positive time constant");
        if (neurons.empty()) throw SimulationError("process needs at least one neuron");
        for (const auto& n : neurons) {
            if (n.rate.min_value() < 0.0) throw SimulationError("base intensities must be non-negative");
            if (n.self_weight != 0.0 && !(n.self_tau > 0.0))
                throw SimulationError("self-history kernel needs a positive time constant");
        }
        for (const auto& x : interactions) {
            if (x.neurons.size() < 2) throw SimulationError("interaction marks need at least two neurons");
            check_subset(x.neurons, neurons.size());
            if (x.gamma.min_value() < 0.0) throw SimulationError("interaction functions gamma must be non-negative");
            if (x.lag < 0.0) throw SimulationError("lag must be non-negative");
            if (x.lag > 0.0 && x.neurons.size() != 2) throw SimulationError("lagged marks are defined for pairs only");
        }
    }

    /// Bound on a neuron's conditional intensity: spikes are at least theta
    /// apart, so the self-kernel sum never exceeds 1 / (1 - exp(-theta/tau)).
    double neuron_bound(std::size_t i) const {
        const auto& n = neurons[i];
        double b = n.rate.max_value();
        if (n.self_weight > 0.0) b *= std::exp(n.self_weight / (1.0 - std::exp(-theta / n.self_tau)));
        return b;
    }

    double total_bound() const {
        if (lambda_max) return *lambda_max;
        double total = 0.0;
        for (std::size_t i = 0; i < neurons.size(); ++i) total += neuron_bound(i);
        for (const auto& x : interactions) {
            double v = std::pow(delta, static_cast<double>(x.neurons.size() - 1)) * x.gamma.max_value();
            for (int i : x.neurons) v *= neuron_bound(static_cast<std::size_t>(i));
            total += v;
        }
        return total;
    }

    unsigned mask_of(const NeuronSet& s) const {
        unsigned m = 0;
        for (int i : s) m |= 1U << static_cast<unsigned>(i);
        return m;
    }
};

/// One event of the marked process. `mask` holds the neurons sharing the
/// event; `interaction` indexes spec.interactions, -1 for an isolated spike.
struct MarkedEvent {
    double time = 0.0;
    unsigned mask = 0;
    int interaction = -1;
    double lag = 0.0;  // the second neuron of a lagged mark fires at time + lag

    bool operator==(const MarkedEvent&) const = default;
};

struct MarkedEventSequence {
    double duration = 0.0;
    std::vector<MarkedEvent> events;

    bool operator==(const MarkedEventSequence&) const = default;

    /// Spike times of neuron i (lagged partners included), sorted; spikes at
    /// or beyond the duration are dropped.
    std::vector<double> spikes_of(int neuron, const MarkedProcessSpec& spec) const {
        std::vector<double> out;
        for (const auto& e : events) {
            if (!(e.mask & (1U << static_cast<unsigned>(neuron)))) continue;
            double t = e.time;
            if (e.lag > 0.0 && e.interaction >= 0 && spec.interactions[static_cast<std::size_t>(e.interaction)].neurons[1] == neuron)
                t += e.lag;
            if (t < duration) out.push_back(t);
        }
        std::sort(out.begin(), out.end());
        return out;
    }
};

namespace detail {

/// Running spike history of every neuron of the process.
class HistoryState {
public:
    explicit HistoryState(const MarkedProcessSpec& spec)
        : spec_(&spec),
          last_(spec.neuron_count(), -std::numeric_limits<double>::infinity()),
          kernel_(spec.neuron_count(), 0.0),
          pending_(spec.neuron_count()) {}

    void add_spike(std::size_t i, double t) {
        const auto& n = spec_->neurons[i];
        if (n.self_weight != 0.0)
            kernel_[i] = (std::isfinite(last_[i]) ? kernel_[i] * std::exp(-(t - last_[i]) / n.self_tau) : 0.0) + 1.0;
        last_[i] = t;
    }

    /// A lagged partner spike that is already decided but lies in the future.
    void schedule(std::size_t i, double t) { pending_[i].push_back(t); }

    /// Moves scheduled spikes with time <= t into the history.
    void advance(double t) {
        for (std::size_t i = 0; i < pending_.size(); ++i) {
            auto& p = pending_[i];
            std::sort(p.begin(), p.end());
            std::size_t k = 0;
            while (k < p.size() && p[k] <= t) add_spike(i, p[k++]);
            p.erase(p.begin(), p.begin() + static_cast<std::ptrdiff_t>(k));
        }
    }

    /// lambda^i(t | H^i_t). Pending partner spikes within theta also block.
    double intensity(std::size_t i, double t) const {
        const auto& n = spec_->neurons[i];
        const double since = t - last_[i];
        if (since <= spec_->theta) return 0.0;
        for (double s : pending_[i])
            if (std::abs(s - t) <= spec_->theta) return 0.0;
        double v = n.rate(t);
        if (spec_->refractory == Refractory::smooth && std::isfinite(since)) {
            const double z = (since - spec_->theta) / spec_->recovery_tau;
            v *= 1.0 - std::exp(-z * z);
        }
        if (n.self_weight != 0.0 && std::isfinite(last_[i]))
            v *= std::exp(n.self_weight * kernel_[i] * std::exp(-since / n.self_tau));
        return v;
    }

    double last(std::size_t i) const { return last_[i]; }

private:
    const MarkedProcessSpec* spec_;
    std::vector<double> last_;
    std::vector<double> kernel_;
    std::vector<std::vector<double>> pending_;
};

/// Intensities of every mark at t: singletons first (index i), then one
/// entry per interaction (index nu + k).
inline void mark_intensities(const MarkedProcessSpec& spec, const HistoryState& h, double t, std::vector<double>& out) {
    const std::size_t nu = spec.neuron_count();
    out.resize(nu + spec.interactions.size());
    for (std::size_t i = 0; i < nu; ++i) out[i] = h.intensity(i, t);
    for (std::size_t k = 0; k < spec.interactions.size(); ++k) {
        const auto& x = spec.interactions[k];
        double v = std::pow(spec.delta, static_cast<double>(x.neurons.size() - 1)) * x.gamma(t);
        if (x.lag > 0.0) {
            const auto a = static_cast<std::size_t>(x.neurons[0]);
            const auto b = static_cast<std::size_t>(x.neurons[1]);
            const double tb = t + x.lag;
            v = tb < spec.duration ? v * out[a] * h.intensity(b, tb) : 0.0;
        } else {
            for (int i : x.neurons) v *= out[static_cast<std::size_t>(i)];
        }
        out[nu + k] = v;
    }
}

}  // namespace detail

/// Dominated thinning: candidate times from a Poisson process of rate
/// Lambda_max, accepted with probability total / Lambda_max, mark drawn in
/// proportion to its intensity.
inline MarkedEventSequence simulate_marked(const MarkedProcessSpec& spec, std::uint64_t seed) {
    spec.validate();
    const double bound = spec.total_bound();
    if (!(bound > 0.0)) return {spec.duration, {}};
    Rng rng(seed);
    detail::HistoryState history(spec);
    MarkedEventSequence seq{spec.duration, {}};
    std::vector<double> lambda;
    const std::size_t nu = spec.neuron_count();
    double t = 0.0;
    for (;;) {
        t += rng.exponential(bound);
        if (t >= spec.duration) break;
        history.advance(t);
        detail::mark_intensities(spec, history, t, lambda);
        const double total = std::accumulate(lambda.begin(), lambda.end(), 0.0);
        if (total > bound * (1.0 + 1e-9))
            throw SimulationError("total intensity " + std::to_string(total) + " exceeds the bound " +
                                  std::to_string(bound) + " at t = " + std::to_string(t));
        const double u = rng.uniform() * bound;
        if (u >= total) continue;
        std::size_t k = 0;
        double acc = lambda[0];
        while (u >= acc && k + 1 < lambda.size()) acc += lambda[++k];
        MarkedEvent ev;
        ev.time = t;
        if (k < nu) {
            ev.mask = 1U << k;
            history.add_spike(k, t);
        } else {
            const auto& x = spec.interactions[k - nu];
            ev.interaction = static_cast<int>(k - nu);
            ev.mask = spec.mask_of(x.neurons);
            ev.lag = x.lag;
            if (x.lag > 0.0) {
                history.add_spike(static_cast<std::size_t>(x.neurons[0]), t);
                history.schedule(static_cast<std::size_t>(x.neurons[1]), t + x.lag);
            } else {
                for (int i : x.neurons) history.add_spike(static_cast<std::size_t>(i), t);
            }
        }
        seq.events.push_back(ev);
    }
    return seq;
}

/// Realizations -> trials of a binned tensor.
inline BinnedTensor bin_sequences(const std::vector<MarkedEventSequence>& seqs, const MarkedProcessSpec& spec,
                                  double delta) {
    const std::size_t bins = bin_count(spec.duration, delta);
    BinnedTensor out(seqs.size(), spec.neuron_count(), bins, delta);
    for (std::size_t r = 0; r < seqs.size(); ++r)
        for (std::size_t i = 0; i < spec.neuron_count(); ++i) {
            auto row = out.row(r, i);
            for (double t : seqs[r].spikes_of(static_cast<int>(i), spec)) {
                const auto m = static_cast<std::size_t>(std::floor(t / delta));
                if (m >= bins) {
                    ++out.discarded_spikes;
                    continue;
                }
                if (row[m]) ++out.clamp_count;
                row[m] = 1;
            }
        }
    return out;
}

inline ExperimentData sequences_to_experiment(const std::vector<MarkedEventSequence>& seqs,
                                              const MarkedProcessSpec& spec) {
    ExperimentData data;
    data.duration = spec.duration;
    data.neuron_count = static_cast<int>(spec.neuron_count());
    for (int i = 0; i < data.neuron_count; ++i) data.neuron_labels.push_back(i + 1);
    for (const auto& s : seqs) {
        std::vector<SpikeTrain> trial(spec.neuron_count());
        for (std::size_t i = 0; i < spec.neuron_count(); ++i) trial[i].times = s.spikes_of(static_cast<int>(i), spec);
        data.trials.push_back(std::move(trial));
    }
    return data;
}

struct LoglikResult {
    double value = 0.0;              // -inf when an observed event has zero intensity
    bool zero_intensity_event = false;
};

/// log p(H_T) = sum_j log lambda(s_j, k_j | H_{s_j}) - sum_k int_0^T lambda(t, k | H_t) dt.
/// The integral uses the composite midpoint rule on segments delimited by
/// event times and the end of each refractory period.
inline LoglikResult loglik_marked(const MarkedEventSequence& seq, const MarkedProcessSpec& spec,
                                  std::optional<double> step = std::nullopt) {
    spec.validate();
    if (spec.has_lag()) throw ArgumentError("the log-density is implemented for synchronous marks only");
    const double h = step.value_or(spec.theta / 10.0);
    if (!(h > 0.0) || h > spec.theta / 4.0 * (1.0 + 1e-12))
        throw ArgumentError("quadrature step must be positive and at most theta / 4");

    std::vector<double> breaks{0.0, seq.duration};
    for (const auto& e : seq.events) {
        breaks.push_back(e.time);
        if (e.time + spec.theta < seq.duration) breaks.push_back(e.time + spec.theta);
    }
    std::sort(breaks.begin(), breaks.end());
    breaks.erase(std::unique(breaks.begin(), breaks.end()), breaks.end());

    detail::HistoryState history(spec);
    std::vector<double> lambda;
    const std::size_t nu = spec.neuron_count();
    LoglikResult res;
    double integral = 0.0;
    double events_term = 0.0;
    std::size_t next = 0;
    for (std::size_t b = 0; b + 1 < breaks.size(); ++b) {
        const double a = breaks[b];
        const double z = breaks[b + 1];
        // Events at the segment start enter the history before the segment.
        while (next < seq.events.size() && seq.events[next].time <= a) {
            const auto& e = seq.events[next];
            detail::mark_intensities(spec, history, e.time, lambda);
            const std::size_t k = e.interaction < 0 ? static_cast<std::size_t>(std::countr_zero(e.mask))
                                                    : nu + static_cast<std::size_t>(e.interaction);
            if (!(lambda[k] > 0.0)) {
                res.zero_intensity_event = true;
            } else {
                events_term += std::log(lambda[k]);
            }
            for (std::size_t i = 0; i < nu; ++i)
                if (e.mask & (1U << i)) history.add_spike(i, e.time);
            ++next;
        }
        const auto n = static_cast<std::size_t>(std::ceil((z - a) / h - 1e-9));
        const double w = (z - a) / static_cast<double>(std::max<std::size_t>(n, 1));
        for (std::size_t j = 0; j < std::max<std::size_t>(n, 1); ++j) {
            detail::mark_intensities(spec, history, a + (static_cast<double>(j) + 0.5) * w, lambda);
            integral += w * std::accumulate(lambda.begin(), lambda.end(), 0.0);
        }
    }
    res.value = res.zero_intensity_event ? -std::numeric_limits<double>::infinity() : events_term - integral;
    return res;
}

// --------------------------------------------------------------------------
// Discrete-time null generators
// --------------------------------------------------------------------------

namespace detail {

inline std::size_t draw_pattern(std::span<const double> cells, double u) {
    double acc = 0.0;
    for (std::size_t s = 0; s + 1 < cells.size(); ++s) {
        acc += cells[s];
        if (u < acc) return s;
    }
    return cells.size() - 1;
}

inline void write_pattern(BinnedTensor& out, std::size_t trial, std::size_t bin, std::size_t pattern) {
    for (std::size_t i = 0; i < out.neurons(); ++i)
        if (pattern & (std::size_t{1} << i)) out.set(trial, i, bin, 1);
}

}  // namespace detail

/// R trials drawn bin by bin from a fixed table (per-trial tables are used
/// when the table has them).
inline BinnedTensor simulate_binary_null(const CellTable& cells, std::size_t trials, std::uint64_t seed) {
    if (!cells.shared_across_trials() && cells.trials != trials)
        throw ArgumentError("per-trial cell table has " + std::to_string(cells.trials) + " trials, not " +
                            std::to_string(trials));
    BinnedTensor out(trials, cells.neurons, cells.bins, cells.delta);
    Rng rng(seed);
    for (std::size_t r = 0; r < trials; ++r)
        for (std::size_t m = 0; m < cells.bins; ++m)
            detail::write_pattern(out, r, m, detail::draw_pattern(cells.at(r, m), rng.uniform()));
    return out;
}

/// Cell-model generator. Conditional models rebuild the table every bin from
/// the simulated own-history counts (and observed population counts, which
/// ties the trial count to the observed data when population terms exist).
inline BinnedTensor simulate_binary_null(const CellModel& model, std::size_t trials, std::uint64_t seed,
                                        std::size_t* saturated_bins = nullptr) {
    if (model.mode == Mode::marginal) return simulate_binary_null(marginal_table(model), trials, seed);
    if (model.needs_observed_trials() && trials != model.observed_trials)
        throw ArgumentError("conditional null conditions on observed population counts; trial count must be " +
                            std::to_string(model.observed_trials));
    const std::size_t nu = model.neurons();
    const std::size_t bins = model.bins;
    BinnedTensor out(trials, nu, bins, model.delta);
    Rng rng(seed);
    std::vector<double> p(nu), cells(std::size_t{1} << nu);
    std::vector<double> z_const;
    const bool constant_zeta =
        std::all_of(model.zetas.begin(), model.zetas.end(), [](const auto& kv) { return kv.second.per_bin.empty(); });
    if (constant_zeta) z_const = detail::zeta_vector(model.zetas, nu, 0);
    std::vector<int> own(nu);
    for (std::size_t r = 0; r < trials; ++r) {
        std::fill(own.begin(), own.end(), 0);
        for (std::size_t m = 0; m < bins; ++m) {
            for (std::size_t i = 0; i < nu; ++i) {
                const auto& f = model.fits[i];
                // own[i] counts bins [m - w, m - 1]
                if (f.own_bins > 0 && m > f.own_bins) own[i] -= out.at(r, i, m - 1 - f.own_bins);
                double eta = model.base_log_rate[i][m] + f.beta_own() * own[i];
                if (f.population_term) eta += f.beta_population() * model.population[i][r * bins + m];
                p[i] = std::exp(eta) * model.delta;
                if (model.probability_ceiling > 0.0 && p[i] > model.probability_ceiling) {
                    p[i] = model.probability_ceiling;
                    if (saturated_bins) ++*saturated_bins;
                }
            }
            const auto z = constant_zeta ? z_const : detail::zeta_vector(model.zetas, nu, m);
            detail::fill_cells(p, z, cells, r, m);
            const auto pattern = detail::draw_pattern(cells, rng.uniform());
            detail::write_pattern(out, r, m, pattern);
            for (std::size_t i = 0; i < nu; ++i) own[i] += out.at(r, i, m);
        }
    }
    return out;
}

// --------------------------------------------------------------------------
// Empirical zeta recursions
// --------------------------------------------------------------------------

struct EmpiricalZetaOptions {
    std::size_t lag_bins = 0;  // pairs only: second neuron read at m + lag
    /// Conditional estimate: only realizations in which every neuron of the
    /// subset was silent during the preceding `quiescent_bins` bins count.
    bool conditional = false;
    std::size_t quiescent_bins = 0;
};

struct ZetaSeries {
    NeuronSet subset;
    double delta = 0.0;
    std::vector<double> zeta;  // zeta_subset(t_m); NaN where a denominator is zero
    std::vector<std::size_t> included;  // realizations counted at each bin
    std::size_t joint_count = 0;
    /// Constant higher-order factor pooled over bins (every subset of the
    /// event set, indexed by mask over subset positions).
    std::vector<double> pooled;
    double pooled_zeta = std::numeric_limits<double>::quiet_NaN();
    double pooled_se = std::numeric_limits<double>::quiet_NaN();

    std::size_t missing() const {
        return static_cast<std::size_t>(std::count_if(zeta.begin(), zeta.end(), [](double v) { return std::isnan(v); }));
    }
};

/// Per-bin zeta recursion from empirical frequencies across realizations
/// (the trials of `binned`), plus a pooled constant-factor estimate. For
/// pairs the pooled denominator uses the unbiased cross-realization product
/// (c1 c2 - c11) / (n - 1) in place of n p1 p2.
inline ZetaSeries empirical_zeta(const BinnedTensor& binned, const NeuronSet& subset,
                                 const EmpiricalZetaOptions& opt = {}) {
    check_subset(subset, binned.neurons());
    if (subset.empty()) throw ArgumentError("empty neuron subset");
    if (opt.lag_bins > 0 && subset.size() != 2) throw ArgumentError("lagged zeta is defined for pairs only");
    const std::size_t k = subset.size();
    const std::size_t patterns = std::size_t{1} << k;
    const std::size_t bins = binned.bins();
    const double delta = binned.delta();

    ZetaSeries out;
    out.subset = subset;
    out.delta = delta;
    out.zeta.assign(bins, std::numeric_limits<double>::quiet_NaN());
    out.included.assign(bins, 0);

    auto value = [&](std::size_t r, std::size_t pos, std::size_t m) -> std::uint8_t {
        const std::size_t shift = (opt.lag_bins > 0 && pos == 1) ? opt.lag_bins : 0;
        return binned.at(r, static_cast<std::size_t>(subset[pos]), m + shift);
    };
    auto quiet = [&](std::size_t r, std::size_t m) {
        if (!opt.conditional) return true;
        for (std::size_t pos = 0; pos < k; ++pos) {
            const std::size_t shift = (opt.lag_bins > 0 && pos == 1) ? opt.lag_bins : 0;
            const std::size_t at = m + shift;
            for (std::size_t back = 1; back <= opt.quiescent_bins && back <= at; ++back)
                if (binned.at(r, static_cast<std::size_t>(subset[pos]), at - back)) return false;
        }
        return true;
    };

    // counts[m][S] = realizations in which every member of S fires.
    std::vector<std::vector<double>> counts(bins, std::vector<double>(patterns, 0.0));
    const std::size_t last = bins - std::min(bins, opt.lag_bins);
    for (std::size_t m = 0; m < last; ++m) {
        for (std::size_t r = 0; r < binned.trials(); ++r) {
            if (!quiet(r, m)) continue;
            ++out.included[m];
            std::size_t fired = 0;
            for (std::size_t pos = 0; pos < k; ++pos)
                if (value(r, pos, m)) fired |= std::size_t{1} << pos;
            for (std::size_t s = fired;; s = (s - 1) & fired) {
                counts[m][s] += 1.0;
                if (s == 0) break;
            }
        }
        const double n = static_cast<double>(out.included[m]);
        if (n == 0.0) continue;
        std::vector<double> p(patterns);
        for (std::size_t s = 0; s < patterns; ++s) p[s] = counts[m][s] / n;
        const auto z = zeta_recursion(p, delta);
        out.zeta[m] = z[patterns - 1];
        out.joint_count += static_cast<std::size_t>(counts[m][patterns - 1]);
    }

    // Pooled constant factors, built bottom-up over subset size.
    out.pooled.assign(patterns, std::numeric_limits<double>::quiet_NaN());
    for (std::size_t s = 1; s < patterns; ++s) {
        if (std::popcount(s) < 2) continue;
        double num = 0.0;
        double den = 0.0;
        for (std::size_t m = 0; m < last; ++m) {
            const double n = static_cast<double>(out.included[m]);
            if (n < 2.0) continue;
            num += counts[m][s];
            if (std::popcount(s) == 2) {
                const std::size_t a = std::size_t{1} << std::countr_zero(s);
                const std::size_t b = s ^ a;
                den += (counts[m][a] * counts[m][b] - counts[m][s]) / (n - 1.0);
            } else {
                double v = n;
                for (std::size_t pos = 0; pos < k; ++pos)
                    if (s & (std::size_t{1} << pos)) v *= counts[m][std::size_t{1} << pos] / n;
                for (std::size_t xi = (s - 1) & s; xi; xi = (xi - 1) & s)
                    if (std::popcount(xi) >= 2) v *= out.pooled[xi];
                den += v;
            }
        }
        out.pooled[s] = den > 0.0 ? num / den : std::numeric_limits<double>::quiet_NaN();
    }
    if (k >= 2) {
        out.pooled_zeta = out.pooled[patterns - 1];
        const double joint = static_cast<double>(out.joint_count);
        if (joint > 0.0) out.pooled_se = out.pooled_zeta / std::sqrt(joint);
    }
    return out;
}

/// Sum over set partitions of `mask` of the product of block factors
/// gamma(block), with gamma = 1 on singletons.
template <class Gamma>
double partition_sum(unsigned mask, Gamma&& gamma) {
    if (mask == 0) return 1.0;
    // Fix the lowest member; enumerate the block that contains it.
    const unsigned low = mask & (~mask + 1U);
    const unsigned rest = mask ^ low;
    double total = 0.0;
    for (unsigned sub = rest;; sub = (sub - 1) & rest) {
        const unsigned block = sub | low;
        const double g = std::popcount(block) == 1 ? 1.0 : gamma(block);
        if (g != 0.0) total += g * partition_sum(mask ^ block, gamma);
        if (sub == 0) break;
    }
    return total;
}

/// Small-delta limits of zeta_S for every subset S of the given neurons
/// (indexed by mask over positions): the partition sum of gamma divided by
/// the limits of every proper subset with at least two members.
inline std::vector<double> zeta_limits(const MarkedProcessSpec& spec, const NeuronSet& subset, double t) {
    const std::size_t k = subset.size();
    const std::size_t patterns = std::size_t{1} << k;
    auto gamma = [&](unsigned local) {
        NeuronSet members;
        for (std::size_t pos = 0; pos < k; ++pos)
            if (local & (1U << pos)) members.push_back(subset[pos]);
        std::sort(members.begin(), members.end());
        for (const auto& x : spec.interactions) {
            auto sorted = x.neurons;
            std::sort(sorted.begin(), sorted.end());
            if (sorted == members) return x.gamma(t);
        }
        return 0.0;
    };
    std::vector<double> lim(patterns, std::numeric_limits<double>::quiet_NaN());
    for (std::size_t s = 1; s < patterns; ++s) {
        if (std::popcount(s) < 2) continue;
        double v = partition_sum(static_cast<unsigned>(s), gamma);
        for (std::size_t xi = (s - 1) & s; xi; xi = (xi - 1) & s)
            if (std::popcount(xi) >= 2) v /= lim[xi];
        lim[s] = v;
    }
    return lim;
}

// --------------------------------------------------------------------------
// Convergence probe
// --------------------------------------------------------------------------

struct ConvergenceOptions {
    NeuronSet subset{0, 1};
    bool conditional = false;
    std::size_t quiescent_bins = 0;  // 0: ceil(theta / delta) + 1 when conditional
    unsigned threads = 1;
    std::size_t min_joint_events = 100;  // below this at a grid point a warning is recorded
};

struct ConvergenceReport {
    NeuronSet subset;
    std::vector<double> grid;  // strictly decreasing
    std::vector<double> estimate;
    std::vector<double> standard_error;
    std::vector<double> limit;
    std::vector<double> error;  // |estimate - limit|
    std::vector<std::size_t> joint_events;
    std::vector<std::size_t> lag_bins;
    double error_slope = std::numeric_limits<double>::quiet_NaN();
    bool monotone = false;
    // Mean per-bin probability that k given neurons all fire, k = 1 and 2.
    std::vector<double> single_probability;
    std::vector<double> pair_probability;
    double single_slope = std::numeric_limits<double>::quiet_NaN();
    double pair_slope = std::numeric_limits<double>::quiet_NaN();
    std::vector<std::string> warnings;
    std::size_t reps = 0;
    std::uint64_t seed = 0;
};

/// Least-squares slope of log y on log x.
inline double loglog_slope(const std::vector<double>& x, const std::vector<double>& y) {
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        if (!(x[i] > 0.0) || !(y[i] > 0.0)) continue;
        const double lx = std::log(x[i]);
        const double ly = std::log(y[i]);
        sx += lx;
        sy += ly;
        sxx += lx * lx;
        sxy += lx * ly;
        ++n;
    }
    if (n < 2) return std::numeric_limits<double>::quiet_NaN();
    const double dn = static_cast<double>(n);
    return (dn * sxy - sx * sy) / (dn * sxx - sx * sx);
}

/// For each delta of the grid: simulate `reps` realizations of the family at
/// that delta, estimate the pooled zeta of the subset, and compare with its
/// small-delta limit. Realization r at grid point g uses seed
/// derive_seed(derive_seed(seed, g), r).
inline ConvergenceReport convergence_probe(const MarkedProcessSpec& base, const std::vector<double>& grid,
                                           std::size_t reps, std::uint64_t seed, const ConvergenceOptions& opt = {}) {
    base.validate();
    if (grid.empty()) throw ArgumentError("delta grid is empty");
    for (std::size_t g = 0; g < grid.size(); ++g) {
        if (!(grid[g] > 0.0) || !(grid[g] < base.theta))
            throw ArgumentError("every grid delta must lie in (0, theta)");
        if (g > 0 && !(grid[g] < grid[g - 1])) throw ArgumentError("delta grid must be strictly decreasing");
    }
    check_subset(opt.subset, base.neuron_count());
    if (opt.subset.size() < 2) throw ArgumentError("probe subset needs at least two neurons");

    double lag = 0.0;
    for (const auto& x : base.interactions)
        if (x.lag > 0.0) {
            auto a = x.neurons;
            if (opt.subset.size() == 2 && a == opt.subset) lag = x.lag;
        }

    ConvergenceReport rep;
    rep.subset = opt.subset;
    rep.grid = grid;
    rep.reps = reps;
    rep.seed = seed;
    const std::size_t patterns = std::size_t{1} << opt.subset.size();
    // gamma forms are constant in time for the reference; time-varying gamma
    // uses the limit averaged over bin centres.
    for (std::size_t g = 0; g < grid.size(); ++g) {
        MarkedProcessSpec spec = base;
        spec.delta = grid[g];
        spec.lambda_max.reset();
        std::size_t lag_bins = 0;
        if (lag > 0.0) {
            const double ratio = lag / grid[g];
            if (std::abs(ratio - std::round(ratio)) > 1e-6)
                throw ArgumentError("lag must be a whole number of bins at every grid delta");
            lag_bins = static_cast<std::size_t>(std::round(ratio));
        }
        std::vector<MarkedEventSequence> seqs(reps);
        const auto grid_seed = derive_seed(seed, g);
        parallel_for(reps, opt.threads, [&](std::size_t r) { seqs[r] = simulate_marked(spec, derive_seed(grid_seed, r)); });
        const auto binned = bin_sequences(seqs, spec, grid[g]);

        EmpiricalZetaOptions zopt;
        zopt.lag_bins = lag_bins;
        zopt.conditional = opt.conditional;
        zopt.quiescent_bins =
            opt.quiescent_bins > 0 ? opt.quiescent_bins
                                   : static_cast<std::size_t>(std::ceil(spec.theta / grid[g] - 1e-9)) + 1;
        const auto z = empirical_zeta(binned, opt.subset, zopt);

        double limit = 0.0;
        std::size_t used = 0;
        for (std::size_t m = 0; m + lag_bins < binned.bins(); ++m) {
            limit += zeta_limits(spec, opt.subset, (static_cast<double>(m) + 0.5) * grid[g])[patterns - 1];
            ++used;
        }
        limit /= static_cast<double>(std::max<std::size_t>(used, 1));

        rep.estimate.push_back(z.pooled_zeta);
        rep.standard_error.push_back(z.pooled_se);
        rep.limit.push_back(limit);
        rep.error.push_back(std::abs(z.pooled_zeta - limit));
        rep.joint_events.push_back(z.joint_count);
        rep.lag_bins.push_back(lag_bins);
        if (z.joint_count < opt.min_joint_events)
            rep.warnings.push_back("only " + std::to_string(z.joint_count) + " joint events at delta = " +
                                   std::to_string(grid[g]) + "; confidence interval is wide");

        // Hierarchical sparsity: per-bin firing probabilities.
        double single = 0.0;
        double pair = 0.0;
        const auto a = static_cast<std::size_t>(opt.subset[0]);
        const auto b = static_cast<std::size_t>(opt.subset[1]);
        for (std::size_t r = 0; r < binned.trials(); ++r)
            for (std::size_t m = 0; m < binned.bins(); ++m) {
                single += 0.5 * (binned.at(r, a, m) + binned.at(r, b, m));
                pair += binned.at(r, a, m) * binned.at(r, b, m);
            }
        const double cells = static_cast<double>(binned.trials() * binned.bins());
        rep.single_probability.push_back(single / cells);
        rep.pair_probability.push_back(pair / cells);
    }
    rep.error_slope = loglog_slope(rep.grid, rep.error);
    rep.single_slope = loglog_slope(rep.grid, rep.single_probability);
    rep.pair_slope = loglog_slope(rep.grid, rep.pair_probability);
    rep.monotone = true;
    for (std::size_t g = 1; g < rep.error.size(); ++g) rep.monotone = rep.monotone && rep.error[g] < rep.error[g - 1];
    return rep;
}

// --------------------------------------------------------------------------
// Spec documents
// --------------------------------------------------------------------------

inline RateCurve rate_curve_from_json(const nlohmann::json& j) {
    if (j.is_number()) return RateCurve::constant_value(j.get<double>());
    const auto form = j.value("form", std::string("constant"));
    if (form == "constant") return RateCurve::constant_value(j.at("value").get<double>());
    if (form == "sine")
        return RateCurve::sine(j.at("mean").get<double>(), j.value("amplitude", 0.0), j.value("frequency", 1.0),
                               j.value("phase", 0.0));
    if (form == "bump")
        return RateCurve::bump(j.value("baseline", 0.0), j.at("height").get<double>(), j.at("center").get<double>(),
                               j.at("width").get<double>());
    throw ValidationError("unknown curve form '" + form + "'");
}

inline nlohmann::json rate_curve_to_json(const RateCurve& c) {
    switch (c.form) {
        case RateCurve::Form::constant: return {{"form", "constant"}, {"value", c.level}};
        case RateCurve::Form::sine:
            return {{"form", "sine"}, {"mean", c.level}, {"amplitude", c.amplitude}, {"frequency", c.frequency}, {"phase", c.phase}};
        case RateCurve::Form::bump:
            return {{"form", "bump"}, {"baseline", c.level}, {"height", c.amplitude}, {"center", c.center}, {"width", c.width}};
    }
    return {};
}

/// Declarative process description (the JSON form of the TOML documents):
///   T, delta, theta, refractory ("hard" | "smooth"), recovery_tau,
///   lambda_max (optional), neuron = [{rate, self_weight, self_tau}],
///   interaction = [{neurons = [1, 2], gamma, lag}]
/// Neuron numbers are 1-based.
inline MarkedProcessSpec marked_spec_from_json(const nlohmann::json& j) {
    MarkedProcessSpec s;
    s.duration = j.at("T").get<double>();
    s.delta = j.value("delta", s.delta);
    s.theta = j.value("theta", s.theta);
    const auto refr = j.value("refractory", std::string("hard"));
    if (refr == "hard") {
        s.refractory = Refractory::hard;
    } else if (refr == "smooth") {
        s.refractory = Refractory::smooth;
    } else {
        throw ValidationError("refractory must be 'hard' or 'smooth'");
    }
    s.recovery_tau = j.value("recovery_tau", s.recovery_tau);
    if (j.contains("lambda_max")) s.lambda_max = j["lambda_max"].get<double>();
    for (const auto& n : j.at("neuron")) {
        NeuronSpec ns;
        ns.rate = rate_curve_from_json(n.at("rate"));
        ns.self_weight = n.value("self_weight", 0.0);
        ns.self_tau = n.value("self_tau", 0.01);
        s.neurons.push_back(ns);
    }
    if (j.contains("interaction"))
        for (const auto& x : j["interaction"]) {
            InteractionSpec is;
            for (int i : x.at("neurons").get<std::vector<int>>()) is.neurons.push_back(i - 1);
            is.gamma = rate_curve_from_json(x.at("gamma"));
            is.lag = x.value("lag", 0.0);
            s.interactions.push_back(is);
        }
    s.validate();
    return s;
}

inline nlohmann::json marked_spec_to_json(const MarkedProcessSpec& s) {
    nlohmann::json j;
    j["T"] = s.duration;
    j["delta"] = s.delta;
    j["theta"] = s.theta;
    j["refractory"] = s.refractory == Refractory::hard ? "hard" : "smooth";
    j["recovery_tau"] = s.recovery_tau;
    if (s.lambda_max) j["lambda_max"] = *s.lambda_max;
    j["neuron"] = nlohmann::json::array();
    for (const auto& n : s.neurons)
        j["neuron"].push_back({{"rate", rate_curve_to_json(n.rate)}, {"self_weight", n.self_weight}, {"self_tau", n.self_tau}});
    j["interaction"] = nlohmann::json::array();
    for (const auto& x : s.interactions) {
        std::vector<int> ids;
        for (int i : x.neurons) ids.push_back(i + 1);
        j["interaction"].push_back({{"neurons", ids}, {"gamma", rate_curve_to_json(x.gamma)}, {"lag", x.lag}});
    }
    return j;
}

inline nlohmann::json convergence_report_to_json(const ConvergenceReport& r) {
    std::vector<int> subset;
    for (int i : r.subset) subset.push_back(i + 1);
    auto nan_safe = [](const std::vector<double>& v) {
        nlohmann::json a = nlohmann::json::array();
        for (double x : v) a.push_back(std::isfinite(x) ? nlohmann::json(x) : nlohmann::json(nullptr));
        return a;
    };
    auto scalar = [](double x) { return std::isfinite(x) ? nlohmann::json(x) : nlohmann::json(nullptr); };
    return {{"subset", subset},
            {"grid", r.grid},
            {"estimate", nan_safe(r.estimate)},
            {"standard_error", nan_safe(r.standard_error)},
            {"limit", nan_safe(r.limit)},
            {"error", nan_safe(r.error)},
            {"joint_events", r.joint_events},
            {"lag_bins", r.lag_bins},
            {"slope", scalar(r.error_slope)},
            {"monotone", r.monotone},
            {"single_probability", nan_safe(r.single_probability)},
            {"pair_probability", nan_safe(r.pair_probability)},
            {"single_slope", scalar(r.single_slope)},
            {"pair_slope", scalar(r.pair_slope)},
            {"warnings", r.warnings},
            {"reps", r.reps},
            {"seed", r.seed}};
}

/// Realizations as event rows `trial,neuron,time,mark`; the mark lists the
/// 1-based neurons sharing the event joined by '+'.
inline std::string sequences_to_csv(const std::vector<MarkedEventSequence>& seqs, const MarkedProcessSpec& spec) {
    struct Row {
        double time;
        int neuron;
        std::string mark;
    };
    std::string out = "trial,neuron,time,mark\n";
    for (std::size_t r = 0; r < seqs.size(); ++r) {
        std::vector<Row> rows;
        for (const auto& e : seqs[r].events) {
            std::string mark;
            NeuronSet members;
            if (e.interaction >= 0) {
                members = spec.interactions[static_cast<std::size_t>(e.interaction)].neurons;
            } else {
                members = {std::countr_zero(e.mask)};
            }
            for (std::size_t k = 0; k < members.size(); ++k) mark += (k ? "+" : "") + std::to_string(members[k] + 1);
            for (std::size_t k = 0; k < members.size(); ++k) {
                const double t = e.time + (e.lag > 0.0 && k == 1 ? e.lag : 0.0);
                if (t < seqs[r].duration) rows.push_back({t, members[k] + 1, mark});
            }
        }
        std::stable_sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) {
            return a.time < b.time || (a.time == b.time && a.neuron < b.neuron);
        });
        for (const auto& row : rows)
            out += std::to_string(r + 1) + "," + std::to_string(row.neuron) + "," + format_number(row.time) + "," +
                   row.mark + "\n";
    }
    return out;
}

}  // namespace spikesync
