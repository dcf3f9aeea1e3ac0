#pragma once

// Parametric bootstrap tests of H0: xi = 1 (pair, marginal / conditional /
// lagged) and of the no-three-way-interaction hypothesis for triples.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "spikesync/errors.hpp"
#include "spikesync/intensity.hpp"
#include "spikesync/ipf.hpp"
#include "spikesync/loglinear.hpp"
#include "spikesync/rng.hpp"
#include "spikesync/simulate.hpp"
#include "spikesync/spikedata.hpp"

namespace spikesync {

enum class Hypothesis { pair_marginal, pair_conditional, pair_lagged, triple };

inline const char* to_string(Hypothesis h) {
    switch (h) {
        case Hypothesis::pair_marginal: return "pair-marginal";
        case Hypothesis::pair_conditional: return "pair-conditional";
        case Hypothesis::pair_lagged: return "pair-lagged";
        case Hypothesis::triple: return "triple";
    }
    return "";
}

inline Hypothesis parse_hypothesis(const std::string& s) {
    if (s == "pair-marginal") return Hypothesis::pair_marginal;
    if (s == "pair-conditional") return Hypothesis::pair_conditional;
    if (s == "pair-lagged") return Hypothesis::pair_lagged;
    if (s == "triple") return Hypothesis::triple;
    throw ArgumentError("unknown hypothesis '" + s + "'");
}

/// Where the population covariate of conditional replicates comes from.
enum class PopulationSource {
    observed,     // condition on the observed per-trial population counts
    resimulated,  // redraw population neurons from their per-bin firing frequencies
};

struct TestSpec {
    Hypothesis hypothesis = Hypothesis::pair_marginal;
    std::size_t replicates = 1000;
    double alpha = 0.05;
    std::uint64_t seed = 0;
    std::size_t lag_bins = 0;  // pair-lagged only
    bool refit = false;        // refit intensities on every replicate
    PopulationSource population = PopulationSource::observed;
    /// Cap on lambda * delta while simulating conditional replicates; 0
    /// turns a runaway history into a ResolutionError.
    double probability_ceiling = 0.5;
    unsigned threads = 1;
};

struct PValues {
    std::optional<double> z;
    std::optional<double> p_normal;
    double p_empirical = 1.0;
};

struct BootstrapResult {
    std::size_t replicates = 0;
    /// log xi-hat per replicate (NaN when N = 0), or xi-hat itself when the
    /// observed statistic has no logarithm.
    std::vector<double> statistics;
    bool log_scale = true;
    double observed = 0.0;
    double mean = 0.0;
    double se = 0.0;
    std::optional<double> z;
    std::optional<double> p_normal;
    double p_empirical = 1.0;
    std::uint64_t seed = 0;
    std::size_t undefined_count = 0;
    std::vector<std::string> warnings;

    bool reject(double alpha) const { return p_normal ? *p_normal < alpha : p_empirical < alpha; }
};

inline double normal_two_sided_p(double z) { return std::erfc(std::abs(z) / std::sqrt(2.0)); }

/// z = observed / se, two-sided normal p, and the empirical tail proportion
/// (1 + #{|replicate| >= |observed|}) / (B + 1) over defined replicates.
inline PValues z_and_p(double observed, std::span<const double> replicates, double se) {
    PValues out;
    if (se > 0.0 && std::isfinite(se)) {
        out.z = observed / se;
        out.p_normal = normal_two_sided_p(*out.z);
    }
    std::size_t defined = 0;
    std::size_t extreme = 0;
    for (double v : replicates) {
        if (std::isnan(v)) continue;
        ++defined;
        if (std::abs(v) >= std::abs(observed)) ++extreme;
    }
    out.p_empirical = static_cast<double>(1 + extreme) / static_cast<double>(defined + 1);
    return out;
}

namespace detail {

inline BinnedTensor with_rows(const BinnedTensor& observed, const BinnedTensor& replicate, const NeuronSet& rows) {
    BinnedTensor out = observed;
    for (std::size_t r = 0; r < observed.trials(); ++r)
        for (std::size_t k = 0; k < rows.size(); ++k) {
            auto dst = out.row(r, static_cast<std::size_t>(rows[k]));
            auto src = replicate.row(r, k);
            std::copy(src.begin(), src.end(), dst.begin());
        }
    return out;
}

/// Population neurons redrawn as independent Bernoulli trains with each
/// neuron's per-bin firing frequency across trials.
inline void resimulate_population(BinnedTensor& t, const BinnedTensor& observed, const NeuronSet& modelled, Rng& rng) {
    for (std::size_t i = 0; i < t.neurons(); ++i) {
        if (std::find(modelled.begin(), modelled.end(), static_cast<int>(i)) != modelled.end()) continue;
        for (std::size_t m = 0; m < t.bins(); ++m) {
            double f = 0.0;
            for (std::size_t r = 0; r < t.trials(); ++r) f += observed.at(r, i, m);
            f /= static_cast<double>(t.trials());
            for (std::size_t r = 0; r < t.trials(); ++r) t.set(r, i, m, rng.uniform() < f ? 1 : 0);
        }
    }
}

inline IntensityFit refit_like(const IntensityFit& f, const BinnedTensor& data) {
    IrlsOptions opt;
    opt.ridge = f.ridge;
    if (f.history) return fit_conditional_intensity(data, f.neuron, f.basis, *f.history, opt);
    return fit_marginal_intensity(data, f.neuron, f.basis, opt);
}

inline Mode hypothesis_mode(const TestSpec& spec, const XiEstimate& observed) {
    if (spec.hypothesis == Hypothesis::pair_marginal) return Mode::marginal;
    if (spec.hypothesis == Hypothesis::pair_conditional) return Mode::conditional;
    return observed.mode;
}

/// The statistic of the tested hypothesis on a full data tensor.
inline XiEstimate statistic_on(const BinnedTensor& data, const std::vector<IntensityFit>& fits, const TestSpec& spec,
                               Mode mode) {
    if (spec.hypothesis == Hypothesis::triple) {
        const auto model = fit_triple_model(data, fits, mode);
        const auto ev = extract_joint_events(data, {fits[0].neuron, fits[1].neuron, fits[2].neuron});
        return estimate_xi_123(ev, model, mode, data);
    }
    const auto ev = extract_joint_events(data, {fits[0].neuron, fits[1].neuron},
                                         spec.hypothesis == Hypothesis::pair_lagged ? spec.lag_bins : 0);
    return estimate_xi_pair(ev, fits[0], fits[1], mode, data);
}

}  // namespace detail

/// Parametric bootstrap. The null model keeps the fitted intensities and
/// sets the tested interaction factor to one (triples keep the fitted
/// pairwise factors). Replicate b is simulated with seed
/// derive_seed(spec.seed, b); its statistic is recomputed with the same
/// fitted intensities unless spec.refit is set.
inline BootstrapResult bootstrap_test(const BinnedTensor& data, const std::vector<IntensityFit>& fits,
                                      const XiEstimate& observed, const TestSpec& spec) {
    const bool triple = spec.hypothesis == Hypothesis::triple;
    if (fits.size() != (triple ? 3U : 2U))
        throw ArgumentError(std::string("hypothesis ") + to_string(spec.hypothesis) + " needs " +
                            (triple ? "three" : "two") + " intensity fits");
    if (spec.replicates == 0) throw ArgumentError("bootstrap needs at least one replicate");
    if (spec.hypothesis == Hypothesis::pair_lagged && spec.lag_bins == 0)
        throw ArgumentError("lagged hypothesis needs a positive lag");
    if (!(spec.probability_ceiling >= 0.0 && spec.probability_ceiling < 1.0))
        throw ArgumentError("probability ceiling must lie in [0, 1)");
    const Mode mode = detail::hypothesis_mode(spec, observed);
    NeuronSet rows;
    for (const auto& f : fits) {
        if (std::abs(f.delta - data.delta()) > 1e-12 * data.delta())
            throw ArgumentError("intensity fits were estimated at a different bin width");
        rows.push_back(f.neuron);
    }

    InteractionSet null_zetas;
    if (triple) {
        const auto model = fit_triple_model(data, fits, mode);
        null_zetas = model.interactions(false);
    }
    auto model = make_cell_model(fits, null_zetas, mode, data);
    model.probability_ceiling = spec.probability_ceiling;

    BootstrapResult res;
    res.replicates = spec.replicates;
    res.seed = spec.seed;
    res.log_scale = observed.log_xi.has_value();
    res.observed = res.log_scale ? *observed.log_xi : observed.xi_hat;

    // Marginal replicates with fixed intensities share one expected count.
    const bool fixed_expected = mode == Mode::marginal && !spec.refit && !triple;
    const double expected = fixed_expected ? observed.expected_joint : 0.0;
    const std::size_t lag = spec.hypothesis == Hypothesis::pair_lagged ? spec.lag_bins : 0;

    std::vector<double> xi(spec.replicates, 0.0);
    std::vector<std::size_t> joint(spec.replicates, 0);
    std::vector<std::size_t> saturated(spec.replicates, 0);
    parallel_for(spec.replicates, spec.threads, [&](std::size_t b) {
        const auto seed = derive_seed(spec.seed, b);
        if (fixed_expected) {
            const auto rep = simulate_binary_null(model, data.trials(), seed);
            const auto n = extract_joint_events(rep, {0, 1}, lag).count();
            joint[b] = n;
            xi[b] = static_cast<double>(n) / expected;
            return;
        }
        CellModel m = model;
        BinnedTensor pop_source = data;
        if (mode == Mode::conditional && spec.population == PopulationSource::resimulated) {
            Rng prng(derive_seed(seed, 1));
            detail::resimulate_population(pop_source, data, rows, prng);
            m = make_cell_model(fits, null_zetas, mode, pop_source);
            m.probability_ceiling = spec.probability_ceiling;
        }
        const auto rep = simulate_binary_null(m, data.trials(), seed, &saturated[b]);
        const auto full = detail::with_rows(pop_source, rep, rows);
        std::vector<IntensityFit> use = fits;
        if (spec.refit)
            for (auto& f : use) f = detail::refit_like(f, full);
        try {
            const auto est = detail::statistic_on(full, use, spec, mode);
            joint[b] = est.n_joint;
            xi[b] = est.xi_hat;
        } catch (const DegenerateError&) {
            joint[b] = 0;
            xi[b] = 0.0;
        }
    });

    res.statistics.resize(spec.replicates);
    std::size_t undefined = 0;
    for (std::size_t b = 0; b < spec.replicates; ++b) {
        if (joint[b] == 0) ++undefined;
        if (res.log_scale) {
            res.statistics[b] = joint[b] > 0 ? std::log(xi[b]) : std::numeric_limits<double>::quiet_NaN();
        } else {
            res.statistics[b] = xi[b];
        }
    }
    res.undefined_count = undefined;
    if (undefined == spec.replicates)
        throw DegenerateError("no replicate produced a joint event; the test is degenerate");

    double sum = 0.0;
    double sq = 0.0;
    std::size_t n = 0;
    for (double v : res.statistics)
        if (!std::isnan(v)) {
            sum += v;
            ++n;
        }
    res.mean = sum / static_cast<double>(n);
    for (double v : res.statistics)
        if (!std::isnan(v)) sq += (v - res.mean) * (v - res.mean);
    res.se = n > 1 ? std::sqrt(sq / static_cast<double>(n - 1)) : 0.0;

    if (res.log_scale) {
        const auto p = z_and_p(res.observed, res.statistics, res.se);
        res.z = p.z;
        res.p_normal = p.p_normal;
        res.p_empirical = p.p_empirical;
    } else {
        // No observed joint event: compare the raw ratio with its null value
        // one, one-sided towards deficits.
        if (res.se > 0.0) {
            res.z = (res.observed - 1.0) / res.se;
            res.p_normal = normal_two_sided_p(*res.z);
        }
        std::size_t low = 0;
        for (double v : res.statistics)
            if (v <= res.observed) ++low;
        res.p_empirical = static_cast<double>(1 + low) / static_cast<double>(spec.replicates + 1);
        res.warnings.push_back("no observed joint events; statistic is the raw ratio, one-sided empirical p");
    }
    if (const auto capped = std::accumulate(saturated.begin(), saturated.end(), std::size_t{0}); capped > 0)
        res.warnings.push_back(std::to_string(capped) + " simulated bins hit the probability ceiling " +
                               std::to_string(spec.probability_ceiling) + "; the history model runs away");
    if (spec.replicates < 100) res.warnings.push_back("fewer than 100 replicates; p-values are coarse");
    if (static_cast<double>(undefined) > 0.05 * static_cast<double>(spec.replicates))
        res.warnings.push_back(std::to_string(undefined) + " of " + std::to_string(spec.replicates) +
                               " replicates had no joint events and were excluded from the standard error");
    return res;
}

}  // namespace spikesync
