#pragma once

// Excess-synchrony estimators and loglinear cell tables.
//
// Subsets of the modelled neurons are encoded as bit masks over positions
// in the fit list: bit k set means "the k-th modelled neuron fires".

#include <bit>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "spikesync/bspline.hpp"
#include "spikesync/errors.hpp"
#include "spikesync/intensity.hpp"
#include "spikesync/spikedata.hpp"

namespace spikesync {

enum class Mode { marginal, conditional };

inline const char* to_string(Mode m) { return m == Mode::marginal ? "marginal" : "conditional"; }

inline Mode parse_mode(const std::string& s) {
    if (s == "marginal") return Mode::marginal;
    if (s == "conditional") return Mode::conditional;
    throw ArgumentError("unknown mode '" + s + "' (expected marginal or conditional)");
}

/// Observed joint count over its expectation under the fitted model.
struct XiEstimate {
    NeuronSet subset;
    Mode mode = Mode::marginal;
    std::size_t lag_bins = 0;
    double delta = 0.0;
    std::size_t n_joint = 0;
    double expected_joint = 0.0;
    double xi_hat = 0.0;
    std::optional<double> log_xi;  // empty when n_joint == 0

    double lag_seconds() const noexcept { return static_cast<double>(lag_bins) * delta; }
};

inline XiEstimate make_xi_estimate(NeuronSet subset, Mode mode, std::size_t lag_bins, double delta,
                                   std::size_t n_joint, double expected) {
    if (!(expected > 0.0) || !std::isfinite(expected))
        throw DegenerateError("expected joint count is zero; the fitted model predicts no joint events");
    XiEstimate e{std::move(subset), mode, lag_bins, delta, n_joint, expected, 0.0, std::nullopt};
    e.xi_hat = static_cast<double>(n_joint) / expected;
    if (n_joint > 0) e.log_xi = std::log(e.xi_hat);
    return e;
}

/// delta^k * sum over (trial, bin) of the product of intensities, the
/// second grid shifted by `lag` bins. Grids are trial-major.
inline double expected_joint_count(std::span<const std::span<const double>> grids, std::size_t trials,
                                   std::size_t bins, std::size_t lag, double delta,
                                   std::span<const double> per_bin_factor = {}) {
    double total = 0.0;
    for (std::size_t r = 0; r < trials; ++r) {
        for (std::size_t m = 0; m + lag < bins; ++m) {
            double prod = per_bin_factor.empty() ? 1.0 : per_bin_factor[m];
            for (std::size_t g = 0; g < grids.size(); ++g)
                prod *= grids[g][r * bins + m + (g == 1 ? lag : 0)];
            total += prod;
        }
    }
    return total * std::pow(delta, static_cast<double>(grids.size()));
}

namespace detail {

inline void check_fit_mode(const IntensityFit& fit, Mode mode) {
    if (mode == Mode::conditional && !fit.has_history())
        throw ArgumentError("conditional mode needs history-dependent intensity fits");
    if (mode == Mode::marginal && fit.has_history())
        throw ArgumentError("marginal mode needs intensity fits without history terms");
}

}  // namespace detail

/// Pairwise estimator: N divided by sum_r sum_m lambda1 * lambda2 * delta^2,
/// intensities evaluated with each trial's realized history in conditional
/// mode, and the second intensity shifted by the lag in lag mode.
inline XiEstimate estimate_xi_pair(const JointEventSet& events, const IntensityFit& fit1, const IntensityFit& fit2,
                                   Mode mode, const BinnedTensor& binned) {
    if (events.subset.size() != 2) throw ArgumentError("pairwise estimate needs a two-neuron event set");
    if (fit1.neuron != events.subset[0] || fit2.neuron != events.subset[1])
        throw ArgumentError("intensity fits do not match the neurons of the event set");
    detail::check_fit_mode(fit1, mode);
    detail::check_fit_mode(fit2, mode);
    const auto g1 = intensity_grid(fit1, binned, fit1.neuron);
    const auto g2 = intensity_grid(fit2, binned, fit2.neuron);
    const std::span<const double> grids[] = {g1, g2};
    const double expected =
        expected_joint_count(grids, binned.trials(), binned.bins(), events.lag_bins, binned.delta());
    return make_xi_estimate(events.subset, mode, events.lag_bins, binned.delta(), events.count(), expected);
}

/// Smoothed, time-varying excess-synchrony curve.
struct ZetaCurve {
    std::vector<double> times;   // bin centres
    std::vector<double> zeta;    // NaN where undefined
    std::vector<double> joint_rate;  // fitted lambda^{1,2}(t), events / s^2
    std::size_t n_joint = 0;
    double expected_from_curve = 0.0;  // sum_m R delta^2 lambda1 lambda2 zeta

    bool defined(std::size_t m) const { return !std::isnan(zeta[m]); }
};

/// Fits a smooth log-rate to the per-bin joint counts pooled over trials
/// (offset log(R delta^2)) and divides by the product of the marginal
/// intensities. Requires N >= 2 * basis size.
inline ZetaCurve estimate_zeta_timevarying(const JointEventSet& events, const IntensityFit& fit1,
                                           const IntensityFit& fit2, const SplineBasis& smoother,
                                           const BinnedTensor& binned, const IrlsOptions& opt = {}) {
    if (events.subset.size() != 2) throw ArgumentError("time-varying zeta needs a two-neuron event set");
    detail::check_fit_mode(fit1, Mode::marginal);
    detail::check_fit_mode(fit2, Mode::marginal);
    const std::size_t n = events.count();
    if (n < 2 * smoother.size())
        throw InsufficientEventsError("only " + std::to_string(n) + " joint events for a " +
                                      std::to_string(smoother.size()) +
                                      "-function smoother; assume a constant excess-synchrony factor instead");
    const std::size_t bins = binned.bins();
    const std::size_t lag = events.lag_bins;
    const double delta = binned.delta();

    DesignMatrix d;
    d.x = detail::spline_block(smoother, bins, delta);
    d.columns = detail::spline_column_names(smoother);
    d.y = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(bins));
    for (const auto& trial : events.bins)
        for (std::size_t m : trial) d.y[static_cast<Eigen::Index>(m)] += 1.0;
    d.offset = Eigen::VectorXd::Constant(static_cast<Eigen::Index>(bins),
                                         std::log(static_cast<double>(binned.trials()) * delta * delta));
    // Bins past the lag horizon carry no observations.
    if (lag > 0) {
        DesignMatrix trimmed;
        const auto keep = static_cast<Eigen::Index>(bins - lag);
        trimmed.x = d.x.topRows(keep);
        trimmed.y = d.y.head(keep);
        trimmed.offset = d.offset.head(keep);
        trimmed.columns = d.columns;
        d = std::move(trimmed);
    }
    const auto pf = fit_poisson_irls(d, opt);

    ZetaCurve curve;
    curve.n_joint = n;
    curve.times.resize(bins);
    curve.zeta.assign(bins, std::numeric_limits<double>::quiet_NaN());
    curve.joint_rate.assign(bins, std::numeric_limits<double>::quiet_NaN());
    const auto r1 = fit1.spline_log_rates(bins, delta);
    const auto r2 = fit2.spline_log_rates(bins, delta);
    for (std::size_t m = 0; m < bins; ++m) {
        curve.times[m] = (static_cast<double>(m) + 0.5) * delta;
        if (m + lag >= bins) continue;
        const double joint = std::exp((d.x.row(static_cast<Eigen::Index>(m)) * pf.beta)(0));
        curve.joint_rate[m] = joint;
        const double product = std::exp(r1[m]) * std::exp(r2[m + lag]);
        if (product > 0.0 && std::isfinite(product)) {
            curve.zeta[m] = joint / product;
            curve.expected_from_curve += static_cast<double>(binned.trials()) * delta * delta * product * curve.zeta[m];
        }
    }
    return curve;
}

// --------------------------------------------------------------------------
// Cell tables
// --------------------------------------------------------------------------

/// Interaction factor zeta_Xi: a constant or one value per bin.
struct InteractionFactor {
    double constant = 1.0;
    std::vector<double> per_bin;

    double at(std::size_t bin) const { return per_bin.empty() ? constant : per_bin.at(bin); }
};

/// Factors keyed by subset mask (only masks with at least two bits matter).
using InteractionSet = std::map<unsigned, InteractionFactor>;

inline unsigned pair_mask(unsigned a, unsigned b) { return (1U << a) | (1U << b); }

/// Probabilities of all 2^nu firing patterns in one bin from per-neuron
/// firing probabilities p_i = lambda_i * delta and interaction factors.
///
/// "All of S fire" probabilities Q(S) = prod_{i in S} p_i * prod_{Xi subset S,
/// |Xi|>=2} zeta_Xi are built first; exact pattern probabilities follow by
/// inclusion-exclusion, so the all-zero pattern is the remainder and the
/// table sums to one. Returns false if a cell is negative.
inline bool cells_from_probabilities(std::span<const double> p, std::span<const double> zeta_by_mask,
                                     std::span<double> cells) {
    const std::size_t nu = p.size();
    const std::size_t patterns = std::size_t{1} << nu;
    std::vector<double> q(patterns, 1.0);
    for (std::size_t s = 1; s < patterns; ++s) {
        double v = 1.0;
        for (std::size_t i = 0; i < nu; ++i)
            if (s & (std::size_t{1} << i)) v *= p[i];
        // Each subset Xi of s with at least two members.
        for (std::size_t xi = s; xi; xi = (xi - 1) & s)
            if (std::popcount(xi) >= 2) v *= zeta_by_mask[xi];
        q[s] = v;
    }
    bool ok = true;
    for (std::size_t s = 0; s < patterns; ++s) {
        double c = 0.0;
        const std::size_t rest = (patterns - 1) & ~s;
        for (std::size_t extra = rest;; extra = (extra - 1) & rest) {
            const double term = q[s | extra];
            c += (std::popcount(extra) % 2 == 0) ? term : -term;
            if (extra == 0) break;
        }
        if (c < 0.0) {
            if (c > -1e-15) {
                c = 0.0;
            } else {
                ok = false;
            }
        }
        cells[s] = c;
    }
    return ok;
}

/// Pattern probabilities for every (trial, bin). Marginal tables are shared
/// by all trials and stored once.
struct CellTable {
    std::size_t neurons = 0;
    std::size_t trials = 1;
    std::size_t bins = 0;
    double delta = 0.0;
    Mode mode = Mode::marginal;
    std::vector<double> cells;

    std::size_t patterns() const noexcept { return std::size_t{1} << neurons; }
    bool shared_across_trials() const noexcept { return mode == Mode::marginal; }

    std::span<const double> at(std::size_t trial, std::size_t bin) const {
        const std::size_t r = shared_across_trials() ? 0 : trial;
        return {cells.data() + (r * bins + bin) * patterns(), patterns()};
    }
    std::span<double> at(std::size_t trial, std::size_t bin) {
        const std::size_t r = shared_across_trials() ? 0 : trial;
        return {cells.data() + (r * bins + bin) * patterns(), patterns()};
    }
};

namespace detail {

inline std::vector<double> zeta_vector(const InteractionSet& zetas, std::size_t nu, std::size_t bin) {
    std::vector<double> z(std::size_t{1} << nu, 1.0);
    for (const auto& [mask, factor] : zetas) {
        if (mask >= z.size()) throw ArgumentError("interaction mask refers to an unmodelled neuron");
        if (std::popcount(mask) < 2) continue;
        const double v = factor.at(bin);
        if (!(v >= 0.0)) throw ArgumentError("interaction factors must be non-negative");
        z[mask] = v;
    }
    return z;
}

inline void fill_cells(std::span<const double> p, std::span<const double> z, std::span<double> out, std::size_t trial,
                       std::size_t bin) {
    for (double pi : p)
        if (!(pi < 1.0))
            throw ResolutionError("lambda * delta >= 1 at bin " + std::to_string(bin) +
                                  "; use a smaller bin width");
    if (!cells_from_probabilities(p, z, out))
        throw InfeasibleTableError("negative cell probability at trial " + std::to_string(trial + 1) + ", bin " +
                                       std::to_string(bin) + ": interaction factors too large for these rates",
                                   trial, bin);
}

}  // namespace detail

/// Full 2^nu table per bin (and per trial in conditional mode, with
/// intensities evaluated on each trial's realized history in `binned`).
inline CellTable build_cell_table(const std::vector<IntensityFit>& fits, const InteractionSet& zetas, double delta,
                                  Mode mode, const BinnedTensor& binned) {
    const std::size_t nu = fits.size();
    if (nu < 2 || nu > 3) throw ArgumentError("cell tables are built for two or three neurons");
    for (const auto& f : fits) detail::check_fit_mode(f, mode);
    if (std::abs(delta - binned.delta()) > 1e-12 * delta) throw ArgumentError("bin width does not match the data");

    CellTable table;
    table.neurons = nu;
    table.bins = binned.bins();
    table.delta = delta;
    table.mode = mode;
    table.trials = mode == Mode::marginal ? 1 : binned.trials();

    std::vector<std::vector<double>> grids;
    for (const auto& f : fits) {
        if (mode == Mode::marginal) {
            auto rates = f.spline_log_rates(table.bins, delta);
            for (auto& r : rates) r = std::exp(r);
            grids.push_back(std::move(rates));
        } else {
            grids.push_back(intensity_grid(f, binned, f.neuron));
        }
    }
    table.cells.assign(table.trials * table.bins * table.patterns(), 0.0);
    std::vector<double> p(nu);
    for (std::size_t m = 0; m < table.bins; ++m) {
        const auto z = detail::zeta_vector(zetas, nu, m);
        for (std::size_t r = 0; r < table.trials; ++r) {
            for (std::size_t i = 0; i < nu; ++i) p[i] = grids[i][r * table.bins + m] * delta;
            detail::fill_cells(p, z, table.at(r, m), r, m);
        }
    }
    return table;
}

/// Generator state for discrete-time null simulation. Marginal mode uses a
/// fixed table per bin; conditional mode rebuilds the table every bin from
/// the simulated own-history counts and the observed population counts.
struct CellModel {
    std::vector<IntensityFit> fits;
    InteractionSet zetas;
    Mode mode = Mode::marginal;
    double delta = 0.0;
    std::size_t bins = 0;
    std::vector<std::vector<double>> base_log_rate;  // [neuron][bin]
    std::vector<std::vector<double>> population;     // [neuron][trial * bins + bin], observed
    std::size_t observed_trials = 0;
    /// Conditional simulation only: self-exciting history fits can run away
    /// on simulated histories. A positive ceiling caps lambda * delta there
    /// instead of failing; zero keeps the strict resolution check.
    double probability_ceiling = 0.0;

    std::size_t neurons() const noexcept { return fits.size(); }
    bool needs_observed_trials() const {
        for (const auto& f : fits)
            if (f.population_term) return true;
        return false;
    }
};

inline CellModel make_cell_model(std::vector<IntensityFit> fits, InteractionSet zetas, Mode mode,
                                 const BinnedTensor& observed) {
    if (fits.size() < 2 || fits.size() > 3) throw ArgumentError("cell models cover two or three neurons");
    for (const auto& f : fits) detail::check_fit_mode(f, mode);
    CellModel model;
    model.mode = mode;
    model.delta = observed.delta();
    model.bins = observed.bins();
    model.observed_trials = observed.trials();
    for (const auto& f : fits) {
        model.base_log_rate.push_back(f.spline_log_rates(model.bins, model.delta));
        if (f.population_term) {
            model.population.push_back(trailing_counts(
                observed, population_members(observed.neurons(), f.neuron, f.history->exclusion), f.population_bins));
        } else {
            model.population.emplace_back();
        }
    }
    model.fits = std::move(fits);
    model.zetas = std::move(zetas);
    // Fail early on an infeasible or over-coarse model at the realized histories.
    if (mode == Mode::marginal) {
        (void)build_cell_table(model.fits, model.zetas, model.delta, mode, observed);
    }
    return model;
}

/// Marginal table implied by a cell model (conditional models have none).
inline CellTable marginal_table(const CellModel& model) {
    if (model.mode != Mode::marginal) throw ArgumentError("conditional models have no fixed table");
    CellTable table;
    table.neurons = model.neurons();
    table.bins = model.bins;
    table.delta = model.delta;
    table.mode = Mode::marginal;
    table.cells.assign(table.bins * table.patterns(), 0.0);
    std::vector<double> p(model.neurons());
    for (std::size_t m = 0; m < model.bins; ++m) {
        for (std::size_t i = 0; i < p.size(); ++i) p[i] = std::exp(model.base_log_rate[i][m]) * model.delta;
        detail::fill_cells(p, detail::zeta_vector(model.zetas, model.neurons(), m), table.at(0, m), 0, m);
    }
    return table;
}

// --------------------------------------------------------------------------
// Three neurons
// --------------------------------------------------------------------------

/// Two-way interaction model for three neurons (no three-way term unless
/// zeta123 differs from one).
struct TripleModel {
    std::vector<IntensityFit> fits;  // three fits, in subset order
    InteractionFactor zeta12, zeta13, zeta23;
    InteractionFactor zeta123;

    InteractionSet interactions(bool include_three_way = false) const {
        InteractionSet s{{pair_mask(0, 1), zeta12}, {pair_mask(0, 2), zeta13}, {pair_mask(1, 2), zeta23}};
        if (include_three_way) s[0b111] = zeta123;
        return s;
    }
};

/// N / sum delta^3 lambda1 lambda2 lambda3 zeta12 zeta13 zeta23.
inline XiEstimate estimate_xi_123(const JointEventSet& events, const TripleModel& triple, Mode mode,
                                  const BinnedTensor& binned) {
    if (events.subset.size() != 3 || events.lag_bins != 0)
        throw ArgumentError("three-way estimate needs a synchronous three-neuron event set");
    if (triple.fits.size() != 3) throw ArgumentError("triple model needs three intensity fits");
    for (std::size_t k = 0; k < 3; ++k) {
        if (triple.fits[k].neuron != events.subset[k])
            throw ArgumentError("intensity fits do not match the neurons of the event set");
        detail::check_fit_mode(triple.fits[k], mode);
    }
    std::vector<std::vector<double>> g;
    for (const auto& f : triple.fits) g.push_back(intensity_grid(f, binned, f.neuron));
    std::vector<double> factor(binned.bins());
    for (std::size_t m = 0; m < binned.bins(); ++m)
        factor[m] = triple.zeta12.at(m) * triple.zeta13.at(m) * triple.zeta23.at(m);
    const std::span<const double> grids[] = {g[0], g[1], g[2]};
    const double expected = expected_joint_count(grids, binned.trials(), binned.bins(), 0, binned.delta(), factor);
    return make_xi_estimate(events.subset, mode, 0, binned.delta(), events.count(), expected);
}

/// zeta recursion over subsets: zeta_{i} = P_i / delta and, for |S| >= 2,
/// zeta_S = delta^{-|S|} P_S / prod_{proper nonempty Xi of S} zeta_Xi, where
/// P_S is the probability that every neuron of S fires. Index 0 is unused.
/// Entries with a zero denominator are NaN.
inline std::vector<double> zeta_recursion(std::span<const double> all_fire, double delta) {
    const std::size_t patterns = all_fire.size();
    std::vector<double> zeta(patterns, std::numeric_limits<double>::quiet_NaN());
    for (std::size_t s = 1; s < patterns; ++s) {
        double denom = 1.0;
        for (std::size_t xi = (s - 1) & s; xi; xi = (xi - 1) & s) denom *= zeta[xi];
        const double scaled = all_fire[s] / std::pow(delta, std::popcount(s));
        zeta[s] = (denom > 0.0 && std::isfinite(denom)) ? scaled / denom : std::numeric_limits<double>::quiet_NaN();
    }
    return zeta;
}

/// P(all of S fire) from exact pattern probabilities.
inline std::vector<double> all_fire_probabilities(std::span<const double> cells) {
    const std::size_t patterns = cells.size();
    std::vector<double> q(patterns, 0.0);
    for (std::size_t s = 0; s < patterns; ++s)
        for (std::size_t c = 0; c < patterns; ++c)
            if ((c & s) == s) q[s] += cells[c];
    return q;
}

}  // namespace spikesync
