#pragma once

// Iterative proportional fitting of the no-three-way-interaction loglinear
// model to a 2x2x2 table, and the three-neuron model built on top of it.
//
// Cell index = a + 2b + 4c, where a, b, c are the firing indicators of the
// first, second and third neuron.

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "spikesync/errors.hpp"
#include "spikesync/intensity.hpp"
#include "spikesync/loglinear.hpp"
#include "spikesync/spikedata.hpp"

namespace spikesync {

using Table3 = std::array<double, 8>;

struct IpfOptions {
    double tol = 1e-12;  // L1 distance of each fitted two-way margin (probability scale)
    int max_iter = 10000;
    double smoothing = 1e-9;  // added to every cell when an observed margin is zero
};

struct IpfResult {
    Table3 fitted{};  // probabilities, sum to one
    Table3 fitted_counts{};
    int cycles = 0;
    double max_margin_error = 0.0;
    bool smoothed = false;
    // zeta recursion evaluated on the fitted cells, indexed by subset mask.
    std::vector<double> zeta;
};

namespace detail {

/// Two-way margin over dimensions (d1, d2): index u + 2v.
inline std::array<double, 4> margin2(const Table3& t, int d1, int d2) {
    std::array<double, 4> m{};
    for (int c = 0; c < 8; ++c) m[((c >> d1) & 1) + 2 * ((c >> d2) & 1)] += t[static_cast<std::size_t>(c)];
    return m;
}

constexpr std::array<std::array<int, 2>, 3> kPairs{{{0, 1}, {0, 2}, {1, 2}}};

inline double margin_error(const Table3& fitted, const Table3& target) {
    double worst = 0.0;
    for (const auto& [d1, d2] : kPairs) {
        const auto f = margin2(fitted, d1, d2);
        const auto o = margin2(target, d1, d2);
        double l1 = 0.0;
        for (int k = 0; k < 4; ++k) l1 += std::abs(f[static_cast<std::size_t>(k)] - o[static_cast<std::size_t>(k)]);
        worst = std::max(worst, l1);
    }
    return worst;
}

}  // namespace detail

/// Fits cell probabilities m with log m = u + u_i + u_ij (no three-way term)
/// whose two-way margins equal those of `observed`. Starts from the uniform
/// table and cycles through the (12), (13), (23) margins.
inline IpfResult ipf_fit_triple(const Table3& observed, const IpfOptions& opt = {}, double delta = 1.0) {
    double total = 0.0;
    for (double v : observed) {
        if (!(v >= 0.0) || !std::isfinite(v)) throw ArgumentError("IPF counts must be non-negative and finite");
        total += v;
    }
    if (!(total > 0.0)) throw ArgumentError("IPF needs a table with positive total");

    IpfResult res;
    Table3 target{};
    for (std::size_t c = 0; c < 8; ++c) target[c] = observed[c] / total;
    bool zero_margin = false;
    for (const auto& [d1, d2] : detail::kPairs)
        for (double v : detail::margin2(target, d1, d2)) zero_margin = zero_margin || v == 0.0;
    if (zero_margin) {
        res.smoothed = true;
        double t2 = 0.0;
        for (auto& v : target) t2 += (v += opt.smoothing);
        for (auto& v : target) v /= t2;
    }

    Table3 m;
    m.fill(0.125);
    for (int cycle = 1; cycle <= opt.max_iter; ++cycle) {
        for (const auto& [d1, d2] : detail::kPairs) {
            const auto cur = detail::margin2(m, d1, d2);
            const auto want = detail::margin2(target, d1, d2);
            for (int c = 0; c < 8; ++c) {
                const auto k = static_cast<std::size_t>(((c >> d1) & 1) + 2 * ((c >> d2) & 1));
                if (cur[k] > 0.0) m[static_cast<std::size_t>(c)] *= want[k] / cur[k];
            }
        }
        res.cycles = cycle;
        res.max_margin_error = detail::margin_error(m, target);
        if (res.max_margin_error <= opt.tol) break;
    }
    if (res.max_margin_error > opt.tol)
        throw ConvergenceError("IPF did not reach margin tolerance in " + std::to_string(opt.max_iter) + " cycles");

    res.fitted = m;
    for (std::size_t c = 0; c < 8; ++c) res.fitted_counts[c] = m[c] * total;
    res.zeta = zeta_recursion(all_fire_probabilities(m), delta);
    return res;
}

/// 2x2x2 counts of the three neurons over every (trial, bin).
inline Table3 pooled_triple_table(const BinnedTensor& binned, const NeuronSet& triple) {
    check_subset(triple, binned.neurons());
    if (triple.size() != 3) throw ArgumentError("triple table needs three neurons");
    Table3 t{};
    for (std::size_t r = 0; r < binned.trials(); ++r)
        for (std::size_t m = 0; m < binned.bins(); ++m) {
            std::size_t c = 0;
            for (std::size_t k = 0; k < 3; ++k)
                if (binned.at(r, static_cast<std::size_t>(triple[k]), m)) c |= std::size_t{1} << k;
            t[c] += 1.0;
        }
    return t;
}

/// Where the pairwise factors of a TripleModel come from.
enum class PairwiseSource {
    closed_form,  // rate-corrected pairwise estimates N_ij / sum lambda_i lambda_j delta^2
    ipf,          // zeta recursion on the IPF fit of the pooled 2x2x2 table
};

inline TripleModel fit_triple_model(const BinnedTensor& binned, const std::vector<IntensityFit>& fits, Mode mode,
                                    PairwiseSource source = PairwiseSource::closed_form) {
    if (fits.size() != 3) throw ArgumentError("triple model needs three intensity fits");
    TripleModel model;
    model.fits = fits;
    const NeuronSet triple{fits[0].neuron, fits[1].neuron, fits[2].neuron};
    if (source == PairwiseSource::ipf) {
        const auto res = ipf_fit_triple(pooled_triple_table(binned, triple), {}, binned.delta());
        model.zeta12.constant = res.zeta[0b011];
        model.zeta13.constant = res.zeta[0b101];
        model.zeta23.constant = res.zeta[0b110];
        return model;
    }
    auto pair = [&](std::size_t a, std::size_t b) {
        const auto ev = extract_joint_events(binned, {triple[a], triple[b]});
        return estimate_xi_pair(ev, fits[a], fits[b], mode, binned).xi_hat;
    };
    model.zeta12.constant = pair(0, 1);
    model.zeta13.constant = pair(0, 2);
    model.zeta23.constant = pair(1, 2);
    return model;
}

}  // namespace spikesync
