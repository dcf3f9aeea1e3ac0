#pragma once

// Cross-validated ROC comparison of marginal and conditional joint-spike
// predictions.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "spikesync/errors.hpp"
#include "spikesync/intensity.hpp"
#include "spikesync/loglinear.hpp"
#include "spikesync/rng.hpp"
#include "spikesync/spikedata.hpp"

namespace spikesync {

struct RocCurve {
    std::vector<double> thresholds;  // first entry +inf, then distinct scores descending
    std::vector<double> fpr;
    std::vector<double> tpr;
    double auc = 0.0;
    std::size_t folds = 0;
    std::size_t positives = 0;
    std::size_t negatives = 0;
};

/// ROC of "predict positive when score >= threshold" over every distinct
/// score. Tied scores move together; the area uses the trapezoid rule.
inline RocCurve roc_curve(std::span<const double> scores, std::span<const std::uint8_t> labels) {
    if (scores.size() != labels.size()) throw ArgumentError("scores and labels differ in length");
    RocCurve c;
    for (auto l : labels) (l ? c.positives : c.negatives)++;
    if (c.positives == 0) throw DegenerateError("no positive labels; ROC is undefined");
    if (c.negatives == 0) throw DegenerateError("no negative labels; ROC is undefined");
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return scores[a] > scores[b]; });

    const double np = static_cast<double>(c.positives);
    const double nn = static_cast<double>(c.negatives);
    c.thresholds.push_back(std::numeric_limits<double>::infinity());
    c.fpr.push_back(0.0);
    c.tpr.push_back(0.0);
    std::size_t tp = 0;
    std::size_t fp = 0;
    for (std::size_t k = 0; k < order.size();) {
        const double s = scores[order[k]];
        while (k < order.size() && scores[order[k]] == s) (labels[order[k++]] ? tp : fp)++;
        c.thresholds.push_back(s);
        c.fpr.push_back(static_cast<double>(fp) / nn);
        c.tpr.push_back(static_cast<double>(tp) / np);
    }
    for (std::size_t k = 1; k < c.fpr.size(); ++k)
        c.auc += (c.fpr[k] - c.fpr[k - 1]) * (c.tpr[k] + c.tpr[k - 1]) / 2.0;
    return c;
}

struct ThresholdPrediction {
    double threshold = std::numeric_limits<double>::infinity();
    std::vector<std::size_t> predicted;  // indices into the score vector
    double fpr = 0.0;
    double tpr = 0.0;
};

/// Lowest ROC threshold whose false-positive rate stays within the target,
/// i.e. the most predictions the target allows; ties are never split.
inline ThresholdPrediction predict_at_fpr(std::span<const double> scores, std::span<const std::uint8_t> labels,
                                          double target_fpr) {
    if (!(target_fpr >= 0.0 && target_fpr <= 1.0)) throw ArgumentError("target false-positive rate must be in [0, 1]");
    const auto curve = roc_curve(scores, labels);
    ThresholdPrediction out;
    for (std::size_t k = 0; k < curve.thresholds.size(); ++k)
        if (curve.fpr[k] <= target_fpr + 1e-12) {
            out.threshold = curve.thresholds[k];
            out.fpr = curve.fpr[k];
            out.tpr = curve.tpr[k];
        }
    for (std::size_t i = 0; i < scores.size(); ++i)
        if (scores[i] >= out.threshold) out.predicted.push_back(i);
    return out;
}

struct RocOptions {
    std::size_t folds = 10;
    std::uint64_t seed = 0;
    double knot_spacing = 0.1;
    HistoryCovariateSpec history{};  // conditional mode; the partner neuron is always excluded
    IrlsOptions irls{};
    unsigned threads = 1;
};

/// Pooled held-out scores with their (trial, bin) keys.
struct CvRocResult {
    RocCurve curve;
    Mode mode = Mode::marginal;
    NeuronSet pair;
    std::vector<double> scores;
    std::vector<std::uint8_t> labels;
    std::vector<std::size_t> trial;
    std::vector<std::size_t> bin;
    std::vector<std::size_t> fold_of_trial;
    std::vector<double> fold_xi;
    std::uint64_t seed = 0;

    ThresholdPrediction predict_joint_at_fpr(double target_fpr) const {
        return predict_at_fpr(scores, labels, target_fpr);
    }
};

/// Trial -> fold, from a seeded shuffle of trial indices dealt round-robin.
inline std::vector<std::size_t> assign_folds(std::size_t trials, std::size_t folds, std::uint64_t seed) {
    if (folds < 2) throw ArgumentError("cross-validation needs at least two folds");
    if (trials < folds) throw ArgumentError("fewer trials (" + std::to_string(trials) + ") than folds (" +
                                            std::to_string(folds) + ")");
    std::vector<std::size_t> order(trials);
    std::iota(order.begin(), order.end(), 0);
    Rng rng(seed);
    rng.shuffle(order);
    std::vector<std::size_t> fold(trials);
    for (std::size_t k = 0; k < trials; ++k) fold[order[k]] = k % folds;
    return fold;
}

/// History spec for one neuron of an analysed pair: the partner joins the
/// exclusion set so the population covariate counts only other neurons.
inline HistoryCovariateSpec pair_history(HistoryCovariateSpec h, int partner) {
    if (std::find(h.exclusion.begin(), h.exclusion.end(), partner) == h.exclusion.end())
        h.exclusion.push_back(partner);
    return h;
}

/// K-fold cross-validated ROC of joint-spike prediction. Each fold fits the
/// two intensities and the excess-synchrony factor on the training trials,
/// then scores every held-out (trial, bin) with
/// log lambda1 + log lambda2 + log xi (conditional intensities use the
/// held-out trial's own realized history).
inline CvRocResult cv_roc(const BinnedTensor& binned, const NeuronSet& pair, Mode mode, const RocOptions& opt = {}) {
    check_subset(pair, binned.neurons());
    if (pair.size() != 2) throw ArgumentError("ROC analysis needs a neuron pair");
    const auto fold = assign_folds(binned.trials(), opt.folds, opt.seed);
    const SplineBasis basis(binned.bins() * binned.delta(), opt.knot_spacing);
    const std::size_t bins = binned.bins();

    struct FoldOut {
        std::vector<std::size_t> trials;
        std::vector<double> scores;
        double xi = 0.0;
    };
    std::vector<FoldOut> outs(opt.folds);
    parallel_for(opt.folds, opt.threads, [&](std::size_t k) {
        std::vector<std::size_t> train;
        auto& test = outs[k].trials;
        for (std::size_t r = 0; r < binned.trials(); ++r) (fold[r] == k ? test : train).push_back(r);
        const auto tr = binned.select_trials(train);
        const auto te = binned.select_trials(test);
        std::vector<IntensityFit> fits;
        for (std::size_t j = 0; j < 2; ++j) {
            if (mode == Mode::marginal) {
                fits.push_back(fit_marginal_intensity(tr, pair[j], basis, opt.irls));
            } else {
                fits.push_back(
                    fit_conditional_intensity(tr, pair[j], basis, pair_history(opt.history, pair[1 - j]), opt.irls));
            }
        }
        const auto ev = extract_joint_events(tr, pair);
        const auto est = estimate_xi_pair(ev, fits[0], fits[1], mode, tr);
        if (est.n_joint == 0)
            throw DegenerateError("training fold " + std::to_string(k + 1) + " has no joint events");
        outs[k].xi = est.xi_hat;
        const auto g1 = intensity_grid(fits[0], te, pair[0]);
        const auto g2 = intensity_grid(fits[1], te, pair[1]);
        outs[k].scores.resize(g1.size());
        const double lx = std::log(est.xi_hat);
        for (std::size_t i = 0; i < g1.size(); ++i) outs[k].scores[i] = std::log(g1[i]) + std::log(g2[i]) + lx;
    });

    CvRocResult res;
    res.mode = mode;
    res.pair = pair;
    res.fold_of_trial = fold;
    res.seed = opt.seed;
    // Pool in trial order so the result does not depend on fold order.
    std::vector<const double*> row_scores(binned.trials(), nullptr);
    for (const auto& o : outs) {
        res.fold_xi.push_back(o.xi);
        for (std::size_t t = 0; t < o.trials.size(); ++t) row_scores[o.trials[t]] = o.scores.data() + t * bins;
    }
    const auto a = static_cast<std::size_t>(pair[0]);
    const auto b = static_cast<std::size_t>(pair[1]);
    for (std::size_t r = 0; r < binned.trials(); ++r)
        for (std::size_t m = 0; m < bins; ++m) {
            res.scores.push_back(row_scores[r][m]);
            res.labels.push_back(binned.at(r, a, m) && binned.at(r, b, m) ? 1 : 0);
            res.trial.push_back(r);
            res.bin.push_back(m);
        }
    res.curve = roc_curve(res.scores, res.labels);
    res.curve.folds = opt.folds;
    return res;
}

}  // namespace spikesync
