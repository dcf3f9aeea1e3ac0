#pragma once

// Per-neuron intensity estimation by Poisson regression on a cubic B-spline
// basis in time, optionally augmented with spike-history counts.
//
// Marginal fits pool trials: one row per bin, response = number of trials
// with a spike, offset log(R * delta). Conditional fits use one row per
// (trial, bin), response X^i, offset log(delta), and two extra covariates:
// the neuron's own spike count and the population spike count over trailing
// windows. The design carries a separate intercept; the first B-spline
// column is dropped so the basis does not duplicate it.

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "spikesync/bspline.hpp"
#include "spikesync/errors.hpp"
#include "spikesync/spikedata.hpp"

namespace spikesync {

struct HistoryCovariateSpec {
    double own_window = 0.1;         // seconds
    double population_window = 0.1;  // seconds
    NeuronSet exclusion;             // never counted in the population covariate
    bool use_population = true;
};

/// Trailing-window counts at one (trial, bin).
struct HistoryCounts {
    double own = 0.0;
    double population = 0.0;
};

/// Window length in whole bins. Windows shorter than one bin or not a whole
/// number of bins are rejected.
inline std::size_t window_bins(double window, double delta) {
    if (!(window >= delta * (1.0 - 1e-9))) throw ArgumentError("history window is shorter than one bin");
    const double ratio = window / delta;
    const double rounded = std::round(ratio);
    if (std::abs(ratio - rounded) > 1e-6 * std::max(1.0, ratio))
        throw ArgumentError("history window is not a whole number of bins");
    return static_cast<std::size_t>(rounded);
}

/// Neurons contributing to the population covariate of `neuron`.
inline NeuronSet population_members(std::size_t neurons, int neuron, const NeuronSet& exclusion) {
    NeuronSet out;
    for (int j = 0; j < static_cast<int>(neurons); ++j)
        if (j != neuron && std::find(exclusion.begin(), exclusion.end(), j) == exclusion.end()) out.push_back(j);
    return out;
}

/// Spike count of the given neurons in bins [m - window, m - 1], for every
/// (trial, bin), laid out trial-major.
inline std::vector<double> trailing_counts(const BinnedTensor& binned, const NeuronSet& neurons, std::size_t window) {
    const std::size_t bins = binned.bins();
    std::vector<double> out(binned.trials() * bins, 0.0);
    for (std::size_t r = 0; r < binned.trials(); ++r) {
        std::vector<int> per_bin(bins, 0);
        for (int i : neurons) {
            auto row = binned.row(r, static_cast<std::size_t>(i));
            for (std::size_t m = 0; m < bins; ++m) per_bin[m] += row[m];
        }
        int running = 0;
        for (std::size_t m = 0; m < bins; ++m) {
            out[r * bins + m] = running;
            running += per_bin[m];
            if (m >= window) running -= per_bin[m - window];
        }
    }
    return out;
}

struct DesignMatrix {
    Eigen::MatrixXd x;
    Eigen::VectorXd y;
    Eigen::VectorXd offset;
    std::vector<std::string> columns;
    bool own_history = false;
    bool population_history = false;
    std::size_t trials = 0;
    std::size_t bins = 0;

    Eigen::Index rows() const { return x.rows(); }
};

namespace detail {

/// Intercept plus basis functions 1..K-1 at the centre of every bin.
inline Eigen::MatrixXd spline_block(const SplineBasis& basis, std::size_t bins, double delta) {
    const auto k = static_cast<Eigen::Index>(basis.size());
    Eigen::MatrixXd block(static_cast<Eigen::Index>(bins), k);
    std::vector<double> values(basis.size());
    for (std::size_t m = 0; m < bins; ++m) {
        basis.evaluate((static_cast<double>(m) + 0.5) * delta, values);
        block(static_cast<Eigen::Index>(m), 0) = 1.0;
        for (Eigen::Index j = 1; j < k; ++j) block(static_cast<Eigen::Index>(m), j) = values[static_cast<std::size_t>(j)];
    }
    return block;
}

inline std::vector<std::string> spline_column_names(const SplineBasis& basis) {
    std::vector<std::string> names{"intercept"};
    for (std::size_t j = 1; j < basis.size(); ++j) names.push_back("spline" + std::to_string(j));
    return names;
}

inline void check_neuron(const BinnedTensor& binned, int neuron) {
    if (neuron < 0 || static_cast<std::size_t>(neuron) >= binned.neurons())
        throw ArgumentError("neuron index " + std::to_string(neuron + 1) + " out of range");
}

}  // namespace detail

inline DesignMatrix build_marginal_design(const BinnedTensor& binned, int neuron, const SplineBasis& basis) {
    detail::check_neuron(binned, neuron);
    if (binned.trials() == 0) throw ArgumentError("cannot fit an intensity without trials");
    DesignMatrix d;
    d.trials = binned.trials();
    d.bins = binned.bins();
    d.x = detail::spline_block(basis, binned.bins(), binned.delta());
    d.columns = detail::spline_column_names(basis);
    d.y = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(binned.bins()));
    for (std::size_t r = 0; r < binned.trials(); ++r) {
        auto row = binned.row(r, static_cast<std::size_t>(neuron));
        for (std::size_t m = 0; m < binned.bins(); ++m) d.y[static_cast<Eigen::Index>(m)] += row[m];
    }
    d.offset = Eigen::VectorXd::Constant(static_cast<Eigen::Index>(binned.bins()),
                                         std::log(static_cast<double>(binned.trials()) * binned.delta()));
    return d;
}

inline DesignMatrix build_conditional_design(const BinnedTensor& binned, int neuron, const SplineBasis& basis,
                                             const HistoryCovariateSpec& hist) {
    detail::check_neuron(binned, neuron);
    const std::size_t own_w = window_bins(hist.own_window, binned.delta());
    const auto population = population_members(binned.neurons(), neuron, hist.exclusion);
    const bool with_population = hist.use_population && !population.empty();
    const std::size_t pop_w = with_population ? window_bins(hist.population_window, binned.delta()) : 0;

    const auto own = trailing_counts(binned, {neuron}, own_w);
    const auto pop = with_population ? trailing_counts(binned, population, pop_w) : std::vector<double>{};
    const auto block = detail::spline_block(basis, binned.bins(), binned.delta());

    DesignMatrix d;
    d.trials = binned.trials();
    d.bins = binned.bins();
    d.own_history = true;
    d.population_history = with_population;
    d.columns = detail::spline_column_names(basis);
    d.columns.push_back("own_history");
    if (with_population) d.columns.push_back("population_history");

    const auto n = static_cast<Eigen::Index>(binned.trials() * binned.bins());
    const auto k = block.cols();
    d.x.resize(n, k + 1 + (with_population ? 1 : 0));
    d.y.resize(n);
    d.offset = Eigen::VectorXd::Constant(n, std::log(binned.delta()));
    for (std::size_t r = 0; r < binned.trials(); ++r) {
        auto row = binned.row(r, static_cast<std::size_t>(neuron));
        for (std::size_t m = 0; m < binned.bins(); ++m) {
            const auto i = static_cast<Eigen::Index>(r * binned.bins() + m);
            d.x.row(i).head(k) = block.row(static_cast<Eigen::Index>(m));
            d.x(i, k) = own[static_cast<std::size_t>(i)];
            if (with_population) d.x(i, k + 1) = pop[static_cast<std::size_t>(i)];
            d.y[i] = row[m];
        }
    }
    return d;
}

struct IrlsOptions {
    double tol = 1e-8;  // relative change of the penalized deviance
    int max_iter = 100;
    int max_halvings = 10;
    double ridge = 0.0;          // penalty on every coefficient except the intercept
    double coefficient_limit = 50.0;  // |beta_j| above this signals separation
};

struct PoissonFit {
    Eigen::VectorXd beta;
    Eigen::VectorXd fitted;  // mu = exp(X beta + offset)
    double deviance = 0.0;
    double loglik = 0.0;
    int iterations = 0;
};

class IrlsNotConverged : public ConvergenceError {
public:
    IrlsNotConverged(const std::string& what, std::vector<double> last_beta)
        : ConvergenceError(what), last_beta_(std::move(last_beta)) {}
    const std::vector<double>& last_beta() const noexcept { return last_beta_; }

private:
    std::vector<double> last_beta_;
};

namespace detail {

inline Eigen::VectorXd poisson_mean(const DesignMatrix& d, const Eigen::VectorXd& beta) {
    Eigen::VectorXd eta = d.x * beta + d.offset;
    return eta.unaryExpr([](double e) { return std::exp(std::min(e, 700.0)); });
}

inline double poisson_deviance(const Eigen::VectorXd& y, const Eigen::VectorXd& mu) {
    double dev = 0.0;
    for (Eigen::Index i = 0; i < y.size(); ++i) {
        const double m = mu[i];
        if (y[i] > 0.0) dev += y[i] * std::log(y[i] / std::max(m, 1e-300));
        dev -= y[i] - m;
    }
    return 2.0 * dev;
}

inline double ridge_penalty(const Eigen::VectorXd& beta, double ridge) {
    return ridge == 0.0 ? 0.0 : ridge * beta.tail(beta.size() - 1).squaredNorm();
}

}  // namespace detail

/// Poisson log-likelihood sum(y*log(mu) - mu - log(y!)) at beta.
inline double poisson_loglik(const DesignMatrix& d, const Eigen::VectorXd& beta) {
    const Eigen::VectorXd mu = detail::poisson_mean(d, beta);
    double ll = 0.0;
    for (Eigen::Index i = 0; i < d.y.size(); ++i)
        ll += d.y[i] * std::log(std::max(mu[i], 1e-300)) - mu[i] - std::lgamma(d.y[i] + 1.0);
    return ll;
}

/// Gradient of the (ridge-penalized) log-likelihood.
inline Eigen::VectorXd poisson_score(const DesignMatrix& d, const Eigen::VectorXd& beta, double ridge = 0.0) {
    const Eigen::VectorXd mu = detail::poisson_mean(d, beta);
    Eigen::VectorXd g = d.x.transpose() * (d.y - mu);
    if (ridge != 0.0) g.tail(g.size() - 1) -= ridge * beta.tail(beta.size() - 1);
    return g;
}

inline PoissonFit fit_poisson_irls(const DesignMatrix& d, const IrlsOptions& opt = {}) {
    const Eigen::Index n = d.rows();
    const Eigen::Index p = d.x.cols();
    if (n == 0 || p == 0) throw ArgumentError("empty design matrix");
    if ((d.y.array() < 0.0).any()) throw ArgumentError("Poisson responses must be non-negative");

    Eigen::VectorXd beta = Eigen::VectorXd::Zero(p);
    beta[0] = std::log((d.y.sum() + 0.1) / d.offset.array().exp().sum());

    Eigen::VectorXd mu = detail::poisson_mean(d, beta);
    double objective = detail::poisson_deviance(d.y, mu) + detail::ridge_penalty(beta, opt.ridge);
    Eigen::MatrixXd penalty = Eigen::MatrixXd::Zero(p, p);
    for (Eigen::Index j = 1; j < p; ++j) penalty(j, j) = opt.ridge;

    for (int iter = 1; iter <= opt.max_iter; ++iter) {
        const Eigen::VectorXd w = mu.cwiseMax(1e-300);
        const Eigen::VectorXd z = (d.x * beta) + ((d.y - mu).array() / w.array()).matrix();
        const Eigen::MatrixXd xw = d.x.array().colwise() * w.array().sqrt();
        const Eigen::MatrixXd a = xw.transpose() * xw + penalty;
        const Eigen::VectorXd b = d.x.transpose() * (w.array() * z.array()).matrix();
        Eigen::LDLT<Eigen::MatrixXd> ldlt(a);
        if (ldlt.info() != Eigen::Success || !ldlt.isPositive())
            throw FitError("IRLS normal equations are singular; the design is collinear or the ridge option is needed");
        Eigen::VectorXd candidate = ldlt.solve(b);
        if (!candidate.allFinite()) throw FitError("IRLS produced non-finite coefficients; try the ridge option");

        Eigen::VectorXd cand_mu = detail::poisson_mean(d, candidate);
        double cand_obj = detail::poisson_deviance(d.y, cand_mu) + detail::ridge_penalty(candidate, opt.ridge);
        int halvings = 0;
        while (!(cand_obj <= objective + 1e-12 * std::abs(objective)) && halvings < opt.max_halvings) {
            candidate = 0.5 * (beta + candidate);
            cand_mu = detail::poisson_mean(d, candidate);
            cand_obj = detail::poisson_deviance(d.y, cand_mu) + detail::ridge_penalty(candidate, opt.ridge);
            ++halvings;
        }
        const bool improved = cand_obj <= objective + 1e-12 * std::abs(objective);
        const double change = std::abs(cand_obj - objective) / (std::abs(cand_obj) + 0.1);
        if (improved) {
            beta = candidate;
            mu = cand_mu;
            objective = cand_obj;
        }
        if (beta.tail(p - 1).cwiseAbs().maxCoeff() > opt.coefficient_limit)
            throw FitError("coefficient drift beyond " + std::to_string(opt.coefficient_limit) +
                           " suggests separation; refit with the ridge option");
        if (!improved || change < opt.tol) {
            PoissonFit fit;
            fit.beta = beta;
            fit.fitted = mu;
            fit.deviance = detail::poisson_deviance(d.y, mu);
            fit.loglik = poisson_loglik(d, beta);
            fit.iterations = iter;
            return fit;
        }
    }
    throw IrlsNotConverged("IRLS did not converge in " + std::to_string(opt.max_iter) + " iterations",
                           std::vector<double>(beta.data(), beta.data() + beta.size()));
}

/// Fitted intensity of one neuron. Evaluates
///   lambda(t | H) = exp(b(t) . beta_spline + beta_own * own + beta_pop * pop)
/// in events per second.
struct IntensityFit {
    int neuron = 0;
    SplineBasis basis;
    std::vector<double> beta;  // intercept, spline 1..K-1, [own], [population]
    std::optional<HistoryCovariateSpec> history;
    bool population_term = false;
    std::size_t own_bins = 0;
    std::size_t population_bins = 0;
    double delta = 0.0;
    double deviance = 0.0;
    int iterations = 0;
    double ridge = 0.0;

    bool has_history() const noexcept { return history.has_value(); }

    std::size_t spline_terms() const noexcept { return basis.size(); }

    double beta_own() const { return has_history() ? beta.at(spline_terms()) : 0.0; }
    double beta_population() const { return population_term ? beta.at(spline_terms() + 1) : 0.0; }

    /// log lambda without history terms.
    double spline_log_rate(double t) const {
        const auto values = basis.evaluate(t);
        double eta = beta[0];
        for (std::size_t j = 1; j < basis.size(); ++j) eta += values[j] * beta[j];
        return eta;
    }

    /// spline_log_rate at every bin centre.
    std::vector<double> spline_log_rates(std::size_t bins, double bin_width) const {
        std::vector<double> out(bins);
        for (std::size_t m = 0; m < bins; ++m) out[m] = spline_log_rate((static_cast<double>(m) + 0.5) * bin_width);
        return out;
    }

    double history_log_factor(const HistoryCounts& h) const {
        return beta_own() * h.own + beta_population() * h.population;
    }
};

/// lambda(t) for marginal fits, lambda(t | H) for history fits.
inline double eval_intensity(const IntensityFit& fit, double t, std::optional<HistoryCounts> history = std::nullopt) {
    if (fit.has_history() && !history) throw ArgumentError("history-dependent fit needs history counts");
    if (!fit.has_history() && history) throw ArgumentError("marginal fit takes no history counts");
    double eta = fit.spline_log_rate(t);
    if (history) eta += fit.history_log_factor(*history);
    return std::exp(eta);
}

inline IntensityFit make_intensity_fit(const PoissonFit& pf, const DesignMatrix& d, int neuron,
                                       const SplineBasis& basis, double delta,
                                       std::optional<HistoryCovariateSpec> hist, const IrlsOptions& opt) {
    IntensityFit fit;
    fit.neuron = neuron;
    fit.basis = basis;
    fit.beta.assign(pf.beta.data(), pf.beta.data() + pf.beta.size());
    fit.history = std::move(hist);
    fit.population_term = d.population_history;
    if (fit.history) {
        fit.own_bins = window_bins(fit.history->own_window, delta);
        if (fit.population_term) fit.population_bins = window_bins(fit.history->population_window, delta);
    }
    fit.delta = delta;
    fit.deviance = pf.deviance;
    fit.iterations = pf.iterations;
    fit.ridge = opt.ridge;
    return fit;
}

inline IntensityFit fit_marginal_intensity(const BinnedTensor& binned, int neuron, const SplineBasis& basis,
                                           const IrlsOptions& opt = {}) {
    const auto d = build_marginal_design(binned, neuron, basis);
    return make_intensity_fit(fit_poisson_irls(d, opt), d, neuron, basis, binned.delta(), std::nullopt, opt);
}

inline IntensityFit fit_conditional_intensity(const BinnedTensor& binned, int neuron, const SplineBasis& basis,
                                              const HistoryCovariateSpec& hist, const IrlsOptions& opt = {}) {
    const auto d = build_conditional_design(binned, neuron, basis, hist);
    return make_intensity_fit(fit_poisson_irls(d, opt), d, neuron, basis, binned.delta(), hist, opt);
}

/// Fitted intensity at every (trial, bin) of `binned`, trial-major. For
/// history fits the neuron's own counts come from `binned`; population
/// counts come from `population_source` (the observed data) so replicate
/// tensors holding only the modelled neurons can be evaluated too.
/// `own_row` is the neuron's index inside `binned`.
inline std::vector<double> intensity_grid(const IntensityFit& fit, const BinnedTensor& binned, int own_row,
                                          const BinnedTensor* population_source = nullptr) {
    const std::size_t bins = binned.bins();
    const std::size_t trials = binned.trials();
    const auto base = fit.spline_log_rates(bins, binned.delta());
    std::vector<double> out(trials * bins);
    if (!fit.has_history()) {
        for (std::size_t r = 0; r < trials; ++r)
            for (std::size_t m = 0; m < bins; ++m) out[r * bins + m] = std::exp(base[m]);
        return out;
    }
    const auto own = trailing_counts(binned, {own_row}, fit.own_bins);
    std::vector<double> pop;
    if (fit.population_term) {
        const BinnedTensor& src = population_source ? *population_source : binned;
        if (src.trials() != trials || src.bins() != bins)
            throw ArgumentError("population source does not match the evaluated tensor");
        pop = trailing_counts(src, population_members(src.neurons(), fit.neuron, fit.history->exclusion),
                              fit.population_bins);
    }
    for (std::size_t i = 0; i < trials * bins; ++i) {
        const HistoryCounts h{own[i], fit.population_term ? pop[i] : 0.0};
        out[i] = std::exp(base[i % bins] + fit.history_log_factor(h));
    }
    return out;
}

inline nlohmann::json intensity_fit_to_json(const IntensityFit& fit) {
    nlohmann::json j;
    j["neuron"] = fit.neuron + 1;
    j["knots"] = fit.basis.knots();
    j["degree"] = fit.basis.degree();
    j["knot_spacing"] = fit.basis.spacing();
    j["beta"] = fit.beta;
    j["delta"] = fit.delta;
    j["deviance"] = fit.deviance;
    j["iterations"] = fit.iterations;
    j["ridge"] = fit.ridge;
    j["link"] = "log";
    if (fit.history) {
        std::vector<int> excl;
        for (int e : fit.history->exclusion) excl.push_back(e + 1);
        j["history"] = {{"own_window", fit.history->own_window},
                        {"population_window", fit.history->population_window},
                        {"exclusion", excl},
                        {"population_term", fit.population_term}};
    } else {
        j["history"] = nullptr;
    }
    return j;
}

inline IntensityFit intensity_fit_from_json(const nlohmann::json& j) {
    IntensityFit fit;
    fit.neuron = j.at("neuron").get<int>() - 1;
    fit.basis = SplineBasis::from_knots(j.at("knots").get<std::vector<double>>(), j.at("degree").get<int>(),
                                        j.at("knot_spacing").get<double>());
    fit.beta = j.at("beta").get<std::vector<double>>();
    fit.delta = j.at("delta").get<double>();
    fit.deviance = j.at("deviance").get<double>();
    fit.iterations = j.at("iterations").get<int>();
    fit.ridge = j.value("ridge", 0.0);
    if (j.contains("history") && !j["history"].is_null()) {
        const auto& h = j["history"];
        HistoryCovariateSpec spec;
        spec.own_window = h.at("own_window").get<double>();
        spec.population_window = h.at("population_window").get<double>();
        for (int e : h.at("exclusion").get<std::vector<int>>()) spec.exclusion.push_back(e - 1);
        fit.population_term = h.at("population_term").get<bool>();
        spec.use_population = fit.population_term;
        fit.history = spec;
        fit.own_bins = window_bins(spec.own_window, fit.delta);
        if (fit.population_term) fit.population_bins = window_bins(spec.population_window, fit.delta);
    }
    const std::size_t expected = fit.basis.size() + (fit.history ? 1 : 0) + (fit.population_term ? 1 : 0);
    if (fit.beta.size() != expected) throw ValidationError("coefficient count does not match the basis");
    return fit;
}

}  // namespace spikesync
