#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "spikesync/errors.hpp"

namespace spikesync {

/// Clamped B-spline basis on [0, T] with uniformly spaced breakpoints.
/// Boundary knots are repeated degree+1 times, so the K basis functions sum
/// to one everywhere on [0, T].
class SplineBasis {
public:
    SplineBasis() = default;

    SplineBasis(double duration, double knot_spacing, int degree = 3)
        : duration_(duration), spacing_(knot_spacing), degree_(degree) {
        if (!(duration > 0.0)) throw ArgumentError("spline domain must have positive length");
        if (!(knot_spacing > 0.0)) throw ArgumentError("knot spacing must be positive");
        if (degree < 0) throw ArgumentError("spline degree must be non-negative");
        std::vector<double> breaks{0.0};
        for (int k = 1;; ++k) {
            const double b = k * knot_spacing;
            if (b >= duration - 1e-9 * knot_spacing) break;
            breaks.push_back(b);
        }
        breaks.push_back(duration);
        knots_.assign(static_cast<std::size_t>(degree), 0.0);
        knots_.insert(knots_.end(), breaks.begin(), breaks.end());
        knots_.insert(knots_.end(), static_cast<std::size_t>(degree), duration);
    }

    static SplineBasis from_knots(std::vector<double> knots, int degree, double spacing) {
        SplineBasis b;
        b.degree_ = degree;
        b.spacing_ = spacing;
        if (knots.size() < static_cast<std::size_t>(2 * degree + 2))
            throw ArgumentError("knot vector too short for the spline degree");
        if (!std::is_sorted(knots.begin(), knots.end())) throw ArgumentError("knot vector must be sorted");
        b.duration_ = knots.back() - knots.front();
        b.knots_ = std::move(knots);
        return b;
    }

    int degree() const noexcept { return degree_; }
    double spacing() const noexcept { return spacing_; }
    double duration() const noexcept { return duration_; }
    const std::vector<double>& knots() const noexcept { return knots_; }

    /// Number of basis functions K.
    std::size_t size() const noexcept {
        return knots_.empty() ? 0 : knots_.size() - static_cast<std::size_t>(degree_) - 1;
    }

    /// Writes all K basis values at t into out. t is clamped into the domain.
    void evaluate(double t, std::span<double> out) const {
        std::fill(out.begin(), out.end(), 0.0);
        const auto p = static_cast<std::size_t>(degree_);
        const double lo = knots_[p];
        const double hi = knots_[size()];
        t = std::clamp(t, lo, hi);
        // Span index s with knots[s] <= t < knots[s+1]; the right end uses the last span.
        std::size_t s = size() - 1;
        if (t < hi) {
            s = static_cast<std::size_t>(std::upper_bound(knots_.begin(), knots_.end(), t) - knots_.begin()) - 1;
            s = std::clamp(s, p, size() - 1);
        }
        std::vector<double> left(p + 1), right(p + 1), n(p + 1);
        n[0] = 1.0;
        for (std::size_t j = 1; j <= p; ++j) {
            left[j] = t - knots_[s + 1 - j];
            right[j] = knots_[s + j] - t;
            double saved = 0.0;
            for (std::size_t r = 0; r < j; ++r) {
                const double denom = right[r + 1] + left[j - r];
                const double tmp = denom == 0.0 ? 0.0 : n[r] / denom;
                n[r] = saved + right[r + 1] * tmp;
                saved = left[j - r] * tmp;
            }
            n[j] = saved;
        }
        for (std::size_t j = 0; j <= p; ++j) out[s - p + j] = n[j];
    }

    std::vector<double> evaluate(double t) const {
        std::vector<double> out(size());
        evaluate(t, out);
        return out;
    }

private:
    double duration_ = 0.0;
    double spacing_ = 0.0;
    int degree_ = 3;
    std::vector<double> knots_;
};

}  // namespace spikesync
