#include <catch_amalgamated.hpp>

#include <cmath>

#include "spikesync/ipf.hpp"
#include "spikesync/rng.hpp"
#include "support/oracles.hpp"

using namespace spikesync;

namespace {

Table3 random_table(Rng& rng) {
    Table3 t{};
    for (auto& v : t) v = 1.0 + 200.0 * rng.uniform();
    return t;
}

double log_odds_ratio_at(const Table3& m, int c) {
    // log odds ratio between the first two neurons with the third held at c
    const auto k = static_cast<std::size_t>(4 * c);
    return std::log(m[k + 3] * m[k + 0] / (m[k + 1] * m[k + 2]));
}

}  // namespace

TEST_CASE("a product-form table is a fixed point", "[ipf]") {
    const double p[3] = {0.2, 0.4, 0.7};
    Table3 t{};
    for (std::size_t c = 0; c < 8; ++c) {
        double v = 1000.0;
        for (std::size_t i = 0; i < 3; ++i) v *= (c >> i & 1) ? p[i] : 1.0 - p[i];
        t[c] = v;
    }
    const auto r = ipf_fit_triple(t);
    CHECK(r.cycles == 1);
    for (std::size_t c = 0; c < 8; ++c) CHECK(r.fitted_counts[c] == Catch::Approx(t[c]).epsilon(1e-12));
    CHECK_FALSE(r.smoothed);
}

TEST_CASE("fit agrees with a textbook loop on random tables", "[ipf][property]") {
    Rng rng(19);
    for (int rep = 0; rep < 100; ++rep) {
        const auto t = random_table(rng);
        const auto r = ipf_fit_triple(t);
        const auto o = oracles::textbook_ipf(t);
        for (std::size_t c = 0; c < 8; ++c) CHECK(r.fitted[c] == Catch::Approx(o[c]).margin(1e-8));
    }
}

TEST_CASE("fitted two-way margins equal the observed ones", "[ipf][property]") {
    Rng rng(20);
    IpfOptions opt;
    opt.tol = 1e-10;
    for (int rep = 0; rep < 100; ++rep) {
        const auto t = random_table(rng);
        double total = 0.0;
        for (double v : t) total += v;
        const auto r = ipf_fit_triple(t, opt);
        for (int a = 0; a < 3; ++a)
            for (int b = a + 1; b < 3; ++b) {
                double l1 = 0.0;
                for (int u = 0; u < 2; ++u)
                    for (int v = 0; v < 2; ++v) {
                        double fit = 0.0;
                        double obs = 0.0;
                        for (int c = 0; c < 8; ++c)
                            if (((c >> a) & 1) == u && ((c >> b) & 1) == v) {
                                fit += r.fitted[static_cast<std::size_t>(c)];
                                obs += t[static_cast<std::size_t>(c)] / total;
                            }
                        l1 += std::abs(fit - obs);
                    }
                CHECK(l1 <= 1e-10);
            }
    }
}

TEST_CASE("fit has no three-way interaction", "[ipf][property]") {
    Rng rng(21);
    for (int rep = 0; rep < 50; ++rep) {
        const auto r = ipf_fit_triple(random_table(rng));
        CHECK(log_odds_ratio_at(r.fitted, 0) == Catch::Approx(log_odds_ratio_at(r.fitted, 1)).margin(1e-8));
    }
}

TEST_CASE("zero margins are smoothed and flagged", "[ipf]") {
    Table3 t{50, 20, 20, 0, 30, 10, 10, 0};
    const auto r = ipf_fit_triple(t);
    CHECK(r.smoothed);
    double s = 0.0;
    for (double v : r.fitted) {
        CHECK(v > 0.0);
        s += v;
    }
    CHECK(s == Catch::Approx(1.0));
}

TEST_CASE("invalid IPF input and non-convergence", "[ipf]") {
    CHECK_THROWS_AS(ipf_fit_triple(Table3{}), ArgumentError);
    CHECK_THROWS_AS(ipf_fit_triple(Table3{1, 1, 1, 1, 1, 1, 1, -1}), ArgumentError);
    Rng rng(3);
    IpfOptions opt;
    opt.max_iter = 1;
    opt.tol = 1e-15;
    CHECK_THROWS_AS(ipf_fit_triple(random_table(rng), opt), ConvergenceError);
}

TEST_CASE("pooled table counts every trial and bin once", "[ipf]") {
    Rng rng(4);
    BinnedTensor b(3, 4, 50, 0.001);
    for (std::size_t r = 0; r < 3; ++r)
        for (std::size_t i = 0; i < 4; ++i)
            for (std::size_t m = 0; m < 50; ++m) b.set(r, i, m, rng.bernoulli(0.3));
    const auto t = pooled_triple_table(b, {3, 0, 2});
    double total = 0.0;
    for (double v : t) total += v;
    CHECK(total == 150.0);
    double all = 0.0;
    for (std::size_t r = 0; r < 3; ++r)
        for (std::size_t m = 0; m < 50; ++m) all += b.at(r, 3, m) * b.at(r, 0, m) * b.at(r, 2, m);
    CHECK(t[7] == all);
}
