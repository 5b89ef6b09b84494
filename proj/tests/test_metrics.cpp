#include "doctest.h"

#include <numeric>
#include <sstream>

#include "mpcad/core.hpp"
#include "mpcad/metrics.hpp"
#include "oracles.hpp"

using namespace mpcad;

TEST_CASE("auroc trivial cases") {
    CHECK(auroc(std::vector<double>{0.1, 0.2, 0.8, 0.9}, std::vector<int>{0, 0, 1, 1}) == 1.0);
    CHECK(auroc(std::vector<double>{0.5, 0.5, 0.5, 0.5}, std::vector<int>{1, 0, 0, 1}) == 0.5);
    CHECK_THROWS_WITH_AS(auroc(std::vector<double>{0.1, 0.2}, std::vector<int>{1, 1}), "undefined AUROC", DataError);
    CHECK_THROWS_AS(auroc(std::vector<double>{0.1}, std::vector<int>{0, 1}), DataError);
}

TEST_CASE("auroc matches the pairwise oracle, with and without ties") {
    Rng rng(10);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<double> s(50);
        std::vector<int> y(50);
        const bool coarse = trial % 2 == 0;
        for (std::size_t i = 0; i < 50; ++i) {
            s[i] = coarse ? static_cast<double>(rng.below(5)) : rng.normal();
            y[i] = static_cast<int>(rng.below(2));
        }
        y[0] = 0;
        y[1] = 1;
        CHECK(std::abs(auroc(s, y) - oracle::auroc(s, y)) <= 1e-12);
    }
}

TEST_CASE("auroc of negated scores is the complement") {
    Rng rng(21);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<double> s(30), neg(30);
        std::vector<int> y(30);
        for (std::size_t i = 0; i < 30; ++i) {
            s[i] = rng.normal();
            neg[i] = -s[i];
            y[i] = i % 3 == 0;
        }
        CHECK(std::abs(auroc(neg, y) - (1.0 - auroc(s, y))) <= 1e-12);
    }
}

TEST_CASE("auroc is invariant under strictly increasing transforms") {
    Rng rng(22);
    std::vector<double> s(40), t(40);
    std::vector<int> y(40);
    for (std::size_t i = 0; i < 40; ++i) {
        s[i] = rng.normal();
        t[i] = std::exp(3.0 * s[i]) + 7.0;
        y[i] = i % 4 == 0;
    }
    CHECK(auroc(s, y) == auroc(t, y));
}

TEST_CASE("aupr trivial cases") {
    CHECK(aupr(std::vector<double>{0.1, 0.2, 0.8, 0.9}, std::vector<int>{0, 0, 1, 1}) == 1.0);
    CHECK(aupr(std::vector<double>{0.3, 0.1, 0.7}, std::vector<int>{1, 1, 1}) == 1.0);
    CHECK_THROWS_AS(aupr(std::vector<double>{0.3, 0.1}, std::vector<int>{0, 0}), DataError);
    // Hand example: ranks 1+ 2- 3+ -> AP = 0.5 * 1 + 0.5 * 2/3.
    CHECK(std::abs(aupr(std::vector<double>{0.9, 0.8, 0.7}, std::vector<int>{1, 0, 1}) - (0.5 + 1.0 / 3.0)) < 1e-15);
}

TEST_CASE("aupr matches the threshold-sweep oracle") {
    Rng rng(30);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t n = trial < 100 ? 10 : 40;
        std::vector<double> s(n);
        std::vector<int> y(n);
        for (std::size_t i = 0; i < n; ++i) {
            s[i] = trial % 3 == 0 ? static_cast<double>(rng.below(4)) : rng.uniform();
            y[i] = static_cast<int>(rng.below(2));
        }
        y[0] = 1;
        CHECK(std::abs(aupr(s, y) - oracle::aupr(s, y)) <= 1e-12);
    }
}

TEST_CASE("aupr_presorted agrees with aupr and rejects unsorted input") {
    Rng rng(31);
    std::vector<double> s(60);
    std::vector<int> y(60);
    for (std::size_t i = 0; i < 60; ++i) {
        s[i] = static_cast<double>(rng.below(10));
        y[i] = static_cast<int>(rng.below(2));
    }
    y[5] = 1;
    std::vector<std::size_t> idx(60);
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return s[a] > s[b]; });
    std::vector<double> ss;
    std::vector<int> yy;
    for (auto i : idx) {
        ss.push_back(s[i]);
        yy.push_back(y[i]);
    }
    CHECK(aupr_presorted(ss, yy) == aupr(s, y));
    CHECK_THROWS_AS(aupr_presorted(std::vector<double>{0.1, 0.2}, std::vector<int>{1, 0}), DataError);
}

TEST_CASE("aupr is bounded below by the average-precision floor") {
    // The worst ranking puts every positive last; AP is then sum_i (i/(n-P+i)) / P.
    Rng rng(33);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t n = 5 + rng.below(30);
        std::vector<double> s(n);
        std::vector<int> y(n);
        double pos = 0;
        for (std::size_t i = 0; i < n; ++i) {
            s[i] = rng.normal();
            y[i] = static_cast<int>(rng.below(2));
            pos += y[i];
        }
        if (pos == 0) {
            y[0] = 1;
            pos = 1;
        }
        double floor = 0.0;
        for (double i = 1; i <= pos; ++i) floor += i / (static_cast<double>(n) - pos + i);
        floor /= pos;
        const double ap = aupr(s, y);
        CHECK(ap >= floor - 1e-12);
        CHECK(ap <= 1.0);
    }
}

TEST_CASE("forgetting_measure hand example") {
    EvalMatrix t(3);
    t.set(0, 0, 0.9);
    t.set(1, 0, 0.8);
    t.set(2, 0, 0.7);
    t.set(1, 1, 0.95);
    t.set(2, 1, 0.95);
    t.set(2, 2, 0.5);
    CHECK(std::abs(forgetting_measure(t) - 0.1) < 1e-12);
}

TEST_CASE("forgetting_measure is zero without forgetting and never negative") {
    Rng rng(40);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t k = 2 + rng.below(6);
        EvalMatrix grow(k), random(k);
        for (std::size_t j = 0; j < k; ++j) {
            double v = rng.uniform(0.0, 0.5);
            for (std::size_t l = j; l < k; ++l) {
                v = std::min(1.0, v + rng.uniform(0.0, 0.1));  // non-decreasing: final is the best
                grow.set(l, j, v);
                random.set(l, j, rng.uniform());
            }
        }
        CHECK(forgetting_measure(grow) == 0.0);
        CHECK(forgetting_measure(random) >= 0.0);
    }
    EvalMatrix constant(4);
    for (std::size_t l = 0; l < 4; ++l)
        for (std::size_t j = 0; j <= l; ++j) constant.set(l, j, 0.3 + 0.1 * static_cast<double>(j));
    CHECK(forgetting_measure(constant) == 0.0);
}

TEST_CASE("forgetting_measure errors") {
    CHECK_THROWS_AS(forgetting_measure(EvalMatrix(1)), DataError);
    EvalMatrix t(2);
    t.set(0, 0, 0.5);
    CHECK_THROWS_AS(forgetting_measure(t), DataError);
    CHECK_THROWS_AS(t.set(0, 1, 0.5), DataError);
    CHECK_THROWS_AS(t.set(1, 0, 1.5), DataError);
}

TEST_CASE("results table layout") {
    std::ostringstream out;
    write_results_table(out, {{"a", 1.0, 0.5}, {"b", 0.5, 0.25}}, std::nullopt, std::nullopt);
    const std::string s = out.str();
    CHECK(s.rfind("task\timage_auroc\tpixel_aupr\n", 0) == 0);
    CHECK(s.find("\naverage\t0.750000\t0.375000\n") != std::string::npos);
    CHECK(s.find("avg_fm\tn/a\tn/a") != std::string::npos);
}
