#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "decrop/rng.hpp"
#include "decrop/stats.hpp"

using namespace decrop;

namespace {

// Exact binomial upper tail P(X >= k) for X ~ Bin(n, p), n small enough
// for direct summation with exact coefficients.
double binom_tail_geq(int k, int n, double p) {
    if (k <= 0) return 1.0;
    if (p <= 0.0) return 0.0;
    if (p >= 1.0) return 1.0;
    long double total = 0.0L;
    for (int i = k; i <= n; ++i) {
        long double logc = lgammal(n + 1.0L) - lgammal(i + 1.0L) - lgammal(n - i + 1.0L);
        total += expl(logc + i * logl((long double)p) + (n - i) * log1pl(-(long double)p));
    }
    return double(total);
}

// Independent oracle: the Clopper-Pearson lower bound is the p solving
// P(Bin(n,p) >= k) = alpha, found by bisection on the exact tail.
double cp_lower_oracle(int k, int n, double alpha) {
    if (k == 0) return 0.0;
    double lo = 0.0, hi = 1.0;
    for (int it = 0; it < 200; ++it) {
        double mid = 0.5 * (lo + hi);
        if (binom_tail_geq(k, n, mid) < alpha)
            lo = mid;
        else
            hi = mid;
    }
    return 0.5 * (lo + hi);
}

} // namespace

TEST_CASE("clopper_pearson_lower matches exact binomial-tail bisection") {
    for (double alpha : {0.05, 0.001})
        for (int n = 1; n <= 30; ++n)
            for (int k = 0; k <= n; ++k) {
                double got = clopper_pearson_lower(k, n, alpha);
                double want = cp_lower_oracle(k, n, alpha);
                INFO("k=" << k << " n=" << n << " alpha=" << alpha);
                REQUIRE(std::abs(got - want) < 1e-9);
            }
}

TEST_CASE("clopper_pearson_lower closed forms") {
    REQUIRE(clopper_pearson_lower(0, 100, 0.001) == 0.0);
    // k = n: lower bound is alpha^(1/n)
    REQUIRE(std::abs(clopper_pearson_lower(10, 10, 0.001) - std::pow(0.001, 0.1)) < 1e-12);
    REQUIRE(std::abs(clopper_pearson_lower(10, 10, 0.001) - 0.50119) < 1e-5);
}

TEST_CASE("clopper_pearson_lower is monotone in k and decreasing in alpha strictness") {
    double prev = -1.0;
    for (int k = 0; k <= 50; ++k) {
        double v = clopper_pearson_lower(k, 50, 0.05);
        REQUIRE(v >= prev);
        prev = v;
    }
    REQUIRE(clopper_pearson_lower(40, 50, 0.001) < clopper_pearson_lower(40, 50, 0.05));
}

TEST_CASE("clopper_pearson_lower rejects bad arguments") {
    REQUIRE_THROWS_AS(clopper_pearson_lower(-1, 10, 0.05), std::invalid_argument);
    REQUIRE_THROWS_AS(clopper_pearson_lower(11, 10, 0.05), std::invalid_argument);
    REQUIRE_THROWS_AS(clopper_pearson_lower(5, 10, 0.0), std::invalid_argument);
    REQUIRE_THROWS_AS(clopper_pearson_lower(5, 10, 1.0), std::invalid_argument);
}

TEST_CASE("inv_gaussian_cdf pinned quantile") {
    // Oracle value of Phi^{-1}(0.9) frozen from an independent high-precision
    // computation (mpmath, 50 digits): 1.2815515655446004.
    REQUIRE(std::abs(inv_gaussian_cdf(0.9) - 1.2815515655446004) < 1e-9);
    REQUIRE(std::abs(inv_gaussian_cdf(0.5)) < 1e-12);
    REQUIRE(std::abs(inv_gaussian_cdf(0.975) - 1.9599639845400545) < 1e-9);
}

TEST_CASE("inv_gaussian_cdf round-trips with the erf-based CDF") {
    Rng rng(2024);
    for (int i = 0; i < 10000; ++i) {
        double p = rng.uniform();
        if (p <= 1e-12 || p >= 1.0 - 1e-12) continue;
        REQUIRE(std::abs(normal_cdf(inv_gaussian_cdf(p)) - p) < 1e-9);
    }
    // deep-tail probes
    for (double p : {1e-8, 1e-6, 1e-4, 1.0 - 1e-4, 1.0 - 1e-6}) {
        REQUIRE(std::abs(normal_cdf(inv_gaussian_cdf(p)) - p) < 1e-9 * std::max(1.0, 1.0 / p));
    }
}

TEST_CASE("inv_gaussian_cdf symmetry and domain") {
    for (double p : {0.01, 0.2, 0.37, 0.49})
        REQUIRE(std::abs(inv_gaussian_cdf(p) + inv_gaussian_cdf(1.0 - p)) < 1e-10);
    REQUIRE_THROWS_AS(inv_gaussian_cdf(0.0), std::invalid_argument);
    REQUIRE_THROWS_AS(inv_gaussian_cdf(1.0), std::invalid_argument);
    REQUIRE_THROWS_AS(inv_gaussian_cdf(-0.5), std::invalid_argument);
}

TEST_CASE("reg_inc_beta basics") {
    // I_x(1,1) = x
    for (double x : {0.1, 0.33, 0.9}) REQUIRE(std::abs(reg_inc_beta(1.0, 1.0, x) - x) < 1e-12);
    // I_x(a,b) + I_{1-x}(b,a) = 1
    REQUIRE(std::abs(reg_inc_beta(3.5, 2.0, 0.3) + reg_inc_beta(2.0, 3.5, 0.7) - 1.0) < 1e-12);
    REQUIRE(reg_inc_beta(2.0, 5.0, 0.0) == 0.0);
    REQUIRE(reg_inc_beta(2.0, 5.0, 1.0) == 1.0);
}
