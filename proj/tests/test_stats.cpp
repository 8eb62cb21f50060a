#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "core/stats.h"

using namespace ipc;

TEST_CASE("chi2 p-values match reference points") {
    // reference values from standard chi-square tables
    CHECK(chi2_pvalue(3.841, 1) == doctest::Approx(0.05).epsilon(1e-3));
    CHECK(chi2_pvalue(18.307, 10) == doctest::Approx(0.05).epsilon(1e-3));
    CHECK(chi2_pvalue(36.191, 19) == doctest::Approx(0.01).epsilon(1e-2));
    CHECK(chi2_pvalue(0.0, 5) == doctest::Approx(1.0));
}

TEST_CASE("gammq endpoints") {
    CHECK(gammq(2.0, 0.0) == doctest::Approx(1.0));
    // Q(1, x) = exp(-x)
    CHECK(gammq(1.0, 2.0) == doctest::Approx(std::exp(-2.0)).epsilon(1e-10));
    CHECK(gammq(0.5, 100.0) < 1e-20);
}

TEST_CASE("fnv1a64 is stable and content-sensitive") {
    const char * s = "hello";
    CHECK(fnv1a64(s, 5) == fnv1a64(s, 5));
    CHECK(fnv1a64("hello", 5) != fnv1a64("hellp", 5));
    CHECK(hex64(0xdeadbeefULL).size() == 16);
}
