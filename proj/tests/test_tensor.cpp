#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "core/rng.h"
#include "core/tensor.h"

using namespace ipc;

static tensor randn(std::vector<int64_t> shape, uint64_t seed) {
    tensor t(std::move(shape));
    rng r(seed);
    r.fill_normal(t);
    return t;
}

static void matmul_naive(const tensor & a, const tensor & b, tensor & c) {
    const int64_t m = a.shape[0], k = a.shape[1], n = b.shape[1];
    for (int64_t i = 0; i < m; ++i) {
        for (int64_t j = 0; j < n; ++j) {
            double s = 0.0;
            for (int64_t p = 0; p < k; ++p) s += (double) a.at2(i, p) * b.at2(p, j);
            c.at2(i, j) = (float) s;
        }
    }
}

TEST_CASE("matmul variants agree with the naive triple loop") {
    tensor a = randn({7, 5}, 1);
    tensor b = randn({5, 9}, 2);
    tensor want({7, 9});
    matmul_naive(a, b, want);

    tensor got({7, 9});
    matmul(a.data(), b.data(), got.data(), 7, 5, 9);
    CHECK(max_abs_diff(want, got) < 1e-5f);

    // A * B^T
    tensor bt({9, 5});
    for (int64_t i = 0; i < 5; ++i) {
        for (int64_t j = 0; j < 9; ++j) bt.at2(j, i) = b.at2(i, j);
    }
    tensor got2({7, 9});
    matmul_nt(a.data(), bt.data(), got2.data(), 7, 5, 9);
    CHECK(max_abs_diff(want, got2) < 1e-5f);

    // A^T' * B with A' = A^T
    tensor at({5, 7});
    for (int64_t i = 0; i < 7; ++i) {
        for (int64_t j = 0; j < 5; ++j) at.at2(j, i) = a.at2(i, j);
    }
    tensor got3({7, 9});
    matmul_tn(at.data(), b.data(), got3.data(), 7, 5, 9);
    CHECK(max_abs_diff(want, got3) < 1e-5f);
}

TEST_CASE("matmul accumulate flag adds instead of overwriting") {
    tensor a = randn({3, 4}, 3);
    tensor b = randn({4, 2}, 4);
    tensor c({3, 2}, 1.0f);
    tensor base({3, 2});
    matmul_naive(a, b, base);
    matmul(a.data(), b.data(), c.data(), 3, 4, 2, /*acc=*/true);
    for (int64_t i = 0; i < 3; ++i) {
        for (int64_t j = 0; j < 2; ++j) {
            CHECK(c.at2(i, j) == doctest::Approx(base.at2(i, j) + 1.0f).epsilon(1e-5));
        }
    }
}

TEST_CASE("matvec matches matmul") {
    tensor m = randn({6, 4}, 5);
    tensor x = randn({4}, 6);
    tensor y({6});
    matvec(m, x.data(), y.data());
    tensor y2({6, 1});
    tensor xc({4, 1});
    xc.v = x.v;
    matmul_naive(m, xc, y2);
    for (int64_t i = 0; i < 6; ++i) CHECK(y.v[(size_t) i] == doctest::Approx(y2.v[(size_t) i]).epsilon(1e-5));
}

TEST_CASE("bit_equal and helpers") {
    tensor a = randn({4, 4}, 7);
    tensor b = a;
    CHECK(bit_equal(a, b));
    b.v[3] = std::nextafterf(b.v[3], 100.0f);
    CHECK(!bit_equal(a, b));
    CHECK(all_finite(a));
    b.v[0] = std::numeric_limits<float>::infinity();
    CHECK(!all_finite(b));
}
