// finite-difference checks for every backward implementation
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <functional>

#include "core/rng.h"
#include "nn/adamw.h"
#include "nn/nn.h"

using namespace ipc;
using namespace ipc::nn;

static tensor randn(std::vector<int64_t> shape, uint64_t seed, float stddev = 1.0f) {
    tensor t(std::move(shape));
    rng r(seed);
    r.fill_normal(t, 0.0f, stddev);
    return t;
}

// directional derivative check: (L(x+eps*d) - L(x-eps*d)) / (2 eps) vs <grad, d>
static void check_grad(tensor & x, const tensor & grad,
                       const std::function<double(const tensor &)> & loss,
                       uint64_t seed, double tol = 2e-2) {
    tensor dir = randn(x.shape, seed);
    scale_(dir, 1.0f / (norm2(dir) + 1e-12f));
    const float eps = 1e-2f;

    tensor saved = x;
    axpy_(x, eps, dir);
    double lp = loss(x);
    x = saved;
    axpy_(x, -eps, dir);
    double lm = loss(x);
    x = saved;

    const double fd = (lp - lm) / (2.0 * eps);
    const double an = dot(grad, dir);
    const double denom = std::max({std::fabs(fd), std::fabs(an), 1e-4});
    INFO("fd=", fd, " analytic=", an);
    CHECK(std::fabs(fd - an) / denom < tol);
}

// L = sum r_i y_i with fixed weights r -> dL/dy = r
static tensor loss_weights(const std::vector<int64_t> & shape, uint64_t seed) {
    return randn(shape, seed);
}

TEST_CASE("linear input and weight gradients") {
    linear l;
    l.init("l", 5, 3);
    rng r(11);
    r.fill_normal(l.w.w, 0, 0.5f);
    r.fill_normal(l.b.w, 0, 0.5f);
    l.w.trainable = true;
    l.b.trainable = true;

    tensor x = randn({4, 5}, 12);
    tensor lw = loss_weights({4, 3}, 13);

    tensor y = l.forward(x, true);
    tensor dx = l.backward(lw);

    check_grad(x, dx, [&](const tensor & xx) {
        linear lc = l;
        return (double) dot(lc.forward(xx, false), lw);
    }, 21);
    check_grad(l.w.w, l.w.g, [&](const tensor &) {
        linear lc = l;
        return (double) dot(lc.forward(x, false), lw);
    }, 22);
    check_grad(l.b.w, l.b.g, [&](const tensor &) {
        linear lc = l;
        return (double) dot(lc.forward(x, false), lw);
    }, 23);
}

TEST_CASE("layer_norm gradients") {
    layer_norm ln;
    ln.init("ln", 6);
    rng r(31);
    r.fill_normal(ln.gamma.w, 1.0f, 0.2f);
    r.fill_normal(ln.beta.w, 0.0f, 0.2f);
    ln.gamma.trainable = true;
    ln.beta.trainable = true;

    tensor x = randn({3, 6}, 32);
    tensor lw = loss_weights({3, 6}, 33);
    (void) ln.forward(x, true);
    tensor dx = ln.backward(lw);

    check_grad(x, dx, [&](const tensor & xx) {
        layer_norm c = ln;
        return (double) dot(c.forward(xx, false), lw);
    }, 34);
    check_grad(ln.gamma.w, ln.gamma.g, [&](const tensor &) {
        layer_norm c = ln;
        return (double) dot(c.forward(x, false), lw);
    }, 35);
}

TEST_CASE("group_norm gradients") {
    group_norm gn;
    gn.init("gn", 8, 4);
    rng r(41);
    r.fill_normal(gn.gamma.w, 1.0f, 0.2f);
    r.fill_normal(gn.beta.w, 0.0f, 0.2f);
    gn.gamma.trainable = true;
    gn.beta.trainable = true;

    tensor x = randn({8, 5, 4}, 42);
    tensor lw = loss_weights({8, 5, 4}, 43);
    (void) gn.forward(x, true);
    tensor dx = gn.backward(lw);

    check_grad(x, dx, [&](const tensor & xx) {
        group_norm c = gn;
        return (double) dot(c.forward(xx, false), lw);
    }, 44);
    check_grad(gn.gamma.w, gn.gamma.g, [&](const tensor &) {
        group_norm c = gn;
        return (double) dot(c.forward(x, false), lw);
    }, 45);
}

TEST_CASE("conv2d gradients, stride 1 and 2, asymmetric pad") {
    for (int variant = 0; variant < 3; ++variant) {
        conv2d cv;
        if (variant == 0) cv.init("c", 3, 4, 3, 1, 1);
        if (variant == 1) cv.init("c", 3, 4, 3, 2, 1);
        if (variant == 2) {
            cv.init("c", 3, 4, 3, 2, 0);
            cv.set_pad(0, 1, 0, 1);
        }
        rng r(51 + (uint64_t) variant);
        r.fill_normal(cv.w.w, 0, 0.3f);
        r.fill_normal(cv.b.w, 0, 0.3f);
        cv.w.trainable = true;
        cv.b.trainable = true;

        tensor x = randn({3, 6, 6}, 60 + (uint64_t) variant);
        tensor y = cv.forward(x, true);
        tensor lw = loss_weights(y.shape, 70 + (uint64_t) variant);
        tensor dx = cv.backward(lw);

        check_grad(x, dx, [&](const tensor & xx) {
            conv2d c = cv;
            return (double) dot(c.forward(xx, false), lw);
        }, 80 + (uint64_t) variant);
        check_grad(cv.w.w, cv.w.g, [&](const tensor &) {
            conv2d c = cv;
            return (double) dot(c.forward(x, false), lw);
        }, 90 + (uint64_t) variant);
    }
}

TEST_CASE("activation gradients") {
    for (act a : {act::silu, act::gelu, act::quick_gelu}) {
        tensor x = randn({40}, 100 + (int) a);
        tensor lw = loss_weights({40}, 110 + (int) a);
        tensor dx = act_backward(x, lw, a);
        check_grad(x, dx, [&](const tensor & xx) {
            return (double) dot(act_forward(xx, a), lw);
        }, 120 + (int) a);
    }
}

TEST_CASE("attention gradients: plain, causal, and key-masked") {
    const int nq = 5, nk = 7, d = 8, heads = 2;
    for (int variant = 0; variant < 3; ++variant) {
        tensor q = randn({nq, d}, 200 + (uint64_t) variant);
        tensor k = randn({variant == 1 ? nq : nk, d}, 210 + (uint64_t) variant);
        tensor v = randn({variant == 1 ? nq : nk, d}, 220 + (uint64_t) variant);
        bool causal = variant == 1;
        std::vector<char> keep((size_t) k.shape[0], 1);
        std::vector<char> * keep_p = nullptr;
        if (variant == 2) {
            keep[1] = 0;
            keep[4] = 0;
            keep_p = &keep;
        }

        mha_cache cache;
        tensor y = mha_forward(q, k, v, heads, causal, keep_p, &cache);
        tensor lw = loss_weights(y.shape, 230 + (uint64_t) variant);
        tensor dq, dk, dv;
        mha_backward(cache, lw, dq, dk, dv);

        auto loss_q = [&](const tensor & qq) {
            return (double) dot(mha_forward(qq, k, v, heads, causal, keep_p, nullptr), lw);
        };
        auto loss_k = [&](const tensor & kk) {
            return (double) dot(mha_forward(q, kk, v, heads, causal, keep_p, nullptr), lw);
        };
        auto loss_v = [&](const tensor & vv) {
            return (double) dot(mha_forward(q, k, vv, heads, causal, keep_p, nullptr), lw);
        };
        check_grad(q, dq, [&](const tensor & t) { return loss_q(t); }, 240 + (uint64_t) variant);
        check_grad(k, dk, [&](const tensor & t) { return loss_k(t); }, 250 + (uint64_t) variant);
        check_grad(v, dv, [&](const tensor & t) { return loss_v(t); }, 260 + (uint64_t) variant);
    }
}

TEST_CASE("masked attention: banned keys get exactly zero probability, rows normalized") {
    tensor q = randn({4, 8}, 300);
    tensor k = randn({9, 8}, 301);
    tensor v = randn({9, 8}, 302);
    std::vector<char> keep(9, 1);
    keep[0] = 0;
    keep[5] = 0;
    tensor probs;
    (void) mha_forward(q, k, v, 2, false, &keep, nullptr, &probs);
    for (int64_t h = 0; h < 2; ++h) {
        for (int64_t i = 0; i < 4; ++i) {
            double row = 0.0;
            for (int64_t j = 0; j < 9; ++j) {
                float p = probs.at3(h, i, j);
                if (j == 0 || j == 5) CHECK(p == 0.0f);
                row += p;
            }
            CHECK(row == doctest::Approx(1.0).epsilon(1e-5));
        }
    }
}

TEST_CASE("upsample_nearest2x backward is the adjoint") {
    tensor x = randn({2, 3, 3}, 310);
    tensor y = upsample_nearest2x(x);
    CHECK(y.shape == std::vector<int64_t>{2, 6, 6});
    tensor lw = loss_weights(y.shape, 311);
    tensor dx = upsample_nearest2x_backward(lw);
    check_grad(x, dx, [&](const tensor & xx) {
        return (double) dot(upsample_nearest2x(xx), lw);
    }, 312);
}

TEST_CASE("embedding backward scatters into used rows only") {
    embedding e;
    e.init("emb", 10, 4);
    rng r(320);
    r.fill_normal(e.w.w);
    e.w.trainable = true;
    std::vector<int32_t> ids{2, 7, 2};
    tensor y = e.forward(ids, true);
    tensor lw = loss_weights(y.shape, 321);
    e.backward(lw);
    // row 2 used twice
    for (int64_t j = 0; j < 4; ++j) {
        CHECK(e.w.g.at2(2, j) == doctest::Approx(lw.at2(0, j) + lw.at2(2, j)));
        CHECK(e.w.g.at2(7, j) == doctest::Approx(lw.at2(1, j)));
        CHECK(e.w.g.at2(0, j) == 0.0f);
    }
}

TEST_CASE("adamw only touches params with grads and decays weights") {
    param p1, p2;
    p1.w = tensor({3}, 1.0f);
    p2.w = tensor({3}, 1.0f);
    p1.trainable = p2.trainable = true;
    adamw opt({&p1, &p2});
    tensor g({3}, 0.5f);
    p1.acc_grad(g);
    tensor before = p2.w;
    opt.step(1e-2f);
    CHECK(bit_equal(p2.w, before));
    CHECK(p1.w.v[0] < 1.0f);
}

TEST_CASE("adamw converges on a quadratic") {
    param p;
    p.w = tensor({2});
    p.w.v = {5.0f, -3.0f};
    p.trainable = true;
    adamw opt({&p});
    opt.weight_decay = 0.0f;
    for (int i = 0; i < 400; ++i) {
        tensor g({2});
        g.v = {2.0f * (p.w.v[0] - 1.0f), 2.0f * (p.w.v[1] - 2.0f)};
        p.zero_grad();
        p.acc_grad(g);
        opt.step(0.05f);
    }
    CHECK(p.w.v[0] == doctest::Approx(1.0f).epsilon(0.02));
    CHECK(p.w.v[1] == doctest::Approx(2.0f).epsilon(0.02));
}

TEST_CASE("cosine_lr endpoints") {
    CHECK(cosine_lr(1.0f, 0, 100) == doctest::Approx(1.0f));
    CHECK(cosine_lr(1.0f, 100, 100) == doctest::Approx(0.0f).epsilon(1e-6));
    CHECK(cosine_lr(1.0f, 50, 100) == doctest::Approx(0.5f).epsilon(1e-5));
}
