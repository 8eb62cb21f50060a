#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include <Eigen/Dense>

#include "converter/converter.h"
#include "core/errors.h"
#include "core/rng.h"

using namespace ipc;

static projection_matrix make_w(const tensor & m, const std::string & tag = "test") {
    projection_matrix w;
    w.matrix = m;
    w.kind = proj_kind::text;
    w.model_tag = tag;
    return w;
}

static tensor randn(std::vector<int64_t> shape, uint64_t seed, float s = 1.0f) {
    tensor t(std::move(shape));
    rng r(seed);
    r.fill_normal(t, 0, s);
    return t;
}

// random orthogonal factors with prescribed singular values
static tensor random_with_sv_list(int64_t n, uint64_t seed, const std::vector<float> & svs) {
    tensor a = randn({n, n}, seed);
    Eigen::MatrixXd M(n, n);
    for (int64_t i = 0; i < n; ++i) {
        for (int64_t j = 0; j < n; ++j) M(i, j) = a.at2(i, j);
    }
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(M, Eigen::ComputeFullU | Eigen::ComputeFullV);
    Eigen::VectorXd sv(n);
    for (int64_t i = 0; i < n; ++i) sv(i) = svs[(size_t) i];
    Eigen::MatrixXd B = svd.matrixU() * sv.asDiagonal() * svd.matrixV().transpose();
    tensor out({n, n});
    for (int64_t i = 0; i < n; ++i) {
        for (int64_t j = 0; j < n; ++j) out.at2(i, j) = (float) B(i, j);
    }
    return out;
}

// random matrix with singular values pushed into [lo, hi]
static tensor random_with_sv(int64_t n, uint64_t seed, float lo, float hi) {
    std::vector<float> svs;
    rng r(seed + 1);
    for (int64_t i = 0; i < n; ++i) svs.push_back(lo + (hi - lo) * r.uniform());
    return random_with_sv_list(n, seed, svs);
}

TEST_CASE("identity matrix inverts to identity with full rank") {
    tensor eye({4, 4});
    for (int i = 0; i < 4; ++i) eye.at2(i, i) = 1.0f;
    auto inv = thresholded_pseudo_inverse(make_w(eye), 0.3f);
    CHECK(inv.retained_rank == 4);
    CHECK(max_abs_diff(inv.matrix, eye) < 1e-6f);
}

TEST_CASE("diagonal matrix: small singular values are dropped, threshold tie kept") {
    tensor d({3, 3});
    d.at2(0, 0) = 2.0f;
    d.at2(1, 1) = 1.0f;
    d.at2(2, 2) = 0.1f;
    auto inv = thresholded_pseudo_inverse(make_w(d), 0.3f);
    CHECK(inv.retained_rank == 2);
    CHECK(inv.matrix.at2(0, 0) == doctest::Approx(0.5).epsilon(1e-6));
    CHECK(inv.matrix.at2(1, 1) == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(std::fabs(inv.matrix.at2(2, 2)) < 1e-7f);

    // sigma == tau is retained (the footnote drops strictly smaller ones)
    d.at2(2, 2) = 0.3f;
    auto inv2 = thresholded_pseudo_inverse(make_w(d), 0.3f);
    CHECK(inv2.retained_rank == 3);
}

TEST_CASE("full-rank random W: solve residual and least-squares oracle agreement") {
    tensor w = random_with_sv(8, 42, 0.5f, 2.0f);
    auto inv = thresholded_pseudo_inverse(make_w(w), 0.3f);
    CHECK(inv.retained_rank == 8);

    // ||W+ W - I||_F
    double fro = 0.0;
    for (int64_t i = 0; i < 8; ++i) {
        for (int64_t j = 0; j < 8; ++j) {
            double s = 0.0;
            for (int64_t k = 0; k < 8; ++k) s += (double) inv.matrix.at2(i, k) * w.at2(k, j);
            const double want = i == j ? 1.0 : 0.0;
            fro += (s - want) * (s - want);
        }
    }
    CHECK(std::sqrt(fro) <= 1e-5);

    // oracle: unthresholded least-squares solve of W x = b
    Eigen::MatrixXd M(8, 8);
    for (int64_t i = 0; i < 8; ++i) {
        for (int64_t j = 0; j < 8; ++j) M(i, j) = w.at2(i, j);
    }
    tensor b = randn({8}, 77);
    Eigen::VectorXd bb(8);
    for (int64_t i = 0; i < 8; ++i) bb(i) = b.v[(size_t) i];
    Eigen::VectorXd x = M.colPivHouseholderQr().solve(bb);
    tensor got({8});
    matvec(inv.matrix, b.data(), got.data());
    for (int64_t i = 0; i < 8; ++i) {
        CHECK(got.v[(size_t) i] == doctest::Approx(x(i)).epsilon(2e-4));
    }
}

TEST_CASE("directions below the threshold are annihilated") {
    tensor w = random_with_sv_list(6, 7, {1.8f, 1.1f, 0.7f, 0.31f, 0.12f, 0.02f});
    Eigen::MatrixXd M(6, 6);
    for (int64_t i = 0; i < 6; ++i) {
        for (int64_t j = 0; j < 6; ++j) M(i, j) = w.at2(i, j);
    }
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(M, Eigen::ComputeFullU | Eigen::ComputeFullV);
    auto inv = thresholded_pseudo_inverse(make_w(w), 0.3f);
    int64_t below = 0;
    for (Eigen::Index c = 0; c < 6; ++c) {
        if (svd.singularValues()(c) < 0.3) {
            ++below;
            tensor u({6});
            for (int64_t i = 0; i < 6; ++i) u.v[(size_t) i] = (float) svd.matrixU()(i, c);
            tensor out({6});
            matvec(inv.matrix, u.data(), out.data());
            CHECK(norm2(out) <= 1e-5f);
        }
    }
    CHECK(below > 0); // sampled matrix really exercises the threshold
    CHECK(inv.retained_rank == 6 - below);
}

TEST_CASE("raising the threshold never raises the rank; tau=0 is the exact pseudo-inverse") {
    tensor w = random_with_sv(8, 11, 0.05f, 2.0f);
    int64_t prev = 9;
    for (float tau : {0.0f, 0.1f, 0.3f, 0.8f, 1.5f}) {
        auto inv = thresholded_pseudo_inverse(make_w(w), tau);
        CHECK(inv.retained_rank <= prev);
        prev = inv.retained_rank;
    }
    auto inv0 = thresholded_pseudo_inverse(make_w(w), 0.0f);
    // Penrose condition W+ W W+ = W+
    tensor t1({8, 8});
    matmul(inv0.matrix.data(), w.data(), t1.data(), 8, 8, 8);
    tensor t2({8, 8});
    matmul(t1.data(), inv0.matrix.data(), t2.data(), 8, 8, 8);
    double fro = 0.0;
    for (size_t i = 0; i < t2.v.size(); ++i) {
        double d = (double) t2.v[i] - inv0.matrix.v[i];
        fro += d * d;
    }
    CHECK(std::sqrt(fro) <= 1e-5);
}

TEST_CASE("degenerate inverse: everything below threshold throws") {
    tensor d({3, 3});
    d.at2(0, 0) = 0.1f;
    d.at2(1, 1) = 0.05f;
    d.at2(2, 2) = 0.01f;
    CHECK_THROWS_AS(thresholded_pseudo_inverse(make_w(d), 0.3f), degenerate_error);
}

TEST_CASE("convert: positive rescaling of the input cancels exactly") {
    tensor w = random_with_sv(8, 21, 0.5f, 2.0f);
    auto inv = thresholded_pseudo_inverse(make_w(w), 0.3f);
    converter_config cfg;
    tensor f = randn({8}, 22);
    auto a = convert_image_embedding(f, inv, cfg);
    for (float c : {0.5f, 2.0f, 10.0f}) {
        tensor fc = f;
        scale_(fc, c);
        auto b = convert_image_embedding(fc, inv, cfg);
        CHECK(max_abs_diff(a.embedding, b.embedding) < 1e-6f * (1.0f + norm2(a.embedding)));
    }
}

TEST_CASE("convert: identity projection with ||f|| = kappa returns f") {
    tensor eye({5, 5});
    for (int i = 0; i < 5; ++i) eye.at2(i, i) = 1.0f;
    auto inv = thresholded_pseudo_inverse(make_w(eye), 0.3f);
    converter_config cfg;
    cfg.kappa = 27.0f;
    tensor f = randn({5}, 30);
    scale_(f, 27.0f / norm2(f));
    auto out = convert_image_embedding(f, inv, cfg);
    CHECK(max_abs_diff(out.embedding, f) < 1e-4f);
}

TEST_CASE("convert: in-span vectors round trip through W within 1e-4") {
    tensor w = random_with_sv(8, 31, 0.5f, 2.0f);
    auto inv = thresholded_pseudo_inverse(make_w(w), 0.3f);
    converter_config cfg;
    // v in the retained right-singular span with ||W v|| = kappa
    tensor v0 = randn({8}, 32);
    tensor f({8});
    matvec(make_w(w).matrix, v0.data(), f.data()); // f = W v0, in range(W)
    scale_(f, cfg.kappa / norm2(f));
    auto got = convert_image_embedding(f, inv, cfg);
    // W * got should be proportional to f with ||.|| = kappa
    tensor back({8});
    matvec(make_w(w).matrix, got.embedding.data(), back.data());
    tensor nf = f;
    scale_(nf, 1.0f / norm2(nf));
    tensor nb = back;
    scale_(nb, 1.0f / norm2(nb));
    CHECK(max_abs_diff(nf, nb) < 1e-4f);
}

TEST_CASE("convert errors: zero-norm input") {
    tensor eye({3, 3});
    for (int i = 0; i < 3; ++i) eye.at2(i, i) = 1.0f;
    auto inv = thresholded_pseudo_inverse(make_w(eye), 0.0f);
    converter_config cfg;
    tensor z({3});
    CHECK_THROWS_AS(convert_image_embedding(z, inv, cfg), input_error);
}

TEST_CASE("convert_backward matches finite differences") {
    tensor w = random_with_sv(6, 41, 0.5f, 2.0f);
    auto inv = thresholded_pseudo_inverse(make_w(w), 0.3f);
    converter_config cfg;
    tensor f = randn({6}, 42);
    scale_(f, 8.0f / norm2(f));
    tensor lw = randn({6}, 43);

    auto loss = [&](const tensor & ff) {
        return (double) dot(convert_image_embedding(ff, inv, cfg).embedding, lw);
    };
    tensor g = convert_backward(f, inv, cfg, lw);
    for (int64_t i = 0; i < 6; ++i) {
        const float eps = 1e-3f;
        tensor fp = f, fm = f;
        fp.v[(size_t) i] += eps;
        fm.v[(size_t) i] -= eps;
        double fd = (loss(fp) - loss(fm)) / (2.0 * eps);
        CHECK(std::fabs(fd - g.v[(size_t) i]) < 2e-2 * std::max(1.0, std::fabs(fd)));
    }
}

TEST_CASE("assemble_pseudo_prompt: layout invariants") {
    tensor sos = randn({16}, 50);
    converted_token c;
    c.embedding = randn({16}, 51);
    auto seq = assemble_pseudo_prompt(sos, c);
    CHECK(seq.vectors.shape == std::vector<int64_t>{77, 16});
    CHECK(seq.provenance == prompt_provenance::converted);
    for (int64_t j = 0; j < 16; ++j) {
        CHECK(seq.vectors.at2(0, j) == sos.v[(size_t) j]);
        CHECK(seq.vectors.at2(1, j) == seq.vectors.at2(76, j));
        CHECK(seq.vectors.at2(1, j) == c.embedding.v[(size_t) j]);
    }

    // degenerate all-zero token still yields a well-formed sequence
    converted_token z;
    z.embedding = tensor({16});
    auto zs = assemble_pseudo_prompt(sos, z);
    for (int64_t i = 1; i < 77; ++i) {
        for (int64_t j = 0; j < 16; ++j) CHECK(zs.vectors.at2(i, j) == 0.0f);
    }
    CHECK(zs.vectors.at2(0, 3) == sos.v[3]);
}

TEST_CASE("combine_edit: alpha semantics") {
    const int64_t d = 16;
    text_encoding text;
    text.tokens = randn({77, d}, 60);
    text.eos_index = 5;
    converted_token c;
    c.embedding = randn({d}, 61);

    auto a0 = combine_edit(c, text, 0.0f);
    CHECK(a0.provenance == prompt_provenance::combined);
    CHECK(a0.alpha == 0.0f);
    for (int64_t j = 0; j < d; ++j) {
        // word tokens unchanged, tail equals the converted token exactly
        CHECK(a0.vectors.at2(2, j) == text.tokens.at2(2, j));
        CHECK(a0.vectors.at2(5, j) == c.embedding.v[(size_t) j]);
        CHECK(a0.vectors.at2(76, j) == c.embedding.v[(size_t) j]);
    }

    // affine in alpha: seq(a)[k] - seq(0)[k] == a * eos for k >= eos_index
    auto a9 = combine_edit(c, text, 0.9f);
    for (int64_t k : {5ll, 40ll, 76ll}) {
        for (int64_t j = 0; j < d; ++j) {
            float diff = a9.vectors.at2(k, j) - a0.vectors.at2(k, j);
            CHECK(diff == doctest::Approx(0.9f * text.tokens.at2(5, j)).epsilon(1e-5));
        }
    }

    // three-point collinearity on {0, 0.45, 0.9}
    auto a45 = combine_edit(c, text, 0.45f);
    for (int64_t j = 0; j < d; ++j) {
        float mid = 0.5f * (a0.vectors.at2(10, j) + a9.vectors.at2(10, j));
        CHECK(a45.vectors.at2(10, j) == doctest::Approx(mid).epsilon(1e-4));
    }

    CHECK_THROWS_AS(combine_edit(c, text, -0.1f), input_error);
    CHECK_THROWS_AS(combine_edit(c, text, std::numeric_limits<float>::quiet_NaN()), input_error);
    auto big = combine_edit(c, text, 1.5f); // allowed, warned
    CHECK(big.alpha == 1.5f);
}
