#include "nn/nn.h"

#include <cmath>
#include <cstring>
#include <limits>

#include "core/errors.h"

namespace ipc::nn {

// ---------------------------------------------------------------------------
// activations

static inline float sigmoidf(float x) { return 1.0f / (1.0f + std::exp(-x)); }

tensor act_forward(const tensor & x, act a) {
    tensor y(x.shape);
    switch (a) {
        case act::silu:
            for (size_t i = 0; i < x.v.size(); ++i) y.v[i] = x.v[i] * sigmoidf(x.v[i]);
            break;
        case act::gelu:
            for (size_t i = 0; i < x.v.size(); ++i) {
                y.v[i] = 0.5f * x.v[i] * (1.0f + std::erf(x.v[i] * 0.70710678118654752440f));
            }
            break;
        case act::quick_gelu:
            for (size_t i = 0; i < x.v.size(); ++i) y.v[i] = x.v[i] * sigmoidf(1.702f * x.v[i]);
            break;
    }
    return y;
}

tensor act_backward(const tensor & x, const tensor & dy, act a) {
    tensor dx(x.shape);
    switch (a) {
        case act::silu:
            for (size_t i = 0; i < x.v.size(); ++i) {
                float s = sigmoidf(x.v[i]);
                dx.v[i] = dy.v[i] * (s * (1.0f + x.v[i] * (1.0f - s)));
            }
            break;
        case act::gelu:
            for (size_t i = 0; i < x.v.size(); ++i) {
                float xf = x.v[i];
                float cdf = 0.5f * (1.0f + std::erf(xf * 0.70710678118654752440f));
                float pdf = 0.39894228040143267794f * std::exp(-0.5f * xf * xf);
                dx.v[i] = dy.v[i] * (cdf + xf * pdf);
            }
            break;
        case act::quick_gelu:
            for (size_t i = 0; i < x.v.size(); ++i) {
                float s = sigmoidf(1.702f * x.v[i]);
                dx.v[i] = dy.v[i] * (s + x.v[i] * 1.702f * s * (1.0f - s));
            }
            break;
    }
    return dx;
}

// ---------------------------------------------------------------------------
// linear

void linear::init(const std::string & name, int64_t in, int64_t out, bool bias) {
    w.name = name + ".weight";
    w.w = tensor({out, in});
    has_bias = bias;
    if (bias) {
        b.name = name + ".bias";
        b.w = tensor({out});
    }
}

void linear::collect(param_list & out) {
    out.push_back(&w);
    if (has_bias) out.push_back(&b);
}

tensor linear::forward(const tensor & x, bool train) {
    const int64_t n = x.shape[0];
    const int64_t in = w.w.shape[1];
    const int64_t out_d = w.w.shape[0];
    tensor y({n, out_d});
    matmul_nt(x.data(), w.w.data(), y.data(), n, in, out_d);
    if (has_bias) {
        for (int64_t i = 0; i < n; ++i) {
            float * row = y.data() + i * out_d;
            for (int64_t j = 0; j < out_d; ++j) row[j] += b.w.v[(size_t) j];
        }
    }
    if (train) x_ = x;
    return y;
}

tensor linear::backward(const tensor & dy) {
    const int64_t n = dy.shape[0];
    const int64_t out_d = w.w.shape[0];
    const int64_t in = w.w.shape[1];
    tensor dx({n, in});
    matmul(dy.data(), w.w.data(), dx.data(), n, out_d, in);
    if (w.trainable) {
        if (w.g.v.empty()) w.g = tensor(w.w.shape);
        matmul_tn(dy.data(), x_.data(), w.g.data(), out_d, n, in, /*acc=*/true);
    }
    if (has_bias && b.trainable) {
        if (b.g.v.empty()) b.g = tensor(b.w.shape);
        for (int64_t i = 0; i < n; ++i) {
            const float * row = dy.data() + i * out_d;
            for (int64_t j = 0; j < out_d; ++j) b.g.v[(size_t) j] += row[j];
        }
    }
    return dx;
}

// ---------------------------------------------------------------------------
// layer norm

void layer_norm::init(const std::string & name, int64_t d) {
    gamma.name = name + ".weight";
    gamma.w = tensor({d}, 1.0f);
    beta.name = name + ".bias";
    beta.w = tensor({d});
}

void layer_norm::collect(param_list & out) {
    out.push_back(&gamma);
    out.push_back(&beta);
}

tensor layer_norm::forward(const tensor & x, bool train) {
    const int64_t n = x.shape[0];
    const int64_t d = x.shape[1];
    tensor y(x.shape);
    if (train) {
        xhat_ = tensor(x.shape);
        rstd_ = tensor({n});
    }
    for (int64_t i = 0; i < n; ++i) {
        const float * xi = x.data() + i * d;
        float * yi = y.data() + i * d;
        double mu = 0.0;
        for (int64_t j = 0; j < d; ++j) mu += xi[j];
        mu /= (double) d;
        double var = 0.0;
        for (int64_t j = 0; j < d; ++j) var += ((double) xi[j] - mu) * ((double) xi[j] - mu);
        var /= (double) d;
        float rstd = (float) (1.0 / std::sqrt(var + (double) eps));
        for (int64_t j = 0; j < d; ++j) {
            float xh = ((float) (xi[j] - mu)) * rstd;
            yi[j] = xh * gamma.w.v[(size_t) j] + beta.w.v[(size_t) j];
            if (train) xhat_.v[(size_t) (i * d + j)] = xh;
        }
        if (train) rstd_.v[(size_t) i] = rstd;
    }
    return y;
}

tensor layer_norm::backward(const tensor & dy) {
    const int64_t n = dy.shape[0];
    const int64_t d = dy.shape[1];
    tensor dx(dy.shape);
    const bool want_g = gamma.trainable;
    if (want_g && gamma.g.v.empty()) gamma.g = tensor(gamma.w.shape);
    if (want_g && beta.g.v.empty()) beta.g = tensor(beta.w.shape);
    for (int64_t i = 0; i < n; ++i) {
        const float * dyi = dy.data() + i * d;
        const float * xh = xhat_.data() + i * d;
        float * dxi = dx.data() + i * d;
        double s1 = 0.0, s2 = 0.0;
        for (int64_t j = 0; j < d; ++j) {
            float dyh = dyi[j] * gamma.w.v[(size_t) j];
            s1 += dyh;
            s2 += (double) dyh * xh[j];
        }
        s1 /= (double) d;
        s2 /= (double) d;
        const float rstd = rstd_.v[(size_t) i];
        for (int64_t j = 0; j < d; ++j) {
            float dyh = dyi[j] * gamma.w.v[(size_t) j];
            dxi[j] = rstd * (dyh - (float) s1 - xh[j] * (float) s2);
        }
        if (want_g) {
            for (int64_t j = 0; j < d; ++j) {
                gamma.g.v[(size_t) j] += dyi[j] * xh[j];
                beta.g.v[(size_t) j] += dyi[j];
            }
        }
    }
    return dx;
}

// ---------------------------------------------------------------------------
// group norm

void group_norm::init(const std::string & name, int64_t channels, int g) {
    gamma.name = name + ".weight";
    gamma.w = tensor({channels}, 1.0f);
    beta.name = name + ".bias";
    beta.w = tensor({channels});
    groups = g;
}

void group_norm::collect(param_list & out) {
    out.push_back(&gamma);
    out.push_back(&beta);
}

tensor group_norm::forward(const tensor & x, bool train) {
    const int64_t C = x.shape[0], H = x.shape[1], W = x.shape[2];
    const int64_t cpg = C / groups;
    const int64_t gsz = cpg * H * W;
    tensor y(x.shape);
    if (train) {
        xhat_ = tensor(x.shape);
        rstd_ = tensor({groups});
    }
    for (int g = 0; g < groups; ++g) {
        const float * xg = x.data() + (size_t) g * gsz;
        double mu = 0.0;
        for (int64_t i = 0; i < gsz; ++i) mu += xg[i];
        mu /= (double) gsz;
        double var = 0.0;
        for (int64_t i = 0; i < gsz; ++i) var += ((double) xg[i] - mu) * ((double) xg[i] - mu);
        var /= (double) gsz;
        const float rstd = (float) (1.0 / std::sqrt(var + (double) eps));
        if (train) rstd_.v[(size_t) g] = rstd;
        for (int64_t c = 0; c < cpg; ++c) {
            const int64_t ch = g * cpg + c;
            const float gm = gamma.w.v[(size_t) ch];
            const float bt = beta.w.v[(size_t) ch];
            const float * xc = x.data() + ch * H * W;
            float * yc = y.data() + ch * H * W;
            for (int64_t i = 0; i < H * W; ++i) {
                float xh = (xc[i] - (float) mu) * rstd;
                if (train) xhat_.v[(size_t) (ch * H * W + i)] = xh;
                yc[i] = xh * gm + bt;
            }
        }
    }
    return y;
}

tensor group_norm::backward(const tensor & dy) {
    const int64_t C = dy.shape[0], H = dy.shape[1], W = dy.shape[2];
    const int64_t cpg = C / groups;
    const int64_t gsz = cpg * H * W;
    tensor dx(dy.shape);
    const bool want_g = gamma.trainable;
    if (want_g && gamma.g.v.empty()) gamma.g = tensor(gamma.w.shape);
    if (want_g && beta.g.v.empty()) beta.g = tensor(beta.w.shape);
    for (int g = 0; g < groups; ++g) {
        double s1 = 0.0, s2 = 0.0;
        for (int64_t c = 0; c < cpg; ++c) {
            const int64_t ch = g * cpg + c;
            const float gm = gamma.w.v[(size_t) ch];
            const float * dyc = dy.data() + ch * H * W;
            const float * xh = xhat_.data() + ch * H * W;
            for (int64_t i = 0; i < H * W; ++i) {
                float dyh = dyc[i] * gm;
                s1 += dyh;
                s2 += (double) dyh * xh[i];
            }
        }
        s1 /= (double) gsz;
        s2 /= (double) gsz;
        const float rstd = rstd_.v[(size_t) g];
        for (int64_t c = 0; c < cpg; ++c) {
            const int64_t ch = g * cpg + c;
            const float gm = gamma.w.v[(size_t) ch];
            const float * dyc = dy.data() + ch * H * W;
            const float * xh = xhat_.data() + ch * H * W;
            float * dxc = dx.data() + ch * H * W;
            for (int64_t i = 0; i < H * W; ++i) {
                float dyh = dyc[i] * gm;
                dxc[i] = rstd * (dyh - (float) s1 - xh[i] * (float) s2);
            }
            if (want_g) {
                for (int64_t i = 0; i < H * W; ++i) {
                    gamma.g.v[(size_t) ch] += dyc[i] * xh[i];
                    beta.g.v[(size_t) ch] += dyc[i];
                }
            }
        }
    }
    return dx;
}

// ---------------------------------------------------------------------------
// conv2d

void conv2d::init(const std::string & name, int64_t in_c, int64_t out_c, int k, int stride_, int pad, bool bias) {
    w.name = name + ".weight";
    w.w = tensor({out_c, in_c, k, k});
    has_bias = bias;
    if (bias) {
        b.name = name + ".bias";
        b.w = tensor({out_c});
    }
    stride = stride_;
    if (pad < 0) pad = (k - 1) / 2;
    pad_l = pad_r = pad_t = pad_b = pad;
}

void conv2d::collect(param_list & out) {
    out.push_back(&w);
    if (has_bias) out.push_back(&b);
}

static void im2col(const tensor & x, int kh, int kw, int stride, int pl, int pt, int64_t oh, int64_t ow, tensor & col) {
    const int64_t C = x.shape[0], H = x.shape[1], W = x.shape[2];
    // col [C*kh*kw, oh*ow]
    for (int64_t c = 0; c < C; ++c) {
        for (int ky = 0; ky < kh; ++ky) {
            for (int kx = 0; kx < kw; ++kx) {
                float * dst = col.data() + ((c * kh + ky) * kw + kx) * oh * ow;
                for (int64_t oy = 0; oy < oh; ++oy) {
                    const int64_t iy = oy * stride + ky - pt;
                    if (iy < 0 || iy >= H) {
                        std::memset(dst + oy * ow, 0, (size_t) ow * sizeof(float));
                        continue;
                    }
                    const float * src = x.data() + (c * H + iy) * W;
                    for (int64_t ox = 0; ox < ow; ++ox) {
                        const int64_t ix = ox * stride + kx - pl;
                        dst[oy * ow + ox] = (ix >= 0 && ix < W) ? src[ix] : 0.0f;
                    }
                }
            }
        }
    }
}

static void col2im(const tensor & col, int kh, int kw, int stride, int pl, int pt, int64_t oh, int64_t ow, tensor & dx) {
    const int64_t C = dx.shape[0], H = dx.shape[1], W = dx.shape[2];
    for (int64_t c = 0; c < C; ++c) {
        for (int ky = 0; ky < kh; ++ky) {
            for (int kx = 0; kx < kw; ++kx) {
                const float * src = col.data() + ((c * kh + ky) * kw + kx) * oh * ow;
                for (int64_t oy = 0; oy < oh; ++oy) {
                    const int64_t iy = oy * stride + ky - pt;
                    if (iy < 0 || iy >= H) continue;
                    float * dst = dx.data() + (c * H + iy) * W;
                    for (int64_t ox = 0; ox < ow; ++ox) {
                        const int64_t ix = ox * stride + kx - pl;
                        if (ix >= 0 && ix < W) dst[ix] += src[oy * ow + ox];
                    }
                }
            }
        }
    }
}

tensor conv2d::forward(const tensor & x, bool train) {
    const int64_t out_c = w.w.shape[0], in_c = w.w.shape[1];
    const int kh = (int) w.w.shape[2], kw = (int) w.w.shape[3];
    if (x.shape[0] != in_c) throw input_error(strf("conv2d %s: channel mismatch", w.name.c_str()));
    const int64_t oh = (x.shape[1] + pad_t + pad_b - kh) / stride + 1;
    const int64_t ow = (x.shape[2] + pad_l + pad_r - kw) / stride + 1;

    tensor col({in_c * kh * kw, oh * ow});
    im2col(x, kh, kw, stride, pad_l, pad_t, oh, ow, col);

    tensor y({out_c, oh, ow});
    matmul(w.w.data(), col.data(), y.data(), out_c, in_c * kh * kw, oh * ow);
    if (has_bias) {
        for (int64_t c = 0; c < out_c; ++c) {
            float * yc = y.data() + c * oh * ow;
            const float bias = b.w.v[(size_t) c];
            for (int64_t i = 0; i < oh * ow; ++i) yc[i] += bias;
        }
    }
    if (train) {
        col_ = std::move(col);
        in_shape_ = x.shape;
    }
    return y;
}

tensor conv2d::backward(const tensor & dy) {
    const int64_t out_c = w.w.shape[0], in_c = w.w.shape[1];
    const int kh = (int) w.w.shape[2], kw = (int) w.w.shape[3];
    const int64_t oh = dy.shape[1], ow = dy.shape[2];
    const int64_t k = in_c * kh * kw;

    if (w.trainable) {
        if (w.g.v.empty()) w.g = tensor(w.w.shape);
        matmul_nt(dy.data(), col_.data(), w.g.data(), out_c, oh * ow, k, /*acc=*/true);
    }
    if (has_bias && b.trainable) {
        if (b.g.v.empty()) b.g = tensor(b.w.shape);
        for (int64_t c = 0; c < out_c; ++c) {
            const float * dyc = dy.data() + c * oh * ow;
            double s = 0.0;
            for (int64_t i = 0; i < oh * ow; ++i) s += dyc[i];
            b.g.v[(size_t) c] += (float) s;
        }
    }

    tensor dcol({k, oh * ow});
    matmul_tn(w.w.data(), dy.data(), dcol.data(), k, out_c, oh * ow);
    tensor dx(in_shape_);
    col2im(dcol, kh, kw, stride, pad_l, pad_t, oh, ow, dx);
    return dx;
}

// ---------------------------------------------------------------------------
// attention

tensor softmax_rows(const tensor & x) {
    tensor y(x.shape);
    const int64_t n = x.shape[0], d = x.shape[1];
    for (int64_t i = 0; i < n; ++i) {
        const float * xi = x.data() + i * d;
        float * yi = y.data() + i * d;
        float mx = -std::numeric_limits<float>::infinity();
        for (int64_t j = 0; j < d; ++j) mx = std::max(mx, xi[j]);
        double z = 0.0;
        for (int64_t j = 0; j < d; ++j) {
            float e = std::exp(xi[j] - mx);
            yi[j] = e;
            z += e;
        }
        const float rz = (float) (1.0 / z);
        for (int64_t j = 0; j < d; ++j) yi[j] *= rz;
    }
    return y;
}

tensor mha_forward(const tensor & q, const tensor & k, const tensor & v, int n_heads,
                   bool causal, const std::vector<char> * key_keep,
                   mha_cache * cache, tensor * probs_out) {
    const int64_t nq = q.shape[0], nk = k.shape[0], d = q.shape[1];
    const int64_t dh = d / n_heads;
    const float scale = 1.0f / std::sqrt((float) dh);
    const float ninf = -std::numeric_limits<float>::infinity();

    tensor out({nq, d});
    tensor probs({n_heads, nq, nk});

    for (int h = 0; h < n_heads; ++h) {
        for (int64_t i = 0; i < nq; ++i) {
            const float * qi = q.data() + i * d + h * dh;
            float * p = probs.data() + (h * nq + i) * nk;
            float mx = ninf;
            for (int64_t j = 0; j < nk; ++j) {
                if ((causal && j > i) || (key_keep && !(*key_keep)[(size_t) j])) {
                    p[j] = ninf;
                    continue;
                }
                const float * kj = k.data() + j * d + h * dh;
                double s = 0.0;
                for (int64_t c = 0; c < dh; ++c) s += (double) qi[c] * kj[c];
                p[j] = (float) s * scale;
                mx = std::max(mx, p[j]);
            }
            if (mx == ninf) throw input_error("attention: row has no attendable key");
            double z = 0.0;
            for (int64_t j = 0; j < nk; ++j) {
                // exp(-inf) == 0, so banned keys get exactly zero weight
                float e = std::exp(p[j] - mx);
                p[j] = e;
                z += e;
            }
            const float rz = (float) (1.0 / z);
            float * oi = out.data() + i * d + h * dh;
            for (int64_t c = 0; c < dh; ++c) oi[c] = 0.0f;
            for (int64_t j = 0; j < nk; ++j) {
                p[j] *= rz;
                if (p[j] == 0.0f) continue;
                const float * vj = v.data() + j * d + h * dh;
                for (int64_t c = 0; c < dh; ++c) oi[c] += p[j] * vj[c];
            }
        }
    }
    if (cache) {
        cache->q = q;
        cache->k = k;
        cache->v = v;
        cache->probs = probs;
        cache->n_heads = n_heads;
    }
    if (probs_out) *probs_out = std::move(probs);
    return out;
}

void mha_backward(const mha_cache & c, const tensor & dy, tensor & dq, tensor & dk, tensor & dv) {
    const int64_t nq = c.q.shape[0], nk = c.k.shape[0], d = c.q.shape[1];
    const int n_heads = c.n_heads;
    const int64_t dh = d / n_heads;
    const float scale = 1.0f / std::sqrt((float) dh);

    dq = tensor({nq, d});
    dk = tensor({nk, d});
    dv = tensor({nk, d});

    std::vector<float> dp((size_t) nk);
    for (int h = 0; h < n_heads; ++h) {
        for (int64_t i = 0; i < nq; ++i) {
            const float * p = c.probs.data() + (h * nq + i) * nk;
            const float * dyi = dy.data() + i * d + h * dh;

            // dP = dY V^T, dV += P^T dY
            double dot_pp = 0.0;
            for (int64_t j = 0; j < nk; ++j) {
                if (p[j] == 0.0f) {
                    dp[(size_t) j] = 0.0f;
                    continue;
                }
                const float * vj = c.v.data() + j * d + h * dh;
                float * dvj = dv.data() + j * d + h * dh;
                double s = 0.0;
                for (int64_t cc = 0; cc < dh; ++cc) {
                    s += (double) dyi[cc] * vj[cc];
                    dvj[cc] += p[j] * dyi[cc];
                }
                dp[(size_t) j] = (float) s;
                dot_pp += (double) p[j] * s;
            }
            // softmax backward: dL_j = p_j (dp_j - sum_k p_k dp_k)
            const float * qi = c.q.data() + i * d + h * dh;
            float * dqi = dq.data() + i * d + h * dh;
            for (int64_t j = 0; j < nk; ++j) {
                if (p[j] == 0.0f) continue;
                const float dl = p[j] * (dp[(size_t) j] - (float) dot_pp) * scale;
                const float * kj = c.k.data() + j * d + h * dh;
                float * dkj = dk.data() + j * d + h * dh;
                for (int64_t cc = 0; cc < dh; ++cc) {
                    dqi[cc] += dl * kj[cc];
                    dkj[cc] += dl * qi[cc];
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// spatial helpers

tensor upsample_nearest2x(const tensor & x) {
    const int64_t C = x.shape[0], H = x.shape[1], W = x.shape[2];
    tensor y({C, 2 * H, 2 * W});
    for (int64_t c = 0; c < C; ++c) {
        for (int64_t i = 0; i < H; ++i) {
            const float * src = x.data() + (c * H + i) * W;
            float * d0 = y.data() + (c * 2 * H + 2 * i) * 2 * W;
            float * d1 = d0 + 2 * W;
            for (int64_t j = 0; j < W; ++j) {
                d0[2 * j] = d0[2 * j + 1] = d1[2 * j] = d1[2 * j + 1] = src[j];
            }
        }
    }
    return y;
}

tensor upsample_nearest2x_backward(const tensor & dy) {
    const int64_t C = dy.shape[0], H2 = dy.shape[1], W2 = dy.shape[2];
    const int64_t H = H2 / 2, W = W2 / 2;
    tensor dx({C, H, W});
    for (int64_t c = 0; c < C; ++c) {
        for (int64_t i = 0; i < H; ++i) {
            const float * s0 = dy.data() + (c * H2 + 2 * i) * W2;
            const float * s1 = s0 + W2;
            float * dst = dx.data() + (c * H + i) * W;
            for (int64_t j = 0; j < W; ++j) {
                dst[j] = s0[2 * j] + s0[2 * j + 1] + s1[2 * j] + s1[2 * j + 1];
            }
        }
    }
    return dx;
}

tensor timestep_embedding(int64_t t, int64_t dim) {
    tensor e({dim});
    const int64_t half = dim / 2;
    const float log_base = std::log(10000.0f) / (float) half;
    for (int64_t i = 0; i < half; ++i) {
        const float freq = std::exp(-(float) i * log_base);
        e.v[(size_t) i] = std::cos((float) t * freq);
        e.v[(size_t) (i + half)] = std::sin((float) t * freq);
    }
    return e;
}

// ---------------------------------------------------------------------------
// embedding

void embedding::init(const std::string & name, int64_t vocab, int64_t d) {
    w.name = name + ".weight";
    w.w = tensor({vocab, d});
}

void embedding::collect(param_list & out) {
    out.push_back(&w);
}

tensor embedding::forward(const std::vector<int32_t> & ids, bool train) {
    const int64_t d = w.w.shape[1];
    tensor y({(int64_t) ids.size(), d});
    for (size_t i = 0; i < ids.size(); ++i) {
        std::memcpy(y.data() + i * d, w.w.data() + (int64_t) ids[i] * d, (size_t) d * sizeof(float));
    }
    if (train) ids_ = ids;
    return y;
}

void embedding::backward(const tensor & dy) {
    if (!w.trainable) return;
    if (w.g.v.empty()) w.g = tensor(w.w.shape);
    const int64_t d = w.w.shape[1];
    for (size_t i = 0; i < ids_.size(); ++i) {
        float * g = w.g.data() + (int64_t) ids_[i] * d;
        const float * src = dy.data() + i * d;
        for (int64_t j = 0; j < d; ++j) g[j] += src[j];
    }
}

} // namespace ipc::nn
