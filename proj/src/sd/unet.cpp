#include "sd/unet.h"

#include <cmath>
#include <cstring>

#include "core/errors.h"

namespace ipc {

using nn::act;
using nn::act_backward;
using nn::act_forward;
using nn::upsample_nearest2x;
using nn::upsample_nearest2x_backward;

// ---------------------------------------------------------------------------
// res block

void unet_res_block::init(const std::string & name, int64_t in_c, int64_t out_c, int64_t time_dim, int groups) {
    norm1.init(name + ".norm1", in_c, groups);
    conv1.init(name + ".conv1", in_c, out_c, 3, 1, 1);
    time_proj.init(name + ".time_proj", time_dim, out_c);
    norm2.init(name + ".norm2", out_c, groups);
    conv2.init(name + ".conv2", out_c, out_c, 3, 1, 1);
    has_skip = in_c != out_c;
    if (has_skip) skip.init(name + ".skip", in_c, out_c, 1, 1, 0);
}

void unet_res_block::collect(nn::param_list & out) {
    norm1.collect(out);
    conv1.collect(out);
    time_proj.collect(out);
    norm2.collect(out);
    conv2.collect(out);
    if (has_skip) skip.collect(out);
}

tensor unet_res_block::forward(const tensor & x, const tensor & temb, bool train) {
    tensor n1 = norm1.forward(x, train);
    tensor h = conv1.forward(act_forward(n1, act::silu), train);

    tensor ta = act_forward(temb, act::silu);
    tensor tp = time_proj.forward(ta, train); // [1, out_c]
    const int64_t out_c = h.shape[0];
    hw_ = h.shape[1] * h.shape[2];
    for (int64_t c = 0; c < out_c; ++c) {
        float * hc = h.data() + c * hw_;
        const float add = tp.v[(size_t) c];
        for (int64_t i = 0; i < hw_; ++i) hc[i] += add;
    }

    tensor n2 = norm2.forward(h, train);
    tensor h2 = conv2.forward(act_forward(n2, act::silu), train);

    if (train) {
        n1_ = std::move(n1);
        n2_ = std::move(n2);
        x_ = temb; // pre-silu time embedding
    }
    if (has_skip) {
        tensor s = skip.forward(x, train);
        add_(h2, s);
    } else {
        add_(h2, x);
    }
    return h2;
}

tensor unet_res_block::backward(const tensor & dy, tensor & dtemb) {
    tensor da2 = conv2.backward(dy);
    tensor dn2 = act_backward(n2_, da2, act::silu);
    tensor dh = norm2.backward(dn2);

    // time projection add broadcast over hw
    const int64_t out_c = dh.shape[0];
    tensor dtp({1, out_c});
    for (int64_t c = 0; c < out_c; ++c) {
        const float * hc = dh.data() + c * hw_;
        double s = 0.0;
        for (int64_t i = 0; i < hw_; ++i) s += hc[i];
        dtp.v[(size_t) c] = (float) s;
    }
    tensor dta = time_proj.backward(dtp);
    tensor dt = act_backward(x_, dta, act::silu);
    add_(dtemb, dt);

    tensor da1 = conv1.backward(dh);
    tensor dn1 = act_backward(n1_, da1, act::silu);
    tensor dx = norm1.backward(dn1);
    if (has_skip) {
        tensor ds = skip.backward(dy);
        add_(dx, ds);
    } else {
        add_(dx, dy);
    }
    return dx;
}

// ---------------------------------------------------------------------------
// attention

void cross_attn::init(const std::string & name, int64_t query_dim, int64_t kv_dim, int heads) {
    to_q.init(name + ".to_q", query_dim, query_dim, /*bias=*/false);
    to_k.init(name + ".to_k", kv_dim, query_dim, /*bias=*/false);
    to_v.init(name + ".to_v", kv_dim, query_dim, /*bias=*/false);
    to_out.init(name + ".to_out", query_dim, query_dim);
    n_heads = heads;
}

void cross_attn::collect(nn::param_list & out) {
    to_q.collect(out);
    to_k.collect(out);
    to_v.collect(out);
    to_out.collect(out);
}

tensor cross_attn::forward(const tensor & x, const tensor * ctx, bool train,
                           const std::vector<char> * ctx_keep, tensor * probs_out) {
    is_cross = ctx != nullptr;
    const tensor & kv_src = is_cross ? *ctx : x;
    tensor q = to_q.forward(x, train);
    tensor k = to_k.forward(kv_src, train);
    tensor v = to_v.forward(kv_src, train);
    tensor o = mha_forward(q, k, v, n_heads, /*causal=*/false,
                           is_cross ? ctx_keep : nullptr, train ? &mc_ : nullptr, probs_out);
    return to_out.forward(o, train);
}

tensor cross_attn::backward(const tensor & dy, tensor * dctx) {
    tensor do_ = to_out.backward(dy);
    tensor dq, dk, dv;
    mha_backward(mc_, do_, dq, dk, dv);
    tensor dx = to_q.backward(dq);
    tensor dks = to_k.backward(dk);
    tensor dvs = to_v.backward(dv);
    if (is_cross) {
        if (dctx) {
            add_(*dctx, dks);
            add_(*dctx, dvs);
        }
    } else {
        add_(dx, dks);
        add_(dx, dvs);
    }
    return dx;
}

// ---------------------------------------------------------------------------
// transformer block (self attn, cross attn, geglu feed-forward)

void transformer_block::init(const std::string & name, int64_t dim, int64_t ctx_dim, int heads) {
    ln1.init(name + ".ln1", dim);
    attn1.init(name + ".attn1", dim, dim, heads);
    ln2.init(name + ".ln2", dim);
    attn2.init(name + ".attn2", dim, ctx_dim, heads);
    ln3.init(name + ".ln3", dim);
    ff_in.init(name + ".ff.proj_in", dim, 8 * dim); // geglu halves
    ff_out.init(name + ".ff.proj_out", 4 * dim, dim);
}

void transformer_block::collect(nn::param_list & out) {
    ln1.collect(out);
    attn1.collect(out);
    ln2.collect(out);
    attn2.collect(out);
    ln3.collect(out);
    ff_in.collect(out);
    ff_out.collect(out);
}

tensor transformer_block::forward(const tensor & x, const tensor & ctx, bool train,
                                  const std::vector<char> * ctx_keep, tensor * probs_out) {
    tensor h = x;
    {
        tensor a = attn1.forward(ln1.forward(h, train), nullptr, train, nullptr, nullptr);
        add_(h, a);
    }
    {
        tensor a = attn2.forward(ln2.forward(h, train), &ctx, train, ctx_keep, probs_out);
        add_(h, a);
    }
    {
        tensor c = ln3.forward(h, train);
        tensor uv = ff_in.forward(c, train);
        const int64_t n = uv.shape[0];
        const int64_t f = uv.shape[1] / 2;
        tensor u({n, f}), g({n, f});
        for (int64_t i = 0; i < n; ++i) {
            std::memcpy(u.data() + i * f, uv.data() + i * 2 * f, (size_t) f * sizeof(float));
            std::memcpy(g.data() + i * f, uv.data() + i * 2 * f + f, (size_t) f * sizeof(float));
        }
        tensor gg = act_forward(g, act::gelu);
        tensor prod({n, f});
        for (size_t i = 0; i < prod.v.size(); ++i) prod.v[i] = u.v[i] * gg.v[i];
        tensor o = ff_out.forward(prod, train);
        if (train) {
            ff_a_ = std::move(u);
            ff_b_ = std::move(g);
        }
        add_(h, o);
    }
    return h;
}

tensor transformer_block::backward(const tensor & dy, tensor * dctx) {
    tensor dh = dy;
    {
        tensor dprod = ff_out.backward(dh);
        const int64_t n = dprod.shape[0];
        const int64_t f = dprod.shape[1];
        tensor gg = act_forward(ff_b_, act::gelu);
        tensor du({n, f}), dgg({n, f});
        for (size_t i = 0; i < dprod.v.size(); ++i) {
            du.v[i] = dprod.v[i] * gg.v[i];
            dgg.v[i] = dprod.v[i] * ff_a_.v[i];
        }
        tensor dg = act_backward(ff_b_, dgg, act::gelu);
        tensor duv({n, 2 * f});
        for (int64_t i = 0; i < n; ++i) {
            std::memcpy(duv.data() + i * 2 * f, du.data() + i * f, (size_t) f * sizeof(float));
            std::memcpy(duv.data() + i * 2 * f + f, dg.data() + i * f, (size_t) f * sizeof(float));
        }
        tensor dc = ff_in.backward(duv);
        tensor dl = ln3.backward(dc);
        add_(dh, dl);
    }
    {
        tensor da = attn2.backward(dh, dctx);
        tensor dl = ln2.backward(da);
        add_(dh, dl);
    }
    {
        tensor da = attn1.backward(dh, nullptr);
        tensor dl = ln1.backward(da);
        add_(dh, dl);
    }
    return dh;
}

// ---------------------------------------------------------------------------
// spatial transformer

static tensor chw_to_seq(const tensor & x) {
    const int64_t C = x.shape[0], HW = x.shape[1] * x.shape[2];
    tensor s({HW, C});
    for (int64_t c = 0; c < C; ++c) {
        const float * src = x.data() + c * HW;
        for (int64_t i = 0; i < HW; ++i) s.v[(size_t) (i * C + c)] = src[i];
    }
    return s;
}

static tensor seq_to_chw(const tensor & s, int64_t h, int64_t w) {
    const int64_t C = s.shape[1];
    tensor x({C, h, w});
    for (int64_t c = 0; c < C; ++c) {
        float * dst = x.data() + c * h * w;
        for (int64_t i = 0; i < h * w; ++i) dst[i] = s.v[(size_t) (i * C + c)];
    }
    return x;
}

void spatial_transformer::init(const std::string & name, int64_t channels, int64_t ctx_dim, int heads, int groups) {
    norm.init(name + ".norm", channels, groups);
    proj_in.init(name + ".proj_in", channels, channels, 1, 1, 0);
    proj_out.init(name + ".proj_out", channels, channels, 1, 1, 0);
    block.init(name + ".blocks.0", channels, ctx_dim, heads);
}

void spatial_transformer::collect(nn::param_list & out) {
    norm.collect(out);
    proj_in.collect(out);
    block.collect(out);
    proj_out.collect(out);
}

tensor spatial_transformer::forward(const tensor & x, const tensor & ctx, bool train,
                                    const std::vector<char> * ctx_keep, const capture_sink * capture) {
    h_ = x.shape[1];
    w_ = x.shape[2];
    tensor h = norm.forward(x, train);
    h = proj_in.forward(h, train);
    tensor seq = chw_to_seq(h);
    if (capture) {
        tensor probs;
        seq = block.forward(seq, ctx, train, ctx_keep, &probs);
        (*capture)({h_, w_, std::move(probs)});
    } else {
        seq = block.forward(seq, ctx, train, ctx_keep, nullptr);
    }
    tensor out = proj_out.forward(seq_to_chw(seq, h_, w_), train);
    add_(out, x);
    return out;
}

tensor spatial_transformer::backward(const tensor & dy, tensor * dctx) {
    tensor dh = proj_out.backward(dy);
    tensor dseq = chw_to_seq(dh);
    dseq = block.backward(dseq, dctx);
    tensor dx = proj_in.backward(seq_to_chw(dseq, h_, w_));
    dx = norm.backward(dx);
    add_(dx, dy);
    return dx;
}

// ---------------------------------------------------------------------------
// unet

void unet::init(const unet_config & c) {
    cfg = c;
    const int L = (int) c.ch_mult.size();
    const int64_t tdim = c.time_dim();
    time_fc1.init("unet.time_embed.fc1", c.base_ch, tdim);
    time_fc2.init("unet.time_embed.fc2", tdim, tdim);
    conv_in.init("unet.conv_in", c.in_channels, c.base_ch, 3, 1, 1);

    down_res.clear();
    down_attn.clear();
    down_attn_idx.clear();
    downsample.clear();
    up_res.clear();
    up_attn.clear();
    up_attn_idx.clear();
    upsample_conv.clear();

    std::vector<int64_t> sstack;
    int64_t cur = c.base_ch;
    sstack.push_back(cur);
    for (int l = 0; l < L; ++l) {
        const int64_t out_c = c.base_ch * c.ch_mult[(size_t) l];
        for (int b = 0; b < c.num_res_blocks; ++b) {
            down_res.emplace_back();
            down_res.back().init(strf("unet.down.%d.res.%d", l, b), cur, out_c, tdim, c.groups);
            cur = out_c;
            if (cfg.has_attn(l)) {
                down_attn_idx.push_back((int) down_attn.size());
                down_attn.emplace_back();
                down_attn.back().init(strf("unet.down.%d.attn.%d", l, b), cur, c.context_dim, c.n_heads, c.groups);
            } else {
                down_attn_idx.push_back(-1);
            }
            sstack.push_back(cur);
        }
        if (l < L - 1) {
            downsample.emplace_back();
            downsample.back().init(strf("unet.down.%d.downsample", l), cur, cur, 3, 2, 1);
            sstack.push_back(cur);
        }
    }

    mid_res1.init("unet.mid.res.0", cur, cur, tdim, c.groups);
    mid_attn.init("unet.mid.attn.0", cur, c.context_dim, c.n_heads, c.groups);
    mid_res2.init("unet.mid.res.1", cur, cur, tdim, c.groups);

    for (int l = L - 1; l >= 0; --l) {
        const int64_t out_c = c.base_ch * c.ch_mult[(size_t) l];
        for (int b = 0; b <= c.num_res_blocks; ++b) {
            const int64_t skip_c = sstack.back();
            sstack.pop_back();
            up_res.emplace_back();
            up_res.back().init(strf("unet.up.%d.res.%d", l, b), cur + skip_c, out_c, tdim, c.groups);
            cur = out_c;
            if (cfg.has_attn(l)) {
                up_attn_idx.push_back((int) up_attn.size());
                up_attn.emplace_back();
                up_attn.back().init(strf("unet.up.%d.attn.%d", l, b), cur, c.context_dim, c.n_heads, c.groups);
            } else {
                up_attn_idx.push_back(-1);
            }
        }
        if (l > 0) {
            upsample_conv.emplace_back();
            upsample_conv.back().init(strf("unet.up.%d.upsample", l), cur, cur, 3, 1, 1);
        }
    }

    norm_out.init("unet.norm_out", cur, c.groups);
    conv_out.init("unet.conv_out", cur, c.out_channels, 3, 1, 1);
}

void unet::collect(nn::param_list & out) {
    time_fc1.collect(out);
    time_fc2.collect(out);
    conv_in.collect(out);
    for (auto & r : down_res) r.collect(out);
    for (auto & a : down_attn) a.collect(out);
    for (auto & d : downsample) d.collect(out);
    mid_res1.collect(out);
    mid_attn.collect(out);
    mid_res2.collect(out);
    for (auto & r : up_res) r.collect(out);
    for (auto & a : up_attn) a.collect(out);
    for (auto & u : upsample_conv) u.collect(out);
    norm_out.collect(out);
    conv_out.collect(out);
}

tensor unet::forward(const tensor & z, int64_t t, const tensor & ctx, bool train,
                     const std::vector<char> * ctx_keep, const capture_sink * capture) {
    if (ctx.ndim() != 2 || ctx.shape[1] != cfg.context_dim) {
        throw input_error(strf("unet: context shape %s does not match context_dim %lld",
                               ctx.shape_str().c_str(), (long long) cfg.context_dim));
    }
    const int L = (int) cfg.ch_mult.size();

    tensor traw = nn::timestep_embedding(t, cfg.base_ch);
    traw.shape = {1, cfg.base_ch};
    tensor t1 = time_fc1.forward(traw, train);
    tensor t2 = act_forward(t1, act::silu);
    tensor temb = time_fc2.forward(t2, train);
    if (train) {
        t_act_in_ = std::move(t1);
        temb_ = temb;
    }

    tensor h = conv_in.forward(z, train);
    skips_.clear();
    up_in_split_.clear();
    skips_.push_back(h);

    int res_i = 0, ds_i = 0;
    for (int l = 0; l < L; ++l) {
        for (int b = 0; b < cfg.num_res_blocks; ++b, ++res_i) {
            h = down_res[(size_t) res_i].forward(h, temb, train);
            if (down_attn_idx[(size_t) res_i] >= 0) {
                h = down_attn[(size_t) down_attn_idx[(size_t) res_i]].forward(h, ctx, train, ctx_keep, capture);
            }
            skips_.push_back(h);
        }
        if (l < L - 1) {
            h = downsample[(size_t) ds_i++].forward(h, train);
            skips_.push_back(h);
        }
    }

    h = mid_res1.forward(h, temb, train);
    h = mid_attn.forward(h, ctx, train, ctx_keep, capture);
    h = mid_res2.forward(h, temb, train);

    int up_i = 0, us_i = 0;
    for (int l = L - 1; l >= 0; --l) {
        for (int b = 0; b <= cfg.num_res_blocks; ++b, ++up_i) {
            tensor skip = std::move(skips_.back());
            skips_.pop_back();
            up_in_split_.push_back(h.shape[0]);
            tensor cat({h.shape[0] + skip.shape[0], h.shape[1], h.shape[2]});
            std::memcpy(cat.data(), h.data(), h.v.size() * sizeof(float));
            std::memcpy(cat.data() + h.v.size(), skip.data(), skip.v.size() * sizeof(float));
            h = up_res[(size_t) up_i].forward(cat, temb, train);
            if (up_attn_idx[(size_t) up_i] >= 0) {
                h = up_attn[(size_t) up_attn_idx[(size_t) up_i]].forward(h, ctx, train, ctx_keep, capture);
            }
        }
        if (l > 0) {
            h = upsample_nearest2x(h);
            h = upsample_conv[(size_t) us_i++].forward(h, train);
        }
    }

    tensor n = norm_out.forward(h, train);
    tensor a = act_forward(n, act::silu);
    if (train) nout_in_ = std::move(n);
    tensor out = conv_out.forward(a, train);
    if (train) ctx_shape_ = ctx.shape;
    return out;
}

tensor unet::backward(const tensor & dy) {
    const int L = (int) cfg.ch_mult.size();
    tensor dctx(ctx_shape_);
    tensor dtemb(temb_.shape);

    tensor d = conv_out.backward(dy);
    d = act_backward(nout_in_, d, act::silu);
    d = norm_out.backward(d);

    // gradients flowing into each skip slot, filled by the up path; the k-th
    // pop in forward took slot (top - k)
    std::vector<tensor> dskip((size_t) (1 + down_res.size() + downsample.size()));
    const int top = (int) dskip.size() - 1;

    int up_i = (int) up_res.size() - 1;
    int us_i = (int) upsample_conv.size() - 1;
    int split_i = (int) up_in_split_.size() - 1;

    for (int l = 0; l < L; ++l) { // reverse of forward's l = L-1..0
        if (l > 0) {
            d = upsample_conv[(size_t) us_i--].backward(d);
            d = upsample_nearest2x_backward(d);
        }
        for (int b = cfg.num_res_blocks; b >= 0; --b, --up_i, --split_i) {
            if (up_attn_idx[(size_t) up_i] >= 0) {
                d = up_attn[(size_t) up_attn_idx[(size_t) up_i]].backward(d, &dctx);
            }
            tensor dcat = up_res[(size_t) up_i].backward(d, dtemb);
            const int64_t h_ch = up_in_split_[(size_t) split_i];
            const int64_t skip_ch = dcat.shape[0] - h_ch;
            tensor dh({h_ch, dcat.shape[1], dcat.shape[2]});
            tensor ds({skip_ch, dcat.shape[1], dcat.shape[2]});
            std::memcpy(dh.data(), dcat.data(), dh.v.size() * sizeof(float));
            std::memcpy(ds.data(), dcat.data() + dh.v.size(), ds.v.size() * sizeof(float));
            dskip[(size_t) (top - up_i)] = std::move(ds);
            d = std::move(dh);
        }
    }

    d = mid_res2.backward(d, dtemb);
    d = mid_attn.backward(d, &dctx);
    d = mid_res1.backward(d, dtemb);

    int res_i = (int) down_res.size() - 1;
    int ds_i = (int) downsample.size() - 1;
    int slot = (int) dskip.size() - 1;
    for (int l = L - 1; l >= 0; --l) {
        if (l < L - 1) {
            if (!dskip[(size_t) slot].v.empty()) add_(d, dskip[(size_t) slot]);
            --slot;
            d = downsample[(size_t) ds_i--].backward(d);
        }
        for (int b = cfg.num_res_blocks - 1; b >= 0; --b, --res_i) {
            if (!dskip[(size_t) slot].v.empty()) add_(d, dskip[(size_t) slot]);
            --slot;
            if (down_attn_idx[(size_t) res_i] >= 0) {
                d = down_attn[(size_t) down_attn_idx[(size_t) res_i]].backward(d, &dctx);
            }
            d = down_res[(size_t) res_i].backward(d, dtemb);
        }
    }
    if (!dskip[0].v.empty()) add_(d, dskip[0]);
    (void) conv_in.backward(d);

    tensor dt2 = time_fc2.backward(dtemb);
    tensor dt1 = act_backward(t_act_in_, dt2, act::silu);
    (void) time_fc1.backward(dt1);

    return dctx;
}

} // namespace ipc
