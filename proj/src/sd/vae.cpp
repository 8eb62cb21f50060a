#include "sd/vae.h"

#include <cstring>

#include "core/errors.h"

namespace ipc {

using nn::act;
using nn::act_backward;
using nn::act_forward;
using nn::upsample_nearest2x;
using nn::upsample_nearest2x_backward;

void vae_res_block::init(const std::string & name, int64_t in_c, int64_t out_c, int groups) {
    norm1.init(name + ".norm1", in_c, groups);
    conv1.init(name + ".conv1", in_c, out_c, 3, 1, 1);
    norm2.init(name + ".norm2", out_c, groups);
    conv2.init(name + ".conv2", out_c, out_c, 3, 1, 1);
    has_skip = in_c != out_c;
    if (has_skip) skip.init(name + ".skip", in_c, out_c, 1, 1, 0);
}

void vae_res_block::collect(nn::param_list & out) {
    norm1.collect(out);
    conv1.collect(out);
    norm2.collect(out);
    conv2.collect(out);
    if (has_skip) skip.collect(out);
}

tensor vae_res_block::forward(const tensor & x, bool train) {
    tensor n1 = norm1.forward(x, train);
    tensor h = conv1.forward(act_forward(n1, act::silu), train);
    tensor n2 = norm2.forward(h, train);
    tensor h2 = conv2.forward(act_forward(n2, act::silu), train);
    if (train) {
        n1_ = std::move(n1);
        n2_ = std::move(n2);
    }
    if (has_skip) {
        tensor s = skip.forward(x, train);
        add_(h2, s);
    } else {
        add_(h2, x);
    }
    return h2;
}

tensor vae_res_block::backward(const tensor & dy) {
    tensor da2 = conv2.backward(dy);
    tensor dn2 = act_backward(n2_, da2, act::silu);
    tensor dh = norm2.backward(dn2);
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

void vae_attn_block::init(const std::string & name, int64_t channels, int groups) {
    norm.init(name + ".norm", channels, groups);
    q.init(name + ".q", channels, channels);
    k.init(name + ".k", channels, channels);
    v.init(name + ".v", channels, channels);
    proj.init(name + ".proj_out", channels, channels);
}

void vae_attn_block::collect(nn::param_list & out) {
    norm.collect(out);
    q.collect(out);
    k.collect(out);
    v.collect(out);
    proj.collect(out);
}

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

tensor vae_attn_block::forward(const tensor & x, bool train) {
    h_ = x.shape[1];
    w_ = x.shape[2];
    tensor n = norm.forward(x, train);
    tensor seq = chw_to_seq(n);
    tensor qq = q.forward(seq, train);
    tensor kk = k.forward(seq, train);
    tensor vv = v.forward(seq, train);
    tensor o = mha_forward(qq, kk, vv, 1, false, nullptr, train ? &mc_ : nullptr);
    tensor p = proj.forward(o, train);
    tensor out = seq_to_chw(p, h_, w_);
    add_(out, x);
    return out;
}

tensor vae_attn_block::backward(const tensor & dy) {
    tensor dp = chw_to_seq(dy);
    tensor do_ = proj.backward(dp);
    tensor dq, dk, dv;
    mha_backward(mc_, do_, dq, dk, dv);
    tensor dseq = q.backward(dq);
    add_(dseq, k.backward(dk));
    add_(dseq, v.backward(dv));
    tensor dn = seq_to_chw(dseq, h_, w_);
    tensor dx = norm.backward(dn);
    add_(dx, dy);
    return dx;
}

// ---------------------------------------------------------------------------

void vae::init(const vae_config & c) {
    cfg = c;
    const int L = (int) c.ch_mult.size();
    enc_res.clear();
    enc_down.clear();
    dec_res.clear();
    dec_up.clear();

    enc_conv_in.init("vae.encoder.conv_in", 3, c.base_ch, 3, 1, 1);
    int64_t cur = c.base_ch;
    for (int l = 0; l < L; ++l) {
        const int64_t out_c = c.base_ch * c.ch_mult[(size_t) l];
        for (int b = 0; b < c.num_res_blocks; ++b) {
            enc_res.emplace_back();
            enc_res.back().init(strf("vae.encoder.down.%d.res.%d", l, b), cur, out_c, c.groups);
            cur = out_c;
        }
        if (l < L - 1) {
            enc_down.emplace_back();
            enc_down.back().init(strf("vae.encoder.down.%d.downsample", l), cur, cur, 3, 2, 0);
            enc_down.back().set_pad(0, 1, 0, 1);
        }
    }
    enc_mid1.init("vae.encoder.mid.res.0", cur, cur, c.groups);
    enc_mid_attn.init("vae.encoder.mid.attn", cur, c.groups);
    enc_mid2.init("vae.encoder.mid.res.1", cur, cur, c.groups);
    enc_norm_out.init("vae.encoder.norm_out", cur, c.groups);
    enc_conv_out.init("vae.encoder.conv_out", cur, 2 * c.z_ch, 3, 1, 1);
    quant_conv.init("vae.quant_conv", 2 * c.z_ch, 2 * c.z_ch, 1, 1, 0);

    post_quant_conv.init("vae.post_quant_conv", c.z_ch, c.z_ch, 1, 1, 0);
    dec_conv_in.init("vae.decoder.conv_in", c.z_ch, cur, 3, 1, 1);
    dec_mid1.init("vae.decoder.mid.res.0", cur, cur, c.groups);
    dec_mid_attn.init("vae.decoder.mid.attn", cur, c.groups);
    dec_mid2.init("vae.decoder.mid.res.1", cur, cur, c.groups);
    for (int l = L - 1; l >= 0; --l) {
        const int64_t out_c = c.base_ch * c.ch_mult[(size_t) l];
        for (int b = 0; b <= c.num_res_blocks; ++b) {
            dec_res.emplace_back();
            dec_res.back().init(strf("vae.decoder.up.%d.res.%d", l, b), cur, out_c, c.groups);
            cur = out_c;
        }
        if (l > 0) {
            dec_up.emplace_back();
            dec_up.back().init(strf("vae.decoder.up.%d.upsample", l), cur, cur, 3, 1, 1);
        }
    }
    dec_norm_out.init("vae.decoder.norm_out", cur, c.groups);
    dec_conv_out.init("vae.decoder.conv_out", cur, 3, 3, 1, 1);
}

void vae::collect(nn::param_list & out) {
    enc_conv_in.collect(out);
    for (auto & r : enc_res) r.collect(out);
    for (auto & d : enc_down) d.collect(out);
    enc_mid1.collect(out);
    enc_mid_attn.collect(out);
    enc_mid2.collect(out);
    enc_norm_out.collect(out);
    enc_conv_out.collect(out);
    quant_conv.collect(out);
    post_quant_conv.collect(out);
    dec_conv_in.collect(out);
    dec_mid1.collect(out);
    dec_mid_attn.collect(out);
    dec_mid2.collect(out);
    for (auto & r : dec_res) r.collect(out);
    for (auto & u : dec_up) u.collect(out);
    dec_norm_out.collect(out);
    dec_conv_out.collect(out);
}

tensor vae::encode(const tensor & chw, bool train) {
    const int L = (int) cfg.ch_mult.size();
    tensor h = enc_conv_in.forward(chw, train);
    int ri = 0, di = 0;
    for (int l = 0; l < L; ++l) {
        for (int b = 0; b < cfg.num_res_blocks; ++b) h = enc_res[(size_t) ri++].forward(h, train);
        if (l < L - 1) h = enc_down[(size_t) di++].forward(h, train);
    }
    h = enc_mid1.forward(h, train);
    h = enc_mid_attn.forward(h, train);
    h = enc_mid2.forward(h, train);
    tensor n = enc_norm_out.forward(h, train);
    tensor a = act_forward(n, act::silu);
    if (train) enc_n_ = std::move(n);
    tensor moments = quant_conv.forward(enc_conv_out.forward(a, train), train);

    // posterior mean only: deterministic latents
    tensor z({cfg.z_ch, moments.shape[1], moments.shape[2]});
    std::memcpy(z.data(), moments.data(), z.v.size() * sizeof(float));
    scale_(z, cfg.scale_factor);
    return z;
}

tensor vae::decode(const tensor & z, bool train) {
    const int L = (int) cfg.ch_mult.size();
    tensor zz = z;
    scale_(zz, 1.0f / cfg.scale_factor);
    tensor h = post_quant_conv.forward(zz, train);
    h = dec_conv_in.forward(h, train);
    h = dec_mid1.forward(h, train);
    h = dec_mid_attn.forward(h, train);
    h = dec_mid2.forward(h, train);
    int ri = 0, ui = 0;
    for (int l = L - 1; l >= 0; --l) {
        for (int b = 0; b <= cfg.num_res_blocks; ++b) h = dec_res[(size_t) ri++].forward(h, train);
        if (l > 0) {
            h = upsample_nearest2x(h);
            h = dec_up[(size_t) ui++].forward(h, train);
        }
    }
    tensor n = dec_norm_out.forward(h, train);
    tensor a = act_forward(n, act::silu);
    if (train) dec_n_ = std::move(n);
    return dec_conv_out.forward(a, train);
}

tensor vae::backward_decode(const tensor & dy) {
    const int L = (int) cfg.ch_mult.size();
    tensor d = dec_conv_out.backward(dy);
    d = act_backward(dec_n_, d, act::silu);
    d = dec_norm_out.backward(d);
    int ri = (int) dec_res.size() - 1, ui = (int) dec_up.size() - 1;
    for (int l = 0; l < L; ++l) {
        if (l > 0) {
            d = dec_up[(size_t) ui--].backward(d);
            d = upsample_nearest2x_backward(d);
        }
        for (int b = 0; b <= cfg.num_res_blocks; ++b) d = dec_res[(size_t) ri--].backward(d);
    }
    d = dec_mid2.backward(d);
    d = dec_mid_attn.backward(d);
    d = dec_mid1.backward(d);
    d = dec_conv_in.backward(d);
    d = post_quant_conv.backward(d);
    scale_(d, 1.0f / cfg.scale_factor);
    return d;
}

void vae::backward_encode(const tensor & dz) {
    const int L = (int) cfg.ch_mult.size();
    tensor dm({2 * cfg.z_ch, dz.shape[1], dz.shape[2]});
    std::memcpy(dm.data(), dz.data(), dz.v.size() * sizeof(float));
    scale_(dm, cfg.scale_factor);
    tensor d = quant_conv.backward(dm);
    d = enc_conv_out.backward(d);
    d = act_backward(enc_n_, d, act::silu);
    d = enc_norm_out.backward(d);
    d = enc_mid2.backward(d);
    d = enc_mid_attn.backward(d);
    d = enc_mid1.backward(d);
    int ri = (int) enc_res.size() - 1, di = (int) enc_down.size() - 1;
    for (int l = L - 1; l >= 0; --l) {
        if (l < L - 1) d = enc_down[(size_t) di--].backward(d);
        for (int b = 0; b < cfg.num_res_blocks; ++b) d = enc_res[(size_t) ri--].backward(d);
    }
    (void) enc_conv_in.backward(d);
}

} // namespace ipc
