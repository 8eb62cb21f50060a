#pragma once

#include <string>
#include <vector>

#include "core/tensor.h"

namespace ipc::nn {

struct param {
    std::string name;
    tensor w;
    tensor g;              // empty until a gradient is accumulated
    bool trainable = false;

    void acc_grad(const tensor & dg) {
        if (g.v.empty()) g = tensor(w.shape);
        add_(g, dg);
    }
    void zero_grad() { g = tensor(); }
    bool has_grad() const { return !g.v.empty(); }
};

using param_list = std::vector<param *>;

// ---------------------------------------------------------------------------
// elementwise activations

enum class act { silu, gelu, quick_gelu };

tensor act_forward(const tensor & x, act a);
tensor act_backward(const tensor & x, const tensor & dy, act a);

// ---------------------------------------------------------------------------
// linear: y = x W^T + b, x [n, in], W [out, in]

struct linear {
    param w;
    param b;
    bool has_bias = true;
    tensor x_; // cached input

    void init(const std::string & name, int64_t in, int64_t out, bool bias = true);
    void collect(param_list & out);
    tensor forward(const tensor & x, bool train);
    tensor backward(const tensor & dy);
};

// ---------------------------------------------------------------------------
// layer norm over the last dimension, x [n, d]

struct layer_norm {
    param gamma;
    param beta;
    float eps = 1e-5f;
    tensor xhat_, rstd_;

    void init(const std::string & name, int64_t d);
    void collect(param_list & out);
    tensor forward(const tensor & x, bool train);
    tensor backward(const tensor & dy);
};

// ---------------------------------------------------------------------------
// group norm over [C,H,W] (single item), affine per channel

struct group_norm {
    param gamma;
    param beta;
    int groups = 32;
    float eps = 1e-6f;
    tensor xhat_, rstd_;

    void init(const std::string & name, int64_t channels, int g);
    void collect(param_list & out);
    tensor forward(const tensor & x, bool train);
    tensor backward(const tensor & dy);
};

// ---------------------------------------------------------------------------
// conv2d on [C,H,W] (single item), weight [out_c, in_c, kh, kw]

struct conv2d {
    param w;
    param b;
    bool has_bias = true;
    int stride = 1;
    int pad_l = 0, pad_r = 0, pad_t = 0, pad_b = 0;
    tensor col_;              // cached im2col matrix
    std::vector<int64_t> in_shape_;

    void init(const std::string & name, int64_t in_c, int64_t out_c, int k, int stride_ = 1, int pad = -1, bool bias = true);
    void set_pad(int l, int r, int t, int b) { pad_l = l; pad_r = r; pad_t = t; pad_b = b; }
    void collect(param_list & out);
    tensor forward(const tensor & x, bool train);
    tensor backward(const tensor & dy);
    int64_t out_h(int64_t h) const { return (h + pad_t + pad_b - w.w.shape[2]) / stride + 1; }
    int64_t out_w(int64_t wd) const { return (wd + pad_l + pad_r - w.w.shape[3]) / stride + 1; }
};

// ---------------------------------------------------------------------------
// multi-head attention core on pre-projected q/k/v
//
// q [nq, d], k/v [nk, d]; d divisible by n_heads. When `causal`, query i only
// attends keys j <= i. `key_keep`, when given, bans attention to keys with
// keep[j] == false by setting their logits to -inf before the softmax, so
// banned keys get exactly zero weight and rows stay normalized.

struct mha_cache {
    tensor q, k, v;
    tensor probs; // [heads, nq, nk]
    int n_heads = 0;
};

tensor mha_forward(const tensor & q, const tensor & k, const tensor & v, int n_heads,
                   bool causal, const std::vector<char> * key_keep,
                   mha_cache * cache, tensor * probs_out = nullptr);
void mha_backward(const mha_cache & c, const tensor & dy, tensor & dq, tensor & dk, tensor & dv);

// ---------------------------------------------------------------------------
// misc spatial ops

tensor upsample_nearest2x(const tensor & x);              // [C,H,W] -> [C,2H,2W]
tensor upsample_nearest2x_backward(const tensor & dy);

// sinusoidal timestep feature, [dim]: [cos(t*f_i), sin(t*f_i)]
tensor timestep_embedding(int64_t t, int64_t dim);

// ---------------------------------------------------------------------------
// embedding table [vocab, d]

struct embedding {
    param w;
    std::vector<int32_t> ids_;

    void init(const std::string & name, int64_t vocab, int64_t d);
    void collect(param_list & out);
    tensor forward(const std::vector<int32_t> & ids, bool train);
    void backward(const tensor & dy);
};

// softmax over the last dim of [n, d]
tensor softmax_rows(const tensor & x);

} // namespace ipc::nn
