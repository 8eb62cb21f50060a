#pragma once

#include <functional>
#include <vector>

#include "nn/nn.h"

namespace ipc {

struct unet_config {
    int64_t in_channels = 4;
    int64_t out_channels = 4;
    int64_t base_ch = 32;
    std::vector<int> ch_mult = {1, 2};
    int num_res_blocks = 1;
    std::vector<int> attn_levels = {0, 1};
    int n_heads = 4;
    int64_t context_dim = 32;
    int groups = 8;

    int64_t time_dim() const { return 4 * base_ch; }
    bool has_attn(int level) const {
        for (int l : attn_levels) {
            if (l == level) return true;
        }
        return false;
    }
};

// captured cross-attention probabilities of one layer evaluation:
// probs [heads, hw, n_ctx] at spatial h x w
struct attn_capture {
    int64_t h = 0, w = 0;
    tensor probs;
};
using capture_sink = std::function<void(const attn_capture &)>;

struct unet_res_block {
    nn::group_norm norm1, norm2;
    nn::conv2d conv1, conv2;
    nn::linear time_proj;
    nn::conv2d skip; // 1x1 when channels change
    bool has_skip = false;

    void init(const std::string & name, int64_t in_c, int64_t out_c, int64_t time_dim, int groups);
    void collect(nn::param_list & out);
    tensor forward(const tensor & x, const tensor & temb, bool train);
    // returns dx; accumulates dtemb
    tensor backward(const tensor & dy, tensor & dtemb);

  private:
    tensor n1_, hin2_, n2_, x_;
    int64_t hw_ = 0;
};

struct cross_attn {
    nn::linear to_q, to_k, to_v; // no bias
    nn::linear to_out;
    int n_heads = 0;
    bool is_cross = false;

    void init(const std::string & name, int64_t query_dim, int64_t kv_dim, int heads);
    void collect(nn::param_list & out);
    // ctx == nullptr: self attention over x
    tensor forward(const tensor & x, const tensor * ctx, bool train,
                   const std::vector<char> * ctx_keep, tensor * probs_out);
    // returns dx; when cross, accumulates dctx
    tensor backward(const tensor & dy, tensor * dctx);

  private:
    nn::mha_cache mc_;
};

struct transformer_block {
    nn::layer_norm ln1, ln2, ln3;
    cross_attn attn1, attn2;
    nn::linear ff_in;  // geglu: [8*inner? -> 2*ff_inner]
    nn::linear ff_out;

    void init(const std::string & name, int64_t dim, int64_t ctx_dim, int heads);
    void collect(nn::param_list & out);
    tensor forward(const tensor & x, const tensor & ctx, bool train,
                   const std::vector<char> * ctx_keep, tensor * probs_out);
    tensor backward(const tensor & dy, tensor * dctx);

  private:
    tensor ff_a_, ff_b_;
};

// groupnorm -> 1x1 in -> transformer over hw tokens -> 1x1 out -> residual
struct spatial_transformer {
    nn::group_norm norm;
    nn::conv2d proj_in, proj_out;
    transformer_block block;

    void init(const std::string & name, int64_t channels, int64_t ctx_dim, int heads, int groups);
    void collect(nn::param_list & out);
    tensor forward(const tensor & x, const tensor & ctx, bool train,
                   const std::vector<char> * ctx_keep, const capture_sink * capture);
    tensor backward(const tensor & dy, tensor * dctx);

  private:
    int64_t h_ = 0, w_ = 0;
};

// epsilon-prediction U-Net conditioned on timestep + a [77, ctx_dim] sequence
struct unet {
    unet_config cfg;
    nn::linear time_fc1, time_fc2;
    nn::conv2d conv_in;
    std::vector<unet_res_block> down_res;
    std::vector<spatial_transformer> down_attn; // aligned with down_res when level has attn
    std::vector<int> down_attn_idx;             // -1 when absent
    std::vector<nn::conv2d> downsample;
    unet_res_block mid_res1, mid_res2;
    spatial_transformer mid_attn;
    std::vector<unet_res_block> up_res;
    std::vector<spatial_transformer> up_attn;
    std::vector<int> up_attn_idx;
    std::vector<nn::conv2d> upsample_conv;
    nn::group_norm norm_out;
    nn::conv2d conv_out;

    void init(const unet_config & c);
    void collect(nn::param_list & out);

    tensor forward(const tensor & z, int64_t t, const tensor & ctx, bool train,
                   const std::vector<char> * ctx_keep = nullptr, const capture_sink * capture = nullptr);
    // returns d_ctx [77, ctx_dim]
    tensor backward(const tensor & dy);

  private:
    std::vector<tensor> skips_;
    tensor temb_, t_act_in_, nout_in_;
    std::vector<int64_t> ctx_shape_;
    std::vector<int64_t> up_in_split_; // current channel count per up block before concat
};

} // namespace ipc
