#pragma once

#include <vector>

#include "nn/nn.h"

namespace ipc {

struct vae_config {
    int64_t base_ch = 16;
    std::vector<int> ch_mult = {1, 2, 2, 4}; // len-1 downsamples
    int num_res_blocks = 1;
    int64_t z_ch = 4;
    float scale_factor = 0.18215f;
    int groups = 8;

    int factor() const { return 1 << ((int) ch_mult.size() - 1); }
};

struct vae_res_block {
    nn::group_norm norm1, norm2;
    nn::conv2d conv1, conv2;
    nn::conv2d skip;
    bool has_skip = false;

    void init(const std::string & name, int64_t in_c, int64_t out_c, int groups);
    void collect(nn::param_list & out);
    tensor forward(const tensor & x, bool train);
    tensor backward(const tensor & dy);

  private:
    tensor n1_, n2_;
};

// single-head self attention over spatial positions (mid block)
struct vae_attn_block {
    nn::group_norm norm;
    nn::linear q, k, v, proj;

    void init(const std::string & name, int64_t channels, int groups);
    void collect(nn::param_list & out);
    tensor forward(const tensor & x, bool train);
    tensor backward(const tensor & dy);

  private:
    nn::mha_cache mc_;
    int64_t h_ = 0, w_ = 0;
};

// deterministic autoencoder interface: encode returns the posterior mean
// scaled into the diffusion latent space
struct vae {
    vae_config cfg;

    nn::conv2d enc_conv_in;
    std::vector<vae_res_block> enc_res;
    std::vector<nn::conv2d> enc_down;
    vae_res_block enc_mid1, enc_mid2;
    vae_attn_block enc_mid_attn;
    nn::group_norm enc_norm_out;
    nn::conv2d enc_conv_out; // -> 2*z_ch moments
    nn::conv2d quant_conv;

    nn::conv2d post_quant_conv;
    nn::conv2d dec_conv_in;
    vae_res_block dec_mid1, dec_mid2;
    vae_attn_block dec_mid_attn;
    std::vector<vae_res_block> dec_res;
    std::vector<nn::conv2d> dec_up;
    nn::group_norm dec_norm_out;
    nn::conv2d dec_conv_out; // -> 3

    void init(const vae_config & c);
    void collect(nn::param_list & out);

    tensor encode(const tensor & chw, bool train = false);  // [z,h/f,w/f], posterior mean * scale
    tensor decode(const tensor & z, bool train = false);    // [3,H,W] in [-1,1]
    tensor backward_decode(const tensor & dy);               // returns dz
    void backward_encode(const tensor & dz);

  private:
    tensor enc_n_, dec_n_;
};

} // namespace ipc
