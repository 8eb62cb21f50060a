#pragma once

#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "clip/tokenizer.h"
#include "core/image.h"
#include "core/rng.h"
#include "nn/nn.h"

namespace ipc {

// conditioning sequence length used by the diffusion cross-attention
inline constexpr int64_t N_CTX = 77;

struct clip_config {
    std::string model_tag;
    int64_t embed_dim = 0;    // shared contrastive space width (d_c)
    int64_t text_width = 0;   // token-output space width (d_t)
    int text_layers = 0;
    int text_heads = 0;
    int64_t vocab_size = 0;
    int64_t vision_width = 0; // class-token output width (d_img)
    int vision_layers = 0;
    int vision_heads = 0;
    int patch = 0;
    int image_size = 0;
    float mean[3] = {0.48145466f, 0.4578275f, 0.40821073f};
    float stddev[3] = {0.26862954f, 0.26130258f, 0.27577711f};
    std::string activation = "quick_gelu";

    int64_t n_patches() const { return (int64_t) (image_size / patch) * (image_size / patch); }

    nlohmann::json to_json() const;
    static clip_config from_json(const nlohmann::json & j);
};

// ---------------------------------------------------------------------------
// pre-LN transformer block shared by both towers.
//
// The vision tower can carry per-layer prompt tokens. By default they attach
// through a separately-normalized attention branch with bias-free key/value
// projections, so zero-valued prompts leave the output bit-identical while
// still receiving gradient through their value path. `joint_prompt_attention`
// switches to plain concatenation into one softmax instead.

struct clip_block {
    nn::layer_norm ln1, ln2;
    nn::linear in_proj;  // [3w, w]
    nn::linear out_proj; // [w, w]
    nn::linear fc1, fc2;
    int n_heads = 0;
    bool causal = false;
    nn::act activation = nn::act::quick_gelu;

    nn::param * prompt = nullptr; // [n_p, w], owned by the encoder
    bool joint_prompt_attention = false;

    void init(const std::string & name, int64_t w, int heads, bool causal_, nn::act a);
    void collect(nn::param_list & out);
    tensor forward(const tensor & x, bool train);
    tensor backward(const tensor & dy);

  private:
    tensor fc1_out_, x1_, prompt_in_;
    nn::mha_cache mc_, pmc_;
    int64_t n_prompt_active_ = 0;
};

// ---------------------------------------------------------------------------

struct text_encoder {
    nn::embedding token_embedding;
    nn::param pos_embedding; // [77, w]
    std::vector<clip_block> blocks;
    nn::layer_norm ln_final;

    void init(const clip_config & cfg);
    void collect(nn::param_list & out);
    tensor forward(const std::vector<int32_t> & ids, bool train); // [77, w]
    void backward(const tensor & dy);
};

struct vision_encoder {
    nn::conv2d patch_embed;   // stride = patch, no bias
    nn::param class_embedding; // [w]
    nn::param pos_embedding;   // [1 + n_patches, w]
    nn::layer_norm ln_pre, ln_post;
    std::vector<clip_block> blocks;
    std::vector<std::unique_ptr<nn::param>> deep_prompts; // one per layer, [n_p, w]

    void init(const clip_config & cfg);
    void collect(nn::param_list & out, bool include_prompts = true);

    // n_tokens == 0 removes injection; capacity is the positional table length
    void inject_deep_prompts(int n_tokens, bool joint_attention = false);
    int prompt_tokens() const;

    tensor forward_cls(const tensor & chw, bool train); // [w] pre-projection embedding
    void backward_from_cls(const tensor & d_cls);       // [w]

  private:
    tensor tokens_(const tensor & chw, bool train);
    int64_t grid_ = 0;
};

// ---------------------------------------------------------------------------
// adapter-facing value types

struct visual_embedding {
    tensor pre_projection; // [d_img]
    tensor projected;      // [d_c]
    std::string source_id;
};

struct text_encoding {
    tensor tokens;        // [77, d_t]
    int64_t eos_index = 0;
    tensor projected_eos; // [d_c]
    std::string raw_text;
    bool truncated = false;
    std::vector<int32_t> ids;
};

enum class proj_kind { text, visual };

struct projection_matrix {
    tensor matrix; // [d_c, d_t] or [d_c, d_img]
    proj_kind kind = proj_kind::text;
    std::string model_tag;
};

// ---------------------------------------------------------------------------
// the contrastive encoder pair behind the whole pipeline

struct clip_model {
    clip_config cfg;
    tokenizer tok;
    text_encoder text;
    vision_encoder vision;
    nn::param text_projection;   // [d_c, d_t]
    nn::param visual_projection; // [d_c, d_img]

    void init_architecture(const clip_config & c);
    void load(const std::string & path);
    void save(const std::string & path);
    bool loaded() const { return loaded_; }

    text_encoding encode_text(const std::string & raw);
    visual_embedding encode_image(const image_u8 & img, const std::string & source_id = "");
    projection_matrix get_projection(proj_kind kind) const;
    const tensor & sos_embedding();

    image_u8 preprocess(const image_u8 & img) const;
    void collect_params(nn::param_list & out, bool include_prompts = true);

    // training path (single orchestrator, no locking, caches retained)
    visual_embedding encode_image_train(const tensor & chw);
    void backward_image(const tensor & d_projected); // [d_c]
    tensor encode_text_train(const std::vector<int32_t> & ids); // [77, d_t]
    std::vector<int32_t> pad_ids(const std::vector<int32_t> & word_ids) const;

  private:
    void require_loaded() const;
    bool loaded_ = false;
    std::mutex mu_; // one device context: encodes execute serially
    std::optional<tensor> sos_cache_;
    tensor last_pre_; // cached pre-projection embedding of the train path
};

} // namespace ipc
