#pragma once

#include <mutex>
#include <string>

#include <json.hpp>

#include "core/image.h"
#include "core/rng.h"
#include "sd/scheduler.h"
#include "sd/unet.h"
#include "sd/vae.h"

namespace ipc {

struct sd_config {
    std::string model_tag;
    int image_size = 512;
    unet_config unet;
    vae_config vae;
    int64_t T = 1000;
    float beta_start = 0.00085f;
    float beta_end = 0.012f;
    std::string schedule_kind = "scaled_linear";

    nlohmann::json to_json() const;
    static sd_config from_json(const nlohmann::json & j);
};

struct latent_state {
    tensor z;            // [z_ch, h, w]
    int64_t timestep = 0;
    int64_t T = 0;
};

struct sample_hooks {
    const std::vector<char> * ctx_keep = nullptr; // 77-length keep mask on conditioning keys
    const capture_sink * capture = nullptr;       // cross-attention capture, conditional branch
};

// pretrained latent diffusion driver: VAE encode/decode, forward marginals,
// deterministic sampling, denoising loss
struct sd_model {
    sd_config cfg;
    unet u;
    vae v;
    noise_schedule sched;

    void init_architecture(const sd_config & c);
    void load(const std::string & path);
    void save(const std::string & path);
    bool loaded() const { return loaded_; }
    void collect_params(nn::param_list & out);

    int64_t latent_size() const { return cfg.image_size / v.cfg.factor(); }

    // image must already be image_size x image_size RGB
    latent_state encode_latent(const image_u8 & img);
    image_u8 decode_image(const tensor & z);

    latent_state add_noise(const latent_state & z0, int64_t t, const tensor & eps) const;

    // classifier-free guided deterministic sampling; returns the final latent
    tensor sample_latent(const tensor & cond, const tensor & uncond, const sampler_config & sc,
                         const sample_hooks * hooks = nullptr);
    image_u8 sample_image(const tensor & cond, const tensor & uncond, const sampler_config & sc,
                          const sample_hooks * hooks = nullptr);

    // Eq.-style denoising objective: t ~ U[1,T], eps ~ N(0,I),
    // loss = mean((eps - eps_theta(z_t, cond, t))^2)
    float training_loss(const latent_state & z0, const tensor & cond, rng & r);
    // same draw protocol, but builds the graph and returns d(loss)/d(cond)
    float training_loss_backward(const latent_state & z0, const tensor & cond, rng & r, tensor & dctx);

  private:
    void require_loaded() const;
    tensor unet_eps(const tensor & z, int64_t t, const tensor & cond, const sample_hooks * hooks, bool cond_branch);
    bool loaded_ = false;
    std::mutex mu_;
};

} // namespace ipc
