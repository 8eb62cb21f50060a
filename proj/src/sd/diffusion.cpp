#include "sd/diffusion.h"

#include <cmath>

#include "core/errors.h"
#include "core/ntar.h"

namespace ipc {

nlohmann::json sd_config::to_json() const {
    nlohmann::json j;
    j["model_tag"] = model_tag;
    j["image_size"] = image_size;
    j["unet"] = {{"in_channels", unet.in_channels}, {"out_channels", unet.out_channels},
                 {"base_ch", unet.base_ch}, {"ch_mult", unet.ch_mult},
                 {"num_res_blocks", unet.num_res_blocks}, {"attn_levels", unet.attn_levels},
                 {"n_heads", unet.n_heads}, {"context_dim", unet.context_dim}, {"groups", unet.groups}};
    j["vae"] = {{"base_ch", vae.base_ch}, {"ch_mult", vae.ch_mult}, {"num_res_blocks", vae.num_res_blocks},
                {"z_ch", vae.z_ch}, {"scale_factor", vae.scale_factor}, {"groups", vae.groups}};
    j["schedule"] = {{"T", T}, {"beta_start", beta_start}, {"beta_end", beta_end}, {"kind", schedule_kind}};
    return j;
}

sd_config sd_config::from_json(const nlohmann::json & j) {
    sd_config c;
    c.model_tag = j.at("model_tag").get<std::string>();
    c.image_size = j.at("image_size").get<int>();
    const auto & ju = j.at("unet");
    c.unet.in_channels = ju.at("in_channels").get<int64_t>();
    c.unet.out_channels = ju.at("out_channels").get<int64_t>();
    c.unet.base_ch = ju.at("base_ch").get<int64_t>();
    c.unet.ch_mult = ju.at("ch_mult").get<std::vector<int>>();
    c.unet.num_res_blocks = ju.at("num_res_blocks").get<int>();
    c.unet.attn_levels = ju.at("attn_levels").get<std::vector<int>>();
    c.unet.n_heads = ju.at("n_heads").get<int>();
    c.unet.context_dim = ju.at("context_dim").get<int64_t>();
    c.unet.groups = ju.at("groups").get<int>();
    const auto & jv = j.at("vae");
    c.vae.base_ch = jv.at("base_ch").get<int64_t>();
    c.vae.ch_mult = jv.at("ch_mult").get<std::vector<int>>();
    c.vae.num_res_blocks = jv.at("num_res_blocks").get<int>();
    c.vae.z_ch = jv.at("z_ch").get<int64_t>();
    c.vae.scale_factor = jv.at("scale_factor").get<float>();
    c.vae.groups = jv.at("groups").get<int>();
    const auto & js = j.at("schedule");
    c.T = js.at("T").get<int64_t>();
    c.beta_start = js.at("beta_start").get<float>();
    c.beta_end = js.at("beta_end").get<float>();
    c.schedule_kind = js.at("kind").get<std::string>();
    return c;
}

void sd_model::init_architecture(const sd_config & c) {
    cfg = c;
    u.init(c.unet);
    v.init(c.vae);
    sched.T = c.T;
    sched.beta_start = c.beta_start;
    sched.beta_end = c.beta_end;
    sched.kind = c.schedule_kind;
    sched.build();
    loaded_ = true;
}

void sd_model::collect_params(nn::param_list & out) {
    u.collect(out);
    v.collect(out);
}

void sd_model::save(const std::string & path) {
    require_loaded();
    ntar_writer w;
    w.meta = cfg.to_json();
    w.meta["format"] = "ipc-sd";
    nn::param_list ps;
    collect_params(ps);
    for (auto * p : ps) w.add(p->name, p->w);
    w.write(path);
}

void sd_model::load(const std::string & path) {
    ntar_reader r(path);
    if (r.meta.value("format", "") != "ipc-sd") {
        throw integrity_error(strf("sd: '%s' is not an sd checkpoint", path.c_str()));
    }
    init_architecture(sd_config::from_json(r.meta));
    nn::param_list ps;
    collect_params(ps);
    for (auto * p : ps) {
        tensor t = r.get(p->name);
        if (t.shape != p->w.shape) throw integrity_error(strf("sd: entry '%s' shape mismatch", p->name.c_str()));
        p->w = std::move(t);
    }
    loaded_ = true;
}

void sd_model::require_loaded() const {
    if (!loaded_) throw state_error("sd: checkpoint not loaded");
}

latent_state sd_model::encode_latent(const image_u8 & img) {
    require_loaded();
    if (img.w != cfg.image_size || img.h != cfg.image_size) {
        throw input_error(strf("sd: expected %dx%d input, got %dx%d", cfg.image_size, cfg.image_size, img.w, img.h));
    }
    const float mean[3] = {0.5f, 0.5f, 0.5f};
    const float stddev[3] = {0.5f, 0.5f, 0.5f};
    latent_state s;
    s.z = v.encode(to_chw(img, mean, stddev));
    s.timestep = 0;
    s.T = sched.T;
    return s;
}

image_u8 sd_model::decode_image(const tensor & z) {
    require_loaded();
    const float mean[3] = {0.5f, 0.5f, 0.5f};
    const float stddev[3] = {0.5f, 0.5f, 0.5f};
    return from_chw(v.decode(z), mean, stddev);
}

latent_state sd_model::add_noise(const latent_state & z0, int64_t t, const tensor & eps) const {
    require_loaded();
    if (t < 0 || t > sched.T) throw input_error(strf("add_noise: t=%lld outside [0,%lld]", (long long) t, (long long) sched.T));
    if (!eps.same_shape(z0.z)) throw input_error("add_noise: noise shape mismatch");
    latent_state s;
    s.T = sched.T;
    s.timestep = t;
    s.z = z0.z;
    const float ab = sched.ab(t);
    scale_(s.z, std::sqrt(ab));
    axpy_(s.z, std::sqrt(1.0f - ab), eps);
    return s;
}

tensor sd_model::unet_eps(const tensor & z, int64_t t, const tensor & cond, const sample_hooks * hooks, bool cond_branch) {
    const std::vector<char> * keep = hooks ? hooks->ctx_keep : nullptr;
    const capture_sink * cap = (hooks && cond_branch) ? hooks->capture : nullptr;
    return u.forward(z, t, cond, /*train=*/false, keep, cap);
}

tensor sd_model::sample_latent(const tensor & cond, const tensor & uncond, const sampler_config & sc,
                               const sample_hooks * hooks) {
    require_loaded();
    std::lock_guard<std::mutex> lock(mu_);
    if (!all_finite(cond) || !all_finite(uncond)) throw input_error("sample: non-finite conditioning");

    rng r(sc.seed);
    const int64_t ls = latent_size();
    tensor z({v.cfg.z_ch, ls, ls});
    r.fill_normal(z);

    const auto ts = ddim_timesteps(sched.T, sc.steps);
    for (size_t i = 0; i < ts.size(); ++i) {
        const int64_t t = ts[i];
        const int64_t tp = (i + 1 < ts.size()) ? ts[i + 1] : 0;

        tensor eps;
        if (sc.guidance_scale == 0.0f && !(hooks && hooks->capture)) {
            eps = unet_eps(z, t, uncond, hooks, false);
        } else {
            tensor eps_u = unet_eps(z, t, uncond, hooks, false);
            tensor eps_c = unet_eps(z, t, cond, hooks, true);
            // guided = uncond + s * (cond - uncond)
            eps = eps_u;
            axpy_(eps, sc.guidance_scale, eps_c);
            axpy_(eps, -sc.guidance_scale, eps_u);
        }

        const float ab_t = sched.ab(t);
        const float ab_p = sched.ab(tp);
        tensor x0 = z;
        axpy_(x0, -std::sqrt(1.0f - ab_t), eps);
        scale_(x0, 1.0f / std::sqrt(ab_t));

        float sigma = 0.0f;
        if (sc.eta > 0.0f && tp > 0) {
            sigma = sc.eta * std::sqrt((1.0f - ab_p) / (1.0f - ab_t)) * std::sqrt(1.0f - ab_t / ab_p);
        }
        const float dir_coeff = std::sqrt(std::max(0.0f, 1.0f - ab_p - sigma * sigma));
        tensor zn = x0;
        scale_(zn, std::sqrt(ab_p));
        axpy_(zn, dir_coeff, eps);
        if (sigma > 0.0f) {
            tensor noise(z.shape);
            r.fill_normal(noise);
            axpy_(zn, sigma, noise);
        }
        z = std::move(zn);
    }
    return z;
}

image_u8 sd_model::sample_image(const tensor & cond, const tensor & uncond, const sampler_config & sc,
                                const sample_hooks * hooks) {
    return decode_image(sample_latent(cond, uncond, sc, hooks));
}

float sd_model::training_loss(const latent_state & z0, const tensor & cond, rng & r) {
    require_loaded();
    const int64_t t = r.randint(1, sched.T + 1);
    tensor eps(z0.z.shape);
    r.fill_normal(eps);
    latent_state zt = add_noise(z0, t, eps);
    tensor pred = u.forward(zt.z, t, cond, /*train=*/false);
    double s = 0.0;
    for (size_t i = 0; i < eps.v.size(); ++i) {
        const double d = (double) eps.v[i] - pred.v[i];
        s += d * d;
    }
    return (float) (s / (double) eps.v.size());
}

float sd_model::training_loss_backward(const latent_state & z0, const tensor & cond, rng & r, tensor & dctx) {
    require_loaded();
    const int64_t t = r.randint(1, sched.T + 1);
    tensor eps(z0.z.shape);
    r.fill_normal(eps);
    latent_state zt = add_noise(z0, t, eps);
    tensor pred = u.forward(zt.z, t, cond, /*train=*/true);
    double s = 0.0;
    tensor dpred(pred.shape);
    const float scale = 2.0f / (float) eps.v.size();
    for (size_t i = 0; i < eps.v.size(); ++i) {
        const double d = (double) pred.v[i] - eps.v[i];
        s += d * d;
        dpred.v[i] = scale * (float) d;
    }
    dctx = u.backward(dpred);
    return (float) (s / (double) eps.v.size());
}

} // namespace ipc
