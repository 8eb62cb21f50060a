#include "fixture/fixture.h"

#include <algorithm>
#include <cmath>

#include "core/errors.h"
#include "core/rng.h"
#include "nn/adamw.h"
#include "converter/converter.h"
#include "sd/diffusion.h"

namespace ipc::fixture {

const std::vector<std::string> & color_names() {
    static const std::vector<std::string> names = {"red", "green", "blue", "yellow", "purple", "orange", "white", "gray"};
    return names;
}

const std::vector<std::string> & shape_names() {
    static const std::vector<std::string> names = {"circle", "square", "triangle", "stripes"};
    return names;
}

static const uint8_t COLOR_RGB[8][3] = {
    {220, 40, 40}, {40, 190, 60}, {40, 80, 220}, {230, 220, 50},
    {160, 50, 200}, {240, 140, 30}, {245, 245, 245}, {128, 128, 128},
};

image_u8 render_shape(shape_kind s, int color_idx, int size, uint64_t seed) {
    rng r(splitmix64(seed ^ (uint64_t) (17 * color_idx + (int) s)));
    image_u8 img;
    img.w = img.h = size;
    img.px.resize((size_t) size * size * 3);

    const int bg = 20 + (int) r.randint(0, 60);
    const int bg2 = bg + (int) r.randint(0, 40);
    for (int y = 0; y < size; ++y) {
        for (int x = 0; x < size; ++x) {
            // vertical shade so backgrounds are not flat
            int v = bg + (bg2 - bg) * y / size;
            img.at(x, y, 0) = img.at(x, y, 1) = img.at(x, y, 2) = (uint8_t) v;
        }
    }

    const uint8_t * col = COLOR_RGB[color_idx];
    const float cx = (float) size * (0.35f + 0.3f * r.uniform());
    const float cy = (float) size * (0.35f + 0.3f * r.uniform());
    const float rad = (float) size * (0.18f + 0.12f * r.uniform());

    auto put = [&](int x, int y) {
        if (x < 0 || y < 0 || x >= size || y >= size) return;
        img.at(x, y, 0) = col[0];
        img.at(x, y, 1) = col[1];
        img.at(x, y, 2) = col[2];
    };

    switch (s) {
        case shape_kind::circle:
            for (int y = 0; y < size; ++y) {
                for (int x = 0; x < size; ++x) {
                    float dx = (float) x - cx, dy = (float) y - cy;
                    if (dx * dx + dy * dy <= rad * rad) put(x, y);
                }
            }
            break;
        case shape_kind::square:
            for (int y = (int) (cy - rad); y <= (int) (cy + rad); ++y) {
                for (int x = (int) (cx - rad); x <= (int) (cx + rad); ++x) put(x, y);
            }
            break;
        case shape_kind::triangle:
            for (int y = 0; y <= (int) (2 * rad); ++y) {
                int half = (int) ((float) y * rad / (2 * rad));
                for (int x = -half; x <= half; ++x) put((int) cx + x, (int) (cy - rad) + y);
            }
            break;
        case shape_kind::stripes: {
            int period = 2 + (int) r.randint(0, 3);
            for (int y = 0; y < size; ++y) {
                for (int x = 0; x < size; ++x) {
                    if ((x / period) % 2 == 0) put(x, y);
                }
            }
            break;
        }
    }
    return img;
}

std::string caption_for(shape_kind s, int color_idx, uint64_t seed) {
    rng r(splitmix64(seed ^ 0xabcdu));
    const char * tmpl[] = {
        "a photo of a %s %s",
        "a %s %s",
        "an image of a %s %s",
        "the %s %s on a dark background",
    };
    return strf(tmpl[r.randint(0, 4)], color_names()[(size_t) color_idx].c_str(), shape_names()[(size_t) s].c_str());
}

std::vector<std::string> fixture_vocab() {
    std::vector<std::string> v = {"<sos>", "<eos>", "<unk>"};
    const char * words[] = {
        "a", "an", "the", "of", "on", "in", "photo", "image", "picture", "background",
        "dark", "bright", "light", "small", "big", "large", "tiny",
        "red", "green", "blue", "yellow", "purple", "orange", "white", "gray", "black", "pink", "brown",
        "circle", "square", "triangle", "stripes", "dot", "ring", "cross", "line", "grid",
        "cat", "dog", "bird", "fish", "horse", "cow", "sheep", "llama", "pizza", "laptop",
        "wearing", "glasses", "hat", "young", "old", "boy", "girl", "man", "woman", "person",
        "beach", "forest", "city", "mountain", "castle", "house", "room", "field", "sky", "sea",
        "and", "with", "next", "to", "two", "three", "four", "five", "one",
        "style", "painting", "drawing", "colorful", "shiny", "wet", "dry", "soft",
    };
    for (const char * w : words) v.emplace_back(w);
    return v;
}

// ---------------------------------------------------------------------------

static void init_clip_weights(clip_model & m, rng & r) {
    nn::param_list ps;
    m.collect_params(ps);
    for (auto * p : ps) {
        const std::string & n = p->name;
        if (n.ends_with(".bias") || n.find("ln") != std::string::npos) {
            continue; // keep norm affine at identity, biases at zero
        }
        float stddev = 0.04f;
        if (n.find("pos_embedding") != std::string::npos) stddev = 0.02f;
        if (n.find("token_embedding") != std::string::npos) stddev = 0.04f;
        if (n.find("projection") != std::string::npos) stddev = 0.08f;
        r.fill_normal(p->w, 0.0f, stddev);
    }
}

// L2-normalize with backward: y = x/||x||, dy -> dx = (dy - y (y.dy)) / ||x||
static tensor normalize(const tensor & x) {
    tensor y = x;
    float n = norm2(x) + 1e-12f;
    scale_(y, 1.0f / n);
    return y;
}

static tensor normalize_backward(const tensor & x, const tensor & dy) {
    float n = norm2(x) + 1e-12f;
    tensor y = x;
    scale_(y, 1.0f / n);
    float d = dot(y, dy);
    tensor dx = dy;
    axpy_(dx, -d, y);
    scale_(dx, 1.0f / n);
    return dx;
}

struct pair_sample {
    shape_kind s;
    int color;
    uint64_t jitter;
};

// symmetric InfoNCE on procedural shape/color pairs; both towers and both
// projections train
static void contrastive_train(clip_model & m, const clip_opts & opts) {
    nn::param_list ps;
    m.collect_params(ps, /*include_prompts=*/false);
    for (auto * p : ps) p->trainable = true;
    m.text_projection.trainable = true;
    m.visual_projection.trainable = true;

    nn::adamw opt(ps);
    opt.weight_decay = 0.0f;
    rng r(splitmix64(opts.seed ^ 0x7247a117ull));
    const float logit_scale = 14.0f;

    for (int step = 0; step < opts.contrastive_steps; ++step) {
        std::vector<pair_sample> batch;
        for (int b = 0; b < opts.batch; ++b) {
            batch.push_back({(shape_kind) r.randint(0, 4), (int) r.randint(0, 8), r.g()});
        }
        // pass 1: embeddings
        std::vector<tensor> img_e, txt_e, img_n, txt_n;
        std::vector<std::vector<int32_t>> txt_ids;
        std::vector<int64_t> eos_pos;
        for (auto & s : batch) {
            image_u8 img = render_shape(s.s, s.color, m.cfg.image_size, s.jitter);
            tensor chw = to_chw(img, m.cfg.mean, m.cfg.stddev);
            visual_embedding ve = m.encode_image_train(chw); // throwaway forward, cache unused
            img_e.push_back(ve.projected);
            img_n.push_back(normalize(ve.projected));

            std::string cap = caption_for(s.s, s.color, s.jitter);
            auto words = m.tok.tokenize(cap);
            auto ids = m.pad_ids(words);
            txt_ids.push_back(ids);
            eos_pos.push_back(std::min<int64_t>((int64_t) words.size() + 1, N_CTX - 1));
            tensor toks = m.text.forward(ids, false);
            tensor pe({m.cfg.embed_dim});
            matvec(m.text_projection.w, toks.data() + eos_pos.back() * m.cfg.text_width, pe.data());
            txt_e.push_back(pe);
            txt_n.push_back(normalize(pe));
        }
        const int B = opts.batch;
        tensor logits({B, B});
        for (int i = 0; i < B; ++i) {
            for (int j = 0; j < B; ++j) logits.at2(i, j) = logit_scale * dot(img_n[(size_t) i], txt_n[(size_t) j]);
        }
        tensor pi = nn::softmax_rows(logits);
        tensor lt({B, B});
        for (int i = 0; i < B; ++i) {
            for (int j = 0; j < B; ++j) lt.at2(i, j) = logits.at2(j, i);
        }
        tensor pt = nn::softmax_rows(lt);

        // dL/dlogits for the symmetric cross entropy, targets on the diagonal
        tensor dlog({B, B});
        for (int i = 0; i < B; ++i) {
            for (int j = 0; j < B; ++j) {
                float gi = pi.at2(i, j) - (i == j ? 1.0f : 0.0f);
                float gt = pt.at2(j, i) - (i == j ? 1.0f : 0.0f);
                dlog.at2(i, j) = 0.5f * (gi + gt) / (float) B;
            }
        }

        // pass 2: per-item backward
        for (int i = 0; i < B; ++i) {
            tensor dn({m.cfg.embed_dim});
            for (int j = 0; j < B; ++j) axpy_(dn, logit_scale * dlog.at2(i, j), txt_n[(size_t) j]);
            tensor dproj = normalize_backward(img_e[(size_t) i], dn);
            image_u8 img = render_shape(batch[(size_t) i].s, batch[(size_t) i].color, m.cfg.image_size, batch[(size_t) i].jitter);
            tensor chw = to_chw(img, m.cfg.mean, m.cfg.stddev);
            (void) m.encode_image_train(chw);
            m.backward_image(dproj);
        }
        for (int j = 0; j < B; ++j) {
            tensor dn({m.cfg.embed_dim});
            for (int i = 0; i < B; ++i) axpy_(dn, logit_scale * dlog.at2(i, j), img_n[(size_t) i]);
            tensor dproj = normalize_backward(txt_e[(size_t) j], dn);
            tensor toks = m.text.forward(txt_ids[(size_t) j], true);
            // grads into the projection and the eos token row
            if (m.text_projection.g.v.empty()) m.text_projection.g = tensor(m.text_projection.w.shape);
            tensor dtoks(toks.shape);
            const int64_t e = eos_pos[(size_t) j];
            for (int64_t rr = 0; rr < m.cfg.embed_dim; ++rr) {
                for (int64_t c = 0; c < m.cfg.text_width; ++c) {
                    m.text_projection.g.at2(rr, c) += dproj.v[(size_t) rr] * toks.at2(e, c);
                    dtoks.at2(e, c) += dproj.v[(size_t) rr] * m.text_projection.w.at2(rr, c);
                }
            }
            m.text.backward(dtoks);
        }
        opt.step(nn::cosine_lr(opts.lr, step, opts.contrastive_steps));
        opt.zero_grad();
    }
    for (auto * p : ps) {
        p->trainable = false;
        p->zero_grad();
    }
}

static void calibrate_norms(clip_model & m, uint64_t seed) {
    rng r(splitmix64(seed ^ 0xca11b8));
    double acc = 0.0;
    const int n = 200;
    for (int i = 0; i < n; ++i) {
        auto cap = caption_for((shape_kind) r.randint(0, 4), (int) r.randint(0, 8), r.g());
        acc += norm2(m.encode_text(cap).projected_eos);
    }
    scale_(m.text_projection.w, (float) (27.0 * n / acc));

    acc = 0.0;
    const int ni = 40;
    for (int i = 0; i < ni; ++i) {
        auto img = render_shape((shape_kind) r.randint(0, 4), (int) r.randint(0, 8), m.cfg.image_size, r.g());
        acc += norm2(m.encode_image(img).projected);
    }
    scale_(m.visual_projection.w, (float) (27.0 * ni / acc));
}

void build_clip(clip_model & out, const clip_opts & opts) {
    clip_config cfg;
    cfg.model_tag = opts.tag;
    cfg.embed_dim = 24;
    cfg.text_width = 32;
    cfg.text_layers = 3;
    cfg.text_heads = 4;
    cfg.vision_width = 40;
    cfg.vision_layers = 3;
    cfg.vision_heads = 4;
    cfg.patch = 8;
    cfg.image_size = 32;

    auto vocab = fixture_vocab();
    cfg.vocab_size = (int64_t) vocab.size();
    out.init_architecture(cfg);
    out.tok.set_vocab(std::move(vocab));

    rng r(opts.seed);
    init_clip_weights(out, r);
    if (opts.contrastive_steps > 0) contrastive_train(out, opts);
    calibrate_norms(out, opts.seed);
}

// ---------------------------------------------------------------------------
// sd fixture

static void init_sd_weights(sd_model & m, rng & r) {
    nn::param_list ps;
    m.collect_params(ps);
    for (auto * p : ps) {
        const std::string & n = p->name;
        if (n.ends_with(".bias") || n.find("norm") != std::string::npos) continue;
        int64_t fan_in = p->w.shape.size() >= 2 ? p->w.numel() / p->w.shape[0] : p->w.numel();
        float stddev = 0.6f / std::sqrt((float) fan_in);
        // final projections start small so early outputs stay tame
        if (n == "unet.conv_out.weight" || n.find("proj_out") != std::string::npos) stddev *= 0.1f;
        r.fill_normal(p->w, 0.0f, stddev);
    }
}

static void train_vae(sd_model & m, const sd_opts & opts) {
    nn::param_list ps;
    m.v.collect(ps);
    for (auto * p : ps) p->trainable = true;
    nn::adamw opt(ps);
    opt.weight_decay = 0.0f;
    rng r(splitmix64(opts.seed ^ 0x7ae0ull));

    const float mean[3] = {0.5f, 0.5f, 0.5f};
    const float stddev[3] = {0.5f, 0.5f, 0.5f};
    const int batch = 2;
    for (int step = 0; step < opts.vae_steps; ++step) {
        for (int b = 0; b < batch; ++b) {
            auto img = render_shape((shape_kind) r.randint(0, 4), (int) r.randint(0, 8), m.cfg.image_size, r.g());
            tensor x = to_chw(img, mean, stddev);
            tensor z = m.v.encode(x, true);
            tensor xr = m.v.decode(z, true);
            tensor d(xr.shape);
            const float sc = 2.0f / (float) xr.numel();
            for (size_t i = 0; i < xr.v.size(); ++i) d.v[i] = sc * (xr.v[i] - x.v[i]);
            tensor dz = m.v.backward_decode(d);
            m.v.backward_encode(dz);
        }
        opt.step(nn::cosine_lr(2e-3f, step, opts.vae_steps));
        opt.zero_grad();
    }
    for (auto * p : ps) {
        p->trainable = false;
        p->zero_grad();
    }
}

static void train_unet(sd_model & m, const sd_opts & opts) {
    if (opts.clip_path.empty()) throw config_error("fixture: unet training needs a clip checkpoint path");
    clip_model clip;
    clip.load(opts.clip_path);
    auto pinv = thresholded_pseudo_inverse(clip.get_projection(proj_kind::text), 0.3f);
    converter_config ccfg;

    struct item {
        latent_state z0;
        tensor cond_conv;
        tensor cond_text;
    };
    std::vector<item> data;
    rng dr(splitmix64(opts.seed ^ 0xdadaull));
    for (int s = 0; s < 4; ++s) {
        for (int c = 0; c < 8; ++c) {
            for (int j = 0; j < 2; ++j) {
                uint64_t jitter = dr.g();
                auto img = render_shape((shape_kind) s, c, m.cfg.image_size, jitter);
                item it;
                it.z0 = m.encode_latent(img);
                auto ve = clip.encode_image(img);
                auto tok = convert_image_embedding(ve.projected, pinv, ccfg);
                it.cond_conv = assemble_pseudo_prompt(clip.sos_embedding(), tok).vectors;
                it.cond_text = clip.encode_text(caption_for((shape_kind) s, c, jitter)).tokens;
                data.push_back(std::move(it));
            }
        }
    }
    tensor uncond = clip.encode_text("").tokens;

    nn::param_list ps;
    m.u.collect(ps);
    for (auto * p : ps) p->trainable = true;
    nn::adamw opt(ps);
    opt.weight_decay = 0.0f;
    rng r(splitmix64(opts.seed ^ 0x00e7ull));
    const int batch = 4;
    for (int step = 0; step < opts.unet_steps; ++step) {
        for (int b = 0; b < batch; ++b) {
            const item & it = data[(size_t) r.randint(0, (int64_t) data.size())];
            float mode = r.uniform();
            const tensor & cond = mode < 0.7f ? it.cond_conv : (mode < 0.9f ? it.cond_text : uncond);
            tensor dctx;
            (void) m.training_loss_backward(it.z0, cond, r, dctx);
        }
        opt.step(nn::cosine_lr(1.5e-3f, step, opts.unet_steps));
        opt.zero_grad();
    }
    for (auto * p : ps) {
        p->trainable = false;
        p->zero_grad();
    }
}

void build_sd(sd_model & out, const sd_opts & opts) {
    sd_config cfg;
    cfg.model_tag = opts.tag;
    cfg.image_size = 32;
    cfg.unet.in_channels = 4;
    cfg.unet.out_channels = 4;
    cfg.unet.base_ch = 32;
    cfg.unet.ch_mult = {1, 2};
    cfg.unet.num_res_blocks = 1;
    cfg.unet.attn_levels = {0, 1};
    cfg.unet.n_heads = 4;
    cfg.unet.context_dim = 32;
    cfg.unet.groups = 8;
    cfg.vae.base_ch = 16;
    cfg.vae.ch_mult = {1, 2, 2, 4};
    cfg.vae.num_res_blocks = 1;
    cfg.vae.z_ch = 4;
    cfg.vae.scale_factor = 0.18215f;
    cfg.vae.groups = 8;

    out.init_architecture(cfg);
    rng r(opts.seed);
    init_sd_weights(out, r);
    if (opts.vae_steps > 0) train_vae(out, opts);
    if (opts.unet_steps > 0) train_unet(out, opts);
}

} // namespace ipc::fixture
