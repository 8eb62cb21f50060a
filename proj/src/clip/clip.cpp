#include "clip/clip.h"

#include <cmath>
#include <cstring>

#include "core/errors.h"
#include "core/ntar.h"

namespace ipc {

using nn::param_list;

// ---------------------------------------------------------------------------
// config

nlohmann::json clip_config::to_json() const {
    nlohmann::json j;
    j["model_tag"] = model_tag;
    j["embed_dim"] = embed_dim;
    j["text"] = {{"width", text_width}, {"layers", text_layers}, {"heads", text_heads}, {"vocab", vocab_size}, {"ctx", N_CTX}};
    j["vision"] = {{"width", vision_width}, {"layers", vision_layers}, {"heads", vision_heads}, {"patch", patch}, {"image_size", image_size}};
    j["preprocess"] = {{"mean", {mean[0], mean[1], mean[2]}}, {"std", {stddev[0], stddev[1], stddev[2]}}, {"size", image_size}};
    j["activation"] = activation;
    return j;
}

clip_config clip_config::from_json(const nlohmann::json & j) {
    clip_config c;
    c.model_tag = j.at("model_tag").get<std::string>();
    c.embed_dim = j.at("embed_dim").get<int64_t>();
    c.text_width = j.at("text").at("width").get<int64_t>();
    c.text_layers = j.at("text").at("layers").get<int>();
    c.text_heads = j.at("text").at("heads").get<int>();
    c.vocab_size = j.at("text").at("vocab").get<int64_t>();
    c.vision_width = j.at("vision").at("width").get<int64_t>();
    c.vision_layers = j.at("vision").at("layers").get<int>();
    c.vision_heads = j.at("vision").at("heads").get<int>();
    c.patch = j.at("vision").at("patch").get<int>();
    c.image_size = j.at("vision").at("image_size").get<int>();
    for (int i = 0; i < 3; ++i) {
        c.mean[i] = j.at("preprocess").at("mean")[(size_t) i].get<float>();
        c.stddev[i] = j.at("preprocess").at("std")[(size_t) i].get<float>();
    }
    c.activation = j.value("activation", "quick_gelu");
    return c;
}

// ---------------------------------------------------------------------------
// block

static tensor concat_rows(const tensor & a, const tensor & b) {
    tensor out({a.shape[0] + b.shape[0], a.shape[1]});
    std::memcpy(out.data(), a.data(), a.v.size() * sizeof(float));
    std::memcpy(out.data() + a.v.size(), b.data(), b.v.size() * sizeof(float));
    return out;
}

static tensor slice_rows(const tensor & a, int64_t from, int64_t count) {
    tensor out({count, a.shape[1]});
    std::memcpy(out.data(), a.data() + from * a.shape[1], (size_t) (count * a.shape[1]) * sizeof(float));
    return out;
}

void clip_block::init(const std::string & name, int64_t w, int heads, bool causal_, nn::act a) {
    ln1.init(name + ".ln1", w);
    ln2.init(name + ".ln2", w);
    in_proj.init(name + ".attn.in_proj", w, 3 * w);
    out_proj.init(name + ".attn.out_proj", w, w);
    fc1.init(name + ".mlp.fc1", w, 4 * w);
    fc2.init(name + ".mlp.fc2", 4 * w, w);
    n_heads = heads;
    causal = causal_;
    activation = a;
}

void clip_block::collect(param_list & out) {
    ln1.collect(out);
    in_proj.collect(out);
    out_proj.collect(out);
    ln2.collect(out);
    fc1.collect(out);
    fc2.collect(out);
}

tensor clip_block::forward(const tensor & x, bool train) {
    const int64_t n = x.shape[0];
    const int64_t w = x.shape[1];

    tensor x1 = ln1.forward(x, train);
    tensor qkv = in_proj.forward(x1, train);
    tensor q({n, w}), k({n, w}), v({n, w});
    for (int64_t i = 0; i < n; ++i) {
        const float * row = qkv.data() + i * 3 * w;
        std::memcpy(q.data() + i * w, row, (size_t) w * sizeof(float));
        std::memcpy(k.data() + i * w, row + w, (size_t) w * sizeof(float));
        std::memcpy(v.data() + i * w, row + 2 * w, (size_t) w * sizeof(float));
    }

    n_prompt_active_ = (prompt && prompt->w.numel() > 0) ? prompt->w.shape[0] : 0;
    tensor attn;
    if (n_prompt_active_ > 0) {
        if (in_proj.w.trainable) {
            throw state_error("clip_block: prompt injection alongside trainable attention weights is unsupported");
        }
        const int64_t np = n_prompt_active_;
        // prompt keys/values through the frozen in_proj rows
        tensor pk({np, w}), pv({np, w});
        const float * wk = in_proj.w.w.data() + w * w;     // rows [w, 2w)
        const float * wv = in_proj.w.w.data() + 2 * w * w; // rows [2w, 3w)
        matmul_nt(prompt->w.data(), wk, pk.data(), np, w, w);
        matmul_nt(prompt->w.data(), wv, pv.data(), np, w, w);
        if (joint_prompt_attention) {
            for (int64_t i = 0; i < np; ++i) {
                for (int64_t j = 0; j < w; ++j) {
                    pk.at2(i, j) += in_proj.b.w.v[(size_t) (w + j)];
                    pv.at2(i, j) += in_proj.b.w.v[(size_t) (2 * w + j)];
                }
            }
            tensor kc = concat_rows(k, pk);
            tensor vc = concat_rows(v, pv);
            attn = mha_forward(q, kc, vc, n_heads, causal, nullptr, train ? &mc_ : nullptr);
        } else {
            // separately-normalized branch, bias-free: zero prompts add exactly 0
            attn = mha_forward(q, k, v, n_heads, causal, nullptr, train ? &mc_ : nullptr);
            tensor pa = mha_forward(q, pk, pv, n_heads, false, nullptr, train ? &pmc_ : nullptr);
            add_(attn, pa);
        }
        if (train) prompt_in_ = prompt->w;
    } else {
        attn = mha_forward(q, k, v, n_heads, causal, nullptr, train ? &mc_ : nullptr);
    }

    tensor a = out_proj.forward(attn, train);
    tensor h = x;
    add_(h, a);

    tensor x2 = ln2.forward(h, train);
    tensor f1 = fc1.forward(x2, train);
    tensor g = act_forward(f1, activation);
    tensor m = fc2.forward(g, train);
    if (train) {
        fc1_out_ = std::move(f1);
        x1_ = std::move(x1);
    }
    add_(m, h);
    return m;
}

tensor clip_block::backward(const tensor & dy) {
    const int64_t n = dy.shape[0];
    const int64_t w = dy.shape[1];

    // mlp branch
    tensor dg = fc2.backward(dy);
    tensor df1 = act_backward(fc1_out_, dg, activation);
    tensor dx2 = fc1.backward(df1);
    tensor dh = ln2.backward(dx2);
    add_(dh, dy); // residual

    // attention branch
    tensor dattn = out_proj.backward(dh);
    tensor dq, dk, dv;
    tensor dprompt;
    if (n_prompt_active_ > 0) {
        const int64_t np = n_prompt_active_;
        if (joint_prompt_attention) {
            tensor dkc, dvc;
            mha_backward(mc_, dattn, dq, dkc, dvc);
            dk = slice_rows(dkc, 0, n);
            dv = slice_rows(dvc, 0, n);
            tensor dpk = slice_rows(dkc, n, np);
            tensor dpv = slice_rows(dvc, n, np);
            dprompt = tensor({np, w});
            matmul(dpk.data(), in_proj.w.w.data() + w * w, dprompt.data(), np, w, w);
            matmul(dpv.data(), in_proj.w.w.data() + 2 * w * w, dprompt.data(), np, w, w, /*acc=*/true);
        } else {
            mha_backward(mc_, dattn, dq, dk, dv);
            tensor dq2, dpk, dpv;
            mha_backward(pmc_, dattn, dq2, dpk, dpv);
            add_(dq, dq2);
            dprompt = tensor({np, w});
            matmul(dpk.data(), in_proj.w.w.data() + w * w, dprompt.data(), np, w, w);
            matmul(dpv.data(), in_proj.w.w.data() + 2 * w * w, dprompt.data(), np, w, w, /*acc=*/true);
        }
        if (prompt->trainable) prompt->acc_grad(dprompt);
    } else {
        mha_backward(mc_, dattn, dq, dk, dv);
    }

    tensor dqkv({n, 3 * w});
    for (int64_t i = 0; i < n; ++i) {
        float * row = dqkv.data() + i * 3 * w;
        std::memcpy(row, dq.data() + i * w, (size_t) w * sizeof(float));
        std::memcpy(row + w, dk.data() + i * w, (size_t) w * sizeof(float));
        std::memcpy(row + 2 * w, dv.data() + i * w, (size_t) w * sizeof(float));
    }
    tensor dx1 = in_proj.backward(dqkv);
    tensor dx = ln1.backward(dx1);
    add_(dx, dh);
    return dx;
}

// ---------------------------------------------------------------------------
// text tower

void text_encoder::init(const clip_config & cfg) {
    token_embedding.init("clip.text.token_embedding", cfg.vocab_size, cfg.text_width);
    pos_embedding.name = "clip.text.pos_embedding";
    pos_embedding.w = tensor({N_CTX, cfg.text_width});
    blocks.resize((size_t) cfg.text_layers);
    nn::act a = cfg.activation == "gelu" ? nn::act::gelu : nn::act::quick_gelu;
    for (int i = 0; i < cfg.text_layers; ++i) {
        blocks[(size_t) i].init(strf("clip.text.blocks.%d", i), cfg.text_width, cfg.text_heads, /*causal=*/true, a);
    }
    ln_final.init("clip.text.ln_final", cfg.text_width);
}

void text_encoder::collect(param_list & out) {
    token_embedding.collect(out);
    out.push_back(&pos_embedding);
    for (auto & b : blocks) b.collect(out);
    ln_final.collect(out);
}

tensor text_encoder::forward(const std::vector<int32_t> & ids, bool train) {
    tensor x = token_embedding.forward(ids, train);
    add_(x, pos_embedding.w);
    for (auto & b : blocks) x = b.forward(x, train);
    return ln_final.forward(x, train);
}

void text_encoder::backward(const tensor & dy) {
    tensor d = ln_final.backward(dy);
    for (auto it = blocks.rbegin(); it != blocks.rend(); ++it) d = it->backward(d);
    if (pos_embedding.trainable) pos_embedding.acc_grad(d);
    token_embedding.backward(d);
}

// ---------------------------------------------------------------------------
// vision tower

void vision_encoder::init(const clip_config & cfg) {
    patch_embed.init("clip.visual.patch_embed", 3, cfg.vision_width, cfg.patch, cfg.patch, 0, /*bias=*/false);
    class_embedding.name = "clip.visual.class_embedding";
    class_embedding.w = tensor({cfg.vision_width});
    pos_embedding.name = "clip.visual.pos_embedding";
    pos_embedding.w = tensor({1 + cfg.n_patches(), cfg.vision_width});
    ln_pre.init("clip.visual.ln_pre", cfg.vision_width);
    ln_post.init("clip.visual.ln_post", cfg.vision_width);
    blocks.resize((size_t) cfg.vision_layers);
    nn::act a = cfg.activation == "gelu" ? nn::act::gelu : nn::act::quick_gelu;
    for (int i = 0; i < cfg.vision_layers; ++i) {
        blocks[(size_t) i].init(strf("clip.visual.blocks.%d", i), cfg.vision_width, cfg.vision_heads, /*causal=*/false, a);
    }
    grid_ = cfg.image_size / cfg.patch;
    deep_prompts.clear();
}

void vision_encoder::collect(param_list & out, bool include_prompts) {
    patch_embed.collect(out);
    out.push_back(&class_embedding);
    out.push_back(&pos_embedding);
    ln_pre.collect(out);
    for (auto & b : blocks) b.collect(out);
    ln_post.collect(out);
    if (include_prompts) {
        for (auto & p : deep_prompts) out.push_back(p.get());
    }
}

void vision_encoder::inject_deep_prompts(int n_tokens, bool joint_attention) {
    if (n_tokens < 0) throw input_error("inject_deep_prompts: n_tokens must be >= 0");
    const int64_t capacity = pos_embedding.w.shape[0];
    if (n_tokens > capacity) {
        throw input_error(strf("inject_deep_prompts: %d tokens exceed the encoder positional capacity %lld",
                               n_tokens, (long long) capacity));
    }
    deep_prompts.clear();
    for (size_t i = 0; i < blocks.size(); ++i) {
        blocks[i].prompt = nullptr;
        blocks[i].joint_prompt_attention = joint_attention;
    }
    if (n_tokens == 0) return;
    const int64_t w = class_embedding.w.shape[0];
    for (size_t i = 0; i < blocks.size(); ++i) {
        auto p = std::make_unique<nn::param>();
        p->name = strf("clip.visual.deep_prompt.%zu", i);
        p->w = tensor({(int64_t) n_tokens, w}); // zero-init: injection starts output-neutral
        blocks[i].prompt = p.get();
        deep_prompts.push_back(std::move(p));
    }
}

int vision_encoder::prompt_tokens() const {
    return deep_prompts.empty() ? 0 : (int) deep_prompts[0]->w.shape[0];
}

tensor vision_encoder::tokens_(const tensor & chw, bool train) {
    tensor fm = patch_embed.forward(chw, train); // [w, g, g]
    const int64_t w = fm.shape[0];
    const int64_t np = grid_ * grid_;
    tensor t({1 + np, w});
    std::memcpy(t.data(), class_embedding.w.data(), (size_t) w * sizeof(float));
    for (int64_t i = 0; i < np; ++i) {
        for (int64_t c = 0; c < w; ++c) t.at2(1 + i, c) = fm.v[(size_t) (c * np + i)];
    }
    add_(t, pos_embedding.w);
    return t;
}

tensor vision_encoder::forward_cls(const tensor & chw, bool train) {
    tensor t = tokens_(chw, train);
    t = ln_pre.forward(t, train);
    for (auto & b : blocks) t = b.forward(t, train);
    tensor cls = slice_rows(t, 0, 1);
    tensor pre = ln_post.forward(cls, train);
    pre.shape = {pre.shape[1]};
    return pre;
}

void vision_encoder::backward_from_cls(const tensor & d_cls) {
    tensor d({1, d_cls.shape[0]});
    d.v = d_cls.v;
    tensor d_cls_row = ln_post.backward(d);

    const int64_t n_tok = 1 + grid_ * grid_;
    const int64_t w = d_cls.shape[0];
    tensor dt({n_tok, w});
    std::memcpy(dt.data(), d_cls_row.data(), (size_t) w * sizeof(float));
    for (auto it = blocks.rbegin(); it != blocks.rend(); ++it) dt = it->backward(dt);
    dt = ln_pre.backward(dt);

    if (pos_embedding.trainable) pos_embedding.acc_grad(dt);
    if (class_embedding.trainable) class_embedding.acc_grad(slice_rows(dt, 0, 1));
    if (patch_embed.w.trainable) {
        const int64_t np = grid_ * grid_;
        tensor dfm({w, grid_, grid_});
        for (int64_t i = 0; i < np; ++i) {
            for (int64_t c = 0; c < w; ++c) dfm.v[(size_t) (c * np + i)] = dt.at2(1 + i, c);
        }
        (void) patch_embed.backward(dfm);
    }
}

// ---------------------------------------------------------------------------
// model facade

void clip_model::init_architecture(const clip_config & c) {
    cfg = c;
    text.init(c);
    vision.init(c);
    text_projection.name = "clip.text_projection";
    text_projection.w = tensor({c.embed_dim, c.text_width});
    visual_projection.name = "clip.visual_projection";
    visual_projection.w = tensor({c.embed_dim, c.vision_width});
    loaded_ = true;
    sos_cache_.reset();
}

void clip_model::collect_params(param_list & out, bool include_prompts) {
    text.collect(out);
    vision.collect(out, include_prompts);
    out.push_back(&text_projection);
    out.push_back(&visual_projection);
}

void clip_model::save(const std::string & path) {
    require_loaded();
    ntar_writer w;
    w.meta = cfg.to_json();
    w.meta["format"] = "ipc-clip";
    param_list ps;
    collect_params(ps, /*include_prompts=*/false);
    for (auto * p : ps) w.add(p->name, p->w);
    w.add_bytes("tokenizer.vocab", tok.serialize());
    w.write(path);
}

void clip_model::load(const std::string & path) {
    ntar_reader r(path);
    if (r.meta.value("format", "") != "ipc-clip") {
        throw integrity_error(strf("clip: '%s' is not a clip checkpoint", path.c_str()));
    }
    init_architecture(clip_config::from_json(r.meta));
    tok = tokenizer::deserialize(r.get_bytes("tokenizer.vocab"));
    if (tok.vocab_size() != cfg.vocab_size) {
        throw integrity_error("clip: vocab size mismatch between meta and tokenizer entry");
    }
    param_list ps;
    collect_params(ps, /*include_prompts=*/false);
    for (auto * p : ps) {
        tensor t = r.get(p->name);
        if (t.shape != p->w.shape) {
            throw integrity_error(strf("clip: entry '%s' shape mismatch", p->name.c_str()));
        }
        p->w = std::move(t);
    }
    loaded_ = true;
}

void clip_model::require_loaded() const {
    if (!loaded_) throw state_error("clip: checkpoint not loaded");
}

image_u8 clip_model::preprocess(const image_u8 & img) const {
    return resize_shortest_crop(img, cfg.image_size);
}

std::vector<int32_t> clip_model::pad_ids(const std::vector<int32_t> & word_ids) const {
    std::vector<int32_t> ids;
    ids.reserve((size_t) N_CTX);
    ids.push_back(tokenizer::SOS);
    for (int32_t w : word_ids) ids.push_back(w);
    while ((int64_t) ids.size() < N_CTX) ids.push_back(tokenizer::EOS);
    return ids;
}

text_encoding clip_model::encode_text(const std::string & raw) {
    require_loaded();
    std::lock_guard<std::mutex> lock(mu_);

    text_encoding enc;
    enc.raw_text = raw;
    std::vector<int32_t> word_ids = tok.tokenize(raw);
    if ((int64_t) word_ids.size() > N_CTX - 2) {
        fprintf(stderr, "clip: prompt of %zu tokens truncated to %lld\n", word_ids.size(), (long long) (N_CTX - 2));
        word_ids.resize((size_t) (N_CTX - 2));
        enc.truncated = true;
    }
    enc.eos_index = std::min<int64_t>((int64_t) word_ids.size() + 1, N_CTX - 1);
    enc.ids = pad_ids(word_ids);
    enc.tokens = text.forward(enc.ids, /*train=*/false);
    enc.projected_eos = tensor({cfg.embed_dim});
    matvec(text_projection.w, enc.tokens.data() + enc.eos_index * cfg.text_width, enc.projected_eos.data());
    return enc;
}

visual_embedding clip_model::encode_image(const image_u8 & img, const std::string & source_id) {
    require_loaded();
    std::lock_guard<std::mutex> lock(mu_);

    image_u8 pp = preprocess(img);
    tensor chw = to_chw(pp, cfg.mean, cfg.stddev);
    visual_embedding e;
    e.source_id = source_id;
    e.pre_projection = vision.forward_cls(chw, /*train=*/false);
    e.projected = tensor({cfg.embed_dim});
    matvec(visual_projection.w, e.pre_projection.data(), e.projected.data());
    return e;
}

visual_embedding clip_model::encode_image_train(const tensor & chw) {
    require_loaded();
    visual_embedding e;
    e.pre_projection = vision.forward_cls(chw, /*train=*/true);
    e.projected = tensor({cfg.embed_dim});
    matvec(visual_projection.w, e.pre_projection.data(), e.projected.data());
    last_pre_ = e.pre_projection;
    return e;
}

void clip_model::backward_image(const tensor & d_projected) {
    // d_pre = W_i^T d_proj
    tensor d_pre({cfg.vision_width});
    for (int64_t c = 0; c < cfg.vision_width; ++c) {
        double s = 0.0;
        for (int64_t r = 0; r < cfg.embed_dim; ++r) s += (double) visual_projection.w.at2(r, c) * d_projected.v[(size_t) r];
        d_pre.v[(size_t) c] = (float) s;
    }
    if (visual_projection.trainable) {
        if (visual_projection.g.v.empty()) visual_projection.g = tensor(visual_projection.w.shape);
        for (int64_t r = 0; r < cfg.embed_dim; ++r) {
            for (int64_t c = 0; c < cfg.vision_width; ++c) {
                visual_projection.g.at2(r, c) += d_projected.v[(size_t) r] * last_pre_.v[(size_t) c];
            }
        }
    }
    vision.backward_from_cls(d_pre);
}

tensor clip_model::encode_text_train(const std::vector<int32_t> & ids) {
    require_loaded();
    return text.forward(ids, /*train=*/true);
}

projection_matrix clip_model::get_projection(proj_kind kind) const {
    require_loaded();
    projection_matrix m;
    m.kind = kind;
    m.model_tag = cfg.model_tag;
    m.matrix = kind == proj_kind::text ? text_projection.w : visual_projection.w;
    return m;
}

const tensor & clip_model::sos_embedding() {
    require_loaded();
    if (!sos_cache_) {
        text_encoding empty = encode_text("");
        sos_cache_ = slice_rows(empty.tokens, 0, 1);
        sos_cache_->shape = {cfg.text_width};
    }
    return *sos_cache_;
}

} // namespace ipc
