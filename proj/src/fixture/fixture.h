#pragma once

#include <string>
#include <vector>

#include "clip/clip.h"
#include "core/image.h"

namespace ipc {
struct sd_model;
}

namespace ipc::fixture {

// Synthetic checkpoints for tests and local runs. Deterministic under seed.
// `contrastive_steps > 0` trains the towers on procedural shape/color pairs
// so the embedding space carries real (if tiny) semantics; either way the
// text projection is rescaled so caption embedding norms average 27.

struct clip_opts {
    uint64_t seed = 20240801;
    int contrastive_steps = 0;
    int batch = 16;
    float lr = 3e-4f;
    std::string tag = "fixture-clip-v1";
};

void build_clip(clip_model & out, const clip_opts & opts);

struct sd_opts {
    uint64_t seed = 20240802;
    int vae_steps = 0;      // reconstruction training of the autoencoder
    int unet_steps = 0;     // denoising training with converted-prompt conditioning
    std::string tag = "fixture-sd-v1";
    // when unet_steps > 0 the conditioning comes from this clip checkpoint
    std::string clip_path;
};

void build_sd(sd_model & out, const sd_opts & opts);

// procedural imagery: a colored shape with jittered placement on a shaded
// background
enum class shape_kind { circle = 0, square = 1, triangle = 2, stripes = 3 };

const std::vector<std::string> & color_names();
const std::vector<std::string> & shape_names();
image_u8 render_shape(shape_kind s, int color_idx, int size, uint64_t seed);
std::string caption_for(shape_kind s, int color_idx, uint64_t seed); // varied template

std::vector<std::string> fixture_vocab();

} // namespace ipc::fixture
