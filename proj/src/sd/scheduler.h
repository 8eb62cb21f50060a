#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace ipc {

// forward diffusion marginals: z_t = sqrt(abar_t) z_0 + sqrt(1-abar_t) eps,
// abar[0] == 1 so t = 0 is the clean latent
struct noise_schedule {
    int64_t T = 1000;
    float beta_start = 0.00085f;
    float beta_end = 0.012f;
    std::string kind = "scaled_linear"; // or "linear"
    std::vector<float> alpha_bar;       // length T+1

    void build();
    float ab(int64_t t) const { return alpha_bar[(size_t) t]; }
};

struct sampler_config {
    int steps = 50;
    float guidance_scale = 7.5f;
    float eta = 0.0f;
    uint64_t seed = 0;
};

// descending timestep sequence for the deterministic sampler, leading spacing;
// the final update lands on abar[... -> 1] via prev index 0
std::vector<int64_t> ddim_timesteps(int64_t T, int steps);

} // namespace ipc
