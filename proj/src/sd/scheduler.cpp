#include "sd/scheduler.h"

#include <cmath>

#include "core/errors.h"

namespace ipc {

void noise_schedule::build() {
    alpha_bar.assign((size_t) T + 1, 1.0f);
    double prod = 1.0;
    for (int64_t t = 1; t <= T; ++t) {
        double beta;
        const double frac = (double) (t - 1) / (double) (T - 1);
        if (kind == "scaled_linear") {
            double s = std::sqrt((double) beta_start) + frac * (std::sqrt((double) beta_end) - std::sqrt((double) beta_start));
            beta = s * s;
        } else if (kind == "linear") {
            beta = (double) beta_start + frac * ((double) beta_end - (double) beta_start);
        } else {
            throw config_error(strf("schedule: unknown kind '%s'", kind.c_str()));
        }
        prod *= 1.0 - beta;
        alpha_bar[(size_t) t] = (float) prod;
    }
}

std::vector<int64_t> ddim_timesteps(int64_t T, int steps) {
    if (steps < 1) throw input_error("sampler: steps must be >= 1");
    steps = (int) std::min<int64_t>(steps, T);
    const int64_t ratio = T / steps;
    std::vector<int64_t> ts((size_t) steps);
    for (int i = 0; i < steps; ++i) ts[(size_t) (steps - 1 - i)] = (int64_t) i * ratio + 1;
    return ts; // descending
}

} // namespace ipc
