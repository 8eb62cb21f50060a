#include "core/rng.h"

#include <cmath>

namespace ipc {

uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

float rng::normal() {
    if (has_spare) {
        has_spare = false;
        return spare;
    }
    // u1 in (0,1] so the log is finite
    float u1 = (float) ((g() >> 40) + 1) * (1.0f / 16777216.0f);
    float u2 = (float) (g() >> 40) * (1.0f / 16777216.0f);
    float r = std::sqrt(-2.0f * std::log(u1));
    float a = 6.28318530717958647692f * u2;
    spare = r * std::sin(a);
    has_spare = true;
    return r * std::cos(a);
}

} // namespace ipc
