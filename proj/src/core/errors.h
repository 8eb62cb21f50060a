#pragma once

#include <cstdarg>
#include <cstdio>
#include <stdexcept>
#include <string>

namespace ipc {

// printf-style formatting into std::string
inline std::string strf(const char * fmt, ...) {
    va_list args;
    va_start(args, fmt);
    va_list args2;
    va_copy(args2, args);
    int n = vsnprintf(nullptr, 0, fmt, args);
    va_end(args);
    std::string s(n > 0 ? n : 0, '\0');
    if (n > 0) {
        vsnprintf(s.data(), s.size() + 1, fmt, args2);
    }
    va_end(args2);
    return s;
}

struct error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// bad caller-supplied data (undecodable image, zero-norm vector, out-of-range t, ...)
struct input_error : error {
    using error::error;
};

// operation attempted before required state exists (checkpoint not loaded, ...)
struct state_error : error {
    using error::error;
};

// invalid configuration (unknown preset, delta/model tag mismatch, ...)
struct config_error : error {
    using error::error;
};

// persisted artifact violates its own contract (unknown parameter in a delta, ...)
struct integrity_error : error {
    using error::error;
};

// numerically degenerate operation (all singular values thresholded away, ...)
struct degenerate_error : error {
    using error::error;
};

} // namespace ipc
