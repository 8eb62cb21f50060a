#include "core/tensor.h"

#include <cmath>
#include <cstring>
#include <algorithm>

namespace ipc {

int64_t tensor::numel_of(const std::vector<int64_t> & s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

std::string tensor::shape_str() const {
    std::string s = "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        s += std::to_string(shape[i]);
        if (i + 1 < shape.size()) s += ",";
    }
    return s + "]";
}

void add_(tensor & y, const tensor & x) {
    for (size_t i = 0; i < y.v.size(); ++i) y.v[i] += x.v[i];
}

void axpy_(tensor & y, float a, const tensor & x) {
    for (size_t i = 0; i < y.v.size(); ++i) y.v[i] += a * x.v[i];
}

void scale_(tensor & y, float a) {
    for (float & f : y.v) f *= a;
}

float dot(const tensor & a, const tensor & b) {
    double s = 0.0;
    for (size_t i = 0; i < a.v.size(); ++i) s += (double) a.v[i] * b.v[i];
    return (float) s;
}

float norm2(const tensor & a) {
    double s = 0.0;
    for (float f : a.v) s += (double) f * f;
    return (float) std::sqrt(s);
}

float max_abs_diff(const tensor & a, const tensor & b) {
    float m = 0.0f;
    for (size_t i = 0; i < a.v.size(); ++i) m = std::max(m, std::fabs(a.v[i] - b.v[i]));
    return m;
}

bool all_finite(const tensor & a) {
    for (float f : a.v) {
        if (!std::isfinite(f)) return false;
    }
    return true;
}

bool bit_equal(const tensor & a, const tensor & b) {
    if (a.shape != b.shape) return false;
    return std::memcmp(a.v.data(), b.v.data(), a.v.size() * sizeof(float)) == 0;
}

// simple blocked i-k-j kernel; inner loop is a contiguous saxpy which the
// compiler vectorizes
void matmul(const float * A, const float * B, float * C, int64_t m, int64_t k, int64_t n, bool acc) {
    if (!acc) std::memset(C, 0, (size_t) (m * n) * sizeof(float));
#pragma omp parallel for schedule(static) if (m * k * n > 1 << 18)
    for (int64_t i = 0; i < m; ++i) {
        const float * a = A + i * k;
        float * c = C + i * n;
        for (int64_t p = 0; p < k; ++p) {
            const float av = a[p];
            if (av == 0.0f) continue;
            const float * b = B + p * n;
            for (int64_t j = 0; j < n; ++j) c[j] += av * b[j];
        }
    }
}

void matmul_nt(const float * A, const float * B, float * C, int64_t m, int64_t k, int64_t n, bool acc) {
#pragma omp parallel for schedule(static) if (m * k * n > 1 << 18)
    for (int64_t i = 0; i < m; ++i) {
        const float * a = A + i * k;
        float * c = C + i * n;
        for (int64_t j = 0; j < n; ++j) {
            const float * b = B + j * k;
            double s = 0.0;
            for (int64_t p = 0; p < k; ++p) s += (double) a[p] * b[p];
            c[j] = acc ? c[j] + (float) s : (float) s;
        }
    }
}

void matmul_tn(const float * A, const float * B, float * C, int64_t m, int64_t k, int64_t n, bool acc) {
    if (!acc) std::memset(C, 0, (size_t) (m * n) * sizeof(float));
    for (int64_t p = 0; p < k; ++p) {
        const float * a = A + p * m;
        const float * b = B + p * n;
        for (int64_t i = 0; i < m; ++i) {
            const float av = a[i];
            if (av == 0.0f) continue;
            float * c = C + i * n;
            for (int64_t j = 0; j < n; ++j) c[j] += av * b[j];
        }
    }
}

void matvec(const tensor & M, const float * x, float * out) {
    const int64_t rows = M.shape[0];
    const int64_t cols = M.shape[1];
    for (int64_t r = 0; r < rows; ++r) {
        const float * w = M.data() + r * cols;
        double s = 0.0;
        for (int64_t c = 0; c < cols; ++c) s += (double) w[c] * x[c];
        out[r] = (float) s;
    }
}

} // namespace ipc
