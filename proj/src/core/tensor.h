#pragma once

#include <cstdint>
#include <initializer_list>
#include <string>
#include <vector>

namespace ipc {

// Dense row-major float32 n-d array. All model math in this project runs on
// these; shape is dynamic, data is a flat vector.
struct tensor {
    std::vector<int64_t> shape;
    std::vector<float> v;

    tensor() = default;
    explicit tensor(std::vector<int64_t> s) : shape(std::move(s)) {
        v.assign((size_t) numel_of(shape), 0.0f);
    }
    tensor(std::vector<int64_t> s, float fill) : shape(std::move(s)) {
        v.assign((size_t) numel_of(shape), fill);
    }

    static int64_t numel_of(const std::vector<int64_t> & s);

    int64_t numel() const { return (int64_t) v.size(); }
    int     ndim()  const { return (int) shape.size(); }
    int64_t dim(int i) const { return shape[(size_t) (i < 0 ? (int) shape.size() + i : i)]; }

    bool same_shape(const tensor & o) const { return shape == o.shape; }

    float & at2(int64_t i, int64_t j)                         { return v[(size_t) (i * shape[1] + j)]; }
    float   at2(int64_t i, int64_t j) const                   { return v[(size_t) (i * shape[1] + j)]; }
    float & at3(int64_t i, int64_t j, int64_t k)              { return v[(size_t) ((i * shape[1] + j) * shape[2] + k)]; }
    float   at3(int64_t i, int64_t j, int64_t k) const        { return v[(size_t) ((i * shape[1] + j) * shape[2] + k)]; }
    float & at4(int64_t i, int64_t j, int64_t k, int64_t l)   { return v[(size_t) (((i * shape[1] + j) * shape[2] + k) * shape[3] + l)]; }
    float   at4(int64_t i, int64_t j, int64_t k, int64_t l) const { return v[(size_t) (((i * shape[1] + j) * shape[2] + k) * shape[3] + l)]; }

    float * data() { return v.data(); }
    const float * data() const { return v.data(); }

    void zero() { std::fill(v.begin(), v.end(), 0.0f); }

    std::string shape_str() const;
};

// y += x (same shape)
void add_(tensor & y, const tensor & x);
// y += a*x
void axpy_(tensor & y, float a, const tensor & x);
void scale_(tensor & y, float a);

float dot(const tensor & a, const tensor & b);
float norm2(const tensor & a);          // euclidean norm
float max_abs_diff(const tensor & a, const tensor & b);
bool  all_finite(const tensor & a);
bool  bit_equal(const tensor & a, const tensor & b);

// C[m,n] = A[m,k] * B[k,n]  (accumulate if acc)
void matmul(const float * A, const float * B, float * C, int64_t m, int64_t k, int64_t n, bool acc = false);
// C[m,n] = A[m,k] * B[n,k]^T
void matmul_nt(const float * A, const float * B, float * C, int64_t m, int64_t k, int64_t n, bool acc = false);
// C[m,n] = A[k,m]^T * B[k,n]
void matmul_tn(const float * A, const float * B, float * C, int64_t m, int64_t k, int64_t n, bool acc = false);

// out[r] = M[r,c] * x[c]  for a [rows, cols] matrix
void matvec(const tensor & M, const float * x, float * out);

} // namespace ipc
