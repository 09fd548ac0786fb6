#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "headscope/errors.hpp"

namespace headscope {

// Row-major float32 matrix. All heavy arithmetic lives in the free functions
// below; every reduction runs in a fixed index order, so identical inputs
// give bit-identical outputs regardless of thread count.
struct Tensor {
    int rows = 0;
    int cols = 0;
    std::vector<float> data; // rows*cols, row-major

    Tensor() = default;
    Tensor(int r, int c);

    float& at(int i, int j) { return data[size_t(i) * cols + size_t(j)]; }
    float at(int i, int j) const { return data[size_t(i) * cols + size_t(j)]; }

    std::span<float> row(int i) { return {data.data() + size_t(i) * cols, size_t(cols)}; }
    std::span<const float> row(int i) const { return {data.data() + size_t(i) * cols, size_t(cols)}; }

    bool same_shape(const Tensor& o) const { return rows == o.rows && cols == o.cols; }
    size_t size() const { return data.size(); }

    void fill(float v);
    void zero_row(int i);
};

// c[i,j] = sum_t a[i,t]*b[t,j], t ascending per output element. Zero entries
// of a are skipped; adding their zero product would not change the running
// accumulator (inputs are finite), so the skip preserves bit-equality with
// the naive triple loop up to the sign of an all-zero result.
Tensor matmul(const Tensor& a, const Tensor& b);

// c[i,j] = sum_t a[i,t]*b[j,t] (a times b transposed), t ascending.
Tensor matmul_nt(const Tensor& a, const Tensor& b);

// Row-wise softmax with per-row max subtraction. Requires finite input.
Tensor softmax_rows(const Tensor& x);

// In-place softmax over a span (one row); max-subtracted.
void softmax_span(std::span<float> x);

// Per-row normalization with population variance:
// (x - mean)/sqrt(var + eps)*gain + bias.
Tensor layer_norm(const Tensor& x, std::span<const float> gain,
                  std::span<const float> bias, float eps);

Tensor gelu(const Tensor& x); // exact-erf form, evaluated in double
Tensor relu(const Tensor& x);

// Throw DataError naming `what` if any value is NaN or infinite.
void check_finite(std::span<const float> v, const std::string& what);
void check_finite(const Tensor& t, const std::string& what);

} // namespace headscope
