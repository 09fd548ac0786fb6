#include "headscope/tensor.hpp"

#include <algorithm>
#include <cmath>

namespace headscope {

Tensor::Tensor(int r, int c) : rows(r), cols(c) {
    if (r < 0 || c < 0) throw DimensionError("tensor extents must be non-negative");
    data.assign(size_t(r) * size_t(c), 0.0f);
}

void Tensor::fill(float v) { std::fill(data.begin(), data.end(), v); }

void Tensor::zero_row(int i) {
    std::fill(data.begin() + size_t(i) * cols, data.begin() + size_t(i + 1) * cols, 0.0f);
}

void check_finite(std::span<const float> v, const std::string& what) {
    for (float x : v)
        if (!std::isfinite(x)) throw DataError("non-finite value in " + what);
}

void check_finite(const Tensor& t, const std::string& what) {
    check_finite(std::span<const float>(t.data), what);
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.cols != b.rows)
        throw DimensionError("matmul: inner extents differ (" + std::to_string(a.cols) +
                             " vs " + std::to_string(b.rows) + ")");
    Tensor c(a.rows, b.cols);
    const int n = b.cols;
    for (int i = 0; i < a.rows; ++i) {
        const float* arow = a.data.data() + size_t(i) * a.cols;
        float* crow = c.data.data() + size_t(i) * n;
        for (int t = 0; t < a.cols; ++t) {
            const float av = arow[t];
            if (av == 0.0f) continue;
            const float* brow = b.data.data() + size_t(t) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
    check_finite(c, "matmul result");
    return c;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    if (a.cols != b.cols)
        throw DimensionError("matmul_nt: inner extents differ (" + std::to_string(a.cols) +
                             " vs " + std::to_string(b.cols) + ")");
    Tensor c(a.rows, b.rows);
    for (int i = 0; i < a.rows; ++i) {
        const float* arow = a.data.data() + size_t(i) * a.cols;
        for (int j = 0; j < b.rows; ++j) {
            const float* brow = b.data.data() + size_t(j) * b.cols;
            float acc = 0.0f;
            for (int t = 0; t < a.cols; ++t) acc += arow[t] * brow[t];
            c.at(i, j) = acc;
        }
    }
    check_finite(c, "matmul_nt result");
    return c;
}

void softmax_span(std::span<float> x) {
    if (x.empty()) return;
    float mx = x[0];
    for (float v : x) mx = std::max(mx, v);
    float sum = 0.0f;
    for (float& v : x) {
        v = std::exp(v - mx);
        sum += v;
    }
    for (float& v : x) v /= sum;
}

Tensor softmax_rows(const Tensor& x) {
    check_finite(x, "softmax input");
    Tensor y = x;
    for (int i = 0; i < y.rows; ++i) softmax_span(y.row(i));
    return y;
}

Tensor layer_norm(const Tensor& x, std::span<const float> gain,
                  std::span<const float> bias, float eps) {
    if (int(gain.size()) != x.cols || int(bias.size()) != x.cols)
        throw DimensionError("layer_norm: gain/bias width differs from input width");
    if (!(eps > 0.0f)) throw DataError("layer_norm: eps must be positive");
    Tensor y(x.rows, x.cols);
    for (int i = 0; i < x.rows; ++i) {
        auto in = x.row(i);
        float mean = 0.0f;
        for (float v : in) mean += v;
        mean /= float(x.cols);
        float var = 0.0f;
        for (float v : in) {
            const float d = v - mean;
            var += d * d;
        }
        var /= float(x.cols);
        const float inv = 1.0f / std::sqrt(var + eps);
        auto out = y.row(i);
        for (int j = 0; j < x.cols; ++j)
            out[j] = (in[j] - mean) * inv * gain[j] + bias[j];
    }
    check_finite(y, "layer_norm result");
    return y;
}

Tensor gelu(const Tensor& x) {
    Tensor y(x.rows, x.cols);
    for (size_t i = 0; i < x.data.size(); ++i) {
        const double v = double(x.data[i]);
        y.data[i] = float(0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0))));
    }
    check_finite(y, "gelu result");
    return y;
}

Tensor relu(const Tensor& x) {
    Tensor y(x.rows, x.cols);
    for (size_t i = 0; i < x.data.size(); ++i)
        y.data[i] = x.data[i] > 0.0f ? x.data[i] : 0.0f;
    return y;
}

} // namespace headscope
