#include "headscope/model.hpp"

#include <random>

namespace headscope {

std::string activation_name(Activation a) {
    return a == Activation::gelu ? "gelu" : "relu";
}

Activation activation_from_name(const std::string& s) {
    if (s == "gelu") return Activation::gelu;
    if (s == "relu") return Activation::relu;
    throw DataError("unknown activation '" + s + "'");
}

void ModelSpec::validate() const {
    if (layers < 1 || heads < 1 || d_model < 1 || d_ff < 1 || vocab < 1 || n_max < 1)
        throw DimensionError("model spec: all extents must be >= 1");
    if (d_model % heads != 0)
        throw DimensionError("model spec: d_model must be divisible by heads");
}

static void expect_shape(const Tensor& t, int r, int c, const std::string& name) {
    if (t.rows != r || t.cols != c)
        throw DimensionError(name + ": expected " + std::to_string(r) + "x" + std::to_string(c) +
                             ", got " + std::to_string(t.rows) + "x" + std::to_string(t.cols));
    check_finite(t, name);
}

void Model::validate() const {
    spec.validate();
    const int d = spec.d_model, k = spec.head_dim();
    expect_shape(w.e, spec.vocab, d, "E");
    expect_shape(w.p, spec.n_max, d, "P");
    if (int(w.layers.size()) != spec.layers)
        throw DimensionError("weights: layer count differs from spec");
    for (int l = 0; l < spec.layers; ++l) {
        const auto& lw = w.layers[size_t(l)];
        const std::string at = "layer" + std::to_string(l);
        if (int(lw.w_q.size()) != spec.heads || int(lw.w_k.size()) != spec.heads ||
            int(lw.w_v.size()) != spec.heads)
            throw DimensionError(at + ": per-head matrix count differs from spec");
        for (int h = 0; h < spec.heads; ++h) {
            const std::string hat = at + ".h" + std::to_string(h);
            expect_shape(lw.w_q[size_t(h)], d, k, hat + ".wq");
            expect_shape(lw.w_k[size_t(h)], d, k, hat + ".wk");
            expect_shape(lw.w_v[size_t(h)], d, k, hat + ".wv");
        }
        expect_shape(lw.w_o, d, d, at + ".wo");
        expect_shape(lw.w1, d, spec.d_ff, at + ".w1");
        expect_shape(lw.w2, spec.d_ff, d, at + ".w2");
        if (spec.use_layer_norm) {
            if (int(lw.ln1_gain.size()) != d || int(lw.ln1_bias.size()) != d ||
                int(lw.ln2_gain.size()) != d || int(lw.ln2_bias.size()) != d)
                throw DimensionError(at + ": norm parameter width differs from d_model");
            check_finite(lw.ln1_gain, at + ".ln1.gain");
            check_finite(lw.ln1_bias, at + ".ln1.bias");
            check_finite(lw.ln2_gain, at + ".ln2.gain");
            check_finite(lw.ln2_bias, at + ".ln2.bias");
        }
    }
}

Model zero_model(const ModelSpec& spec) {
    spec.validate();
    Model m;
    m.spec = spec;
    const int d = spec.d_model, k = spec.head_dim();
    m.w.e = Tensor(spec.vocab, d);
    m.w.p = Tensor(spec.n_max, d);
    m.w.layers.resize(size_t(spec.layers));
    for (auto& lw : m.w.layers) {
        lw.w_q.assign(size_t(spec.heads), Tensor(d, k));
        lw.w_k.assign(size_t(spec.heads), Tensor(d, k));
        lw.w_v.assign(size_t(spec.heads), Tensor(d, k));
        lw.w_o = Tensor(d, d);
        lw.w1 = Tensor(d, spec.d_ff);
        lw.w2 = Tensor(spec.d_ff, d);
        lw.ln1_gain.assign(size_t(d), 1.0f);
        lw.ln1_bias.assign(size_t(d), 0.0f);
        lw.ln2_gain.assign(size_t(d), 1.0f);
        lw.ln2_bias.assign(size_t(d), 0.0f);
    }
    return m;
}

namespace {

struct UniformGen {
    std::mt19937_64 eng;
    explicit UniformGen(uint64_t seed) : eng(seed) {}
    // uniform in [-s, s] from raw engine bits; identical across platforms
    float next(float s) {
        const double u = double(eng() >> 11) * 0x1.0p-53; // [0,1)
        return float((2.0 * u - 1.0) * double(s));
    }
    void fill(Tensor& t, float s) {
        for (auto& v : t.data) v = next(s);
    }
};

} // namespace

Model random_model(const ModelSpec& spec, uint64_t seed, float scale) {
    Model m = zero_model(spec);
    UniformGen g(seed);
    g.fill(m.w.e, scale);
    g.fill(m.w.p, scale);
    for (auto& lw : m.w.layers) {
        for (int h = 0; h < spec.heads; ++h) {
            g.fill(lw.w_q[size_t(h)], scale);
            g.fill(lw.w_k[size_t(h)], scale);
            g.fill(lw.w_v[size_t(h)], scale);
        }
        g.fill(lw.w_o, scale);
        g.fill(lw.w1, scale);
        g.fill(lw.w2, scale);
    }
    return m;
}

} // namespace headscope
