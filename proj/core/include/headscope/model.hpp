#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "headscope/tensor.hpp"

namespace headscope {

enum class Activation { gelu, relu };

std::string activation_name(Activation a);
Activation activation_from_name(const std::string& s);

struct ModelSpec {
    int layers = 0;  // L
    int heads = 0;   // M, heads per layer
    int d_model = 0; // d
    int d_ff = 0;    // FFN inner width
    int vocab = 0;   // V
    int n_max = 0;   // max sequence length
    bool use_layer_norm = false; // pre-norm before MHA and FFN; no final norm
    Activation activation = Activation::gelu;
    // positional encoding: learned absolute embeddings, added at layer 0

    int head_dim() const { return heads > 0 ? d_model / heads : 0; }
    void validate() const; // d divisible by M, all extents >= 1
};

struct LayerWeights {
    std::vector<Tensor> w_q, w_k, w_v; // per head, d x d/M
    Tensor w_o;                        // d x d, shared output matrix
    Tensor w1;                         // d x d_ff
    Tensor w2;                         // d_ff x d
    std::vector<float> ln1_gain, ln1_bias; // d each, used when use_layer_norm
    std::vector<float> ln2_gain, ln2_bias;
};

struct Weights {
    Tensor e; // vocab x d; also used transposed as the vocabulary head
    Tensor p; // n_max x d
    std::vector<LayerWeights> layers;
};

struct Model {
    ModelSpec spec;
    Weights w;

    // Shapes consistent with spec, all values finite.
    void validate() const;
};

// Zero-initialized weights with the right shapes (norm gains set to 1).
Model zero_model(const ModelSpec& spec);

// Test/benchmark model with weights uniform in [-scale, scale], drawn from a
// seeded generator that does not depend on platform distribution internals.
Model random_model(const ModelSpec& spec, uint64_t seed, float scale = 0.08f);

} // namespace headscope
