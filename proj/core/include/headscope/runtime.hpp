#pragma once

#include <span>
#include <string>
#include <vector>

#include "headscope/intervention.hpp"
#include "headscope/model.hpp"

namespace headscope {

struct HeadTrace {
    Tensor s; // N x N attention weights, post-intervention
    Tensor h; // N x d/M head output, post-intervention
};

struct LayerTrace {
    std::vector<HeadTrace> heads;
    Tensor a; // N x d MHA residual update, post-knockout
    Tensor m; // N x d FFN residual update, post-knockout
    Tensor x; // N x d hidden state after this layer
};

struct RunTrace {
    int n = 0;
    bool recorded = false;
    Tensor x0;                      // N x d embedding + positional rows
    std::vector<LayerTrace> layers; // filled only when recorded
    std::vector<float> logits;      // V, from the last position
    std::vector<float> probs;       // V, softmax of logits
};

// A plan compiled against (spec, sequence length): per-layer hook tables plus
// notes describing every conflict resolution that was applied.
struct LayerHooks {
    std::vector<const Tensor*> patch; // per head, nullptr if none
    std::vector<char> prune;          // per head
    std::vector<char> scaled;         // per head
    std::vector<double> scale;        // per head, meaningful when scaled
    std::vector<int> mha_knockout;    // positions
    std::vector<int> ffn_knockout;    // positions
    struct Block {
        int query = 0;
        std::vector<int> keys;
        std::vector<char> heads; // per head
        bool renormalize = false;
    };
    std::vector<Block> blocks;
};

struct CompiledPlan {
    std::vector<LayerHooks> layers;
    std::vector<std::string> notes;
};

// Validates indices (DimensionError) and directive conflicts (DataError for
// contradictions; resolvable overlaps are resolved and noted). Tensors are
// borrowed from the plan, which must outlive the compiled form.
CompiledPlan compile_plan(const ModelSpec& spec, const InterventionPlan& plan, int seq_len);

// One forward pass. Causal attention, hooks applied at their declared sites,
// intermediate quantities recorded iff `record`. Pure function of its inputs.
RunTrace forward(const Model& model, std::span<const int> tokens,
                 const InterventionPlan& plan = {}, bool record = false);

// Argmax with ties broken by lowest index.
int top_token(std::span<const float> logits);

// Vocabulary projection phi(x) = E x of a width-d residual vector.
std::vector<float> vocab_project(const Model& model, std::span<const float> residual);

} // namespace headscope
