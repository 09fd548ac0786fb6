#pragma once

#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "headscope/factworld.hpp"
#include "headscope/tensor.hpp"

namespace headscope {

struct RunTrace; // runtime.hpp

enum class ComponentKind { mha, ffn };
std::string component_name(ComponentKind k);
ComponentKind component_from_name(const std::string& s);

// Zero the MHA update a_i (or FFN update m_i) at the given positions and layers.
struct KnockoutComponent {
    ComponentKind kind = ComponentKind::mha;
    std::vector<int> positions;
    std::vector<int> layers;
};

// Zero post-softmax attention weights s[query_pos, k] for k in key_positions,
// at the given layers and heads (empty head list = all heads). Rows are not
// renormalized unless `renormalize`; a fully zeroed row stays zero.
struct BlockAttention {
    int query_pos = 0;
    std::vector<int> key_positions;
    std::vector<int> layers;
    std::vector<int> heads;
    bool renormalize = false;
};

// Replace head (layer, head)'s output H with a recorded N x d/M activation.
struct PatchHead {
    int layer = 0;
    int head = 0;
    Tensor replacement;
};

// Set H to the zero matrix for each listed head.
struct PruneHeads {
    std::vector<std::pair<int, int>> heads;
};

// Multiply head (layer, head)'s output by alpha. Alpha is kept in double and
// applied as float(double(H) * alpha), so finite-difference probes of alpha
// survive float32 storage.
struct ScaleHead {
    int layer = 0;
    int head = 0;
    double alpha = 1.0;
};

using Directive =
    std::variant<KnockoutComponent, BlockAttention, PatchHead, PruneHeads, ScaleHead>;

struct InterventionPlan {
    std::vector<Directive> directives;

    bool empty() const { return directives.empty(); }
    void add(Directive d) { directives.push_back(std::move(d)); }
};

// 0-based layer window: expands to [max(0, center - W/2), min(L-1, center + W/2)]
// with floor division of W.
struct LayerWindow {
    int center = 0;
    int window = 0;

    std::vector<int> expand(int num_layers) const;
};

// Zero a_i (MHA) or m_i (FFN) over the element's token positions, at every
// layer of the window. DataError if the element has no range in the example.
InterventionPlan knockout(ComponentKind kind, Element element, LayerWindow win,
                          const ConflictExample& ex, int num_layers);

// Zero attention from the last token to the element's tokens, all heads, at
// every layer of the window.
InterventionPlan block_flow(Element element, LayerWindow win, const ConflictExample& ex,
                            int num_layers);

// Replace one head's output with its activation from a recorded trace.
InterventionPlan patch_head(int layer, int head, const RunTrace& source);

// Patch every head to its activation in `clean`, except (layer, head) which is
// patched from `corrupted`. Plan size is exactly L*M directives.
InterventionPlan freeze_except(const RunTrace& clean, int layer, int head,
                               const RunTrace& corrupted);

// Line-oriented text form consumed by the CLI --plan flag. '#' starts a comment.
std::string plan_to_text(const InterventionPlan& plan);
InterventionPlan parse_plan(const std::string& text);
InterventionPlan load_plan(const std::string& path);

} // namespace headscope
