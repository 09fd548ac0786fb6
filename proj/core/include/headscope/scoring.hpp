#pragma once

#include <functional>
#include <string>
#include <vector>

#include "headscope/factworld.hpp"
#include "headscope/model.hpp"
#include "headscope/planted.hpp"

namespace headscope {

// Which answer pathway a score ranks heads for.
enum class Target { memory, context };
std::string target_name(Target t);
Target target_from_name(const std::string& s);

struct HeadScores {
    int layers = 0;
    int heads = 0;
    std::vector<double> s; // layers x heads, row-major

    HeadScores() = default;
    HeadScores(int l, int m) : layers(l), heads(m), s(size_t(l) * size_t(m), 0.0) {}
    double& at(int l, int h) { return s[size_t(l) * size_t(heads) + size_t(h)]; }
    double at(int l, int h) const { return s[size_t(l) * size_t(heads) + size_t(h)]; }
};

struct LabeledPrompt {
    std::vector<int> tokens;
    int answer = -1;
};

// Gradient-based head importance I = E |dL/d alpha| where alpha scales the
// head's output and L is the answer-token negative log-likelihood. The
// derivative is taken by a central finite difference of half-width `step`,
// evaluated in double from float logits.
HeadScores grad_importance(const Model& model, const std::vector<LabeledPrompt>& data,
                           double step = 1e-3, int threads = 1);

// Importance contrast S = I(loss at the target answer) - I(loss at the other
// answer) over the same prompts; positive marks heads that matter specifically
// for the target pathway.
HeadScores proxy_scores(const Model& model, const std::vector<ConflictExample>& ds, Target target,
                        double step = 1e-3, int threads = 1);

struct PathPatchOptions {
    Target target = Target::memory;
    bool use_probs = false; // margins from probabilities instead of logits
    // Produces the corrupted twin of an example; empty = mask the target's
    // supporting element (subject for memory, attribute for context).
    std::function<ConflictExample(const ConflictExample&)> corruptor;
};

// Path patching: for each head, rerun the clean prompt with every head frozen
// to its clean activation except this one, which is frozen to its corrupted
// activation. Score = E[margin_clean - margin_patched] with
// margin = f(target answer) - f(other answer).
HeadScores path_patch_scores(const Model& model, const std::vector<ConflictExample>& ds,
                             const PathPatchOptions& opt, int threads = 1);

// Heads ranked by score (ascending by default: most harmful to the target
// first). Selects ceil(k_percent/100 * L * M) heads, at least one; ties break
// lexicographically by (layer, head). k_percent must be positive.
std::vector<HeadCoord> rank_select(const HeadScores& scores, double k_percent,
                                   bool ascending = true);

} // namespace headscope
