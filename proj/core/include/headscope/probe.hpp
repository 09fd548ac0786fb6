#pragma once

#include <span>
#include <vector>

#include "headscope/factworld.hpp"
#include "headscope/intervention.hpp"
#include "headscope/model.hpp"
#include "headscope/planted.hpp"
#include "headscope/runtime.hpp"

namespace headscope {

// Top token of the vocabulary projection of a width-d residual vector: the
// early-exit reading of an intermediate stream state or update.
int early_exit_top(const Model& model, std::span<const float> residual);

// Logit contribution one head writes into the residual stream at the last
// position: its recorded output row pushed through its output-matrix slice.
std::vector<float> head_contribution(const Model& model, const RunTrace& trace, int layer, int head);

// Fraction of examples whose component update at the last position already
// points at the model's final prediction.
double extraction_rate(const Model& model, const std::vector<ConflictExample>& ds,
                       ComponentKind kind, int layer, int threads = 1);

struct HeadExtraction {
    HeadCoord head;
    double rate = 0.0;
};

std::vector<HeadExtraction> head_extraction_rates(const Model& model,
                                                  const std::vector<ConflictExample>& ds,
                                                  const std::vector<HeadCoord>& heads,
                                                  int threads = 1);

// Per-layer and per-head extraction rates in one pass over the dataset.
struct ExtractionProfile {
    int layers = 0;
    int heads = 0;
    std::vector<double> mha;       // per layer
    std::vector<double> ffn;       // per layer
    std::vector<double> head_rate; // layers x heads, row-major

    double head_at(int l, int h) const { return head_rate[size_t(l) * size_t(heads) + size_t(h)]; }
};

ExtractionProfile extraction_profile(const Model& model, const std::vector<ConflictExample>& ds,
                                     int threads = 1);

} // namespace headscope
