#pragma once

#include <vector>

#include "headscope/factworld.hpp"
#include "headscope/intervention.hpp"
#include "headscope/model.hpp"
#include "headscope/scoring.hpp"

namespace headscope {

// Answer-usage statistics over a conflict dataset: how often the top token is
// the stored attribute (f_m), the in-context attribute (f_c), or neither.
struct UsageReport {
    long n = 0;
    long f_m = 0;
    long f_c = 0;
    long f_o = 0;
    double rm = 0.0;
    double rc = 0.0;
    double ro = 0.0;
};

// Rates from raw counts; DataError when all counts are zero.
UsageReport finalize_counts(long f_m, long f_c, long f_o);

// Pool reports by summing counts and recomputing rates.
UsageReport combine(const std::vector<UsageReport>& parts);

UsageReport evaluate(const Model& model, const std::vector<ConflictExample>& ds,
                     const InterventionPlan& plan = {}, int threads = 1);

struct SweepCell {
    Element element = Element::s_c;
    int layer = 0;           // window center
    double mean_delta = 0.0; // mean over usable examples of p(answer) drop
    double mean_rel = 0.0;   // mean of drop / p_clean(answer)
    int used = 0;
    int skipped = 0;         // examples lacking the element
};

struct SweepGrid {
    ComponentKind kind = ComponentKind::mha;
    int window = 0;
    int layers = 0;
    std::vector<SweepCell> cells; // elements x layers, element-major
};

// Knock out one input element's component updates over a layer window centered
// at each layer in turn; the effect is the drop of the clean answer's
// probability. The answer is the model's own clean prediction per example.
SweepGrid sweep_knockout(const Model& model, const std::vector<ConflictExample>& ds,
                         ComponentKind kind, int window, int threads = 1);

// Same grid, but blocking last-token attention onto the element instead.
SweepGrid sweep_flow_block(const Model& model, const std::vector<ConflictExample>& ds, int window,
                           int threads = 1);

struct PruneChoice {
    double k_percent = 0.0;
    std::vector<HeadCoord> heads;
    UsageReport report; // dev-set usage with the pruning applied
};

// Smallest rate from the grid whose pruning maximizes the target answer rate
// on the dev set. Heads are taken from the ascending end of the score map
// (most harmful to the target first).
PruneChoice select_prune_rate(const Model& model, const HeadScores& scores,
                              const std::vector<ConflictExample>& dev, Target target,
                              const std::vector<double>& grid = {1, 3, 5, 7, 9, 15},
                              int threads = 1);

} // namespace headscope
