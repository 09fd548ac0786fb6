#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "headscope/factworld.hpp"
#include "headscope/model.hpp"

namespace headscope {

struct HeadCoord {
    int layer = -1;
    int head = -1;
    bool operator==(const HeadCoord&) const = default;
};

// Ground truth recorded with a constructed model.
struct PlantedInfo {
    HeadCoord memory_head;         // copies the stored attribute to the last token
    HeadCoord context_head;        // copies the in-context attribute to the last token
    HeadCoord routing_head;        // routes question-subject info to the last token
    HeadCoord relation_scan_head;  // detects the relation keyword
    HeadCoord attribute_scan_head; // gates subject recall on a visible attribute
    double lambda_mix = 0.5;       // effective value; inputs of exactly 0.5 are nudged
    std::string relation;
    bool dual_preference = true;
    bool rotated = false;
};

struct PlantedOptions {
    int layers = 3;                    // >= 3; extra layers are pass-through fillers
    int heads = 4;                     // >= 4 per layer
    double lambda_mix = 0.5;           // memory weight; context weight is 1-lambda
    bool prefer_memory_in_dual = true; // dual-context head preference for a_m
    bool rotate = false;               // apply a random basis rotation to all weights
    uint64_t rotate_seed = 1;
    int n_max = 40;
};

struct PlantedModel {
    Model model;
    PlantedInfo info;
};

// Construct a model with known memory/context circuits for one relation of the
// world. Every non-circuit head has exactly zero value and output weights, so
// its contribution to the residual stream is exactly zero. Verifies itself by
// an exhaustive forward sweep and throws InvariantViolation on failure.
PlantedModel build_planted(const FactWorld& world, const std::string& relation,
                           const PlantedOptions& opt = {});

struct VerifyReport {
    std::vector<std::string> violations;
    bool ok() const { return violations.empty(); }
};

// Exhaustive check of the lambda-behavior invariant (answers follow the mix on
// every well-formed conflict example) and circuit isolation (all filler heads
// have exactly zero value/output weights).
VerifyReport verify_planted(const PlantedModel& pm, const FactWorld& world, int threads = 1);

} // namespace headscope
