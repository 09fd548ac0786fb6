#pragma once

#include <optional>
#include <string>

#include "headscope/model.hpp"
#include "headscope/planted.hpp"

namespace headscope {

// Single-file model archive:
//   bytes 0..7   magic "HSCOPE01"
//   bytes 8..15  little-endian u64 header length
//   header       JSON: {"spec": {...}, "tensors": [{name, rows, cols, offset}],
//                       "planted": {...}?}
//   data         float32 little-endian blobs; each tensor offset is relative to
//                the data section, which starts at the first 64-byte-aligned
//                file position after the header, and is itself 64-byte-aligned.
//
// Malformed, truncated, or non-finite payloads raise DataError naming the
// offending tensor; shapes inconsistent with the spec raise DimensionError.

struct LoadedModel {
    Model model;
    std::optional<PlantedInfo> planted;
};

void save_model(const std::string& path, const Model& model,
                const PlantedInfo* planted = nullptr);

LoadedModel load_model(const std::string& path);

} // namespace headscope
