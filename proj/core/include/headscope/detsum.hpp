#pragma once

#include <cmath>
#include <cstdint>

#include "headscope/errors.hpp"

namespace headscope {

// Order-independent accumulator for dataset-level means. Values are rounded
// to a 2^-32 fixed-point grid and summed as 128-bit integers, so the total is
// exactly the same for any permutation or thread partition of the inputs,
// exact zeros stay exactly zero, and negating every input negates the result
// bit-for-bit.
struct DetSum {
    __int128 acc = 0;

    static constexpr double kScale = 4294967296.0; // 2^32

    void add(double v) {
        if (!(std::fabs(v) < 1e8))
            throw DataError("DetSum: value out of accumulator range");
        acc += static_cast<__int128>(std::llround(v * kScale));
    }

    void merge(const DetSum& other) { acc += other.acc; }

    double value() const { return double(acc) / kScale; }

    double mean(size_t n) const { return n == 0 ? 0.0 : value() / double(n); }
};

} // namespace headscope
