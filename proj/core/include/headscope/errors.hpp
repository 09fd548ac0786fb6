#pragma once

#include <stdexcept>
#include <string>

namespace headscope {

// Error taxonomy. The CLI maps these to exit codes:
// DimensionError/DataError -> 2, InvariantViolation -> 3, usage errors -> 1.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Shape mismatch, index out of range, inconsistent extents.
class DimensionError : public Error {
public:
    explicit DimensionError(const std::string& msg) : Error(msg) {}
};

// Bad file contents, non-finite values, malformed plans/configs, conflicting
// directives, empty datasets.
class DataError : public Error {
public:
    explicit DataError(const std::string& msg) : Error(msg) {}
};

// A built artifact violates one of its own construction guarantees
// (e.g. planted-model verification failure).
class InvariantViolation : public Error {
public:
    explicit InvariantViolation(const std::string& msg) : Error(msg) {}
};

} // namespace headscope
