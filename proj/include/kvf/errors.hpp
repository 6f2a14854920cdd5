#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace kvf {

struct InvalidArgument : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Power iteration failed to reach the requested tolerance. Carries the last
// iterate so callers can inspect how close it got.
struct ConvergenceError : std::runtime_error {
    std::vector<double> last_iterate;
    ConvergenceError(const std::string& msg, std::vector<double> iterate)
        : std::runtime_error(msg), last_iterate(std::move(iterate)) {}
};

// Statistic is undefined for the given input (e.g. rank correlation of a
// constant vector).
struct DegenerateInput : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Malformed or truncated binary file. byte_offset points at the first byte
// that failed to parse.
struct FormatError : std::runtime_error {
    std::size_t byte_offset;
    FormatError(const std::string& msg, std::size_t offset)
        : std::runtime_error(msg + " (at byte " + std::to_string(offset) + ")"),
          byte_offset(offset) {}
};

struct InsufficientData : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Filter file does not match the model it is being applied to.
struct FilterModelMismatch : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace kvf
