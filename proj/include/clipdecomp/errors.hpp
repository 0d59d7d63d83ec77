#pragma once

#include <stdexcept>
#include <string>

namespace clipdecomp {

// Shape/dimension mismatches (matmul, layer wiring, heatmap grids, ...).
struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed files: bad magic, truncation, duplicate names. Messages carry a byte offset.
struct FormatError : std::runtime_error {
    explicit FormatError(const std::string& msg) : std::runtime_error(msg) {}
};

// Out-of-range layer/head/token indices.
struct IndexError : std::runtime_error {
    explicit IndexError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace clipdecomp
