#pragma once

/**
 * @file features_io.hpp
 * @brief Binary feature-matrix files and the named-section container.
 *
 * Matrix block (little-endian):
 *   magic "PRVF" | u32 version | u32 rows | u32 cols | payload row-major
 * version 1 stores float32 payloads (the on-disk feature interchange format),
 * version 2 stores float64 (used by checkpoints and indexes, where reloads
 * must be bit-exact).
 *
 * Section container:
 *   magic "PRVS" | u32 version=1 | u32 count | count x { u32 name_len | name |
 *   matrix block }
 * Section order is preserved.
 */

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "prvr/tensor.hpp"

namespace prvr {

struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

enum class Dtype : uint32_t { f32 = 1, f64 = 2 };

/// Writes a feature matrix (always version 1 / float32).
void write_features(const std::string& path, const Tensor& matrix);
/// Reads a feature matrix of either version.
Tensor load_features(const std::string& path);

using Sections = std::vector<std::pair<std::string, Tensor>>;

void write_sections(const std::string& path, const Sections& sections, Dtype dtype = Dtype::f64);
Sections load_sections(const std::string& path);

}  // namespace prvr
