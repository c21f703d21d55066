#pragma once

#include "diffreg/matrixspace.hpp"

#include "json.hpp"

#include <filesystem>

namespace diffreg {

/// Little-endian: u32 rows, u32 cols, rows·cols float64 in row-major order.
void write_matrix_binary(const std::filesystem::path& path, const MatchMatrix& m);
MatchMatrix read_matrix_binary(const std::filesystem::path& path);

/// {"rows": N, "cols": M, "data": [[...], ...]}
nlohmann::json matrix_to_json(const MatchMatrix& m);
MatchMatrix matrix_from_json(const nlohmann::json& j);

}  // namespace diffreg
