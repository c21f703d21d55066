#pragma once

#include "diffreg/geometry.hpp"

#include <filesystem>

namespace diffreg {

/// ASCII PLY: a `vertex` element with x, y, z and optional d0..d{k-1}.
/// Coordinates are written with round-trip precision.
void write_ply(const std::filesystem::path& path, const PointCloud& cloud);
PointCloud read_ply(const std::filesystem::path& path);

/// Whitespace-delimited `x y z` lines; no descriptors.
void write_xyz(const std::filesystem::path& path, const PointCloud& cloud);
PointCloud read_xyz(const std::filesystem::path& path);

}  // namespace diffreg
