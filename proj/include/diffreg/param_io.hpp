#pragma once

#include "diffreg/attention.hpp"
#include "diffreg/training.hpp"

#include "json.hpp"

#include <filesystem>

namespace diffreg {

inline constexpr int kParamFormatVersion = 1;

/// Flat little-endian float64 archive at `path` (tensors in manifest order,
/// column-major) plus the shape manifest `<path>.json`.
void write_params(const std::filesystem::path& path, const AttentionParams& params);
/// Throws Io when either file is missing and Format on a bad manifest or size.
AttentionParams read_params(const std::filesystem::path& path);

nlohmann::json params_manifest(const AttentionParams& params);

/// Resumable training state next to a parameter archive: the parameters at
/// `path`, momentum at `<path>.velocity`, and iteration, RNG state and loss
/// history in `<path>.state.json`.
void write_train_state(const std::filesystem::path& path, const TrainState& state);
TrainState read_train_state(const std::filesystem::path& path);

std::filesystem::path state_path_for(const std::filesystem::path& params_path);
std::filesystem::path velocity_path_for(const std::filesystem::path& params_path);

}  // namespace diffreg
