#pragma once

#include "diffreg/diffusion.hpp"
#include "diffreg/geometry.hpp"
#include "diffreg/matrixspace.hpp"

#include "json.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace diffreg {

enum class DescriptorKind { None, Oracle, LocalStatistics };

std::string to_string(DescriptorKind kind);
DescriptorKind descriptor_kind_from_string(const std::string& s);

struct GeneratorSpec {
  std::size_t n_points = 128;
  double overlap_fraction = 1.0;
  /// Standard deviation of target noise; meters, or a fraction of the scene
  /// diameter when `noise_relative` is set.
  double noise_sigma = 0.0;
  bool noise_relative = false;
  DiffusionMode mode = DiffusionMode::Rigid;
  double deformation_amplitude = 0.0;  // RMS, meters
  DescriptorKind descriptor_kind = DescriptorKind::Oracle;
  std::size_t descriptor_dim = 32;
  double descriptor_corruption = 0.0;  // fraction of points per cloud with replaced descriptors
  double translation_range = 0.5;      // translation uniform in [-r, r]^3
  bool force_identity = false;
  bool shuffle = true;
  std::uint64_t seed = 0;

  void validate() const;
};

nlohmann::json to_json(const GeneratorSpec& spec);
GeneratorSpec generator_spec_from_json(const nlohmann::json& j, GeneratorSpec defaults = {});

/// A generated source/target problem with its ground truth.
struct ScenePair {
  PointCloud source;
  PointCloud target;
  DiffusionMode mode = DiffusionMode::Rigid;
  RigidTransform gt_transform;
  FlowField gt_flow;  // source-point displacements onto the target surface
  std::vector<IndexPair> gt_pairs;
  std::vector<bool> overlap_mask_source;
  double scene_diameter = 0.0;
  double achieved_overlap = 0.0;
  double noise_sigma = 0.0;  // absolute, meters
  std::uint64_t seed = 0;
  GeneratorSpec spec;

  /// Ground-truth warp of source point i.
  [[nodiscard]] Eigen::Vector3d warp_gt(std::size_t i) const;
};

/// Throws InvalidArgument for a bad spec and InfeasibleOverlap when the
/// requested overlap cannot be realised within ±5%.
ScenePair generate_scene(const GeneratorSpec& spec);

/// E⁰ for the pair (see the index-based overload).
MatchMatrix ground_truth_matrix(const ScenePair& pair, int iterations = kDenoiserSinkhornIterations);

/// Rotation-invariant local shape descriptors (covariance eigen-features and
/// normal coherence at two neighbourhood scales), unit-normalised.
Descriptors local_statistics_descriptors(const Points& points);

inline constexpr int kBundleFormatVersion = 1;

/// source.ply, target.ply and gt.json under `dir` (created if needed).
void write_bundle(const std::filesystem::path& dir, const ScenePair& pair);
ScenePair read_bundle(const std::filesystem::path& dir);
nlohmann::json ground_truth_json(const ScenePair& pair);

}  // namespace diffreg
