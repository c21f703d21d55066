#pragma once

#include "diffreg/denoiser.hpp"
#include "diffreg/diffusion.hpp"
#include "diffreg/matrixspace.hpp"
#include "diffreg/scene.hpp"

namespace diffreg {

struct ExtractionConfig {
  bool mutual = true;
  std::size_t k = 0;  // 0: min(N, M)
  /// Rigid mode only: keep cells whose residual under the recovered pose is
  /// below gate_factor times the pose stage's inlier scale. Zero disables the gate.
  double gate_factor = 3.0;
};

struct Registration {
  SampleResult sample;
  GThetaTrace final_pose;  // pose stage evaluated on the final matrix
  Correspondences correspondences;
};

/// Correspondences from a final matching matrix: top-k (mutual) cells, gated
/// by the residual under the pose recovered from that matrix.
Correspondences extract_correspondences(const MatchMatrix& final_matrix, const ScenePair& pair,
                                        const GThetaTrace& final_pose, const ExtractionConfig& cfg);

/// Reverse sampling followed by closed-form pose recovery and extraction.
Registration register_pair(const SampleInit& init, const Denoiser& denoiser, const ScenePair& pair,
                           const DiffusionConfig& diffusion, const GThetaConfig& pose_cfg,
                           const ExtractionConfig& extraction, Rng& rng);

}  // namespace diffreg
