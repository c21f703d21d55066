#include "diffreg/registration.hpp"

#include <algorithm>
#include <cmath>

namespace diffreg {

Correspondences extract_correspondences(const MatchMatrix& final_matrix, const ScenePair& pair,
                                        const GThetaTrace& final_pose, const ExtractionConfig& cfg) {
  const std::size_t cells = final_matrix.rows() * final_matrix.cols();
  std::size_t k = cfg.k == 0 ? std::min(final_matrix.rows(), final_matrix.cols()) : cfg.k;
  k = std::clamp<std::size_t>(k, 1, cells);
  Correspondences all = extract_topk(final_matrix, k, cfg.mutual);
  if (pair.mode != DiffusionMode::Rigid || cfg.gate_factor <= 0.0 || final_pose.pose_fallback) return all;

  const double gate = cfg.gate_factor * final_pose.inlier_scale;
  Correspondences kept;
  kept.reserve(all.size());
  for (const auto& c : all) {
    const double r = (final_pose.warped_source.row(static_cast<Eigen::Index>(c.source)) -
                      pair.target.points.row(static_cast<Eigen::Index>(c.target)))
                         .norm();
    if (r < gate) kept.push_back(c);
  }
  return kept;
}

Registration register_pair(const SampleInit& init, const Denoiser& denoiser, const ScenePair& pair,
                           const DiffusionConfig& diffusion, const GThetaConfig& pose_cfg,
                           const ExtractionConfig& extraction, Rng& rng) {
  Registration out;
  out.sample = reverse_sample(init, denoiser, pair, diffusion, rng);
  out.final_pose = g_theta_pose_stage(out.sample.final_matrix, pair, pose_cfg);
  out.correspondences = extract_correspondences(out.sample.final_matrix, pair, out.final_pose, extraction);
  return out;
}

}  // namespace diffreg
