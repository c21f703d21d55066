#pragma once

#include "diffreg/geometry.hpp"
#include "diffreg/matrixspace.hpp"
#include "diffreg/scene.hpp"

#include <Eigen/Core>

#include <memory>
#include <string>

namespace diffreg {

/// Predicts the clean matching matrix Ê₀ from a noisy state E^t.
class Denoiser {
 public:
  virtual ~Denoiser() = default;
  [[nodiscard]] virtual MatchMatrix predict(const MatchMatrix& et, const ScenePair& pair) const = 0;
};

/// Returns a fixed matrix regardless of input.
class ConstantDenoiser final : public Denoiser {
 public:
  explicit ConstantDenoiser(MatchMatrix value) : value_(std::move(value)) {}
  [[nodiscard]] MatchMatrix predict(const MatchMatrix&, const ScenePair&) const override { return value_; }

 private:
  MatchMatrix value_;
};

struct FeatureInputs {
  const Points& warped_source;
  const Points& target;
  const Descriptors& source_descriptors;
  const Descriptors& target_descriptors;
  double bandwidth;  // position-kernel scale hint from the pose stage, meters
};

struct FeaturePair {
  Eigen::MatrixXd source;  // N×D
  Eigen::MatrixXd target;  // M×D
};

/// f_θ: per-point embeddings whose scaled inner products are matching logits.
class FeatureNetwork {
 public:
  virtual ~FeatureNetwork() = default;
  [[nodiscard]] virtual FeaturePair features(const FeatureInputs& in) const = 0;
};

/// Finite feature map whose logits ⟨f_i, g_j⟩/√D equal
///   −‖p_i − q_j‖² / 2σ² + λ⟨F_i, F_j⟩
/// exactly, so the log-domain Sinkhorn sees the product kernel
/// exp(−‖p_i − q_j‖²/2σ²)·exp(λ⟨F_i, F_j⟩).
class AnalyticFeatureNet final : public FeatureNetwork {
 public:
  explicit AnalyticFeatureNet(double descriptor_weight = 10.0) : descriptor_weight_(descriptor_weight) {}
  [[nodiscard]] FeaturePair features(const FeatureInputs& in) const override;
  [[nodiscard]] double descriptor_weight() const { return descriptor_weight_; }

 private:
  double descriptor_weight_;
};

/// Convenience wrapper: features for `bandwidth` with normalised descriptors.
FeaturePair analytic_feature_net(const Points& warped_source, const Points& target, const Descriptors& source_desc,
                                 const Descriptors& target_desc, double bandwidth, double descriptor_weight = 10.0);

/// ⟨f_i, g_j⟩ / √D.
Eigen::MatrixXd matching_logits(const FeaturePair& f);

enum class ProcrustesWeights { AllCells, TopK };

struct GThetaConfig {
  int sinkhorn_iterations = kDenoiserSinkhornIterations;
  ProcrustesWeights procrustes = ProcrustesWeights::TopK;
  std::size_t procrustes_topk = 16;
  /// Bandwidth from the pose residuals of the strongest cells of Ẽ_t, scaled
  /// by `bandwidth_scale` and clamped to [min_bandwidth_ratio, 1]·(target RMS radius).
  bool adaptive_bandwidth = true;
  double bandwidth = 0.05;          // meters, used when not adaptive
  std::size_t bandwidth_cells = 0;  // strongest cells entering the estimate; 0: min(N, M)
  double bandwidth_quantile = 0.5;  // weighted quantile of their squared residuals
  double bandwidth_scale = 1.0;
  double min_bandwidth_ratio = 0.01;
};

struct GThetaTrace {
  MatchMatrix projected_input;  // Ẽ_t
  RigidTransform transform;
  bool pose_fallback = false;
  double bandwidth = 0.0;
  double inlier_scale = 0.0;  // weighted median residual of the top-k Procrustes cells
  Points warped_source;
  FeaturePair features;
  Eigen::MatrixXd logits;
  MatchMatrix output;  // Ê₀
};

/// Pose stage of g_θ: Ẽ_t, soft Procrustes (identity on degeneracy), warp, bandwidth.
GThetaTrace g_theta_pose_stage(const MatchMatrix& et, const ScenePair& pair, const GThetaConfig& cfg);

/// Full g_θ: Sinkhorn → soft Procrustes → warp → f_θ → logits → Sinkhorn.
/// Throws MissingDescriptors when either cloud lacks descriptors.
GThetaTrace g_theta(const MatchMatrix& et, const ScenePair& pair, const FeatureNetwork& net, const GThetaConfig& cfg);

class GThetaDenoiser final : public Denoiser {
 public:
  GThetaDenoiser(std::shared_ptr<const FeatureNetwork> net, GThetaConfig cfg = {})
      : net_(std::move(net)), cfg_(cfg) {}
  [[nodiscard]] MatchMatrix predict(const MatchMatrix& et, const ScenePair& pair) const override;
  [[nodiscard]] const GThetaConfig& config() const { return cfg_; }

 private:
  std::shared_ptr<const FeatureNetwork> net_;
  GThetaConfig cfg_;
};

}  // namespace diffreg
