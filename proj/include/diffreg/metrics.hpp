#pragma once

#include "diffreg/geometry.hpp"
#include "diffreg/matrixspace.hpp"
#include "diffreg/scene.hpp"

#include "json.hpp"

#include <map>
#include <string>

namespace diffreg {

inline constexpr std::size_t kDefaultFlowNeighbours = 3;

/// Ratio plus a flag set when the prediction was empty (value then 0).
struct RatioResult {
  double value = 0.0;
  bool empty_prediction = false;
};

/// Fraction of predicted pairs whose ground-truth-warped source lands within
/// `tau` of the matched target point.
RatioResult inlier_ratio(const Correspondences& pred, const ScenePair& pair, double tau);

/// Fraction of ground-truth pairs recovered by interpolating flow from the
/// predicted pairs used as anchors (k nearest, inverse-distance weights).
RatioResult nfmr(const Correspondences& pred, const ScenePair& pair, double tau,
                 std::size_t k = kDefaultFlowNeighbours);

struct PoseErrors {
  double rotation_deg;
  double translation_m;
};

PoseErrors registration_errors(const RigidTransform& pred, const RigidTransform& gt);

struct FlowMetrics {
  double epe = 0.0;
  double acc_s = 0.0;
  double acc_r = 0.0;
  double outlier_ratio = 0.0;
};

/// EPE, AccS (<2.5 cm or <5 %), AccR (<5 cm or <5 %) and OR (>30 % relative).
/// Points with |gt| < 1e-9 use the absolute thresholds only and are excluded
/// from OR. Throws LengthMismatch.
FlowMetrics flow_metrics(const FlowField& pred, const FlowField& gt);
FlowMetrics flow_metrics(const FlowField& pred, const ScenePair& pair);

/// Anchors (i, q_j − p_i) from predicted correspondences.
std::vector<FlowAnchor> anchors_from(const Correspondences& pred, const ScenePair& pair);

struct MetricsReport {
  double inlier_ratio = 0.0;
  double nfmr = 0.0;
  double rotation_error = 0.0;     // degrees
  double translation_error = 0.0;  // meters
  double epe = 0.0;
  double acc_s = 0.0;
  double acc_r = 0.0;
  double outlier_ratio = 0.0;
  std::size_t num_correspondences = 0;
  double tau = 0.0;
  bool empty_prediction = false;
  bool pose_failed = false;
  std::map<std::string, double> runtime;  // seconds per component

  /// Throws InvalidArgument when a ratio leaves [0, 1] or an error is negative.
  void validate() const;
};

/// Full report for a predicted correspondence set; the pose is re-estimated
/// with confidence-weighted Procrustes and the flow interpolated from anchors.
MetricsReport evaluate_correspondences(const Correspondences& pred, const ScenePair& pair, double tau,
                                       std::size_t k = kDefaultFlowNeighbours);

/// Metric fields only (runtime goes under a separate key by the caller).
nlohmann::json to_json(const MetricsReport& r);

}  // namespace diffreg
