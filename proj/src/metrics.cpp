#include "diffreg/metrics.hpp"

#include "diffreg/error.hpp"
#include "diffreg/log.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace diffreg {

RatioResult inlier_ratio(const Correspondences& pred, const ScenePair& pair, double tau) {
  if (pred.empty()) {
    log::warn("inlier_ratio: empty prediction, reporting 0");
    return {0.0, true};
  }
  std::size_t hits = 0;
  for (const auto& c : pred) {
    if ((pair.warp_gt(c.source) - pair.target.point(c.target)).norm() < tau) ++hits;
  }
  return {static_cast<double>(hits) / static_cast<double>(pred.size()), false};
}

std::vector<FlowAnchor> anchors_from(const Correspondences& pred, const ScenePair& pair) {
  std::vector<FlowAnchor> anchors;
  anchors.reserve(pred.size());
  for (const auto& c : pred) {
    anchors.push_back({c.source, pair.target.point(c.target) - pair.source.point(c.source)});
  }
  return anchors;
}

RatioResult nfmr(const Correspondences& pred, const ScenePair& pair, double tau, std::size_t k) {
  if (k < 1) throw Error(ErrorKind::InvalidArgument, "nfmr k must be >= 1");
  if (pred.empty()) {
    log::warn("nfmr: empty prediction, reporting 0");
    return {0.0, true};
  }
  if (pair.gt_pairs.empty()) return {0.0, false};
  const auto anchors = anchors_from(pred, pair);
  const FlowField flow = interpolate_flow(pair.source, anchors, k);
  std::size_t recovered = 0;
  for (const auto& gt : pair.gt_pairs) {
    const Eigen::Vector3d moved = pair.source.point(gt.source) + flow.row(static_cast<Eigen::Index>(gt.source)).transpose();
    if ((moved - pair.target.point(gt.target)).norm() < tau) ++recovered;
  }
  return {static_cast<double>(recovered) / static_cast<double>(pair.gt_pairs.size()), false};
}

PoseErrors registration_errors(const RigidTransform& pred, const RigidTransform& gt) {
  // Geodesic angle of R_predᵀR_gt. atan2(sin, cos) equals arccos((tr − 1)/2)
  // but keeps full precision near 0, where arccos cannot resolve below ~1e-6°.
  const Eigen::Matrix3d d = pred.rotation.transpose() * gt.rotation;
  const Eigen::Vector3d axis(d(2, 1) - d(1, 2), d(0, 2) - d(2, 0), d(1, 0) - d(0, 1));
  const double c = std::clamp((d.trace() - 1.0) / 2.0, -1.0, 1.0);
  const double angle = std::atan2(axis.norm() / 2.0, c);
  return {angle * 180.0 / std::numbers::pi, (pred.translation - gt.translation).norm()};
}

FlowMetrics flow_metrics(const FlowField& pred, const FlowField& gt) {
  if (pred.rows() != gt.rows()) throw Error(ErrorKind::LengthMismatch, "predicted and ground-truth flow lengths differ");
  FlowMetrics m;
  if (pred.rows() == 0) return m;
  std::size_t strict = 0;
  std::size_t relaxed = 0;
  std::size_t outliers = 0;
  std::size_t or_count = 0;
  double err_sum = 0.0;
  for (Eigen::Index i = 0; i < pred.rows(); ++i) {
    const double e = (pred.row(i) - gt.row(i)).norm();
    const double mag = gt.row(i).norm();
    err_sum += e;
    const bool has_rel = mag >= 1e-9;
    const double rel = has_rel ? e / mag : 0.0;
    if (e < 0.025 || (has_rel && rel < 0.05)) ++strict;
    if (e < 0.05 || (has_rel && rel < 0.05)) ++relaxed;
    if (has_rel) {
      ++or_count;
      if (rel > 0.30) ++outliers;
    }
  }
  const auto n = static_cast<double>(pred.rows());
  m.epe = err_sum / n;
  m.acc_s = static_cast<double>(strict) / n;
  m.acc_r = static_cast<double>(relaxed) / n;
  m.outlier_ratio = or_count > 0 ? static_cast<double>(outliers) / static_cast<double>(or_count) : 0.0;
  return m;
}

FlowMetrics flow_metrics(const FlowField& pred, const ScenePair& pair) { return flow_metrics(pred, pair.gt_flow); }

void MetricsReport::validate() const {
  for (double r : {inlier_ratio, nfmr, acc_s, acc_r, outlier_ratio}) {
    if (!(r >= 0.0 && r <= 1.0)) throw Error(ErrorKind::InvalidArgument, "ratio outside [0, 1]");
  }
  for (double e : {rotation_error, translation_error, epe}) {
    if (!(e >= 0.0)) throw Error(ErrorKind::InvalidArgument, "negative error");
  }
}

MetricsReport evaluate_correspondences(const Correspondences& pred, const ScenePair& pair, double tau, std::size_t k) {
  MetricsReport r;
  r.tau = tau;
  r.num_correspondences = pred.size();
  const auto ir = inlier_ratio(pred, pair, tau);
  r.inlier_ratio = ir.value;
  r.empty_prediction = ir.empty_prediction;
  r.nfmr = nfmr(pred, pair, tau, k).value;

  RigidTransform estimate;
  std::vector<WeightedPair> weighted;
  for (const auto& c : pred) weighted.push_back({c.source, c.target, c.confidence});
  try {
    estimate = weighted_svd(pair.source, pair.target, weighted);
  } catch (const Error& ex) {
    log::warn(std::string("pose estimation failed: ") + ex.what());
    r.pose_failed = true;
  }
  const auto pose = registration_errors(estimate, pair.gt_transform);
  r.rotation_error = pose.rotation_deg;
  r.translation_error = pose.translation_m;

  FlowField pred_flow;
  if (pred.empty()) {
    pred_flow = FlowField::Zero(static_cast<Eigen::Index>(pair.source.size()), 3);
  } else {
    pred_flow = interpolate_flow(pair.source, anchors_from(pred, pair), k);
  }
  const auto fm = flow_metrics(pred_flow, pair);
  r.epe = fm.epe;
  r.acc_s = fm.acc_s;
  r.acc_r = fm.acc_r;
  r.outlier_ratio = fm.outlier_ratio;
  return r;
}

nlohmann::json to_json(const MetricsReport& r) {
  return {{"inlier_ratio", r.inlier_ratio},
          {"nfmr", r.nfmr},
          {"rotation_error_deg", r.rotation_error},
          {"translation_error_m", r.translation_error},
          {"epe", r.epe},
          {"acc_s", r.acc_s},
          {"acc_r", r.acc_r},
          {"outlier_ratio", r.outlier_ratio},
          {"num_correspondences", r.num_correspondences},
          {"tau", r.tau},
          {"empty_prediction", r.empty_prediction},
          {"pose_failed", r.pose_failed}};
}

}  // namespace diffreg
