#include "diffreg/geometry.hpp"

#include "diffreg/error.hpp"

#include <Eigen/Geometry>
#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace diffreg {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::DegenerateConfiguration: return "DegenerateConfiguration";
    case ErrorKind::InvalidWeights: return "InvalidWeights";
    case ErrorKind::InvalidArgument: return "InvalidArgument";
    case ErrorKind::EmptyAnchors: return "EmptyAnchors";
    case ErrorKind::KTooLarge: return "KTooLarge";
    case ErrorKind::NonFiniteInput: return "NonFiniteInput";
    case ErrorKind::ZeroMassInput: return "ZeroMassInput";
    case ErrorKind::EmptyGroundTruth: return "EmptyGroundTruth";
    case ErrorKind::TimestepOutOfRange: return "TimestepOutOfRange";
    case ErrorKind::TimestepOrder: return "TimestepOrder";
    case ErrorKind::NonFiniteNoise: return "NonFiniteNoise";
    case ErrorKind::DegenerateAlphaBar: return "DegenerateAlphaBar";
    case ErrorKind::ShapeMismatch: return "ShapeMismatch";
    case ErrorKind::MissingDescriptors: return "MissingDescriptors";
    case ErrorKind::MissingForwardCache: return "MissingForwardCache";
    case ErrorKind::InfeasibleOverlap: return "InfeasibleOverlap";
    case ErrorKind::LengthMismatch: return "LengthMismatch";
    case ErrorKind::EmptyDataset: return "EmptyDataset";
    case ErrorKind::Io: return "Io";
    case ErrorKind::Format: return "Format";
  }
  return "Unknown";
}

void PointCloud::validate() const {
  if (!points.allFinite()) throw Error(ErrorKind::InvalidArgument, "point cloud has non-finite coordinates");
  if (descriptors.cols() > 0 && descriptors.rows() != points.rows()) {
    throw Error(ErrorKind::InvalidArgument, "descriptor count " + std::to_string(descriptors.rows()) +
                                                " != point count " + std::to_string(points.rows()));
  }
}

RigidTransform RigidTransform::inverse() const {
  RigidTransform inv;
  inv.rotation = rotation.transpose();
  inv.translation = -(inv.rotation * translation);
  return inv;
}

RigidTransform RigidTransform::compose(const RigidTransform& other) const {
  RigidTransform out;
  out.rotation = rotation * other.rotation;
  out.translation = rotation * other.translation + translation;
  return out;
}

bool RigidTransform::is_valid(double tol) const {
  if (!rotation.allFinite() || !translation.allFinite()) return false;
  const Eigen::Matrix3d gram = rotation.transpose() * rotation - Eigen::Matrix3d::Identity();
  return gram.cwiseAbs().maxCoeff() <= tol && std::abs(rotation.determinant() - 1.0) <= tol;
}

namespace {

// Shared tail of both Procrustes entry points: H is the weighted
// cross-covariance of centred points, Σ w (p − p̄)(q − q̄)ᵀ.
RigidTransform solve_kabsch(const Eigen::Matrix3d& cross_cov, const Eigen::Vector3d& source_centroid,
                            const Eigen::Vector3d& target_centroid) {
  if (!cross_cov.allFinite()) throw Error(ErrorKind::NonFiniteInput, "non-finite cross-covariance");
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(cross_cov, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Eigen::Vector3d sv = svd.singularValues();
  if (!(sv(0) > 0.0) || sv(1) < 1e-12 * sv(0)) {
    throw Error(ErrorKind::DegenerateConfiguration, "weighted points are collinear or coincident");
  }
  const Eigen::Matrix3d& u = svd.matrixU();
  const Eigen::Matrix3d& v = svd.matrixV();
  Eigen::Matrix3d correction = Eigen::Matrix3d::Identity();
  correction(2, 2) = (v * u.transpose()).determinant() < 0.0 ? -1.0 : 1.0;

  RigidTransform out;
  out.rotation = v * correction * u.transpose();
  out.translation = target_centroid - out.rotation * source_centroid;
  return out;
}

}  // namespace

RigidTransform weighted_svd(const PointCloud& source, const PointCloud& target,
                            std::span<const WeightedPair> correspondences) {
  if (correspondences.size() < 3) {
    throw Error(ErrorKind::InvalidArgument, "weighted_svd needs at least 3 correspondences");
  }
  double total = 0.0;
  Eigen::Vector3d src_c = Eigen::Vector3d::Zero();
  Eigen::Vector3d tgt_c = Eigen::Vector3d::Zero();
  for (const auto& c : correspondences) {
    if (!std::isfinite(c.weight) || c.weight < 0.0) {
      throw Error(ErrorKind::InvalidWeights, "weight " + std::to_string(c.weight));
    }
    if (c.source >= source.size() || c.target >= target.size()) {
      throw Error(ErrorKind::InvalidArgument, "correspondence index out of range");
    }
    total += c.weight;
    src_c += c.weight * source.point(c.source);
    tgt_c += c.weight * target.point(c.target);
  }
  if (!(total > 0.0)) throw Error(ErrorKind::InvalidWeights, "total weight is zero");
  src_c /= total;
  tgt_c /= total;

  Eigen::Matrix3d h = Eigen::Matrix3d::Zero();
  for (const auto& c : correspondences) {
    h += c.weight * (source.point(c.source) - src_c) * (target.point(c.target) - tgt_c).transpose();
  }
  return solve_kabsch(h, src_c, tgt_c);
}

RigidTransform weighted_svd_dense(const Points& source, const Points& target, const Eigen::MatrixXd& weights) {
  if (weights.rows() != source.rows() || weights.cols() != target.rows()) {
    throw Error(ErrorKind::ShapeMismatch, "weight matrix does not match cloud sizes");
  }
  if (!weights.allFinite() || (weights.array() < 0.0).any()) {
    throw Error(ErrorKind::InvalidWeights, "weights must be finite and nonnegative");
  }
  const double total = weights.sum();
  if (!(total > 0.0)) throw Error(ErrorKind::InvalidWeights, "total weight is zero");

  const Eigen::VectorXd row_mass = weights.rowwise().sum();
  const Eigen::VectorXd col_mass = weights.colwise().sum().transpose();
  const Eigen::Vector3d src_c = (source.transpose() * row_mass) / total;
  const Eigen::Vector3d tgt_c = (target.transpose() * col_mass) / total;

  const Points src_centred = source.rowwise() - src_c.transpose();
  const Points tgt_centred = target.rowwise() - tgt_c.transpose();
  const Eigen::Matrix3d h = src_centred.transpose() * weights * tgt_centred;
  return solve_kabsch(h, src_c, tgt_c);
}

Points warp_points(const Points& points, const RigidTransform& transform) {
  Points out = points * transform.rotation.transpose();
  out.rowwise() += transform.translation.transpose();
  return out;
}

PointCloud warp_rigid(const PointCloud& cloud, const RigidTransform& transform) {
  return PointCloud(warp_points(cloud.points, transform), cloud.descriptors);
}

std::vector<std::vector<std::size_t>> knn(const Points& query, const Points& reference, std::size_t k) {
  const auto n_ref = static_cast<std::size_t>(reference.rows());
  if (k > n_ref) {
    throw Error(ErrorKind::KTooLarge, "k=" + std::to_string(k) + " exceeds reference size " + std::to_string(n_ref));
  }
  std::vector<std::vector<std::size_t>> result(static_cast<std::size_t>(query.rows()));
  std::vector<std::size_t> order(n_ref);
  std::vector<double> dist(n_ref);
  for (Eigen::Index q = 0; q < query.rows(); ++q) {
    for (std::size_t r = 0; r < n_ref; ++r) {
      dist[r] = (reference.row(static_cast<Eigen::Index>(r)) - query.row(q)).squaredNorm();
    }
    std::iota(order.begin(), order.end(), std::size_t{0});
    const auto less = [&](std::size_t a, std::size_t b) { return dist[a] < dist[b] || (dist[a] == dist[b] && a < b); };
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(), less);
    result[static_cast<std::size_t>(q)].assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
  }
  return result;
}

FlowField interpolate_flow(const PointCloud& source, std::span<const FlowAnchor> anchors, std::size_t k) {
  if (anchors.empty()) throw Error(ErrorKind::EmptyAnchors, "interpolate_flow needs at least one anchor");
  if (k == 0) throw Error(ErrorKind::InvalidArgument, "k must be >= 1");

  Points anchor_points(static_cast<Eigen::Index>(anchors.size()), 3);
  for (std::size_t a = 0; a < anchors.size(); ++a) {
    if (anchors[a].source_index >= source.size()) {
      throw Error(ErrorKind::InvalidArgument, "anchor index out of range");
    }
    anchor_points.row(static_cast<Eigen::Index>(a)) = source.points.row(static_cast<Eigen::Index>(anchors[a].source_index));
  }
  const std::size_t kk = std::min(k, anchors.size());
  const auto neighbours = knn(source.points, anchor_points, kk);

  FlowField flow(source.points.rows(), 3);
  for (Eigen::Index i = 0; i < source.points.rows(); ++i) {
    const auto& nb = neighbours[static_cast<std::size_t>(i)];
    const double nearest = (anchor_points.row(static_cast<Eigen::Index>(nb.front())) - source.points.row(i)).norm();
    if (nearest == 0.0) {
      flow.row(i) = anchors[nb.front()].displacement.transpose();
      continue;
    }
    Eigen::Vector3d acc = Eigen::Vector3d::Zero();
    double wsum = 0.0;
    for (std::size_t a : nb) {
      const double d = (anchor_points.row(static_cast<Eigen::Index>(a)) - source.points.row(i)).norm();
      const double w = 1.0 / (kInterpolationEpsilon + d);
      acc += w * anchors[a].displacement;
      wsum += w;
    }
    flow.row(i) = (acc / wsum).transpose();
  }
  return flow;
}

double diameter(const Points& points) {
  double best = 0.0;
  for (Eigen::Index i = 0; i < points.rows(); ++i) {
    for (Eigen::Index j = i + 1; j < points.rows(); ++j) {
      best = std::max(best, (points.row(i) - points.row(j)).squaredNorm());
    }
  }
  return std::sqrt(best);
}

Eigen::Matrix3d rotation_about_axis(const Eigen::Vector3d& axis, double angle_rad) {
  return Eigen::AngleAxisd(angle_rad, axis.normalized()).toRotationMatrix();
}

}  // namespace diffreg
