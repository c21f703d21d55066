#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <span>
#include <vector>

namespace diffreg {

using Points = Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>;
using Descriptors = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Ordered 3D points (meters), one row per point, with optional per-point
/// descriptors (one row per point, zero columns when absent).
struct PointCloud {
  Points points;
  Descriptors descriptors;

  PointCloud() = default;
  explicit PointCloud(Points pts) : points(std::move(pts)) {}
  PointCloud(Points pts, Descriptors desc) : points(std::move(pts)), descriptors(std::move(desc)) {}

  [[nodiscard]] std::size_t size() const { return static_cast<std::size_t>(points.rows()); }
  [[nodiscard]] bool has_descriptors() const { return descriptors.cols() > 0 && descriptors.rows() > 0; }
  [[nodiscard]] std::size_t descriptor_dim() const { return static_cast<std::size_t>(descriptors.cols()); }
  [[nodiscard]] Eigen::Vector3d point(std::size_t i) const {
    return points.row(static_cast<Eigen::Index>(i)).transpose();
  }

  /// Throws InvalidArgument if coordinates are non-finite or descriptors are inconsistent.
  void validate() const;
};

struct RigidTransform {
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();

  static RigidTransform identity() { return {}; }

  [[nodiscard]] Eigen::Vector3d apply(const Eigen::Vector3d& p) const { return rotation * p + translation; }
  [[nodiscard]] RigidTransform inverse() const;
  /// (*this) ∘ other: apply `other` first.
  [[nodiscard]] RigidTransform compose(const RigidTransform& other) const;
  /// RᵀR = I and det R = +1 within `tol`.
  [[nodiscard]] bool is_valid(double tol = 1e-9) const;
};

/// Per-point displacement (meters) of a source cloud.
using FlowField = Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>;

struct WeightedPair {
  std::size_t source;
  std::size_t target;
  double weight;
};

/// Closed-form weighted rigid alignment (weighted Kabsch). Minimizes
/// Σ w ‖R p_i + t − q_j‖² over SE(3).
///
/// Throws InvalidWeights for negative/non-finite weights or zero total weight,
/// InvalidArgument for fewer than 3 pairs or out-of-range indices, and
/// DegenerateConfiguration when the two smallest singular values of the
/// weighted cross-covariance fall below 1e-12 times the largest.
RigidTransform weighted_svd(const PointCloud& source, const PointCloud& target,
                            std::span<const WeightedPair> correspondences);

/// Dense variant: every (i, j) cell of `weights` (N×M) is a correspondence.
RigidTransform weighted_svd_dense(const Points& source, const Points& target, const Eigen::MatrixXd& weights);

PointCloud warp_rigid(const PointCloud& cloud, const RigidTransform& transform);
Points warp_points(const Points& points, const RigidTransform& transform);

struct FlowAnchor {
  std::size_t source_index;
  Eigen::Vector3d displacement;
};

inline constexpr double kInterpolationEpsilon = 1e-8;

/// Inverse-distance weighted mean of the k nearest anchors' displacements.
/// k is clamped to the anchor count. Throws EmptyAnchors.
FlowField interpolate_flow(const PointCloud& source, std::span<const FlowAnchor> anchors, std::size_t k);

/// Exact k-nearest neighbours of every query point among `reference`, ties by
/// smaller index. Throws KTooLarge when k exceeds the reference size.
std::vector<std::vector<std::size_t>> knn(const Points& query, const Points& reference, std::size_t k);

/// Largest pairwise distance.
double diameter(const Points& points);

Eigen::Matrix3d rotation_about_axis(const Eigen::Vector3d& axis, double angle_rad);

}  // namespace diffreg
