#pragma once

#include "diffreg/geometry.hpp"
#include "diffreg/matrixspace.hpp"
#include "diffreg/random.hpp"
#include "diffreg/scene.hpp"

#include <Eigen/Geometry>

#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

namespace diffreg::testing {

inline double uniform(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

inline Points random_points(std::size_t n, Rng& rng, double half_extent = 1.0) {
  Points p(static_cast<Eigen::Index>(n), 3);
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    for (int c = 0; c < 3; ++c) p(i, c) = uniform(rng, -half_extent, half_extent);
  }
  return p;
}

/// Uniform over SO(3): normalized Gaussian quaternion.
inline Eigen::Matrix3d random_rotation(Rng& rng) {
  std::normal_distribution<double> g;
  Eigen::Quaterniond q(g(rng), g(rng), g(rng), g(rng));
  q.normalize();
  return q.toRotationMatrix();
}

inline RigidTransform random_transform(Rng& rng, double translation = 1.0) {
  RigidTransform t;
  t.rotation = random_rotation(rng);
  for (int c = 0; c < 3; ++c) t.translation(c) = uniform(rng, -translation, translation);
  return t;
}

inline Eigen::MatrixXd random_positive(Eigen::Index rows, Eigen::Index cols, Rng& rng, double lo = 0.01,
                                       double hi = 1.0) {
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = uniform(rng, lo, hi);
  }
  return m;
}

inline Descriptors random_unit_rows(std::size_t n, std::size_t d, Rng& rng) {
  std::normal_distribution<double> g;
  Descriptors out(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    for (Eigen::Index c = 0; c < out.cols(); ++c) out(i, c) = g(rng);
    out.row(i).normalize();
  }
  return out;
}

inline std::vector<std::size_t> random_permutation(std::size_t n, Rng& rng) {
  std::vector<std::size_t> p(n);
  for (std::size_t i = 0; i < n; ++i) p[i] = i;
  std::shuffle(p.begin(), p.end(), rng);
  return p;
}

/// Rigid pair with target row j = transform(source row j), identity pairing
/// and shared descriptors; sizes below the generator's minimum are allowed.
inline ScenePair rigid_pair(const Points& source, const RigidTransform& gt, const Descriptors& desc = {}) {
  ScenePair pair;
  pair.source = PointCloud(source, desc);
  pair.target = PointCloud(warp_points(source, gt), desc);
  pair.mode = DiffusionMode::Rigid;
  pair.gt_transform = gt;
  pair.gt_flow = pair.target.points - pair.source.points;
  for (std::size_t i = 0; i < pair.source.size(); ++i) pair.gt_pairs.push_back({i, i});
  pair.overlap_mask_source.assign(pair.source.size(), true);
  pair.scene_diameter = diameter(source);
  pair.achieved_overlap = 1.0;
  return pair;
}

/// Deformable pair: target = source + flow, identity pairing.
inline ScenePair deformable_pair(const Points& source, const FlowField& flow) {
  ScenePair pair;
  pair.source = PointCloud(source);
  pair.target = PointCloud(Points(source + flow));
  pair.mode = DiffusionMode::Deformable;
  pair.gt_flow = flow;
  for (std::size_t i = 0; i < pair.source.size(); ++i) pair.gt_pairs.push_back({i, i});
  pair.overlap_mask_source.assign(pair.source.size(), true);
  pair.scene_diameter = diameter(source);
  pair.achieved_overlap = 1.0;
  return pair;
}

/// Unique scratch directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("diffreg_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  [[nodiscard]] const std::filesystem::path& path() const { return path_; }
  [[nodiscard]] std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace diffreg::testing
