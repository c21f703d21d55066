#include "diffreg/error.hpp"
#include "diffreg/geometry.hpp"
#include "diffreg/point_io.hpp"

#include "doctest.h"
#include "support.hpp"

#include <numbers>

using namespace diffreg;
using namespace diffreg::testing;

namespace {

std::vector<WeightedPair> identity_pairs(std::size_t n, double w = 1.0) {
  std::vector<WeightedPair> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back({i, i, w});
  return out;
}

double objective(const Points& p, const Points& q, std::span<const WeightedPair> pairs, const RigidTransform& t) {
  double s = 0.0;
  for (const auto& c : pairs) {
    const Eigen::Vector3d r = t.apply(p.row(static_cast<Eigen::Index>(c.source)).transpose()) -
                              q.row(static_cast<Eigen::Index>(c.target)).transpose();
    s += c.weight * r.squaredNorm();
  }
  return s;
}

double rotation_angle_deg(const Eigen::Matrix3d& a, const Eigen::Matrix3d& b) {
  const double c = std::clamp(((a.transpose() * b).trace() - 1.0) / 2.0, -1.0, 1.0);
  return std::acos(c) * 180.0 / std::numbers::pi;
}

}  // namespace

TEST_SUITE("geometry") {
  TEST_CASE("weighted_svd recovers identity on identical clouds") {
    Rng rng(1);
    const PointCloud a(random_points(10, rng));
    const auto pairs = identity_pairs(10);
    const RigidTransform t = weighted_svd(a, a, pairs);
    CHECK((t.rotation - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() < 1e-9);
    CHECK(t.translation.norm() < 1e-9);
  }

  TEST_CASE("weighted_svd recovers a 30 degree z rotation with offset") {
    Rng rng(2);
    RigidTransform gt;
    gt.rotation = rotation_about_axis(Eigen::Vector3d::UnitZ(), std::numbers::pi / 6.0);
    gt.translation = Eigen::Vector3d(0.1, 0.0, 0.0);
    const PointCloud src(random_points(10, rng));
    const PointCloud tgt = warp_rigid(src, gt);
    const RigidTransform t = weighted_svd(src, tgt, identity_pairs(10));
    CHECK((t.rotation - gt.rotation).cwiseAbs().maxCoeff() < 1e-6);
    CHECK((t.translation - gt.translation).norm() < 1e-6);
  }

  TEST_CASE("weighted_svd recovers a pose from four coplanar points") {
    Points p(4, 3);
    p << 0, 0, 0, 1, 0, 0, 0, 1, 0, 1, 1, 0;
    RigidTransform gt;
    gt.rotation = rotation_about_axis(Eigen::Vector3d(1, 2, 3), 0.7);
    gt.translation = Eigen::Vector3d(-0.3, 0.2, 0.5);
    const PointCloud src(p);
    const RigidTransform t = weighted_svd(src, warp_rigid(src, gt), identity_pairs(4));
    CHECK((t.rotation - gt.rotation).cwiseAbs().maxCoeff() < 1e-6);
    CHECK((t.translation - gt.translation).norm() < 1e-6);
  }

  TEST_CASE("weighted_svd always returns a proper rotation") {
    Rng rng(3);
    for (int trial = 0; trial < 1000; ++trial) {
      const std::size_t n = 3 + static_cast<std::size_t>(trial % 8);
      const PointCloud src(random_points(n, rng));
      const PointCloud tgt(random_points(n, rng));
      const auto perm = random_permutation(n, rng);
      std::vector<WeightedPair> pairs;
      for (std::size_t i = 0; i < n; ++i) pairs.push_back({i, perm[i], uniform(rng, 0.1, 2.0)});
      const RigidTransform t = weighted_svd(src, tgt, pairs);
      REQUIRE(t.is_valid(1e-9));
    }
  }

  TEST_CASE("weighted_svd is optimal against random perturbations") {
    Rng rng(4);
    for (int trial = 0; trial < 50; ++trial) {
      const std::size_t n = 3 + static_cast<std::size_t>(trial % 4);
      const PointCloud src(random_points(n, rng));
      const PointCloud tgt(random_points(n, rng));
      std::vector<WeightedPair> pairs;
      for (std::size_t i = 0; i < n; ++i) pairs.push_back({i, i, uniform(rng, 0.1, 2.0)});
      const RigidTransform best = weighted_svd(src, tgt, pairs);
      const double f_best = objective(src.points, tgt.points, pairs, best);
      for (int k = 0; k < 100; ++k) {
        RigidTransform other;
        other.rotation = rotation_about_axis(random_rotation(rng).col(0), uniform(rng, -0.3, 0.3)) * best.rotation;
        other.translation = best.translation + Eigen::Vector3d(uniform(rng, -0.1, 0.1), uniform(rng, -0.1, 0.1),
                                                               uniform(rng, -0.1, 0.1));
        REQUIRE(f_best <= objective(src.points, tgt.points, pairs, other) + 1e-12);
      }
    }
  }

  TEST_CASE("weighted_svd is invariant to uniform weight scaling") {
    Rng rng(5);
    for (int trial = 0; trial < 100; ++trial) {
      const PointCloud src(random_points(12, rng));
      const PointCloud tgt(random_points(12, rng));
      std::vector<WeightedPair> pairs;
      for (std::size_t i = 0; i < 12; ++i) pairs.push_back({i, i, uniform(rng, 0.1, 2.0)});
      auto scaled = pairs;
      const double c = uniform(rng, 0.01, 100.0);
      for (auto& w : scaled) w.weight *= c;
      const RigidTransform a = weighted_svd(src, tgt, pairs);
      const RigidTransform b = weighted_svd(src, tgt, scaled);
      REQUIRE((a.rotation - b.rotation).cwiseAbs().maxCoeff() < 1e-9);
      REQUIRE((a.translation - b.translation).norm() < 1e-9);
    }
  }

  TEST_CASE("weighted_svd rejects bad inputs") {
    Rng rng(6);
    const PointCloud src(random_points(5, rng));
    auto pairs = identity_pairs(5);
    pairs[2].weight = -1.0;
    CHECK_THROWS_AS(weighted_svd(src, src, pairs), Error);
    try {
      (void)weighted_svd(src, src, pairs);
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::InvalidWeights);
    }
    pairs = identity_pairs(5, 0.0);
    try {
      (void)weighted_svd(src, src, pairs);
      FAIL("zero total weight accepted");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::InvalidWeights);
    }
    Points line(5, 3);
    for (int i = 0; i < 5; ++i) line.row(i) = Eigen::RowVector3d(i, 2.0 * i, -i);
    try {
      (void)weighted_svd(PointCloud(line), PointCloud(line), identity_pairs(5));
      FAIL("collinear configuration accepted");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::DegenerateConfiguration);
    }
  }

  TEST_CASE("dense weighted_svd matches the sparse form") {
    Rng rng(7);
    const Points src = random_points(6, rng);
    const Points tgt = random_points(5, rng);
    const Eigen::MatrixXd w = random_positive(6, 5, rng);
    std::vector<WeightedPair> pairs;
    for (std::size_t i = 0; i < 6; ++i) {
      for (std::size_t j = 0; j < 5; ++j) pairs.push_back({i, j, w(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j))});
    }
    const RigidTransform a = weighted_svd_dense(src, tgt, w);
    const RigidTransform b = weighted_svd(PointCloud(src), PointCloud(tgt), pairs);
    CHECK((a.rotation - b.rotation).cwiseAbs().maxCoeff() < 1e-10);
    CHECK((a.translation - b.translation).norm() < 1e-10);
  }

  TEST_CASE("warp_rigid identity, inverse and analytic rotation") {
    Rng rng(8);
    const PointCloud cloud(random_points(20, rng), random_unit_rows(20, 4, rng));
    const PointCloud same = warp_rigid(cloud, RigidTransform::identity());
    CHECK(same.points == cloud.points);
    CHECK(same.descriptors == cloud.descriptors);

    const RigidTransform t = random_transform(rng);
    const PointCloud back = warp_rigid(warp_rigid(cloud, t), t.inverse());
    CHECK((back.points - cloud.points).cwiseAbs().maxCoeff() < 1e-12);

    Points one(1, 3);
    one << 1, 0, 0;
    RigidTransform rz;
    rz.rotation = rotation_about_axis(Eigen::Vector3d::UnitZ(), std::numbers::pi / 2.0);
    const Points r = warp_points(one, rz);
    CHECK((r.row(0) - Eigen::RowVector3d(0, 1, 0)).norm() < 1e-12);
  }

  TEST_CASE("warp_rigid preserves pairwise distances") {
    Rng rng(9);
    for (int trial = 0; trial < 50; ++trial) {
      const Points p = random_points(15, rng);
      const Points q = warp_points(p, random_transform(rng, 5.0));
      for (Eigen::Index i = 0; i < p.rows(); ++i) {
        for (Eigen::Index j = i + 1; j < p.rows(); ++j) {
          REQUIRE(std::abs((p.row(i) - p.row(j)).norm() - (q.row(i) - q.row(j)).norm()) < 1e-9);
        }
      }
    }
  }

  TEST_CASE("compose and inverse follow group laws") {
    Rng rng(10);
    const RigidTransform a = random_transform(rng);
    const RigidTransform b = random_transform(rng);
    const Eigen::Vector3d p(0.3, -0.2, 0.9);
    CHECK((a.compose(b).apply(p) - a.apply(b.apply(p))).norm() < 1e-12);
    CHECK((a.compose(a.inverse()).apply(p) - p).norm() < 1e-12);
    CHECK(a.is_valid());
  }

  TEST_CASE("interpolate_flow reproduces anchors with k = 1") {
    Rng rng(11);
    const PointCloud src(random_points(30, rng));
    std::vector<FlowAnchor> anchors;
    for (std::size_t i = 0; i < 30; ++i) anchors.push_back({i, random_points(1, rng).row(0).transpose()});
    const FlowField f = interpolate_flow(src, anchors, 1);
    for (std::size_t i = 0; i < 30; ++i) {
      CHECK(f.row(static_cast<Eigen::Index>(i)).transpose() == anchors[i].displacement);
    }
  }

  TEST_CASE("interpolate_flow keeps a constant field constant") {
    Rng rng(12);
    const PointCloud src(random_points(40, rng));
    const Eigen::Vector3d v(0.1, -0.4, 0.25);
    std::vector<FlowAnchor> anchors;
    for (std::size_t i = 0; i < 40; i += 3) anchors.push_back({i, v});
    const FlowField f = interpolate_flow(src, anchors, 3);
    for (Eigen::Index i = 0; i < f.rows(); ++i) CHECK((f.row(i).transpose() - v).norm() < 1e-12);
  }

  TEST_CASE("interpolate_flow averages two equidistant anchors") {
    Points p(3, 3);
    p << -1, 0, 0, 1, 0, 0, 0, 0.5, 0;
    const Eigen::Vector3d v1(1, 0, 0);
    const Eigen::Vector3d v2(0, 2, 0);
    const std::vector<FlowAnchor> anchors{{0, v1}, {1, v2}};
    const FlowField f = interpolate_flow(PointCloud(p), anchors, 2);
    CHECK((f.row(2).transpose() - (v1 + v2) / 2.0).norm() < 1e-12);
    CHECK_THROWS_AS(interpolate_flow(PointCloud(p), std::vector<FlowAnchor>{}, 1), Error);
  }

  TEST_CASE("knn matches an exhaustive scan") {
    Rng rng(13);
    const Points q = random_points(50, rng);
    const Points r = random_points(50, rng);
    const auto got = knn(q, r, 3);
    for (Eigen::Index i = 0; i < q.rows(); ++i) {
      std::vector<std::pair<double, std::size_t>> all;
      for (Eigen::Index j = 0; j < r.rows(); ++j) all.push_back({(q.row(i) - r.row(j)).norm(), static_cast<std::size_t>(j)});
      std::sort(all.begin(), all.end());
      for (std::size_t k = 0; k < 3; ++k) REQUIRE(got[static_cast<std::size_t>(i)][k] == all[k].second);
    }
  }

  TEST_CASE("knn self query and full ordering") {
    Rng rng(14);
    const Points p = random_points(12, rng);
    const auto self = knn(p, p, 1);
    for (std::size_t i = 0; i < 12; ++i) CHECK(self[i][0] == i);
    const auto full = knn(p, p, 12);
    for (std::size_t i = 0; i < 12; ++i) {
      auto sorted = full[i];
      std::sort(sorted.begin(), sorted.end());
      for (std::size_t k = 0; k < 12; ++k) CHECK(sorted[k] == k);
      for (std::size_t k = 1; k < 12; ++k) {
        CHECK((p.row(static_cast<Eigen::Index>(i)) - p.row(static_cast<Eigen::Index>(full[i][k - 1]))).norm() <=
              (p.row(static_cast<Eigen::Index>(i)) - p.row(static_cast<Eigen::Index>(full[i][k]))).norm());
      }
    }
    try {
      (void)knn(p, p, 13);
      FAIL("k beyond reference size accepted");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::KTooLarge);
    }
  }

  TEST_CASE("knn breaks ties by smaller index") {
    Points r(3, 3);
    r << 1, 0, 0, -1, 0, 0, 0, 1, 0;
    Points q(1, 3);
    q << 0, 0, 0;
    const auto got = knn(q, r, 3);
    CHECK(got[0] == std::vector<std::size_t>{0, 1, 2});
  }

  TEST_CASE("diameter and rotation helpers") {
    Points p(3, 3);
    p << 0, 0, 0, 3, 0, 0, 0, 4, 0;
    CHECK(diameter(p) == doctest::Approx(5.0).epsilon(1e-15));
    CHECK(rotation_angle_deg(rotation_about_axis(Eigen::Vector3d(0, 0, 2), 0.5), Eigen::Matrix3d::Identity()) ==
          doctest::Approx(0.5 * 180.0 / std::numbers::pi));
  }

  TEST_CASE("point cloud validation") {
    Points p(2, 3);
    p << 0, 0, 0, 1, std::nan(""), 0;
    CHECK_THROWS_AS(PointCloud(p).validate(), Error);
    Points ok(2, 3);
    ok.setZero();
    CHECK_THROWS_AS(PointCloud(ok, Descriptors::Ones(3, 2)).validate(), Error);
    CHECK_NOTHROW(PointCloud(ok, Descriptors::Ones(2, 2)).validate());
  }

  TEST_CASE("PLY and XYZ round trips") {
    Rng rng(15);
    const TempDir dir("geometry_io");
    const PointCloud cloud(random_points(17, rng), random_unit_rows(17, 5, rng));
    write_ply(dir / "c.ply", cloud);
    const PointCloud back = read_ply(dir / "c.ply");
    CHECK(back.points == cloud.points);
    CHECK(back.descriptors == cloud.descriptors);

    write_xyz(dir / "c.xyz", cloud);
    const PointCloud xyz = read_xyz(dir / "c.xyz");
    CHECK(xyz.points == cloud.points);
    CHECK_FALSE(xyz.has_descriptors());

    CHECK_THROWS_AS(read_ply(dir / "missing.ply"), Error);
    {
      std::ofstream bad(dir / "bad.ply");
      bad << "ply\nformat ascii 1.0\nelement vertex 2\nproperty double x\nend_header\n1\n";
    }
    CHECK_THROWS_AS(read_ply(dir / "bad.ply"), Error);
  }
}
