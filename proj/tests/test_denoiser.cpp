#include "diffreg/denoiser.hpp"
#include "diffreg/error.hpp"
#include "diffreg/metrics.hpp"
#include "diffreg/registration.hpp"

#include "doctest.h"
#include "support.hpp"

using namespace diffreg;
using namespace diffreg::testing;

namespace {

GeneratorSpec clean_spec(std::size_t n, std::uint64_t seed) {
  GeneratorSpec spec;
  spec.n_points = n;
  spec.overlap_fraction = 1.0;
  spec.noise_sigma = 0.0;
  spec.descriptor_kind = DescriptorKind::Oracle;
  spec.descriptor_dim = 16;
  spec.seed = seed;
  return spec;
}

std::shared_ptr<const FeatureNetwork> analytic() { return std::make_shared<AnalyticFeatureNet>(); }

}  // namespace

TEST_SUITE("denoiser") {
  TEST_CASE("analytic logits reproduce the fused kernel exactly") {
    Rng rng(50);
    const Points p = random_points(7, rng);
    const Points q = random_points(5, rng);
    const Descriptors fp = random_unit_rows(7, 6, rng);
    const Descriptors fq = random_unit_rows(5, 6, rng);
    const double sigma = 0.3;
    const double lambda = 10.0;
    const Eigen::MatrixXd logits = matching_logits(analytic_feature_net(p, q, fp, fq, sigma, lambda));
    for (Eigen::Index i = 0; i < 7; ++i) {
      for (Eigen::Index j = 0; j < 5; ++j) {
        const double expected = -(p.row(i) - q.row(j)).squaredNorm() / (2.0 * sigma * sigma) + lambda * fp.row(i).dot(fq.row(j));
        REQUIRE(logits(i, j) == doctest::Approx(expected).epsilon(1e-10));
      }
    }
  }

  TEST_CASE("position kernel dominates at ten bandwidths") {
    Points p(1, 3);
    p << 0, 0, 0;
    Points q(2, 3);
    const double sigma = 0.05;
    q << 0, 0, 0, 10 * sigma, 0, 0;
    Descriptors d = Descriptors::Ones(1, 4);
    Descriptors dq = Descriptors::Ones(2, 4);
    const Eigen::MatrixXd logits = matching_logits(analytic_feature_net(p, q, d, dq, sigma));
    CHECK(logits(0, 0) - logits(0, 1) > 10.0);
  }

  TEST_CASE("identical descriptors reduce matching to nearest neighbours") {
    Rng rng(51);
    const Points p = random_points(64, rng);
    const Points q = random_points(64, rng);
    const Descriptors same = Descriptors::Ones(64, 3);
    const Eigen::MatrixXd logits = matching_logits(analytic_feature_net(p, q, same, same, 0.1));
    const auto nn = knn(p, q, 1);
    std::size_t agree = 0;
    for (Eigen::Index i = 0; i < 64; ++i) {
      Eigen::Index j = 0;
      logits.row(i).maxCoeff(&j);
      if (static_cast<std::size_t>(j) == nn[static_cast<std::size_t>(i)][0]) ++agree;
    }
    CHECK(agree == 64);
  }

  TEST_CASE("orthogonal descriptor groups contribute nothing across groups") {
    Rng rng(52);
    const Points p = random_points(6, rng);
    const Points q = random_points(6, rng);
    Descriptors fp = Descriptors::Zero(6, 4);
    Descriptors fq = Descriptors::Zero(6, 4);
    for (Eigen::Index i = 0; i < 6; ++i) {
      fp(i, i < 3 ? 0 : 2) = 1.0;
      fq(i, i < 3 ? 0 : 2) = 1.0;
    }
    const double sigma = 0.4;
    const Eigen::MatrixXd logits = matching_logits(analytic_feature_net(p, q, fp, fq, sigma));
    for (Eigen::Index i = 0; i < 6; ++i) {
      for (Eigen::Index j = 0; j < 6; ++j) {
        const double position = -(p.row(i) - q.row(j)).squaredNorm() / (2.0 * sigma * sigma);
        const double descriptor = (i < 3) == (j < 3) ? 10.0 : 0.0;
        REQUIRE(std::abs(logits(i, j) - position - descriptor) < 1e-10);
      }
    }
  }

  TEST_CASE("clean ground truth is a fixed point of the analytic denoiser") {
    const ScenePair pair = generate_scene(clean_spec(64, 3));
    const MatchMatrix e0 = ground_truth_matrix(pair);
    const GThetaTrace tr = g_theta(e0, pair, AnalyticFeatureNet(), GThetaConfig{});
    const auto am = row_argmax(tr.output);
    for (const auto& gt : pair.gt_pairs) CHECK(am[gt.source] == gt.target);
    CHECK(argmax_agreement(tr.output, e0) == 1.0);
  }

  TEST_CASE("uniform input on an identity pair matches by descriptor") {
    Rng rng(53);
    const Points p = random_points(20, rng);
    const ScenePair pair = rigid_pair(p, RigidTransform::identity(), random_unit_rows(20, 8, rng));
    for (auto mode : {ProcrustesWeights::AllCells, ProcrustesWeights::TopK}) {
      GThetaConfig cfg;
      cfg.procrustes = mode;
      const GThetaTrace tr = g_theta(MatchMatrix::uniform(20, 20), pair, AnalyticFeatureNet(), cfg);
      const auto am = row_argmax(tr.output);
      for (std::size_t i = 0; i < 20; ++i) CHECK(am[i] == i);
    }
  }

  TEST_CASE("coincident source points fall back to the identity pose") {
    Rng rng(54);
    ScenePair pair = rigid_pair(random_points(8, rng), RigidTransform::identity(), random_unit_rows(8, 4, rng));
    pair.source.points.rowwise() = Eigen::RowVector3d(0.1, 0.2, 0.3);
    const GThetaTrace tr = g_theta(MatchMatrix(random_positive(8, 8, rng)), pair, AnalyticFeatureNet(), GThetaConfig{});
    CHECK(tr.pose_fallback);
    CHECK(tr.transform.rotation == Eigen::Matrix3d::Identity());
    CHECK(tr.transform.translation == Eigen::Vector3d::Zero());
    const MatrixStats s = matrix_stats(tr.output);
    CHECK(s.min_entry >= 0.0);
    CHECK(s.row_sum_max_deviation < 1e-6);
  }

  TEST_CASE("missing descriptors are rejected") {
    Rng rng(55);
    const ScenePair pair = rigid_pair(random_points(8, rng), RigidTransform::identity());
    try {
      (void)g_theta(MatchMatrix::uniform(8, 8), pair, AnalyticFeatureNet(), GThetaConfig{});
      FAIL("pair without descriptors accepted");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::MissingDescriptors);
    }
  }

  TEST_CASE("g_theta output stays on the polytope for arbitrary finite input") {
    Rng rng(56);
    const ScenePair pair = generate_scene(clean_spec(32, 4));
    const GThetaDenoiser den(analytic());
    for (int trial = 0; trial < 100; ++trial) {
      Eigen::MatrixXd raw = gaussian_matrix(32, 32, rng) * uniform(rng, 0.01, 100.0);
      const MatrixStats s = matrix_stats(den.predict(MatchMatrix(raw), pair));
      REQUIRE(s.min_entry >= 0.0);
      REQUIRE(s.row_sum_max_deviation < 1e-6);
      REQUIRE(std::abs(s.mass - 1.0) < 1e-9);
    }
  }

  TEST_CASE("g_theta ignores the scale of its input") {
    Rng rng(57);
    const ScenePair pair = generate_scene(clean_spec(32, 5));
    const GThetaDenoiser den(analytic());
    for (int trial = 0; trial < 10; ++trial) {
      const MatchMatrix et(random_positive(32, 32, rng));
      const MatchMatrix base = den.predict(et, pair);
      for (double c : {0.1, 10.0}) {
        const MatchMatrix scaled = den.predict(MatchMatrix(Eigen::MatrixXd(c * et.entries)), pair);
        REQUIRE((scaled.entries - base.entries).cwiseAbs().maxCoeff() < 1e-6);
      }
    }
  }

  TEST_CASE("predict is deterministic") {
    Rng rng(58);
    const ScenePair pair = generate_scene(clean_spec(32, 6));
    const GThetaDenoiser den(analytic());
    const MatchMatrix et(random_positive(32, 32, rng));
    CHECK(den.predict(et, pair).entries == den.predict(et, pair).entries);
  }

  TEST_CASE("analytic sampling registers a clean full-overlap pair") {
    const ScenePair pair = generate_scene(clean_spec(128, 7));
    DiffusionConfig cfg;
    cfg.inference_steps = 20;
    Rng rng(11);
    const GThetaDenoiser den(analytic());
    const Registration reg = register_pair(WhiteNoise{}, den, pair, cfg, GThetaConfig{}, ExtractionConfig{}, rng);
    CHECK(inlier_ratio(reg.correspondences, pair, 0.05 * pair.scene_diameter).value >= 0.95);
    CHECK(reg.sample.denoiser_calls == 20);
  }

  TEST_CASE("starting at the solution keeps every correspondence correct") {
    const ScenePair pair = generate_scene(clean_spec(64, 8));
    DiffusionConfig cfg;
    Rng rng(12);
    const GThetaDenoiser den(analytic());
    const Registration reg =
        register_pair(ground_truth_matrix(pair), den, pair, cfg, GThetaConfig{}, ExtractionConfig{}, rng);
    CHECK(inlier_ratio(reg.correspondences, pair, 0.04 * pair.scene_diameter).value == 1.0);
  }

  TEST_CASE("gated extraction drops cells inconsistent with the recovered pose") {
    const ScenePair pair = generate_scene(clean_spec(32, 9));
    MatchMatrix e0 = ground_truth_matrix(pair, 0);
    // Swap two targets so their cells contradict the rigid motion.
    const auto a = pair.gt_pairs[0];
    const auto b = pair.gt_pairs[1];
    e0.entries(static_cast<Eigen::Index>(a.source), static_cast<Eigen::Index>(a.target)) = 0.0;
    e0.entries(static_cast<Eigen::Index>(b.source), static_cast<Eigen::Index>(b.target)) = 0.0;
    e0.entries(static_cast<Eigen::Index>(a.source), static_cast<Eigen::Index>(b.target)) = 1.0 / 32.0;
    e0.entries(static_cast<Eigen::Index>(b.source), static_cast<Eigen::Index>(a.target)) = 1.0 / 32.0;
    const GThetaTrace pose = g_theta_pose_stage(e0, pair, GThetaConfig{});
    const Correspondences gated = extract_correspondences(e0, pair, pose, ExtractionConfig{});
    ExtractionConfig open;
    open.gate_factor = 0.0;
    const Correspondences all = extract_correspondences(e0, pair, pose, open);
    CHECK(all.size() == 32);
    CHECK(gated.size() == 30);
    CHECK(inlier_ratio(gated, pair, 1e-6).value == 1.0);
  }
}
