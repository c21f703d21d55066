#include "diffreg/scene.hpp"

#include "diffreg/error.hpp"
#include "diffreg/point_io.hpp"
#include "diffreg/random.hpp"

#include <Eigen/Eigenvalues>
#include <Eigen/Geometry>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>

namespace diffreg {

std::string to_string(DescriptorKind kind) {
  switch (kind) {
    case DescriptorKind::None: return "none";
    case DescriptorKind::Oracle: return "oracle";
    case DescriptorKind::LocalStatistics: return "local-statistics";
  }
  return "none";
}

DescriptorKind descriptor_kind_from_string(const std::string& s) {
  if (s == "none") return DescriptorKind::None;
  if (s == "oracle") return DescriptorKind::Oracle;
  if (s == "local-statistics") return DescriptorKind::LocalStatistics;
  throw Error(ErrorKind::InvalidArgument, "unknown descriptor kind '" + s + "'");
}

void GeneratorSpec::validate() const {
  if (n_points < 8) throw Error(ErrorKind::InvalidArgument, "n_points must be >= 8");
  if (!(overlap_fraction > 0.0 && overlap_fraction <= 1.0)) {
    throw Error(ErrorKind::InvalidArgument, "overlap_fraction must lie in (0, 1]");
  }
  if (!(noise_sigma >= 0.0) || !(deformation_amplitude >= 0.0) || !(translation_range >= 0.0)) {
    throw Error(ErrorKind::InvalidArgument, "noise, deformation and translation range must be >= 0");
  }
  if (!(descriptor_corruption >= 0.0 && descriptor_corruption <= 1.0)) {
    throw Error(ErrorKind::InvalidArgument, "descriptor_corruption must lie in [0, 1]");
  }
  if (descriptor_kind == DescriptorKind::Oracle && descriptor_dim < 1) {
    throw Error(ErrorKind::InvalidArgument, "descriptor_dim must be >= 1");
  }
}

nlohmann::json to_json(const GeneratorSpec& s) {
  return {{"n_points", s.n_points},
          {"overlap_fraction", s.overlap_fraction},
          {"noise_sigma", s.noise_sigma},
          {"noise_relative", s.noise_relative},
          {"mode", to_string(s.mode)},
          {"deformation_amplitude", s.deformation_amplitude},
          {"descriptor_kind", to_string(s.descriptor_kind)},
          {"descriptor_dim", s.descriptor_dim},
          {"descriptor_corruption", s.descriptor_corruption},
          {"translation_range", s.translation_range},
          {"force_identity", s.force_identity},
          {"shuffle", s.shuffle},
          {"seed", s.seed}};
}

GeneratorSpec generator_spec_from_json(const nlohmann::json& j, GeneratorSpec s) {
  try {
    s.n_points = j.value("n_points", s.n_points);
    s.overlap_fraction = j.value("overlap_fraction", s.overlap_fraction);
    s.noise_sigma = j.value("noise_sigma", s.noise_sigma);
    s.noise_relative = j.value("noise_relative", s.noise_relative);
    if (j.contains("mode")) s.mode = diffusion_mode_from_string(j.at("mode").get<std::string>());
    s.deformation_amplitude = j.value("deformation_amplitude", s.deformation_amplitude);
    if (j.contains("descriptor_kind")) s.descriptor_kind = descriptor_kind_from_string(j.at("descriptor_kind").get<std::string>());
    s.descriptor_dim = j.value("descriptor_dim", s.descriptor_dim);
    s.descriptor_corruption = j.value("descriptor_corruption", s.descriptor_corruption);
    s.translation_range = j.value("translation_range", s.translation_range);
    s.force_identity = j.value("force_identity", s.force_identity);
    s.shuffle = j.value("shuffle", s.shuffle);
    s.seed = j.value("seed", s.seed);
  } catch (const nlohmann::json::exception& ex) {
    throw Error(ErrorKind::InvalidArgument, std::string("generator spec: ") + ex.what());
  }
  return s;
}

Eigen::Vector3d ScenePair::warp_gt(std::size_t i) const {
  if (mode == DiffusionMode::Rigid) return gt_transform.apply(source.point(i));
  return source.point(i) + gt_flow.row(static_cast<Eigen::Index>(i)).transpose();
}

namespace {

double uniform(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

Eigen::Vector3d gaussian3(Rng& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  const double x = n(rng);
  const double y = n(rng);
  const double z = n(rng);
  return {x, y, z};
}

Eigen::Vector3d unit_vector(Rng& rng) {
  Eigen::Vector3d v;
  do {
    v = gaussian3(rng);
  } while (v.norm() < 1e-12);
  return v.normalized();
}

// Shoemake's uniform quaternion.
Eigen::Matrix3d uniform_rotation(Rng& rng) {
  const double u1 = uniform(rng, 0.0, 1.0);
  const double u2 = uniform(rng, 0.0, 1.0);
  const double u3 = uniform(rng, 0.0, 1.0);
  const double two_pi = 2.0 * std::numbers::pi;
  Eigen::Quaterniond q(std::sqrt(u1) * std::cos(two_pi * u3), std::sqrt(1.0 - u1) * std::sin(two_pi * u2),
                       std::sqrt(1.0 - u1) * std::cos(two_pi * u2), std::sqrt(u1) * std::sin(two_pi * u3));
  return q.normalized().toRotationMatrix();
}

// Mixture of planar patches, sphere shells and Gaussian clusters inside a 1 m box.
Points sample_primitives(std::size_t count, Rng& rng) {
  constexpr int kPrimitives = 4;
  std::vector<int> kinds(kPrimitives);
  for (auto& k : kinds) k = std::uniform_int_distribution<int>(0, 2)(rng);
  std::vector<Eigen::Vector3d> centres(kPrimitives);
  for (auto& c : centres) c = {uniform(rng, -0.3, 0.3), uniform(rng, -0.3, 0.3), uniform(rng, -0.3, 0.3)};
  std::vector<Eigen::Matrix3d> frames(kPrimitives);
  for (auto& f : frames) f = uniform_rotation(rng);
  std::vector<double> sizes(kPrimitives);
  for (auto& s : sizes) s = uniform(rng, 0.12, 0.25);

  Points pts(static_cast<Eigen::Index>(count), 3);
  for (std::size_t i = 0; i < count; ++i) {
    const auto p = static_cast<std::size_t>(i % kPrimitives);
    Eigen::Vector3d local;
    switch (kinds[p]) {
      case 0:
        local = {uniform(rng, -2.0, 2.0) * sizes[p], uniform(rng, -2.0, 2.0) * sizes[p], 0.0};
        break;
      case 1:
        local = unit_vector(rng) * sizes[p];
        break;
      default:
        local = gaussian3(rng) * 0.5 * sizes[p];
        break;
    }
    pts.row(static_cast<Eigen::Index>(i)) = (centres[p] + frames[p] * local).transpose();
  }
  return pts;
}

struct Deformation {
  std::vector<Eigen::Vector3d> freqs;
  std::vector<Eigen::Vector3d> amps;
  std::vector<double> phases;

  [[nodiscard]] Eigen::Vector3d operator()(const Eigen::Vector3d& x) const {
    Eigen::Vector3d d = Eigen::Vector3d::Zero();
    for (std::size_t k = 0; k < freqs.size(); ++k) d += amps[k] * std::sin(freqs[k].dot(x) + phases[k]);
    return d;
  }
};

Deformation sample_deformation(const Points& base, double rms, Rng& rng) {
  Deformation def;
  constexpr int kModes = 4;
  for (int k = 0; k < kModes; ++k) {
    def.freqs.push_back(unit_vector(rng) * uniform(rng, std::numbers::pi, 2.0 * std::numbers::pi));
    def.amps.push_back(gaussian3(rng));
    def.phases.push_back(uniform(rng, 0.0, 2.0 * std::numbers::pi));
  }
  double ss = 0.0;
  for (Eigen::Index i = 0; i < base.rows(); ++i) ss += def(base.row(i).transpose()).squaredNorm();
  const double current = std::sqrt(ss / static_cast<double>(base.rows()));
  const double scale = current > 0.0 ? rms / current : 0.0;
  for (auto& a : def.amps) a *= scale;
  return def;
}

Descriptors random_unit_rows(Eigen::Index rows, std::size_t dim, Rng& rng) {
  Descriptors d = gaussian_matrix(rows, static_cast<Eigen::Index>(dim), rng);
  for (Eigen::Index i = 0; i < rows; ++i) d.row(i).normalize();
  return d;
}

void corrupt_rows(Descriptors& desc, double fraction, Rng& rng) {
  const auto n = static_cast<std::size_t>(desc.rows());
  const auto count = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n)));
  if (count == 0) return;
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::shuffle(idx.begin(), idx.end(), rng);
  const Descriptors fresh = random_unit_rows(static_cast<Eigen::Index>(count), static_cast<std::size_t>(desc.cols()), rng);
  for (std::size_t c = 0; c < count; ++c) desc.row(static_cast<Eigen::Index>(idx[c])) = fresh.row(static_cast<Eigen::Index>(c));
}

template <typename Mat>
Mat permute_rows(const Mat& m, const std::vector<std::size_t>& order) {
  Mat out(m.rows(), m.cols());
  for (std::size_t r = 0; r < order.size(); ++r) out.row(static_cast<Eigen::Index>(r)) = m.row(static_cast<Eigen::Index>(order[r]));
  return out;
}

}  // namespace

Descriptors local_statistics_descriptors(const Points& points) {
  const auto n = static_cast<std::size_t>(points.rows());
  const std::array<std::size_t, 2> scales{std::min<std::size_t>(8, n), std::min<std::size_t>(16, n)};
  Descriptors desc(points.rows(), 8);
  std::vector<Eigen::Vector3d> normals(n);
  for (std::size_t s = 0; s < scales.size(); ++s) {
    const auto nb = knn(points, points, scales[s]);
    for (std::size_t i = 0; i < n; ++i) {
      Eigen::Vector3d mean = Eigen::Vector3d::Zero();
      for (auto j : nb[i]) mean += points.row(static_cast<Eigen::Index>(j)).transpose();
      mean /= static_cast<double>(nb[i].size());
      Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
      for (auto j : nb[i]) {
        const Eigen::Vector3d d = points.row(static_cast<Eigen::Index>(j)).transpose() - mean;
        cov += d * d.transpose();
      }
      Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es(cov);
      const Eigen::Vector3d ev = es.eigenvalues().cwiseMax(0.0);  // ascending
      const double sum = ev.sum() > 0.0 ? ev.sum() : 1.0;
      const auto r = static_cast<Eigen::Index>(i);
      desc(r, static_cast<Eigen::Index>(4 * s + 0)) = ev(2) / sum;
      desc(r, static_cast<Eigen::Index>(4 * s + 1)) = ev(1) / sum;
      desc(r, static_cast<Eigen::Index>(4 * s + 2)) = ev(0) / sum;
      normals[i] = es.eigenvectors().col(0);
    }
    // Normal coherence: mean |n_i · n_j| over the neighbourhood.
    for (std::size_t i = 0; i < n; ++i) {
      double acc = 0.0;
      for (auto j : nb[i]) acc += std::abs(normals[i].dot(normals[j]));
      desc(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(4 * s + 3)) = acc / static_cast<double>(nb[i].size());
    }
  }
  for (Eigen::Index c = 0; c < desc.cols(); ++c) {
    const double mean = desc.col(c).mean();
    const double sd = std::sqrt((desc.col(c).array() - mean).square().mean());
    desc.col(c) = (desc.col(c).array() - mean) / (sd > 1e-12 ? sd : 1.0);
  }
  for (Eigen::Index i = 0; i < desc.rows(); ++i) {
    const double norm = desc.row(i).norm();
    if (norm > 1e-12) desc.row(i) /= norm;
    else desc.row(i).setConstant(1.0 / std::sqrt(static_cast<double>(desc.cols())));
  }
  return desc;
}

ScenePair generate_scene(const GeneratorSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  const std::size_t n = spec.n_points;
  const auto n_overlap = static_cast<std::size_t>(
      std::max<long long>(1, std::llround(spec.overlap_fraction * static_cast<double>(n))));
  const double achieved = static_cast<double>(n_overlap) / static_cast<double>(n);
  if (std::abs(achieved - spec.overlap_fraction) > 0.05) {
    throw Error(ErrorKind::InfeasibleOverlap, "cannot realise overlap " + std::to_string(spec.overlap_fraction) +
                                                  " with " + std::to_string(n) + " points");
  }
  const std::size_t n_base = 2 * n - n_overlap;

  // Slab crop along a random direction: source keeps the first n base points
  // along it, the target the last n; the middle n_overlap are shared.
  const Points raw = sample_primitives(n_base, rng);
  const Eigen::Vector3d dir = unit_vector(rng);
  std::vector<std::size_t> order(n_base);
  std::iota(order.begin(), order.end(), std::size_t{0});
  const Eigen::VectorXd proj = raw * dir;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return proj(static_cast<Eigen::Index>(a)) < proj(static_cast<Eigen::Index>(b));
  });
  const Points base = permute_rows(raw, order);

  RigidTransform pose;
  if (!spec.force_identity) {
    pose.rotation = uniform_rotation(rng);
    const double r = spec.translation_range;
    pose.translation = {uniform(rng, -r, r), uniform(rng, -r, r), uniform(rng, -r, r)};
  }

  Deformation deformation;
  const bool deformable = spec.mode == DiffusionMode::Deformable && spec.deformation_amplitude > 0.0;
  if (deformable) deformation = sample_deformation(base, spec.deformation_amplitude, rng);

  Descriptors base_desc;
  if (spec.descriptor_kind == DescriptorKind::Oracle) {
    base_desc = random_unit_rows(static_cast<Eigen::Index>(n_base), spec.descriptor_dim, rng);
  }

  const std::size_t tgt_offset = n - n_overlap;
  Points src_pts = base.topRows(static_cast<Eigen::Index>(n));
  Points moved(static_cast<Eigen::Index>(n_base), 3);
  for (Eigen::Index i = 0; i < base.rows(); ++i) {
    Eigen::Vector3d p = base.row(i).transpose();
    if (deformable) p += deformation(p);
    moved.row(i) = pose.apply(p).transpose();
  }
  Points tgt_pts = moved.bottomRows(static_cast<Eigen::Index>(n));
  FlowField src_flow = moved.topRows(static_cast<Eigen::Index>(n)) - src_pts;

  const double diam = diameter(src_pts);
  const double sigma = spec.noise_relative ? spec.noise_sigma * diam : spec.noise_sigma;
  if (sigma > 0.0) {
    // Target-only noise, truncated at 3σ so every gt residual stays within 3σ.
    for (Eigen::Index i = 0; i < tgt_pts.rows(); ++i) {
      Eigen::Vector3d e;
      do {
        e = gaussian3(rng) * sigma;
      } while (e.norm() > 3.0 * sigma);
      tgt_pts.row(i) += e.transpose();
    }
  }

  Descriptors src_desc;
  Descriptors tgt_desc;
  if (spec.descriptor_kind == DescriptorKind::Oracle) {
    src_desc = base_desc.topRows(static_cast<Eigen::Index>(n));
    tgt_desc = base_desc.bottomRows(static_cast<Eigen::Index>(n));
    corrupt_rows(src_desc, spec.descriptor_corruption, rng);
    corrupt_rows(tgt_desc, spec.descriptor_corruption, rng);
  } else if (spec.descriptor_kind == DescriptorKind::LocalStatistics) {
    src_desc = local_statistics_descriptors(src_pts);
    tgt_desc = local_statistics_descriptors(tgt_pts);
  }

  std::vector<std::size_t> src_order(n);
  std::vector<std::size_t> tgt_order(n);
  std::iota(src_order.begin(), src_order.end(), std::size_t{0});
  std::iota(tgt_order.begin(), tgt_order.end(), std::size_t{0});
  if (spec.shuffle) {
    std::shuffle(src_order.begin(), src_order.end(), rng);
    std::shuffle(tgt_order.begin(), tgt_order.end(), rng);
  }
  // new position of each pre-shuffle index
  std::vector<std::size_t> src_pos(n);
  std::vector<std::size_t> tgt_pos(n);
  for (std::size_t r = 0; r < n; ++r) {
    src_pos[src_order[r]] = r;
    tgt_pos[tgt_order[r]] = r;
  }

  ScenePair pair;
  pair.source = PointCloud(permute_rows(src_pts, src_order),
                           src_desc.size() > 0 ? permute_rows(src_desc, src_order) : Descriptors{});
  pair.target = PointCloud(permute_rows(tgt_pts, tgt_order),
                           tgt_desc.size() > 0 ? permute_rows(tgt_desc, tgt_order) : Descriptors{});
  pair.mode = spec.mode;
  pair.gt_transform = pose;
  pair.gt_flow = permute_rows(src_flow, src_order);
  pair.overlap_mask_source.assign(n, false);
  for (std::size_t b = tgt_offset; b < n; ++b) {
    const std::size_t si = src_pos[b];
    pair.gt_pairs.push_back({si, tgt_pos[b - tgt_offset]});
    pair.overlap_mask_source[si] = true;
  }
  std::sort(pair.gt_pairs.begin(), pair.gt_pairs.end(),
            [](const IndexPair& a, const IndexPair& b) { return a.source < b.source; });
  pair.scene_diameter = diam;
  pair.achieved_overlap = achieved;
  pair.noise_sigma = sigma;
  pair.seed = spec.seed;
  pair.spec = spec;
  return pair;
}

MatchMatrix ground_truth_matrix(const ScenePair& pair, int iterations) {
  return ground_truth_matrix(pair.source.size(), pair.target.size(), pair.gt_pairs, iterations);
}

nlohmann::json ground_truth_json(const ScenePair& pair) {
  nlohmann::json rot = nlohmann::json::array();
  for (int r = 0; r < 3; ++r) rot.push_back({pair.gt_transform.rotation(r, 0), pair.gt_transform.rotation(r, 1),
                                             pair.gt_transform.rotation(r, 2)});
  nlohmann::json flow = nlohmann::json::array();
  for (Eigen::Index i = 0; i < pair.gt_flow.rows(); ++i) flow.push_back({pair.gt_flow(i, 0), pair.gt_flow(i, 1), pair.gt_flow(i, 2)});
  nlohmann::json pairs = nlohmann::json::array();
  for (const auto& p : pair.gt_pairs) pairs.push_back({p.source, p.target});
  return {{"format_version", kBundleFormatVersion},
          {"seed", pair.seed},
          {"spec", to_json(pair.spec)},
          {"mode", to_string(pair.mode)},
          {"gt_transform", {{"rotation", rot}, {"translation", {pair.gt_transform.translation(0),
                                                                 pair.gt_transform.translation(1),
                                                                 pair.gt_transform.translation(2)}}}},
          {"gt_flow", flow},
          {"gt_pairs", pairs},
          {"overlap_mask_source", pair.overlap_mask_source},
          {"achieved_overlap", pair.achieved_overlap},
          {"scene_diameter", pair.scene_diameter},
          {"noise_sigma", pair.noise_sigma}};
}

void write_bundle(const std::filesystem::path& dir, const ScenePair& pair) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw Error(ErrorKind::Io, "cannot create " + dir.string() + ": " + ec.message());
  write_ply(dir / "source.ply", pair.source);
  write_ply(dir / "target.ply", pair.target);
  std::ofstream out(dir / "gt.json");
  if (!out) throw Error(ErrorKind::Io, "cannot write " + (dir / "gt.json").string());
  out << ground_truth_json(pair).dump(2) << '\n';
  if (!out) throw Error(ErrorKind::Io, "write failed: " + (dir / "gt.json").string());
}

ScenePair read_bundle(const std::filesystem::path& dir) {
  ScenePair pair;
  pair.source = read_ply(dir / "source.ply");
  pair.target = read_ply(dir / "target.ply");
  std::ifstream in(dir / "gt.json");
  if (!in) throw Error(ErrorKind::Io, "cannot open " + (dir / "gt.json").string());
  try {
    const auto j = nlohmann::json::parse(in);
    if (j.at("format_version").get<int>() != kBundleFormatVersion) {
      throw Error(ErrorKind::Format, "unsupported bundle format_version");
    }
    pair.seed = j.at("seed").get<std::uint64_t>();
    pair.spec = generator_spec_from_json(j.at("spec"));
    pair.mode = diffusion_mode_from_string(j.at("mode").get<std::string>());
    const auto& rot = j.at("gt_transform").at("rotation");
    const auto& tr = j.at("gt_transform").at("translation");
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 3; ++c) pair.gt_transform.rotation(r, c) = rot.at(r).at(c).get<double>();
      pair.gt_transform.translation(r) = tr.at(r).get<double>();
    }
    const auto& flow = j.at("gt_flow");
    pair.gt_flow.resize(static_cast<Eigen::Index>(flow.size()), 3);
    for (std::size_t i = 0; i < flow.size(); ++i) {
      for (int c = 0; c < 3; ++c) pair.gt_flow(static_cast<Eigen::Index>(i), c) = flow[i].at(c).get<double>();
    }
    for (const auto& p : j.at("gt_pairs")) pair.gt_pairs.push_back({p.at(0).get<std::size_t>(), p.at(1).get<std::size_t>()});
    pair.overlap_mask_source = j.at("overlap_mask_source").get<std::vector<bool>>();
    pair.achieved_overlap = j.at("achieved_overlap").get<double>();
    pair.scene_diameter = j.at("scene_diameter").get<double>();
    pair.noise_sigma = j.value("noise_sigma", 0.0);
  } catch (const nlohmann::json::exception& ex) {
    throw Error(ErrorKind::Format, (dir / "gt.json").string() + ": " + ex.what());
  }
  if (static_cast<std::size_t>(pair.gt_flow.rows()) != pair.source.size()) {
    throw Error(ErrorKind::Format, "gt_flow length does not match source.ply");
  }
  for (const auto& p : pair.gt_pairs) {
    if (p.source >= pair.source.size() || p.target >= pair.target.size()) {
      throw Error(ErrorKind::Format, "gt pair index out of range");
    }
  }
  return pair;
}

}  // namespace diffreg
