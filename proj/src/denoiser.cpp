#include "diffreg/denoiser.hpp"

#include "diffreg/error.hpp"
#include "diffreg/log.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace diffreg {

namespace {

Descriptors normalized_rows(const Descriptors& d) {
  Descriptors out = d;
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    const double n = out.row(i).norm();
    if (n > 0.0) out.row(i) /= n;
  }
  return out;
}

double weighted_quantile(std::vector<std::pair<double, double>> values, double q) {
  if (values.empty()) return 0.0;
  std::sort(values.begin(), values.end());
  double total = 0.0;
  for (const auto& v : values) total += v.second;
  double acc = 0.0;
  for (const auto& v : values) {
    acc += v.second;
    if (acc >= q * total) return v.first;
  }
  return values.back().first;
}

double rms_radius(const Points& pts) {
  const Eigen::RowVector3d c = pts.colwise().mean();
  return std::sqrt((pts.rowwise() - c).rowwise().squaredNorm().mean());
}

}  // namespace

FeaturePair AnalyticFeatureNet::features(const FeatureInputs& in) const {
  if (!(in.bandwidth > 0.0)) throw Error(ErrorKind::InvalidArgument, "bandwidth must be > 0");
  const bool with_desc = in.source_descriptors.cols() > 0 && in.target_descriptors.cols() > 0;
  if (with_desc && in.source_descriptors.cols() != in.target_descriptors.cols()) {
    throw Error(ErrorKind::ShapeMismatch, "descriptor dimensions differ");
  }
  const Eigen::Index dd = with_desc ? in.source_descriptors.cols() : 0;
  const Eigen::Index dim = 5 + dd;
  const double s = std::pow(static_cast<double>(dim), 0.25);  // cancels the 1/√D of matching_logits
  const double inv_sigma = 1.0 / in.bandwidth;
  const double half_inv_var = 0.5 * inv_sigma * inv_sigma;
  const double desc_scale = std::sqrt(descriptor_weight_);

  // Shared centring keeps the expanded quadratic well conditioned.
  const Eigen::RowVector3d centre = in.target.colwise().mean();
  const Points src = in.warped_source.rowwise() - centre;
  const Points tgt = in.target.rowwise() - centre;

  FeaturePair out;
  out.source.resize(src.rows(), dim);
  out.target.resize(tgt.rows(), dim);
  out.source.leftCols(3) = src * inv_sigma;
  out.source.col(3) = -src.rowwise().squaredNorm() * half_inv_var;
  out.source.col(4).setOnes();
  out.target.leftCols(3) = tgt * inv_sigma;
  out.target.col(3).setOnes();
  out.target.col(4) = -tgt.rowwise().squaredNorm() * half_inv_var;
  if (with_desc) {
    out.source.rightCols(dd) = normalized_rows(in.source_descriptors) * desc_scale;
    out.target.rightCols(dd) = normalized_rows(in.target_descriptors) * desc_scale;
  }
  out.source *= s;
  out.target *= s;
  return out;
}

FeaturePair analytic_feature_net(const Points& warped_source, const Points& target, const Descriptors& source_desc,
                                 const Descriptors& target_desc, double bandwidth, double descriptor_weight) {
  return AnalyticFeatureNet(descriptor_weight).features({warped_source, target, source_desc, target_desc, bandwidth});
}

Eigen::MatrixXd matching_logits(const FeaturePair& f) {
  if (f.source.cols() != f.target.cols()) throw Error(ErrorKind::ShapeMismatch, "feature dimensions differ");
  return (f.source * f.target.transpose()) / std::sqrt(static_cast<double>(f.source.cols()));
}

GThetaTrace g_theta_pose_stage(const MatchMatrix& et, const ScenePair& pair, const GThetaConfig& cfg) {
  const auto& src = pair.source.points;
  const auto& tgt = pair.target.points;
  if (et.rows() != pair.source.size() || et.cols() != pair.target.size()) {
    throw Error(ErrorKind::ShapeMismatch, "E^t shape does not match the scene");
  }
  GThetaTrace trace;
  trace.projected_input = sinkhorn_project(et, cfg.sinkhorn_iterations, false);
  const auto& w = trace.projected_input;

  std::vector<WeightedPair> kappa;
  const std::size_t k = std::clamp<std::size_t>(cfg.procrustes_topk, 1, w.rows() * w.cols());
  for (const auto& c : extract_topk(w, k, false)) kappa.push_back({c.source, c.target, w(c.source, c.target)});
  try {
    if (cfg.procrustes == ProcrustesWeights::AllCells) {
      trace.transform = weighted_svd_dense(src, tgt, w.entries);
    } else {
      trace.transform = weighted_svd(pair.source, pair.target, kappa);
    }
  } catch (const Error& ex) {
    if (ex.kind() != ErrorKind::DegenerateConfiguration && ex.kind() != ErrorKind::InvalidArgument &&
        ex.kind() != ErrorKind::InvalidWeights) {
      throw;
    }
    log::debug(std::string("g_theta: Procrustes fallback to identity: ") + ex.what());
    trace.transform = RigidTransform::identity();
    trace.pose_fallback = true;
  }
  trace.warped_source = warp_points(src, trace.transform);

  const auto residual2 = [&](std::size_t i, std::size_t j) {
    return (trace.warped_source.row(static_cast<Eigen::Index>(i)) - tgt.row(static_cast<Eigen::Index>(j))).squaredNorm();
  };
  {
    std::vector<std::pair<double, double>> res;
    res.reserve(kappa.size());
    for (const auto& c : kappa) res.emplace_back(residual2(c.source, c.target), c.weight);
    trace.inlier_scale = std::sqrt(weighted_quantile(std::move(res), 0.5));
  }

  const double radius = std::max(rms_radius(tgt), 1e-12);
  if (!cfg.adaptive_bandwidth) {
    trace.bandwidth = cfg.bandwidth;
  } else {
    // Weighted quantile of squared residuals over the strongest cells.
    const std::size_t cells = cfg.bandwidth_cells == 0 ? std::min(w.rows(), w.cols()) : cfg.bandwidth_cells;
    std::vector<std::pair<double, double>> res;
    for (const auto& c : extract_topk(w, std::clamp<std::size_t>(cells, 1, w.rows() * w.cols()), false)) {
      res.emplace_back(residual2(c.source, c.target), w(c.source, c.target));
    }
    const double sigma = cfg.bandwidth_scale * std::sqrt(weighted_quantile(std::move(res), cfg.bandwidth_quantile) / 3.0);
    trace.bandwidth = std::clamp(sigma, cfg.min_bandwidth_ratio * radius, radius);
  }
  return trace;
}

GThetaTrace g_theta(const MatchMatrix& et, const ScenePair& pair, const FeatureNetwork& net, const GThetaConfig& cfg) {
  if (!pair.source.has_descriptors() || !pair.target.has_descriptors()) {
    throw Error(ErrorKind::MissingDescriptors, "g_theta needs descriptors on both clouds");
  }
  GThetaTrace trace = g_theta_pose_stage(et, pair, cfg);
  trace.features = net.features(
      {trace.warped_source, pair.target.points, pair.source.descriptors, pair.target.descriptors, trace.bandwidth});
  trace.logits = matching_logits(trace.features);
  trace.output = sinkhorn_project(MatchMatrix(trace.logits), cfg.sinkhorn_iterations, true);
  return trace;
}

MatchMatrix GThetaDenoiser::predict(const MatchMatrix& et, const ScenePair& pair) const {
  return g_theta(et, pair, *net_, cfg_).output;
}

}  // namespace diffreg
