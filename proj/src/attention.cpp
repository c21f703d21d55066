#include "diffreg/attention.hpp"

#include "diffreg/error.hpp"

#include <cmath>
#include <numbers>

namespace diffreg {

namespace {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }

double gelu_derivative(double x) {
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2)) + x * pdf;
}

MatrixXd gelu(const MatrixXd& z) { return z.unaryExpr([](double x) { return gelu(x); }); }
MatrixXd gelu_derivative(const MatrixXd& z) { return z.unaryExpr([](double x) { return gelu_derivative(x); }); }

MatrixXd softmax_rows(const MatrixXd& s) {
  MatrixXd p(s.rows(), s.cols());
  for (Index i = 0; i < s.rows(); ++i) {
    const double mx = s.row(i).maxCoeff();
    p.row(i) = (s.row(i).array() - mx).exp().matrix();
    p.row(i) /= p.row(i).sum();
  }
  return p;
}

Descriptors normalized_rows(const Descriptors& d) {
  Descriptors out = d;
  for (Index i = 0; i < out.rows(); ++i) {
    const double n = out.row(i).norm();
    if (n > 0.0) out.row(i) /= n;
  }
  return out;
}

MatrixXd gaussian(Index rows, Index cols, double stddev, Rng& rng) { return gaussian_matrix(rows, cols, rng) * stddev; }

void check_shape(const MatrixXd& m, Index rows, Index cols, const std::string& what) {
  if (m.rows() != rows || m.cols() != cols) {
    throw Error(ErrorKind::ShapeMismatch, what + " is " + std::to_string(m.rows()) + "x" + std::to_string(m.cols()) +
                                              ", expected " + std::to_string(rows) + "x" + std::to_string(cols));
  }
}

/// One attention block: cloud a queries cloud b. Returns the residual update.
MatrixXd block_forward(Modulation mod, const AttentionLayer& layer, const MatrixXd& fa, const MatrixXd& ta, const MatrixXd& fb,
                       const MatrixXd& tb, BlockCache& c) {
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(fa.cols()));
  c.fa = fa;
  c.fb = fb;
  c.ta = ta;
  c.tb = tb;
  c.uq = fa * layer.wq.transpose();
  c.uk = fb * layer.wk.transpose();
  c.q = modulate(mod, ta, c.uq);
  c.k = modulate(mod, tb, c.uk);
  c.v = fb * layer.wv.transpose();
  c.p = softmax_rows(c.q * c.k.transpose() * inv_sqrt_d);
  c.msg = c.p * c.v;
  c.h0.resize(fa.rows(), 2 * fa.cols());
  c.h0 << c.q, c.msg;
  c.z1 = (c.h0 * layer.w1.transpose()).rowwise() + layer.b1.transpose();
  c.a1 = gelu(c.z1);
  c.z2 = (c.a1 * layer.w2.transpose()).rowwise() + layer.b2.transpose();
  c.a2 = gelu(c.z2);
  return (c.a2 * layer.w3.transpose()).rowwise() + layer.b3.transpose();
}

/// Accumulates parameter gradients into `g` and input gradients into d_fa / d_fb.
void block_backward(Modulation mod, const AttentionLayer& layer, const BlockCache& c, const MatrixXd& d_out, AttentionLayer& g,
                    MatrixXd& d_fa, MatrixXd& d_fb) {
  const Index d = c.fa.cols();
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));

  g.w3 += d_out.transpose() * c.a2;
  g.b3 += d_out.colwise().sum().transpose();
  const MatrixXd d_z2 = (d_out * layer.w3).cwiseProduct(gelu_derivative(c.z2));
  g.w2 += d_z2.transpose() * c.a1;
  g.b2 += d_z2.colwise().sum().transpose();
  const MatrixXd d_z1 = (d_z2 * layer.w2).cwiseProduct(gelu_derivative(c.z1));
  g.w1 += d_z1.transpose() * c.h0;
  g.b1 += d_z1.colwise().sum().transpose();
  const MatrixXd d_h0 = d_z1 * layer.w1;

  MatrixXd d_q = d_h0.leftCols(d);
  const MatrixXd d_msg = d_h0.rightCols(d);
  const MatrixXd d_p = d_msg * c.v.transpose();
  const MatrixXd d_v = c.p.transpose() * d_msg;
  const VectorXd row_dot = d_p.cwiseProduct(c.p).rowwise().sum();
  const MatrixXd d_s = c.p.cwiseProduct(d_p.colwise() - row_dot);
  d_q += d_s * c.k * inv_sqrt_d;
  const MatrixXd d_k = d_s.transpose() * c.q * inv_sqrt_d;

  const MatrixXd d_uq = modulate_adjoint(mod, c.ta, d_q);
  const MatrixXd d_uk = modulate_adjoint(mod, c.tb, d_k);
  g.wq += d_uq.transpose() * c.fa;
  g.wk += d_uk.transpose() * c.fb;
  g.wv += d_v.transpose() * c.fb;
  d_fa += d_uq * layer.wq;
  d_fb += d_uk * layer.wk + d_v * layer.wv;
}

}  // namespace

std::string to_string(Modulation m) { return m == Modulation::Rotary ? "rotary" : "elementwise"; }

Modulation modulation_from_string(const std::string& s) {
  if (s == "rotary") return Modulation::Rotary;
  if (s == "elementwise") return Modulation::Elementwise;
  throw Error(ErrorKind::InvalidArgument, "unknown modulation '" + s + "'");
}

Eigen::MatrixXd modulate(Modulation m, const Eigen::MatrixXd& theta, const Eigen::MatrixXd& u) {
  if (m == Modulation::Elementwise) return theta.cwiseProduct(u);
  MatrixXd out(u.rows(), u.cols());
  const Index pairs = u.cols() / 2;
  for (Index k = 0; k < pairs; ++k) {
    const auto c = theta.col(2 * k).array();
    const auto s = theta.col(2 * k + 1).array();
    const auto a = u.col(2 * k).array();
    const auto b = u.col(2 * k + 1).array();
    out.col(2 * k) = (c * a - s * b).matrix();
    out.col(2 * k + 1) = (s * a + c * b).matrix();
  }
  if (u.cols() % 2 == 1) out.col(u.cols() - 1) = theta.col(u.cols() - 1).cwiseProduct(u.col(u.cols() - 1));
  return out;
}

Eigen::MatrixXd modulate_adjoint(Modulation m, const Eigen::MatrixXd& theta, const Eigen::MatrixXd& grad) {
  if (m == Modulation::Elementwise) return theta.cwiseProduct(grad);
  MatrixXd out(grad.rows(), grad.cols());
  const Index pairs = grad.cols() / 2;
  for (Index k = 0; k < pairs; ++k) {
    const auto c = theta.col(2 * k).array();
    const auto s = theta.col(2 * k + 1).array();
    const auto a = grad.col(2 * k).array();
    const auto b = grad.col(2 * k + 1).array();
    out.col(2 * k) = (c * a + s * b).matrix();
    out.col(2 * k + 1) = (c * b - s * a).matrix();
  }
  if (grad.cols() % 2 == 1) {
    out.col(grad.cols() - 1) = theta.col(grad.cols() - 1).cwiseProduct(grad.col(grad.cols() - 1));
  }
  return out;
}

Eigen::MatrixXd PositionalEncoding::encode(const Points& points, const Eigen::RowVector3d& origin) const {
  if (dim < 1 || bands < 1) throw Error(ErrorKind::InvalidArgument, "positional encoding needs dim >= 1 and bands >= 1");
  MatrixXd out(points.rows(), dim);
  const Points rel = points.rowwise() - origin;
  for (int k = 0; 2 * k + 1 < dim; ++k) {
    const int axis = k % 3;
    const int octave = (k / 3) % bands;
    const double w = base_frequency * std::ldexp(1.0, octave);
    for (Index i = 0; i < rel.rows(); ++i) {
      out(i, 2 * k) = std::cos(w * rel(i, axis));
      out(i, 2 * k + 1) = std::sin(w * rel(i, axis));
    }
  }
  if (dim % 2 == 1) out.col(dim - 1).setOnes();
  return out;
}

AttentionParams AttentionParams::init(int dim, int num_layers, Rng& rng, double init_scale, bool zero_output) {
  if (dim < 1 || num_layers < 1) throw Error(ErrorKind::InvalidArgument, "attention needs dim >= 1 and layers >= 1");
  AttentionParams p;
  p.dim = dim;
  p.encoding.dim = dim;
  const double s1 = init_scale / std::sqrt(static_cast<double>(dim));
  const double s2 = init_scale / std::sqrt(2.0 * dim);
  for (int l = 0; l < num_layers; ++l) {
    AttentionLayer layer;
    layer.wq = gaussian(dim, dim, s1, rng);
    layer.wk = gaussian(dim, dim, s1, rng);
    layer.wv = gaussian(dim, dim, s1, rng);
    layer.w1 = gaussian(2 * dim, 2 * dim, s2, rng);
    layer.b1 = VectorXd::Zero(2 * dim);
    layer.w2 = gaussian(dim, 2 * dim, s2, rng);
    layer.b2 = VectorXd::Zero(dim);
    layer.w3 = zero_output ? MatrixXd::Zero(dim, dim) : gaussian(dim, dim, s1, rng);
    layer.b3 = VectorXd::Zero(dim);
    p.layers.push_back(std::move(layer));
  }
  return p;
}

AttentionParams AttentionParams::zeros_like() const {
  AttentionParams z = *this;
  for (auto& t : z.tensors()) std::fill(t.data, t.data + t.size(), 0.0);
  return z;
}

std::vector<TensorRef> AttentionParams::tensors() {
  std::vector<TensorRef> out;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    auto& L = layers[l];
    const std::string prefix = "layers." + std::to_string(l) + ".";
    const auto add = [&](const char* name, auto& m) { out.push_back({prefix + name, m.data(), m.rows(), m.cols()}); };
    add("wq", L.wq);
    add("wk", L.wk);
    add("wv", L.wv);
    add("w1", L.w1);
    add("b1", L.b1);
    add("w2", L.w2);
    add("b2", L.b2);
    add("w3", L.w3);
    add("b3", L.b3);
  }
  return out;
}

std::size_t AttentionParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& t : const_cast<AttentionParams*>(this)->tensors()) n += static_cast<std::size_t>(t.size());
  return n;
}

bool AttentionParams::all_finite() const {
  for (const auto& t : const_cast<AttentionParams*>(this)->tensors()) {
    for (Index i = 0; i < t.size(); ++i) {
      if (!std::isfinite(t.data[i])) return false;
    }
  }
  return true;
}

Eigen::VectorXd AttentionParams::flatten() const {
  VectorXd flat(static_cast<Index>(parameter_count()));
  Index at = 0;
  for (const auto& t : const_cast<AttentionParams*>(this)->tensors()) {
    flat.segment(at, t.size()) = Eigen::Map<const VectorXd>(t.data, t.size());
    at += t.size();
  }
  return flat;
}

void AttentionParams::unflatten(const Eigen::VectorXd& flat) {
  if (flat.size() != static_cast<Index>(parameter_count())) {
    throw Error(ErrorKind::ShapeMismatch, "flat parameter vector has the wrong length");
  }
  Index at = 0;
  for (auto& t : tensors()) {
    Eigen::Map<VectorXd>(t.data, t.size()) = flat.segment(at, t.size());
    at += t.size();
  }
}

void AttentionParams::validate() const {
  if (dim < 1 || layers.empty()) throw Error(ErrorKind::ShapeMismatch, "attention parameters are empty");
  if (encoding.dim != dim) throw Error(ErrorKind::ShapeMismatch, "encoding dimension differs from feature dimension");
  const Index d = dim;
  for (const auto& L : layers) {
    check_shape(L.wq, d, d, "wq");
    check_shape(L.wk, d, d, "wk");
    check_shape(L.wv, d, d, "wv");
    check_shape(L.w1, 2 * d, 2 * d, "w1");
    check_shape(L.b1, 2 * d, 1, "b1");
    check_shape(L.w2, d, 2 * d, "w2");
    check_shape(L.b2, d, 1, "b2");
    check_shape(L.w3, d, d, "w3");
    check_shape(L.b3, d, 1, "b3");
  }
}

AttentionOutput attention_forward(const AttentionParams& params, const AttentionInputs& in) {
  params.validate();
  const Index d = params.dim;
  check_shape(in.source_features, in.source_features.rows(), d, "source features");
  check_shape(in.target_features, in.target_features.rows(), d, "target features");
  check_shape(in.source_encoding, in.source_features.rows(), d, "source encoding");
  check_shape(in.target_encoding, in.target_features.rows(), d, "target encoding");
  if (in.source_features.rows() == 0 || in.target_features.rows() == 0) {
    throw Error(ErrorKind::ShapeMismatch, "attention needs non-empty clouds");
  }

  AttentionOutput out;
  MatrixXd fs = in.source_features;
  MatrixXd ft = in.target_features;
  const MatrixXd& ts = in.source_encoding;
  const MatrixXd& tt = in.target_encoding;
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    const auto& layer = params.layers[l];
    BlockCache cs;
    BlockCache ct;
    MatrixXd us;
    MatrixXd ut;
    if (l % 2 == 0) {
      us = block_forward(params.encoding.modulation, layer, fs, ts, fs, ts, cs);
      ut = block_forward(params.encoding.modulation, layer, ft, tt, ft, tt, ct);
    } else {
      us = block_forward(params.encoding.modulation, layer, fs, ts, ft, tt, cs);
      ut = block_forward(params.encoding.modulation, layer, ft, tt, fs, ts, ct);
    }
    fs += us;
    ft += ut;
    out.cache.source_blocks.push_back(std::move(cs));
    out.cache.target_blocks.push_back(std::move(ct));
  }
  out.features.source = std::move(fs);
  out.features.target = std::move(ft);
  return out;
}

AttentionInputs make_attention_inputs(const AttentionParams& params, const Points& warped_source, const Points& target,
                                      const Descriptors& source_desc, const Descriptors& target_desc) {
  if (source_desc.cols() != params.dim || target_desc.cols() != params.dim) {
    throw Error(ErrorKind::ShapeMismatch, "descriptor dimension differs from the attention width");
  }
  if (source_desc.rows() != warped_source.rows() || target_desc.rows() != target.rows()) {
    throw Error(ErrorKind::ShapeMismatch, "descriptor count differs from point count");
  }
  const Eigen::RowVector3d origin = target.colwise().mean();
  return {normalized_rows(source_desc), normalized_rows(target_desc), params.encoding.encode(warped_source, origin),
          params.encoding.encode(target, origin)};
}

FeaturePair attention_feature_net(const AttentionParams& params, const Points& warped_source, const Points& target,
                                  const Descriptors& source_desc, const Descriptors& target_desc,
                                  const Eigen::MatrixXd& source_pe, const Eigen::MatrixXd& target_pe) {
  if (source_desc.rows() != warped_source.rows() || target_desc.rows() != target.rows()) {
    throw Error(ErrorKind::ShapeMismatch, "descriptor count differs from point count");
  }
  return attention_forward(params, {normalized_rows(source_desc), normalized_rows(target_desc), source_pe, target_pe})
      .features;
}

AttentionGradients attention_backward(const AttentionParams& params, const AttentionCache& cache,
                                      const Eigen::MatrixXd& d_source, const Eigen::MatrixXd& d_target) {
  if (cache.empty() || cache.source_blocks.size() != params.layers.size() ||
      cache.target_blocks.size() != params.layers.size()) {
    throw Error(ErrorKind::MissingForwardCache, "attention_backward needs the cache of a matching forward pass");
  }
  const auto& first = cache.source_blocks.front();
  check_shape(d_source, first.fa.rows(), params.dim, "source gradient");
  check_shape(d_target, cache.target_blocks.front().fa.rows(), params.dim, "target gradient");

  AttentionGradients g{params.zeros_like(), d_source, d_target};
  for (std::size_t l = params.layers.size(); l-- > 0;) {
    const auto& layer = params.layers[l];
    auto& gl = g.params.layers[l];
    // Residual passthrough; the blocks add their input gradients on top.
    MatrixXd ds = g.source_input;
    MatrixXd dt = g.target_input;
    if (l % 2 == 0) {
      block_backward(params.encoding.modulation, layer, cache.source_blocks[l], g.source_input, gl, ds, ds);
      block_backward(params.encoding.modulation, layer, cache.target_blocks[l], g.target_input, gl, dt, dt);
    } else {
      block_backward(params.encoding.modulation, layer, cache.source_blocks[l], g.source_input, gl, ds, dt);
      block_backward(params.encoding.modulation, layer, cache.target_blocks[l], g.target_input, gl, dt, ds);
    }
    g.source_input = std::move(ds);
    g.target_input = std::move(dt);
  }
  return g;
}

SinkhornTape sinkhorn_log_forward(const Eigen::MatrixXd& logits, int iterations) {
  if (iterations < 1) throw Error(ErrorKind::InvalidArgument, "sinkhorn iterations must be >= 1");
  if (logits.size() == 0) throw Error(ErrorKind::InvalidArgument, "empty matrix");
  if (!logits.allFinite()) throw Error(ErrorKind::NonFiniteInput, "sinkhorn input has non-finite entries");
  SinkhornTape tape;
  MatrixXd l = logits;
  const double log_row = -std::log(static_cast<double>(l.rows()));
  const double log_col = -std::log(static_cast<double>(l.cols()));
  for (int it = 0; it < iterations; ++it) {
    for (Index j = 0; j < l.cols(); ++j) {
      const double mx = l.col(j).maxCoeff();
      const double lse = mx + std::log((l.col(j).array() - mx).exp().sum());
      l.col(j).array() += log_col - lse;
    }
    tape.states.push_back(l);
    for (Index i = 0; i < l.rows(); ++i) {
      const double mx = l.row(i).maxCoeff();
      const double lse = mx + std::log((l.row(i).array() - mx).exp().sum());
      l.row(i).array() += log_row - lse;
    }
    tape.states.push_back(l);
  }
  tape.output = l.array().exp().matrix();
  return tape;
}

Eigen::MatrixXd sinkhorn_log_backward(const SinkhornTape& tape, const Eigen::MatrixXd& d_output) {
  if (tape.states.empty()) throw Error(ErrorKind::MissingForwardCache, "empty Sinkhorn tape");
  check_shape(d_output, tape.output.rows(), tape.output.cols(), "Sinkhorn output gradient");
  const double rows = static_cast<double>(tape.output.rows());
  const double cols = static_cast<double>(tape.output.cols());
  MatrixXd d = d_output.cwiseProduct(tape.output);
  // y = x − lse(x) + log target  ⇒  ∂x = ∂y − softmax(x)·Σ∂y, softmax(x) = exp(y) / target.
  for (std::size_t s = tape.states.size(); s-- > 0;) {
    const MatrixXd soft = tape.states[s].array().exp().matrix();
    if (s % 2 == 1) {
      const VectorXd sums = d.rowwise().sum();
      d -= (soft * rows).cwiseProduct(sums.replicate(1, d.cols()));
    } else {
      const Eigen::RowVectorXd sums = d.colwise().sum();
      d -= (soft * cols).cwiseProduct(sums.replicate(d.rows(), 1));
    }
  }
  return d;
}

LossAndGradient denoiser_loss_and_gradient(const AttentionParams& params, const MatchMatrix& et,
                                           const ScenePair& pair, const MatchMatrix& e0, const GThetaConfig& cfg,
                                           FocalParams focal) {
  if (!pair.source.has_descriptors() || !pair.target.has_descriptors()) {
    throw Error(ErrorKind::MissingDescriptors, "training needs descriptors on both clouds");
  }
  const GThetaTrace pose = g_theta_pose_stage(et, pair, cfg);
  const AttentionInputs in = make_attention_inputs(params, pose.warped_source, pair.target.points,
                                                   pair.source.descriptors, pair.target.descriptors);
  const AttentionOutput fwd = attention_forward(params, in);
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(params.dim));
  const MatrixXd logits = fwd.features.source * fwd.features.target.transpose() * inv_sqrt_d;
  const SinkhornTape tape = sinkhorn_log_forward(logits, cfg.sinkhorn_iterations);

  LossAndGradient out;
  out.prediction = MatchMatrix(tape.output);
  out.loss = simple_loss(out.prediction, e0, focal);
  const MatrixXd d_logits = sinkhorn_log_backward(tape, simple_loss_gradient(out.prediction, e0, focal));
  const MatrixXd d_fs = d_logits * fwd.features.target * inv_sqrt_d;
  const MatrixXd d_ft = d_logits.transpose() * fwd.features.source * inv_sqrt_d;
  out.gradient = attention_backward(params, fwd.cache, d_fs, d_ft).params;
  return out;
}

FeaturePair AttentionFeatureNet::features(const FeatureInputs& in) const {
  return attention_forward(*params_, make_attention_inputs(*params_, in.warped_source, in.target,
                                                            in.source_descriptors, in.target_descriptors))
      .features;
}

}  // namespace diffreg
