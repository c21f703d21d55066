#pragma once

#include "diffreg/denoiser.hpp"
#include "diffreg/diffusion.hpp"
#include "diffreg/random.hpp"

#include <Eigen/Core>

#include <optional>
#include <string>
#include <vector>

namespace diffreg {

/// How an encoding row Θ(p) modulates a projected query or key u.
///   Elementwise: Θ ⊙ u.
///   Rotary: each channel pair (2k, 2k+1) of u is rotated by the angle whose
///   (cos, sin) is stored in Θ; q·k then depends on relative position only.
enum class Modulation { Elementwise, Rotary };

std::string to_string(Modulation m);
Modulation modulation_from_string(const std::string& s);

/// Sinusoidal 3D encoding. Channel pair k encodes axis k mod 3 at frequency
/// base·2^o with octave o = (k / 3) mod bands as (cos, sin); an odd trailing
/// channel is 1. Positions are taken relative to `origin`.
struct PositionalEncoding {
  int dim = 0;
  int bands = 4;
  double base_frequency = 2.0;  // rad / m
  Modulation modulation = Modulation::Rotary;

  [[nodiscard]] Eigen::MatrixXd encode(const Points& points, const Eigen::RowVector3d& origin) const;
};

/// Applies the modulation of `theta` to rows of `u`, and its adjoint.
Eigen::MatrixXd modulate(Modulation m, const Eigen::MatrixXd& theta, const Eigen::MatrixXd& u);
Eigen::MatrixXd modulate_adjoint(Modulation m, const Eigen::MatrixXd& theta, const Eigen::MatrixXd& grad);

struct AttentionLayer {
  Eigen::MatrixXd wq, wk, wv;  // d×d
  Eigen::MatrixXd w1;          // 2d×2d
  Eigen::VectorXd b1;          // 2d
  Eigen::MatrixXd w2;          // d×2d
  Eigen::VectorXd b2;          // d
  Eigen::MatrixXd w3;          // d×d (output layer)
  Eigen::VectorXd b3;          // d
};

/// View of one parameter tensor (column-major storage).
struct TensorRef {
  std::string name;
  double* data;
  Eigen::Index rows;
  Eigen::Index cols;
  [[nodiscard]] Eigen::Index size() const { return rows * cols; }
};

/// Weights of the interleaved attention network. Layer l is self-attention
/// for even l and cross-attention for odd l; both clouds share the weights.
struct AttentionParams {
  int dim = 0;
  PositionalEncoding encoding;
  std::vector<AttentionLayer> layers;

  /// Gaussian weights with std init_scale/√fan_in, zero biases; with
  /// `zero_output` the MLP output layer starts at zero (identity network).
  static AttentionParams init(int dim, int num_layers, Rng& rng, double init_scale = 1.0, bool zero_output = false);
  /// Same shapes, all zeros.
  [[nodiscard]] AttentionParams zeros_like() const;

  [[nodiscard]] std::vector<TensorRef> tensors();
  [[nodiscard]] std::size_t parameter_count() const;
  [[nodiscard]] bool all_finite() const;

  /// Flat copy in tensor order, and the inverse.
  [[nodiscard]] Eigen::VectorXd flatten() const;
  void unflatten(const Eigen::VectorXd& flat);

  /// Throws ShapeMismatch when tensor shapes disagree with `dim`.
  void validate() const;
};

struct AttentionInputs {
  Eigen::MatrixXd source_features;  // N×d
  Eigen::MatrixXd target_features;  // M×d
  Eigen::MatrixXd source_encoding;  // N×d
  Eigen::MatrixXd target_encoding;  // M×d
};

/// Intermediate values of one attention block (cloud a attending to cloud b).
struct BlockCache {
  Eigen::MatrixXd fa, fb, ta, tb;  // inputs and encodings
  Eigen::MatrixXd uq, uk, q, k, v, p, msg, h0, z1, a1, z2, a2;
};

struct AttentionCache {
  std::vector<BlockCache> source_blocks;  // one per layer
  std::vector<BlockCache> target_blocks;
  [[nodiscard]] bool empty() const { return source_blocks.empty(); }
};

struct AttentionOutput {
  FeaturePair features;
  AttentionCache cache;
};

/// Forward pass; throws ShapeMismatch.
AttentionOutput attention_forward(const AttentionParams& params, const AttentionInputs& in);

/// Features for a warped source and target with descriptors and encodings.
FeaturePair attention_feature_net(const AttentionParams& params, const Points& warped_source, const Points& target,
                                  const Descriptors& source_desc, const Descriptors& target_desc,
                                  const Eigen::MatrixXd& source_pe, const Eigen::MatrixXd& target_pe);

/// Builds network inputs: normalised descriptors and encodings of positions
/// relative to the target centroid.
AttentionInputs make_attention_inputs(const AttentionParams& params, const Points& warped_source, const Points& target,
                                      const Descriptors& source_desc, const Descriptors& target_desc);

struct AttentionGradients {
  AttentionParams params;        // same layout as the network
  Eigen::MatrixXd source_input;  // ∂/∂ source_features
  Eigen::MatrixXd target_input;
};

/// Reverse-mode gradients given ∂L/∂(output features). Throws MissingForwardCache.
AttentionGradients attention_backward(const AttentionParams& params, const AttentionCache& cache,
                                      const Eigen::MatrixXd& d_source, const Eigen::MatrixXd& d_target);

/// Log-domain Sinkhorn that records each normalised iterate for backpropagation.
struct SinkhornTape {
  std::vector<Eigen::MatrixXd> states;  // log values after every normalisation
  Eigen::MatrixXd output;               // exp of the final state
};

SinkhornTape sinkhorn_log_forward(const Eigen::MatrixXd& logits, int iterations);
/// ∂L/∂logits from ∂L/∂output.
Eigen::MatrixXd sinkhorn_log_backward(const SinkhornTape& tape, const Eigen::MatrixXd& d_output);

struct LossAndGradient {
  double loss = 0.0;
  MatchMatrix prediction;
  AttentionParams gradient;
};

/// simple_loss(g_θ(E^t), E⁰) and its gradient with respect to the network
/// weights. The pose stage has no parameters and is treated as constant.
LossAndGradient denoiser_loss_and_gradient(const AttentionParams& params, const MatchMatrix& et,
                                           const ScenePair& pair, const MatchMatrix& e0, const GThetaConfig& cfg,
                                           FocalParams focal = {});

class AttentionFeatureNet final : public FeatureNetwork {
 public:
  explicit AttentionFeatureNet(std::shared_ptr<const AttentionParams> params) : params_(std::move(params)) {}
  [[nodiscard]] FeaturePair features(const FeatureInputs& in) const override;
  [[nodiscard]] const AttentionParams& params() const { return *params_; }

 private:
  std::shared_ptr<const AttentionParams> params_;
};

}  // namespace diffreg
