#pragma once

#include "diffreg/matrixspace.hpp"
#include "diffreg/random.hpp"

#include <Eigen/Core>

#include <optional>
#include <string>
#include <variant>
#include <vector>

namespace diffreg {

enum class ScheduleKind { LinearBeta, Cosine };
enum class DiffusionMode { Rigid, Deformable };

std::string to_string(ScheduleKind kind);
std::string to_string(DiffusionMode mode);
ScheduleKind schedule_kind_from_string(const std::string& s);
DiffusionMode diffusion_mode_from_string(const std::string& s);

/// α_t for t = 1..T and ᾱ_t = Π_{s≤t} α_s with ᾱ_0 = 1.
class NoiseSchedule {
 public:
  /// ᾱ(t) ∝ cos²((t/T + s)/(1 + s)·π/2), betas clipped to 0.999.
  static NoiseSchedule cosine(int steps, double offset = 0.008);
  static NoiseSchedule linear_beta(int steps, double beta_start = 1e-4, double beta_end = 0.02);
  static NoiseSchedule from_kind(ScheduleKind kind, int steps);
  /// Arbitrary per-step alphas (index 0 is α_1). Each must lie in (0, 1).
  static NoiseSchedule from_alphas(std::vector<double> alphas, ScheduleKind kind = ScheduleKind::LinearBeta);

  [[nodiscard]] int steps() const { return static_cast<int>(alphas_.size()); }
  [[nodiscard]] ScheduleKind kind() const { return kind_; }
  /// 1 ≤ t ≤ T.
  [[nodiscard]] double alpha(int t) const;
  /// 0 ≤ t ≤ T.
  [[nodiscard]] double alpha_bar(int t) const;

 private:
  NoiseSchedule(std::vector<double> alphas, ScheduleKind kind);

  std::vector<double> alphas_;
  std::vector<double> alpha_bars_;
  ScheduleKind kind_;
};

struct DiffusionConfig {
  NoiseSchedule schedule = NoiseSchedule::cosine(1000);
  DiffusionMode mode = DiffusionMode::Rigid;
  double eta_clip = 1.5;
  int sinkhorn_iterations = kDenoiserSinkhornIterations;
  double ddim_eta = 0.0;
  int inference_steps = 20;

  /// Throws InvalidArgument on eta_clip ≤ 0, inference_steps outside [1, T], ddim_eta outside [0, 1].
  void validate() const;
};

/// (|x| − ⌊|x|⌋)·sign(x)·η, with sign(0) = 0.
double f_epsilon(double x, double eta);

/// Mode-dependent noise map: f_ε elementwise (rigid) or identity (deformable).
Eigen::MatrixXd noise_transform(const Eigen::MatrixXd& eps, DiffusionMode mode, double eta_clip);

/// Rigid: subtract the global minimum; deformable: elementwise sigmoid; then Sinkhorn.
MatchMatrix manifold_projection(const Eigen::MatrixXd& raw, const DiffusionConfig& cfg);

/// √ᾱ_t·E⁰ + √(1−ᾱ_t)·g(ε), before any projection.
Eigen::MatrixXd forward_diffuse_raw(const MatchMatrix& e0, int t, const DiffusionConfig& cfg,
                                    const Eigen::MatrixXd& noise);

/// Forward kernel at timestep t (0 ≤ t ≤ T) followed by the manifold projection.
/// Throws TimestepOutOfRange, NonFiniteNoise, ShapeMismatch.
MatchMatrix forward_diffuse(const MatchMatrix& e0, int t, const DiffusionConfig& cfg, const Eigen::MatrixXd& noise);
MatchMatrix forward_diffuse(const MatchMatrix& e0, int t, const DiffusionConfig& cfg, Rng& rng);

struct PosteriorCoefficients {
  double et_coef;
  double e0_coef;
  double variance;
};

/// Coefficients of q(E^{t−1} | E^t, E⁰) from α_t and ᾱ_{t−1}.
PosteriorCoefficients posterior_coefficients(double alpha_t, double alpha_bar_prev);

struct Posterior {
  Eigen::MatrixXd mean;
  double variance;
};

/// Mean and (isotropic) variance of the forward posterior; 1 ≤ t ≤ T.
Posterior posterior_params(const MatchMatrix& e0, const MatchMatrix& et, int t, const NoiseSchedule& schedule);

/// σ = η·√((1−ᾱ_to)/(1−ᾱ_from))·√(1 − ᾱ_from/ᾱ_to).
double ddim_sigma(double alpha_bar_from, double alpha_bar_to, double eta);

/// DDIM update on raw values given the predicted clean matrix. `z` is the
/// fresh noise used when σ > 0 (ignored otherwise).
/// Throws DegenerateAlphaBar when 1 − ᾱ_from < 1e-12.
Eigen::MatrixXd ddim_update(const Eigen::MatrixXd& et, const Eigen::MatrixXd& e0_hat, double alpha_bar_from,
                            double alpha_bar_to, double eta, const Eigen::MatrixXd* z = nullptr);

/// One reverse step t_from → t_to followed by the manifold projection.
/// Throws TimestepOrder, TimestepOutOfRange, DegenerateAlphaBar.
MatchMatrix ddim_step(const MatchMatrix& et, const MatchMatrix& e0_hat, int t_from, int t_to,
                      const DiffusionConfig& cfg, Rng* rng = nullptr);

/// Reverse timesteps T = t_0 > t_1 > … > t_S = 0, evenly spaced.
std::vector<int> inference_timesteps(int total_steps, int inference_steps);

struct FocalParams {
  double gamma = 2.0;
  double alpha = 0.25;
};

inline constexpr double kFocalClamp = 1e-7;

/// Mean binary focal cross-entropy over cells with p = N·Ê₀ clamped to
/// [1e-7, 1 − 1e-7]; positives are the nonzero cells of E⁰.
double simple_loss(const MatchMatrix& e0_hat, const MatchMatrix& e0, FocalParams focal = {});

/// ∂ simple_loss / ∂ Ê₀ (zero where the clamp is active).
Eigen::MatrixXd simple_loss_gradient(const MatchMatrix& e0_hat, const MatchMatrix& e0, FocalParams focal = {});

class Denoiser;
struct ScenePair;

struct WhiteNoise {};
using SampleInit = std::variant<WhiteNoise, MatchMatrix>;

struct SampleResult {
  MatchMatrix final_matrix;
  std::vector<MatchMatrix> trajectory;   // projected states, initial first
  std::vector<MatchMatrix> predictions;  // Ê₀ from each denoiser call
  std::vector<int> timesteps;            // one per trajectory entry
  int denoiser_calls = 0;
};

/// Projected initial state: white noise pushed through the mode's noise map
/// and projection, or a supplied matrix projected onto the polytope.
MatchMatrix initial_state(const SampleInit& init, std::size_t rows, std::size_t cols, const DiffusionConfig& cfg,
                          Rng& rng);

/// DDIM reverse sampling with `cfg.inference_steps` denoiser calls.
SampleResult reverse_sample(const SampleInit& init, const Denoiser& denoiser, const ScenePair& pair,
                            const DiffusionConfig& cfg, Rng& rng);

}  // namespace diffreg
