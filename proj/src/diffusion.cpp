#include "diffreg/diffusion.hpp"

#include "diffreg/error.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

namespace diffreg {

std::string to_string(ScheduleKind kind) { return kind == ScheduleKind::Cosine ? "cosine" : "linear-beta"; }
std::string to_string(DiffusionMode mode) { return mode == DiffusionMode::Rigid ? "rigid" : "deformable"; }

ScheduleKind schedule_kind_from_string(const std::string& s) {
  if (s == "cosine") return ScheduleKind::Cosine;
  if (s == "linear-beta" || s == "linear") return ScheduleKind::LinearBeta;
  throw Error(ErrorKind::InvalidArgument, "unknown schedule '" + s + "'");
}

DiffusionMode diffusion_mode_from_string(const std::string& s) {
  if (s == "rigid") return DiffusionMode::Rigid;
  if (s == "deformable") return DiffusionMode::Deformable;
  throw Error(ErrorKind::InvalidArgument, "unknown diffusion mode '" + s + "'");
}

NoiseSchedule::NoiseSchedule(std::vector<double> alphas, ScheduleKind kind) : alphas_(std::move(alphas)), kind_(kind) {
  if (alphas_.empty()) throw Error(ErrorKind::InvalidArgument, "schedule needs at least one step");
  alpha_bars_.resize(alphas_.size() + 1);
  alpha_bars_[0] = 1.0;
  for (std::size_t t = 0; t < alphas_.size(); ++t) {
    if (!(alphas_[t] > 0.0 && alphas_[t] < 1.0)) {
      throw Error(ErrorKind::InvalidArgument, "alpha_" + std::to_string(t + 1) + " outside (0, 1)");
    }
    alpha_bars_[t + 1] = alpha_bars_[t] * alphas_[t];
  }
}

NoiseSchedule NoiseSchedule::cosine(int steps, double offset) {
  if (steps < 1) throw Error(ErrorKind::InvalidArgument, "schedule steps must be >= 1");
  const auto f = [&](int t) {
    const double x = (static_cast<double>(t) / steps + offset) / (1.0 + offset) * std::numbers::pi / 2.0;
    return std::cos(x) * std::cos(x);
  };
  std::vector<double> alphas(static_cast<std::size_t>(steps));
  for (int t = 1; t <= steps; ++t) {
    const double beta = std::min(1.0 - f(t) / f(t - 1), 0.999);
    alphas[static_cast<std::size_t>(t - 1)] = 1.0 - beta;
  }
  return NoiseSchedule(std::move(alphas), ScheduleKind::Cosine);
}

NoiseSchedule NoiseSchedule::linear_beta(int steps, double beta_start, double beta_end) {
  if (steps < 1) throw Error(ErrorKind::InvalidArgument, "schedule steps must be >= 1");
  std::vector<double> alphas(static_cast<std::size_t>(steps));
  for (int t = 0; t < steps; ++t) {
    const double frac = steps == 1 ? 0.0 : static_cast<double>(t) / (steps - 1);
    alphas[static_cast<std::size_t>(t)] = 1.0 - (beta_start + frac * (beta_end - beta_start));
  }
  return NoiseSchedule(std::move(alphas), ScheduleKind::LinearBeta);
}

NoiseSchedule NoiseSchedule::from_kind(ScheduleKind kind, int steps) {
  return kind == ScheduleKind::Cosine ? cosine(steps) : linear_beta(steps);
}

NoiseSchedule NoiseSchedule::from_alphas(std::vector<double> alphas, ScheduleKind kind) {
  return NoiseSchedule(std::move(alphas), kind);
}

double NoiseSchedule::alpha(int t) const {
  if (t < 1 || t > steps()) throw Error(ErrorKind::TimestepOutOfRange, "alpha(" + std::to_string(t) + ")");
  return alphas_[static_cast<std::size_t>(t - 1)];
}

double NoiseSchedule::alpha_bar(int t) const {
  if (t < 0 || t > steps()) throw Error(ErrorKind::TimestepOutOfRange, "alpha_bar(" + std::to_string(t) + ")");
  return alpha_bars_[static_cast<std::size_t>(t)];
}

void DiffusionConfig::validate() const {
  if (!(eta_clip > 0.0)) throw Error(ErrorKind::InvalidArgument, "eta_clip must be > 0");
  if (inference_steps < 1 || inference_steps > schedule.steps()) {
    throw Error(ErrorKind::InvalidArgument, "inference_steps must lie in [1, T]");
  }
  if (!(ddim_eta >= 0.0 && ddim_eta <= 1.0)) throw Error(ErrorKind::InvalidArgument, "ddim_eta must lie in [0, 1]");
  if (sinkhorn_iterations < 1) throw Error(ErrorKind::InvalidArgument, "sinkhorn_iterations must be >= 1");
}

double f_epsilon(double x, double eta) {
  if (x == 0.0) return 0.0;
  const double frac = std::abs(x) - std::trunc(std::abs(x));
  return frac * (x > 0.0 ? 1.0 : -1.0) * eta;
}

Eigen::MatrixXd noise_transform(const Eigen::MatrixXd& eps, DiffusionMode mode, double eta_clip) {
  if (mode == DiffusionMode::Deformable) return eps;
  return eps.unaryExpr([eta_clip](double x) { return f_epsilon(x, eta_clip); });
}

MatchMatrix manifold_projection(const Eigen::MatrixXd& raw, const DiffusionConfig& cfg) {
  if (!raw.allFinite()) throw Error(ErrorKind::NonFiniteInput, "projection input has non-finite entries");
  Eigen::MatrixXd shaped;
  if (cfg.mode == DiffusionMode::Rigid) {
    shaped = raw.array() - raw.minCoeff();
    // A constant matrix has no mass after the shift; it projects to uniform.
    if (!(shaped.maxCoeff() > 0.0)) shaped.setOnes();
  } else {
    shaped = (1.0 / (1.0 + (-raw.array()).exp())).matrix();
  }
  return sinkhorn_project(MatchMatrix(std::move(shaped)), cfg.sinkhorn_iterations, false);
}

Eigen::MatrixXd forward_diffuse_raw(const MatchMatrix& e0, int t, const DiffusionConfig& cfg,
                                    const Eigen::MatrixXd& noise) {
  if (t < 0 || t > cfg.schedule.steps()) {
    throw Error(ErrorKind::TimestepOutOfRange, "t=" + std::to_string(t) + " outside [0, T]");
  }
  if (noise.rows() != e0.entries.rows() || noise.cols() != e0.entries.cols()) {
    throw Error(ErrorKind::ShapeMismatch, "noise shape differs from E0");
  }
  if (!noise.allFinite()) throw Error(ErrorKind::NonFiniteNoise, "noise draw has non-finite entries");
  const double ab = cfg.schedule.alpha_bar(t);
  return std::sqrt(ab) * e0.entries + std::sqrt(1.0 - ab) * noise_transform(noise, cfg.mode, cfg.eta_clip);
}

MatchMatrix forward_diffuse(const MatchMatrix& e0, int t, const DiffusionConfig& cfg, const Eigen::MatrixXd& noise) {
  return manifold_projection(forward_diffuse_raw(e0, t, cfg, noise), cfg);
}

MatchMatrix forward_diffuse(const MatchMatrix& e0, int t, const DiffusionConfig& cfg, Rng& rng) {
  const Eigen::MatrixXd noise = gaussian_matrix(e0.entries.rows(), e0.entries.cols(), rng);
  return forward_diffuse(e0, t, cfg, noise);
}

PosteriorCoefficients posterior_coefficients(double alpha_t, double alpha_bar_prev) {
  const double alpha_bar_t = alpha_t * alpha_bar_prev;
  const double denom = 1.0 - alpha_bar_t;
  if (!(denom > 0.0)) throw Error(ErrorKind::DegenerateAlphaBar, "1 - alpha_bar_t is zero");
  return {std::sqrt(alpha_t) * (1.0 - alpha_bar_prev) / denom, std::sqrt(alpha_bar_prev) * (1.0 - alpha_t) / denom,
          (1.0 - alpha_t) * (1.0 - alpha_bar_prev) / denom};
}

Posterior posterior_params(const MatchMatrix& e0, const MatchMatrix& et, int t, const NoiseSchedule& schedule) {
  if (t < 1 || t > schedule.steps()) {
    throw Error(ErrorKind::TimestepOutOfRange, "posterior t=" + std::to_string(t) + " outside [1, T]");
  }
  if (e0.rows() != et.rows() || e0.cols() != et.cols()) throw Error(ErrorKind::ShapeMismatch, "E0 and Et shapes differ");
  const auto c = posterior_coefficients(schedule.alpha(t), schedule.alpha_bar(t - 1));
  return {c.et_coef * et.entries + c.e0_coef * e0.entries, c.variance};
}

double ddim_sigma(double alpha_bar_from, double alpha_bar_to, double eta) {
  if (eta == 0.0) return 0.0;
  const double ratio = std::max(0.0, 1.0 - alpha_bar_from / alpha_bar_to);
  return eta * std::sqrt((1.0 - alpha_bar_to) / (1.0 - alpha_bar_from)) * std::sqrt(ratio);
}

Eigen::MatrixXd ddim_update(const Eigen::MatrixXd& et, const Eigen::MatrixXd& e0_hat, double alpha_bar_from,
                            double alpha_bar_to, double eta, const Eigen::MatrixXd* z) {
  if (1.0 - alpha_bar_from < 1e-12) throw Error(ErrorKind::DegenerateAlphaBar, "1 - alpha_bar(t_from) < 1e-12");
  if (et.rows() != e0_hat.rows() || et.cols() != e0_hat.cols()) {
    throw Error(ErrorKind::ShapeMismatch, "E^t and prediction shapes differ");
  }
  const Eigen::MatrixXd eps_hat = (et - std::sqrt(alpha_bar_from) * e0_hat) / std::sqrt(1.0 - alpha_bar_from);
  const double sigma = ddim_sigma(alpha_bar_from, alpha_bar_to, eta);
  const double dir = std::sqrt(std::max(0.0, 1.0 - alpha_bar_to - sigma * sigma));
  Eigen::MatrixXd out = std::sqrt(alpha_bar_to) * e0_hat + dir * eps_hat;
  if (sigma > 0.0) {
    if (z == nullptr) throw Error(ErrorKind::InvalidArgument, "stochastic DDIM step needs a noise draw");
    out += sigma * *z;
  }
  return out;
}

MatchMatrix ddim_step(const MatchMatrix& et, const MatchMatrix& e0_hat, int t_from, int t_to,
                      const DiffusionConfig& cfg, Rng* rng) {
  if (t_to >= t_from) throw Error(ErrorKind::TimestepOrder, "t_to must be < t_from");
  if (t_to < 0 || t_from > cfg.schedule.steps()) throw Error(ErrorKind::TimestepOutOfRange, "ddim timesteps out of range");
  const double ab_from = cfg.schedule.alpha_bar(t_from);
  const double ab_to = cfg.schedule.alpha_bar(t_to);
  Eigen::MatrixXd z;
  if (ddim_sigma(ab_from, ab_to, cfg.ddim_eta) > 0.0) {
    if (rng == nullptr) throw Error(ErrorKind::InvalidArgument, "stochastic DDIM step needs an rng");
    z = gaussian_matrix(et.entries.rows(), et.entries.cols(), *rng);
  }
  const Eigen::MatrixXd raw = ddim_update(et.entries, e0_hat.entries, ab_from, ab_to, cfg.ddim_eta,
                                          z.size() > 0 ? &z : nullptr);
  return manifold_projection(raw, cfg);
}

std::vector<int> inference_timesteps(int total_steps, int inference_steps) {
  if (inference_steps < 1 || inference_steps > total_steps) {
    throw Error(ErrorKind::InvalidArgument, "inference_steps must lie in [1, T]");
  }
  std::vector<int> ts;
  ts.reserve(static_cast<std::size_t>(inference_steps) + 1);
  for (int s = inference_steps; s >= 0; --s) {
    ts.push_back(static_cast<int>(std::llround(static_cast<double>(total_steps) * s / inference_steps)));
  }
  return ts;
}

namespace {

void check_loss_shapes(const MatchMatrix& e0_hat, const MatchMatrix& e0) {
  if (e0_hat.rows() != e0.rows() || e0_hat.cols() != e0.cols()) {
    throw Error(ErrorKind::ShapeMismatch, "prediction and target shapes differ");
  }
}

}  // namespace

double simple_loss(const MatchMatrix& e0_hat, const MatchMatrix& e0, FocalParams focal) {
  check_loss_shapes(e0_hat, e0);
  const double n = static_cast<double>(e0_hat.rows());
  double total = 0.0;
  for (Eigen::Index i = 0; i < e0.entries.rows(); ++i) {
    for (Eigen::Index j = 0; j < e0.entries.cols(); ++j) {
      const double p = std::clamp(n * e0_hat.entries(i, j), kFocalClamp, 1.0 - kFocalClamp);
      if (e0.entries(i, j) > 0.0) total += -focal.alpha * std::pow(1.0 - p, focal.gamma) * std::log(p);
      else total += -(1.0 - focal.alpha) * std::pow(p, focal.gamma) * std::log(1.0 - p);
    }
  }
  return total / static_cast<double>(e0.entries.size());
}

Eigen::MatrixXd simple_loss_gradient(const MatchMatrix& e0_hat, const MatchMatrix& e0, FocalParams focal) {
  check_loss_shapes(e0_hat, e0);
  const double n = static_cast<double>(e0_hat.rows());
  const double scale = n / static_cast<double>(e0.entries.size());
  const double g = focal.gamma;
  Eigen::MatrixXd grad = Eigen::MatrixXd::Zero(e0.entries.rows(), e0.entries.cols());
  for (Eigen::Index i = 0; i < e0.entries.rows(); ++i) {
    for (Eigen::Index j = 0; j < e0.entries.cols(); ++j) {
      const double p = n * e0_hat.entries(i, j);
      if (p < kFocalClamp || p > 1.0 - kFocalClamp) continue;
      double dp = 0.0;
      if (e0.entries(i, j) > 0.0) {
        const double lead = g == 0.0 ? 0.0 : g * std::pow(1.0 - p, g - 1.0) * std::log(p);
        dp = focal.alpha * (lead - std::pow(1.0 - p, g) / p);
      } else {
        const double lead = g == 0.0 ? 0.0 : g * std::pow(p, g - 1.0) * std::log(1.0 - p);
        dp = -(1.0 - focal.alpha) * (lead - std::pow(p, g) / (1.0 - p));
      }
      grad(i, j) = dp * scale;
    }
  }
  return grad;
}

}  // namespace diffreg
