#include "diffreg/training.hpp"

#include "diffreg/error.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace diffreg {

std::vector<TrainingExample> make_training_set(const std::vector<ScenePair>& pairs, int sinkhorn_iterations) {
  if (pairs.empty()) throw Error(ErrorKind::EmptyDataset, "training needs at least one scene");
  std::vector<TrainingExample> out;
  out.reserve(pairs.size());
  for (const auto& p : pairs) out.push_back({p, ground_truth_matrix(p, sinkhorn_iterations)});
  return out;
}

void TrainConfig::validate() const {
  if (iterations < 0) throw Error(ErrorKind::InvalidArgument, "iterations must be >= 0");
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
    throw Error(ErrorKind::InvalidArgument, "learning rate must be finite and >= 0");
  }
  if (!(momentum >= 0.0 && momentum < 1.0)) throw Error(ErrorKind::InvalidArgument, "momentum must lie in [0, 1)");
  if (!(grad_clip >= 0.0)) throw Error(ErrorKind::InvalidArgument, "grad_clip must be >= 0");
}

TrainState make_train_state(AttentionParams params, std::uint64_t seed) {
  params.validate();
  TrainState s;
  s.velocity = params.zeros_like();
  s.params = std::move(params);
  s.rng.seed(seed);
  return s;
}

void train_steps(TrainState& state, const std::vector<TrainingExample>& data, const DiffusionConfig& diffusion,
                 const TrainConfig& cfg, int steps) {
  if (data.empty()) throw Error(ErrorKind::EmptyDataset, "training needs at least one scene");
  cfg.validate();
  diffusion.validate();
  std::uniform_int_distribution<std::size_t> pick(0, data.size() - 1);
  std::uniform_int_distribution<int> timestep(1, diffusion.schedule.steps());

  auto params = state.params.tensors();
  auto velocity = state.velocity.tensors();
  for (int step = 0; step < steps; ++step) {
    const auto& ex = data[pick(state.rng)];
    const int t = timestep(state.rng);
    const MatchMatrix et = forward_diffuse(ex.e0, t, diffusion, state.rng);
    LossAndGradient lg = denoiser_loss_and_gradient(state.params, et, ex.pair, ex.e0, cfg.gtheta, cfg.focal);
    if (!std::isfinite(lg.loss)) throw Error(ErrorKind::NonFiniteInput, "training loss became non-finite");

    auto grads = lg.gradient.tensors();
    double norm2 = 0.0;
    for (const auto& g : grads) norm2 += Eigen::Map<const Eigen::VectorXd>(g.data, g.size()).squaredNorm();
    if (!std::isfinite(norm2)) throw Error(ErrorKind::NonFiniteInput, "training gradient became non-finite");
    const double norm = std::sqrt(norm2);
    const double scale = (cfg.grad_clip > 0.0 && norm > cfg.grad_clip) ? cfg.grad_clip / norm : 1.0;

    for (std::size_t k = 0; k < grads.size(); ++k) {
      Eigen::Map<Eigen::VectorXd> v(velocity[k].data, velocity[k].size());
      Eigen::Map<Eigen::VectorXd> theta(params[k].data, params[k].size());
      v = cfg.momentum * v + scale * Eigen::Map<const Eigen::VectorXd>(grads[k].data, grads[k].size());
      theta -= cfg.learning_rate * v;
    }
    state.loss_history.push_back(lg.loss);
    ++state.iteration;
  }
}

TrainResult train_denoiser(const AttentionParams& params, const std::vector<TrainingExample>& data,
                           const DiffusionConfig& diffusion, const TrainConfig& cfg) {
  if (data.empty()) throw Error(ErrorKind::EmptyDataset, "training needs at least one scene");
  TrainState state = make_train_state(params, cfg.seed);
  train_steps(state, data, diffusion, cfg, cfg.iterations);
  return {std::move(state.params), std::move(state.loss_history)};
}

double probe_loss(const AttentionParams& params, const std::vector<TrainingExample>& data,
                  const DiffusionConfig& diffusion, const TrainConfig& cfg, std::size_t probes_per_example,
                  std::uint64_t seed) {
  if (data.empty()) throw Error(ErrorKind::EmptyDataset, "training needs at least one scene");
  if (probes_per_example == 0) throw Error(ErrorKind::InvalidArgument, "probes_per_example must be >= 1");
  Rng rng(seed);
  std::uniform_int_distribution<int> timestep(1, diffusion.schedule.steps());
  double total = 0.0;
  for (const auto& ex : data) {
    for (std::size_t k = 0; k < probes_per_example; ++k) {
      const int t = timestep(rng);
      const MatchMatrix et = forward_diffuse(ex.e0, t, diffusion, rng);
      total += denoiser_loss_and_gradient(params, et, ex.pair, ex.e0, cfg.gtheta, cfg.focal).loss;
    }
  }
  return total / static_cast<double>(data.size() * probes_per_example);
}

double loss_ratio(const std::vector<double>& history, std::size_t window) {
  if (history.empty()) return 1.0;
  const std::size_t w = std::clamp<std::size_t>(window, 1, history.size());
  const double first = std::accumulate(history.begin(), history.begin() + static_cast<std::ptrdiff_t>(w), 0.0) / w;
  const double last = std::accumulate(history.end() - static_cast<std::ptrdiff_t>(w), history.end(), 0.0) / w;
  return first > 0.0 ? last / first : 1.0;
}

}  // namespace diffreg
