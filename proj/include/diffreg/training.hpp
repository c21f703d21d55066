#pragma once

#include "diffreg/attention.hpp"
#include "diffreg/denoiser.hpp"
#include "diffreg/diffusion.hpp"
#include "diffreg/random.hpp"
#include "diffreg/scene.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace diffreg {

struct TrainingExample {
  ScenePair pair;
  MatchMatrix e0;
};

/// Pairs with their ground-truth matrices. Throws EmptyDataset.
std::vector<TrainingExample> make_training_set(const std::vector<ScenePair>& pairs, int sinkhorn_iterations);

struct TrainConfig {
  int iterations = 500;
  double learning_rate = 2.0;
  double momentum = 0.9;
  double grad_clip = 1.0;  // global-norm clip; 0 disables
  std::uint64_t seed = 0;
  FocalParams focal;
  GThetaConfig gtheta;

  /// Throws InvalidArgument.
  void validate() const;
};

/// Everything needed to continue an interrupted run bit-for-bit.
struct TrainState {
  AttentionParams params;
  AttentionParams velocity;
  std::uint64_t iteration = 0;
  Rng rng;
  std::vector<double> loss_history;
};

TrainState make_train_state(AttentionParams params, std::uint64_t seed);

/// Runs `steps` SGD-with-momentum iterations: sample an example and t ∈ {1..T},
/// diffuse, predict, take the focal loss and step v ← μv + g, θ ← θ − lr·v.
void train_steps(TrainState& state, const std::vector<TrainingExample>& data, const DiffusionConfig& diffusion,
                 const TrainConfig& cfg, int steps);

struct TrainResult {
  AttentionParams params;
  std::vector<double> loss_history;
};

/// Fresh run of `cfg.iterations` steps seeded by `cfg.seed`. Throws EmptyDataset.
TrainResult train_denoiser(const AttentionParams& params, const std::vector<TrainingExample>& data,
                           const DiffusionConfig& diffusion, const TrainConfig& cfg);

/// Mean loss over a fixed probe set: `probes_per_example` (t, noise) draws per
/// example from a stream seeded by `seed`. The probes depend only on the seed,
/// so two parameter sets are compared on identical inputs.
double probe_loss(const AttentionParams& params, const std::vector<TrainingExample>& data,
                  const DiffusionConfig& diffusion, const TrainConfig& cfg, std::size_t probes_per_example,
                  std::uint64_t seed);

/// Mean of the first and last `window` losses; ratio = last / first.
double loss_ratio(const std::vector<double>& history, std::size_t window = 10);

}  // namespace diffreg
