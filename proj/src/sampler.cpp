#include "diffreg/denoiser.hpp"
#include "diffreg/diffusion.hpp"
#include "diffreg/error.hpp"

namespace diffreg {

MatchMatrix initial_state(const SampleInit& init, std::size_t rows, std::size_t cols, const DiffusionConfig& cfg,
                          Rng& rng) {
  if (const auto* m = std::get_if<MatchMatrix>(&init)) {
    if (m->rows() != rows || m->cols() != cols) throw Error(ErrorKind::ShapeMismatch, "initial matrix shape mismatch");
    return manifold_projection(m->entries, cfg);
  }
  const Eigen::MatrixXd eps =
      gaussian_matrix(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols), rng);
  return manifold_projection(noise_transform(eps, cfg.mode, cfg.eta_clip), cfg);
}

SampleResult reverse_sample(const SampleInit& init, const Denoiser& denoiser, const ScenePair& pair,
                            const DiffusionConfig& cfg, Rng& rng) {
  cfg.validate();
  const auto ts = inference_timesteps(cfg.schedule.steps(), cfg.inference_steps);
  SampleResult out;
  MatchMatrix state = initial_state(init, pair.source.size(), pair.target.size(), cfg, rng);
  out.trajectory.push_back(state);
  out.timesteps.push_back(ts.front());
  for (std::size_t s = 0; s + 1 < ts.size(); ++s) {
    MatchMatrix e0_hat = denoiser.predict(state, pair);
    ++out.denoiser_calls;
    state = ddim_step(state, e0_hat, ts[s], ts[s + 1], cfg, &rng);
    out.predictions.push_back(std::move(e0_hat));
    out.trajectory.push_back(state);
    out.timesteps.push_back(ts[s + 1]);
  }
  out.final_matrix = state;
  return out;
}

}  // namespace diffreg
