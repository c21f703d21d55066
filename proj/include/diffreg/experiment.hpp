#pragma once

#include "diffreg/denoiser.hpp"
#include "diffreg/diffusion.hpp"
#include "diffreg/metrics.hpp"
#include "diffreg/registration.hpp"
#include "diffreg/scene.hpp"

#include "json.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <vector>

namespace diffreg {

inline constexpr int kResultFormatVersion = 1;

/// "analytic" or "trained:<path to parameter archive>".
struct DenoiserSpec {
  std::string kind = "analytic";
  double descriptor_weight = 10.0;  // analytic only

  [[nodiscard]] bool trained() const { return kind.rfind("trained:", 0) == 0; }
  [[nodiscard]] std::string params_path() const { return trained() ? kind.substr(8) : std::string(); }
  /// Throws InvalidArgument for an unknown kind.
  void validate() const;
};

/// Throws InvalidArgument, or Io when a trained archive is missing.
std::shared_ptr<const Denoiser> make_denoiser(const DenoiserSpec& spec, const GThetaConfig& gtheta);

struct ExperimentConfig {
  GeneratorSpec generator;
  DenoiserSpec denoiser;
  ScheduleKind schedule = ScheduleKind::Cosine;
  int diffusion_steps = 1000;
  double eta_clip = 1.5;
  double ddim_eta = 0.0;
  GThetaConfig gtheta;
  ExtractionConfig extraction;
  std::vector<int> steps{1, 20};
  std::vector<double> overlaps;  // sweep grid; empty: generator.overlap_fraction only
  std::size_t trials = 50;
  std::uint64_t seed = 0;
  double tau_ratio = 0.04;  // τ = tau_ratio · scene diameter
  std::size_t workers = 1;

  /// Diffusion settings for `inference_steps` with the generator's mode.
  [[nodiscard]] DiffusionConfig diffusion(int inference_steps) const;
  /// Throws InvalidArgument.
  void validate() const;
};

nlohmann::json to_json(const ExperimentConfig& cfg);
/// Missing keys keep their defaults; throws InvalidArgument on bad values or unknown top-level keys.
ExperimentConfig experiment_config_from_json(const nlohmann::json& j);

/// Sets a dotted key ("generator.n_points") to a value parsed as JSON, or as a
/// string when it is not valid JSON. Throws InvalidArgument on a malformed key.
void apply_override(nlohmann::json& j, const std::string& assignment);

/// Seeds of trial `index`: scene generation, then one sampling stream per step count.
std::uint64_t trial_scene_seed(std::uint64_t master, std::size_t index);
std::uint64_t trial_sampling_seed(std::uint64_t master, std::size_t index, int steps);

struct TrialResult {
  std::size_t trial = 0;
  double overlap = 0.0;
  int steps = 0;
  std::uint64_t scene_seed = 0;
  bool failed = false;
  std::string error;
  MetricsReport report;
  double seconds = 0.0;
};

struct StatSummary {
  double mean = 0.0;
  double median = 0.0;
  double std = 0.0;  // population
};

StatSummary summarize(std::vector<double> values);

struct GroupSummary {
  double overlap = 0.0;
  int steps = 0;
  std::size_t count = 0;
  std::size_t failed = 0;
  bool empty = true;
  std::map<std::string, StatSummary> metrics;
};

struct ExperimentResult {
  ExperimentConfig config;
  std::vector<TrialResult> trials;  // ordered by (overlap, trial, steps)
  std::vector<GroupSummary> summary;
  double seconds = 0.0;

  /// Summary for (overlap, steps); throws InvalidArgument when absent.
  [[nodiscard]] const GroupSummary& group(int steps, double overlap) const;
  [[nodiscard]] const GroupSummary& group(int steps) const;
};

/// One registration trial: generate, sample with `steps` denoiser calls, evaluate.
TrialResult run_trial(const ExperimentConfig& cfg, const Denoiser& denoiser, std::size_t index, double overlap,
                      int steps);

/// All trials over overlaps × steps, `cfg.workers` threads, merged by index.
/// Individual trial failures are recorded, not thrown.
ExperimentResult run_experiment(const ExperimentConfig& cfg);

nlohmann::json to_json(const TrialResult& r);
nlohmann::json to_json(const GroupSummary& g);
/// Summary document with format_version, resolved config and a separate timing object.
nlohmann::json summary_json(const ExperimentResult& r);

/// results.jsonl, summary.json and results.csv under `dir`.
void write_experiment(const std::filesystem::path& dir, const ExperimentResult& r);
std::string results_csv(const ExperimentResult& r);

/// 64-bit FNV-1a over raw bytes.
std::uint64_t fnv1a64(const void* data, std::size_t size, std::uint64_t seed = 0xcbf29ce484222325ULL);
std::uint64_t fnv1a64(const MatchMatrix& m);

/// frame_NNN.bin per trajectory state plus trajectory.json listing timestep,
/// ᾱ, file and FNV-1a hash of each frame, with the seed and a hash of `config`.
void write_trajectory(const std::filesystem::path& dir, const SampleResult& sample, const NoiseSchedule& schedule,
                      std::uint64_t seed, const nlohmann::json& config);

/// IR of the correspondences extracted from each trajectory state.
std::vector<double> trajectory_inlier_ratios(const SampleResult& sample, const ScenePair& pair,
                                             const GThetaConfig& gtheta, const ExtractionConfig& extraction,
                                             double tau);

}  // namespace diffreg
