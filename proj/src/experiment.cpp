#include "diffreg/experiment.hpp"

#include "diffreg/attention.hpp"
#include "diffreg/error.hpp"
#include "diffreg/log.hpp"
#include "diffreg/matrix_io.hpp"
#include "diffreg/param_io.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <thread>

namespace diffreg {

namespace {

using json = nlohmann::json;

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::Io, "cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw Error(ErrorKind::Io, "write failed: " + path.string());
}

std::string procrustes_name(ProcrustesWeights w) { return w == ProcrustesWeights::AllCells ? "all" : "topk"; }

ProcrustesWeights procrustes_from_string(const std::string& s) {
  if (s == "all") return ProcrustesWeights::AllCells;
  if (s == "topk") return ProcrustesWeights::TopK;
  throw Error(ErrorKind::InvalidArgument, "unknown procrustes weighting '" + s + "' (all|topk)");
}

json gtheta_json(const GThetaConfig& g) {
  return {{"sinkhorn_iterations", g.sinkhorn_iterations},
          {"procrustes", procrustes_name(g.procrustes)},
          {"procrustes_topk", g.procrustes_topk},
          {"adaptive_bandwidth", g.adaptive_bandwidth},
          {"bandwidth", g.bandwidth},
          {"bandwidth_cells", g.bandwidth_cells},
          {"bandwidth_quantile", g.bandwidth_quantile},
          {"bandwidth_scale", g.bandwidth_scale},
          {"min_bandwidth_ratio", g.min_bandwidth_ratio}};
}

GThetaConfig gtheta_from_json(const json& j, GThetaConfig g) {
  g.sinkhorn_iterations = j.value("sinkhorn_iterations", g.sinkhorn_iterations);
  if (j.contains("procrustes")) g.procrustes = procrustes_from_string(j.at("procrustes").get<std::string>());
  g.procrustes_topk = j.value("procrustes_topk", g.procrustes_topk);
  g.adaptive_bandwidth = j.value("adaptive_bandwidth", g.adaptive_bandwidth);
  g.bandwidth = j.value("bandwidth", g.bandwidth);
  g.bandwidth_cells = j.value("bandwidth_cells", g.bandwidth_cells);
  g.bandwidth_quantile = j.value("bandwidth_quantile", g.bandwidth_quantile);
  g.bandwidth_scale = j.value("bandwidth_scale", g.bandwidth_scale);
  g.min_bandwidth_ratio = j.value("min_bandwidth_ratio", g.min_bandwidth_ratio);
  return g;
}

const char* const kMetricNames[] = {"inlier_ratio", "nfmr",  "rotation_error", "translation_error", "epe",
                                    "acc_s",        "acc_r", "outlier_ratio",  "num_correspondences"};

double metric_value(const MetricsReport& r, const std::string& name) {
  if (name == "inlier_ratio") return r.inlier_ratio;
  if (name == "nfmr") return r.nfmr;
  if (name == "rotation_error") return r.rotation_error;
  if (name == "translation_error") return r.translation_error;
  if (name == "epe") return r.epe;
  if (name == "acc_s") return r.acc_s;
  if (name == "acc_r") return r.acc_r;
  if (name == "outlier_ratio") return r.outlier_ratio;
  return static_cast<double>(r.num_correspondences);
}

}  // namespace

void DenoiserSpec::validate() const {
  if (kind == "analytic") {
    if (!(descriptor_weight >= 0.0)) throw Error(ErrorKind::InvalidArgument, "descriptor_weight must be >= 0");
    return;
  }
  if (trained() && !params_path().empty()) return;
  throw Error(ErrorKind::InvalidArgument, "unknown denoiser '" + kind + "' (analytic | trained:PATH)");
}

std::shared_ptr<const Denoiser> make_denoiser(const DenoiserSpec& spec, const GThetaConfig& gtheta) {
  spec.validate();
  if (!spec.trained()) {
    return std::make_shared<GThetaDenoiser>(std::make_shared<AnalyticFeatureNet>(spec.descriptor_weight), gtheta);
  }
  auto params = std::make_shared<const AttentionParams>(read_params(spec.params_path()));
  return std::make_shared<GThetaDenoiser>(std::make_shared<AttentionFeatureNet>(std::move(params)), gtheta);
}

DiffusionConfig ExperimentConfig::diffusion(int inference_steps) const {
  DiffusionConfig d;
  d.schedule = NoiseSchedule::from_kind(schedule, diffusion_steps);
  d.mode = generator.mode;
  d.eta_clip = eta_clip;
  d.ddim_eta = ddim_eta;
  d.sinkhorn_iterations = gtheta.sinkhorn_iterations;
  d.inference_steps = inference_steps;
  return d;
}

void ExperimentConfig::validate() const {
  generator.validate();
  denoiser.validate();
  if (diffusion_steps < 1) throw Error(ErrorKind::InvalidArgument, "diffusion steps must be >= 1");
  if (steps.empty()) throw Error(ErrorKind::InvalidArgument, "sampling.steps must not be empty");
  for (int s : steps) diffusion(s).validate();
  for (double o : overlaps) {
    if (!(o > 0.0 && o <= 1.0)) throw Error(ErrorKind::InvalidArgument, "overlaps must lie in (0, 1]");
  }
  if (!(tau_ratio > 0.0)) throw Error(ErrorKind::InvalidArgument, "tau_ratio must be > 0");
  if (workers < 1) throw Error(ErrorKind::InvalidArgument, "workers must be >= 1");
  if (gtheta.sinkhorn_iterations < 1) throw Error(ErrorKind::InvalidArgument, "sinkhorn_iterations must be >= 1");
}

json to_json(const ExperimentConfig& cfg) {
  return {{"generator", to_json(cfg.generator)},
          {"denoiser", {{"kind", cfg.denoiser.kind}, {"descriptor_weight", cfg.denoiser.descriptor_weight}}},
          {"diffusion",
           {{"schedule", to_string(cfg.schedule)},
            {"steps", cfg.diffusion_steps},
            {"eta_clip", cfg.eta_clip},
            {"ddim_eta", cfg.ddim_eta}}},
          {"pose", gtheta_json(cfg.gtheta)},
          {"extraction",
           {{"mutual", cfg.extraction.mutual}, {"k", cfg.extraction.k}, {"gate_factor", cfg.extraction.gate_factor}}},
          {"sampling", {{"steps", cfg.steps}}},
          {"overlaps", cfg.overlaps},
          {"trials", cfg.trials},
          {"seed", cfg.seed},
          {"tau_ratio", cfg.tau_ratio},
          {"workers", cfg.workers}};
}

ExperimentConfig experiment_config_from_json(const json& j) {
  static const std::set<std::string> known{"generator", "denoiser", "diffusion", "pose",      "extraction",
                                           "sampling",  "overlaps", "trials",    "seed",      "tau_ratio",
                                           "workers"};
  if (!j.is_object()) throw Error(ErrorKind::InvalidArgument, "experiment config must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (!known.contains(key)) throw Error(ErrorKind::InvalidArgument, "unknown config key '" + key + "'");
  }
  ExperimentConfig cfg;
  try {
    if (j.contains("generator")) cfg.generator = generator_spec_from_json(j.at("generator"));
    if (j.contains("denoiser")) {
      const auto& d = j.at("denoiser");
      cfg.denoiser.kind = d.value("kind", cfg.denoiser.kind);
      cfg.denoiser.descriptor_weight = d.value("descriptor_weight", cfg.denoiser.descriptor_weight);
    }
    if (j.contains("diffusion")) {
      const auto& d = j.at("diffusion");
      if (d.contains("schedule")) cfg.schedule = schedule_kind_from_string(d.at("schedule").get<std::string>());
      cfg.diffusion_steps = d.value("steps", cfg.diffusion_steps);
      cfg.eta_clip = d.value("eta_clip", cfg.eta_clip);
      cfg.ddim_eta = d.value("ddim_eta", cfg.ddim_eta);
    }
    if (j.contains("pose")) cfg.gtheta = gtheta_from_json(j.at("pose"), cfg.gtheta);
    if (j.contains("extraction")) {
      const auto& e = j.at("extraction");
      cfg.extraction.mutual = e.value("mutual", cfg.extraction.mutual);
      cfg.extraction.k = e.value("k", cfg.extraction.k);
      cfg.extraction.gate_factor = e.value("gate_factor", cfg.extraction.gate_factor);
    }
    if (j.contains("sampling")) {
      const auto& s = j.at("sampling").at("steps");
      cfg.steps = s.is_array() ? s.get<std::vector<int>>() : std::vector<int>{s.get<int>()};
    }
    if (j.contains("overlaps")) cfg.overlaps = j.at("overlaps").get<std::vector<double>>();
    cfg.trials = j.value("trials", cfg.trials);
    cfg.seed = j.value("seed", cfg.seed);
    cfg.tau_ratio = j.value("tau_ratio", cfg.tau_ratio);
    cfg.workers = j.value("workers", cfg.workers);
  } catch (const json::exception& ex) {
    throw Error(ErrorKind::InvalidArgument, std::string("bad experiment config: ") + ex.what());
  }
  cfg.validate();
  return cfg;
}

void apply_override(json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw Error(ErrorKind::InvalidArgument, "override '" + assignment + "' is not key=value");
  }
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;

  json* node = &j;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw Error(ErrorKind::InvalidArgument, "malformed override key '" + key + "'");
    if (!node->is_object()) *node = json::object();
    if (dot == std::string::npos) {
      (*node)[part] = std::move(value);
      return;
    }
    node = &(*node)[part];
    start = dot + 1;
  }
}

std::uint64_t trial_scene_seed(std::uint64_t master, std::size_t index) { return derive_seed(master, index); }

std::uint64_t trial_sampling_seed(std::uint64_t master, std::size_t index, int steps) {
  return derive_seed(derive_seed(master, index), static_cast<std::uint64_t>(steps));
}

StatSummary summarize(std::vector<double> values) {
  StatSummary s;
  if (values.empty()) return s;
  const double n = static_cast<double>(values.size());
  double sum = 0.0;
  for (double v : values) sum += v;
  s.mean = sum / n;
  double var = 0.0;
  for (double v : values) var += (v - s.mean) * (v - s.mean);
  s.std = std::sqrt(var / n);
  std::sort(values.begin(), values.end());
  const std::size_t mid = values.size() / 2;
  s.median = values.size() % 2 == 1 ? values[mid] : 0.5 * (values[mid - 1] + values[mid]);
  return s;
}

const GroupSummary& ExperimentResult::group(int steps, double overlap) const {
  for (const auto& g : summary) {
    if (g.steps == steps && g.overlap == overlap) return g;
  }
  throw Error(ErrorKind::InvalidArgument, "no summary for steps=" + std::to_string(steps));
}

const GroupSummary& ExperimentResult::group(int steps) const {
  for (const auto& g : summary) {
    if (g.steps == steps) return g;
  }
  throw Error(ErrorKind::InvalidArgument, "no summary for steps=" + std::to_string(steps));
}

TrialResult run_trial(const ExperimentConfig& cfg, const Denoiser& denoiser, std::size_t index, double overlap,
                      int steps) {
  const auto t0 = std::chrono::steady_clock::now();
  TrialResult r;
  r.trial = index;
  r.overlap = overlap;
  r.steps = steps;
  r.scene_seed = trial_scene_seed(cfg.seed, index);
  try {
    GeneratorSpec spec = cfg.generator;
    spec.overlap_fraction = overlap;
    spec.seed = r.scene_seed;
    const ScenePair pair = generate_scene(spec);
    Rng rng(trial_sampling_seed(cfg.seed, index, steps));
    const Registration reg =
        register_pair(WhiteNoise{}, denoiser, pair, cfg.diffusion(steps), cfg.gtheta, cfg.extraction, rng);
    if (!reg.sample.final_matrix.entries.allFinite()) {
      throw Error(ErrorKind::NonFiniteInput, "sampling produced non-finite entries");
    }
    r.report = evaluate_correspondences(reg.correspondences, pair, cfg.tau_ratio * pair.scene_diameter);
  } catch (const Error& ex) {
    r.failed = true;
    r.error = ex.what();
    log::warn("trial " + std::to_string(index) + " failed: " + r.error);
  }
  r.seconds = seconds_since(t0);
  return r;
}

ExperimentResult run_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  ExperimentResult out;
  out.config = cfg;
  const std::vector<double> overlaps =
      cfg.overlaps.empty() ? std::vector<double>{cfg.generator.overlap_fraction} : cfg.overlaps;

  struct Task {
    double overlap;
    std::size_t trial;
    int steps;
  };
  std::vector<Task> tasks;
  for (double o : overlaps) {
    for (std::size_t t = 0; t < cfg.trials; ++t) {
      for (int s : cfg.steps) tasks.push_back({o, t, s});
    }
  }

  if (!tasks.empty()) {
    const auto denoiser = make_denoiser(cfg.denoiser, cfg.gtheta);
    out.trials.resize(tasks.size());
    std::atomic<std::size_t> next{0};
    const auto work = [&] {
      for (std::size_t k = next++; k < tasks.size(); k = next++) {
        out.trials[k] = run_trial(cfg, *denoiser, tasks[k].trial, tasks[k].overlap, tasks[k].steps);
      }
    };
    const std::size_t n_workers = std::min(cfg.workers, tasks.size());
    std::vector<std::thread> pool;
    for (std::size_t w = 1; w < n_workers; ++w) pool.emplace_back(work);
    work();
    for (auto& th : pool) th.join();
  }

  for (double o : overlaps) {
    for (int s : cfg.steps) {
      GroupSummary g;
      g.overlap = o;
      g.steps = s;
      std::map<std::string, std::vector<double>> values;
      for (const auto& r : out.trials) {
        if (r.overlap != o || r.steps != s) continue;
        ++g.count;
        if (r.failed) {
          ++g.failed;
          continue;
        }
        for (const char* name : kMetricNames) values[name].push_back(metric_value(r.report, name));
      }
      g.empty = values.empty();
      for (const char* name : kMetricNames) g.metrics[name] = summarize(values[name]);
      out.summary.push_back(std::move(g));
    }
  }
  out.seconds = seconds_since(t0);
  return out;
}

json to_json(const TrialResult& r) {
  json j = {{"trial", r.trial},     {"overlap", r.overlap}, {"steps", r.steps},
            {"scene_seed", r.scene_seed}, {"failed", r.failed}};
  if (r.failed) {
    j["error"] = r.error;
  } else {
    j["metrics"] = to_json(r.report);
  }
  return j;
}

json to_json(const GroupSummary& g) {
  json metrics = json::object();
  for (const auto& [name, s] : g.metrics) metrics[name] = {{"mean", s.mean}, {"median", s.median}, {"std", s.std}};
  return {{"overlap", g.overlap}, {"steps", g.steps},   {"count", g.count},
          {"failed", g.failed},   {"empty", g.empty},   {"metrics", std::move(metrics)}};
}

json summary_json(const ExperimentResult& r) {
  json groups = json::array();
  for (const auto& g : r.summary) groups.push_back(to_json(g));
  double trial_seconds = 0.0;
  for (const auto& t : r.trials) trial_seconds += t.seconds;
  return {{"format_version", kResultFormatVersion},
          {"config", to_json(r.config)},
          {"trials", r.trials.size()},
          {"empty", r.trials.empty()},
          {"summary", std::move(groups)},
          {"timing", {{"total_seconds", r.seconds}, {"trial_seconds", trial_seconds}}}};
}

std::string results_csv(const ExperimentResult& r) {
  std::ostringstream out;
  out << "overlap,trial,steps,scene_seed,failed";
  for (const char* name : kMetricNames) out << ',' << name;
  out << '\n';
  for (const auto& t : r.trials) {
    out << format_double(t.overlap) << ',' << t.trial << ',' << t.steps << ',' << t.scene_seed << ','
        << (t.failed ? 1 : 0);
    for (const char* name : kMetricNames) {
      out << ',';
      if (!t.failed) out << format_double(metric_value(t.report, name));
    }
    out << '\n';
  }
  return out.str();
}

void write_experiment(const std::filesystem::path& dir, const ExperimentResult& r) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw Error(ErrorKind::Io, "cannot create " + dir.string() + ": " + ec.message());
  std::string lines;
  for (const auto& t : r.trials) lines += to_json(t).dump() + "\n";
  write_text(dir / "results.jsonl", lines);
  write_text(dir / "summary.json", summary_json(r).dump(2) + "\n");
  write_text(dir / "results.csv", results_csv(r));
}

std::uint64_t fnv1a64(const void* data, std::size_t size, std::uint64_t seed) {
  const auto* bytes = static_cast<const unsigned char*>(data);
  std::uint64_t h = seed;
  for (std::size_t i = 0; i < size; ++i) {
    h ^= bytes[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t fnv1a64(const MatchMatrix& m) {
  // Same byte layout as the binary matrix file.
  const auto rows = static_cast<std::uint32_t>(m.rows());
  const auto cols = static_cast<std::uint32_t>(m.cols());
  std::uint64_t h = fnv1a64(&rows, sizeof rows);
  h = fnv1a64(&cols, sizeof cols, h);
  for (Eigen::Index i = 0; i < m.entries.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.entries.cols(); ++j) {
      const double v = m.entries(i, j);
      h = fnv1a64(&v, sizeof v, h);
    }
  }
  return h;
}

void write_trajectory(const std::filesystem::path& dir, const SampleResult& sample, const NoiseSchedule& schedule,
                      std::uint64_t seed, const nlohmann::json& config) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw Error(ErrorKind::Io, "cannot create " + dir.string() + ": " + ec.message());
  json frames = json::array();
  for (std::size_t k = 0; k < sample.trajectory.size(); ++k) {
    char name[32];
    std::snprintf(name, sizeof name, "frame_%03zu.bin", k);
    write_matrix_binary(dir / name, sample.trajectory[k]);
    char hash[20];
    std::snprintf(hash, sizeof hash, "%016llx", static_cast<unsigned long long>(fnv1a64(sample.trajectory[k])));
    frames.push_back({{"index", k},
                      {"timestep", sample.timesteps[k]},
                      {"alpha_bar", schedule.alpha_bar(sample.timesteps[k])},
                      {"file", name},
                      {"fnv1a64", hash}});
  }
  const std::string config_text = config.dump();
  char config_hash[20];
  std::snprintf(config_hash, sizeof config_hash, "%016llx",
                static_cast<unsigned long long>(fnv1a64(config_text.data(), config_text.size())));
  const json manifest = {{"format_version", kResultFormatVersion},
                         {"seed", seed},
                         {"config_fnv1a64", config_hash},
                         {"denoiser_calls", sample.denoiser_calls},
                         {"frames", std::move(frames)}};
  write_text(dir / "trajectory.json", manifest.dump(2) + "\n");
}

std::vector<double> trajectory_inlier_ratios(const SampleResult& sample, const ScenePair& pair,
                                             const GThetaConfig& gtheta, const ExtractionConfig& extraction,
                                             double tau) {
  std::vector<double> out;
  out.reserve(sample.trajectory.size());
  for (const auto& state : sample.trajectory) {
    const GThetaTrace pose = g_theta_pose_stage(state, pair, gtheta);
    out.push_back(inlier_ratio(extract_correspondences(state, pair, pose, extraction), pair, tau).value);
  }
  return out;
}

}  // namespace diffreg
