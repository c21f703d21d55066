#include "diffreg/cli.hpp"

#include "diffreg/experiment.hpp"
#include "diffreg/log.hpp"
#include "diffreg/matrix_io.hpp"
#include "diffreg/metrics.hpp"
#include "diffreg/param_io.hpp"
#include "diffreg/registration.hpp"
#include "diffreg/scene.hpp"
#include "diffreg/training.hpp"

#include "CLI11.hpp"
#include "json.hpp"

#include <chrono>
#include <cstdio>
#include <fstream>
#include <optional>
#include <ostream>
#include <sstream>
#include <thread>

namespace diffreg::cli {

namespace {

namespace fs = std::filesystem;
using json = nlohmann::json;

/// Error raised by argument validation; always exit code 2.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::Io, "cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw Error(ErrorKind::Io, "write failed: " + path.string());
}

json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Io, "cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& ex) {
    throw Error(ErrorKind::Format, path.string() + ": " + ex.what());
  }
}

/// Files are written into a hidden sibling directory and moved into `final`
/// on commit; an uncommitted stage is deleted.
class OutputStage {
 public:
  explicit OutputStage(fs::path final_dir) : final_(std::move(final_dir)) {
    if (final_.empty()) throw UsageError("--out is required");
    const fs::path parent = final_.has_parent_path() ? final_.parent_path() : fs::path(".");
    stage_ = parent / ("." + final_.filename().string() + ".partial");
    std::error_code ec;
    fs::remove_all(stage_, ec);
    fs::create_directories(stage_, ec);
    if (ec) throw Error(ErrorKind::Io, "cannot create " + stage_.string() + ": " + ec.message());
  }
  OutputStage(const OutputStage&) = delete;
  OutputStage& operator=(const OutputStage&) = delete;
  ~OutputStage() {
    if (!committed_) {
      std::error_code ec;
      fs::remove_all(stage_, ec);
    }
  }

  [[nodiscard]] const fs::path& dir() const { return stage_; }
  [[nodiscard]] fs::path final_path(const fs::path& name) const { return final_ / name; }

  void commit() {
    std::error_code ec;
    fs::create_directories(final_, ec);
    if (ec) throw Error(ErrorKind::Io, "cannot create " + final_.string() + ": " + ec.message());
    for (const auto& entry : fs::directory_iterator(stage_)) {
      const fs::path dest = final_ / entry.path().filename();
      fs::remove_all(dest, ec);
      fs::rename(entry.path(), dest, ec);
      if (ec) throw Error(ErrorKind::Io, "cannot move output to " + dest.string() + ": " + ec.message());
    }
    fs::remove_all(stage_, ec);
    committed_ = true;
  }

 private:
  fs::path final_;
  fs::path stage_;
  bool committed_ = false;
};

/// Options shared by every subcommand.
struct Common {
  std::string config;
  std::vector<std::string> sets;
  std::uint64_t seed = 0;
  std::string out;
  std::string verbosity;
  CLI::Option* seed_opt = nullptr;
};

void add_common(CLI::App& app, Common& c, bool needs_out) {
  app.add_option("--config", c.config, "JSON config file");
  app.add_option("--set", c.sets, "Override a config key: dotted.key=value (repeatable)");
  c.seed_opt = app.add_option("--seed", c.seed, "Master seed");
  auto* out = app.add_option("--out", c.out, "Output directory");
  if (needs_out) out->required();
  app.add_option("--verbosity", c.verbosity, "error|warn|info|debug");
}

json load_config(const Common& c) {
  json j = json::object();
  if (!c.config.empty()) {
    if (!fs::exists(c.config)) throw UsageError("config file not found: " + c.config);
    j = read_json_file(c.config);
    if (!j.is_object()) throw UsageError("config file must hold a JSON object: " + c.config);
  }
  for (const auto& s : c.sets) apply_override(j, s);
  return j;
}

void require_bundle(const std::string& dir) {
  if (!fs::exists(fs::path(dir) / "gt.json")) throw UsageError("bundle not found (no gt.json): " + dir);
}

std::vector<double> parse_double_list(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      out.push_back(std::stod(item));
    } catch (const std::exception&) {
      throw UsageError("not a number list: " + text);
    }
  }
  return out;
}

std::vector<int> parse_int_list(const std::string& text) {
  std::vector<int> out;
  for (double v : parse_double_list(text)) {
    if (v != static_cast<int>(v)) throw UsageError("not an integer list: " + text);
    out.push_back(static_cast<int>(v));
  }
  return out;
}

json transform_json(const RigidTransform& t) {
  json rot = json::array();
  for (int r = 0; r < 3; ++r) rot.push_back({t.rotation(r, 0), t.rotation(r, 1), t.rotation(r, 2)});
  return {{"rotation", rot}, {"translation", {t.translation(0), t.translation(1), t.translation(2)}}};
}

json correspondences_json(const Correspondences& cs) {
  json arr = json::array();
  for (const auto& c : cs) arr.push_back({c.source, c.target, c.confidence});
  return arr;
}

MatchMatrix read_matrix_any(const fs::path& path) {
  if (path.extension() == ".json") return matrix_from_json(read_json_file(path));
  return read_matrix_binary(path);
}

json stats_json(const MatrixStats& s) {
  return {{"rows", s.rows},
          {"cols", s.cols},
          {"mass", s.mass},
          {"min_entry", s.min_entry},
          {"max_entry", s.max_entry},
          {"row_sum_max_deviation", s.row_sum_max_deviation},
          {"col_sum_max_deviation", s.col_sum_max_deviation},
          {"mean_row_entropy", s.mean_row_entropy}};
}

// ---------------------------------------------------------------- generate

struct GenerateArgs {
  Common common;
  std::size_t n_points = 0;
  double overlap = 0.0;
  double noise = 0.0;
  bool noise_relative = false;
  std::string mode;
  double deformation = 0.0;
  std::string descriptors;
  std::size_t descriptor_dim = 0;
  double corruption = 0.0;
  double translation = 0.0;
  bool identity = false;
  bool no_shuffle = false;
  CLI::App* app = nullptr;
};

int cmd_generate(GenerateArgs& a, std::ostream& out) {
  json cfg = load_config(a.common);
  json spec = cfg.contains("generator") ? cfg.at("generator") : cfg;
  const auto given = [&](const char* name) { return a.app->get_option(name)->count() > 0; };
  if (given("--n-points")) spec["n_points"] = a.n_points;
  if (given("--overlap")) spec["overlap_fraction"] = a.overlap;
  if (given("--noise")) spec["noise_sigma"] = a.noise;
  if (a.noise_relative) spec["noise_relative"] = true;
  if (given("--mode")) spec["mode"] = a.mode;
  if (given("--deformation")) spec["deformation_amplitude"] = a.deformation;
  if (given("--descriptors")) spec["descriptor_kind"] = a.descriptors;
  if (given("--descriptor-dim")) spec["descriptor_dim"] = a.descriptor_dim;
  if (given("--corruption")) spec["descriptor_corruption"] = a.corruption;
  if (given("--translation")) spec["translation_range"] = a.translation;
  if (a.identity) spec["force_identity"] = true;
  if (a.no_shuffle) spec["shuffle"] = false;
  if (a.common.seed_opt->count() > 0) spec["seed"] = a.common.seed;

  const GeneratorSpec gs = generator_spec_from_json(spec);
  gs.validate();
  const ScenePair pair = generate_scene(gs);
  OutputStage stage(a.common.out);
  write_bundle(stage.dir(), pair);
  stage.commit();
  out << stage.final_path("gt.json").string() << '\n';
  return kExitOk;
}

// ---------------------------------------------------------------- register

struct RegisterArgs {
  Common common;
  std::string bundle;
  int steps = 20;
  std::string denoiser = "analytic";
  std::string init = "noise";
  bool dump_trajectory = false;
  CLI::App* app = nullptr;
};

int cmd_register(RegisterArgs& a, std::ostream& out) {
  const auto t0 = std::chrono::steady_clock::now();
  require_bundle(a.bundle);
  json cfg_json = load_config(a.common);
  if (a.app->get_option("--denoiser")->count() > 0 || !cfg_json.contains("denoiser")) {
    apply_override(cfg_json, "denoiser.kind=" + json(a.denoiser).dump());
  }
  cfg_json["sampling"] = {{"steps", json::array({a.steps})}};
  if (a.common.seed_opt->count() > 0) cfg_json["seed"] = a.common.seed;
  ExperimentConfig cfg = experiment_config_from_json(cfg_json);

  if (cfg.denoiser.trained() && !fs::exists(cfg.denoiser.params_path())) {
    throw UsageError("trained parameter archive not found: " + cfg.denoiser.params_path());
  }
  SampleInit init = WhiteNoise{};
  if (a.init.rfind("matrix:", 0) == 0) {
    const fs::path m = a.init.substr(7);
    if (!fs::exists(m)) throw UsageError("initial matrix not found: " + m.string());
    init = read_matrix_any(m);
  } else if (a.init != "noise") {
    throw UsageError("unknown --init '" + a.init + "' (noise | matrix:PATH)");
  }

  const ScenePair pair = read_bundle(a.bundle);
  cfg.generator.mode = pair.mode;
  const auto denoiser = make_denoiser(cfg.denoiser, cfg.gtheta);
  OutputStage stage(a.common.out);

  Rng rng(cfg.seed);
  const auto ts = std::chrono::steady_clock::now();
  const Registration reg =
      register_pair(init, *denoiser, pair, cfg.diffusion(a.steps), cfg.gtheta, cfg.extraction, rng);
  const double sampling_seconds = seconds_since(ts);
  if (!reg.sample.final_matrix.entries.allFinite()) {
    throw Error(ErrorKind::NonFiniteInput, "sampling produced non-finite entries");
  }

  const double tau = cfg.tau_ratio * pair.scene_diameter;
  const MetricsReport report = evaluate_correspondences(reg.correspondences, pair, tau);
  const std::vector<double> ir_per_step =
      trajectory_inlier_ratios(reg.sample, pair, cfg.gtheta, cfg.extraction, tau);

  json resolved = to_json(cfg);
  resolved["bundle"] = a.bundle;
  resolved["init"] = a.init;
  const json result = {{"format_version", kResultFormatVersion},
                       {"command", "register"},
                       {"config", resolved},
                       {"steps", a.steps},
                       {"denoiser_calls", reg.sample.denoiser_calls},
                       {"transform", transform_json(reg.final_pose.transform)},
                       {"pose_fallback", reg.final_pose.pose_fallback},
                       {"correspondences", correspondences_json(reg.correspondences)},
                       {"metrics", to_json(report)},
                       {"trajectory", {{"timesteps", reg.sample.timesteps}, {"inlier_ratio", ir_per_step}}},
                       {"timing", {{"sampling_seconds", sampling_seconds}, {"total_seconds", seconds_since(t0)}}}};
  write_text(stage.dir() / "result.json", result.dump(2) + "\n");
  write_matrix_binary(stage.dir() / "final_matrix.bin", reg.sample.final_matrix);
  if (a.dump_trajectory) {
    write_trajectory(stage.dir() / "trajectory", reg.sample, cfg.diffusion(a.steps).schedule, cfg.seed, resolved);
  }
  stage.commit();
  out << "steps=" << a.steps << " correspondences=" << reg.correspondences.size()
      << " inlier_ratio=" << report.inlier_ratio << " nfmr=" << report.nfmr << '\n';
  return kExitOk;
}

// ---------------------------------------------------------------- train

struct TrainArgs {
  Common common;
  std::string dataset;
  int iterations = 500;
  double lr = TrainConfig{}.learning_rate;
  double momentum = TrainConfig{}.momentum;
  double clip = TrainConfig{}.grad_clip;
  int layers = 2;
  double init_scale = 1.0;
  std::string modulation = "rotary";
  std::string resume;
  CLI::App* app = nullptr;
};

std::vector<fs::path> dataset_bundles(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw UsageError("dataset directory not found: " + dir.string());
  if (fs::exists(dir / "gt.json")) return {dir};
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_directory() && fs::exists(e.path() / "gt.json")) out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

// Probe set: fixed (t, noise) draws per bundle, identical before and after training.
constexpr std::uint64_t kProbeStream = 2;
constexpr std::size_t kProbesPerExample = 8;

int cmd_train(TrainArgs& a, std::ostream& out) {
  const auto t0 = std::chrono::steady_clock::now();
  json cfg = {{"iterations", a.iterations},   {"learning_rate", a.lr}, {"momentum", a.momentum},
              {"grad_clip", a.clip},          {"layers", a.layers},    {"init_scale", a.init_scale},
              {"modulation", a.modulation},   {"seed", a.common.seed}, {"diffusion_steps", 1000},
              {"schedule", "cosine"}};
  json file = load_config(a.common);
  const auto given = [&](const char* name) { return a.app->get_option(name)->count() > 0; };
  for (const auto& [k, v] : file.items()) {
    if (!cfg.contains(k)) throw UsageError("unknown train config key '" + k + "'");
    cfg[k] = v;
  }
  if (given("--iterations")) cfg["iterations"] = a.iterations;
  if (given("--lr")) cfg["learning_rate"] = a.lr;
  if (given("--momentum")) cfg["momentum"] = a.momentum;
  if (given("--clip")) cfg["grad_clip"] = a.clip;
  if (given("--layers")) cfg["layers"] = a.layers;
  if (given("--init-scale")) cfg["init_scale"] = a.init_scale;
  if (given("--modulation")) cfg["modulation"] = a.modulation;
  if (given("--seed")) cfg["seed"] = a.common.seed;

  TrainConfig tc;
  int layers = 2;
  double init_scale = 1.0;
  Modulation modulation = Modulation::Rotary;
  DiffusionConfig dc;
  try {
    tc.iterations = cfg.at("iterations").get<int>();
    tc.learning_rate = cfg.at("learning_rate").get<double>();
    tc.momentum = cfg.at("momentum").get<double>();
    tc.grad_clip = cfg.at("grad_clip").get<double>();
    tc.seed = cfg.at("seed").get<std::uint64_t>();
    layers = cfg.at("layers").get<int>();
    init_scale = cfg.at("init_scale").get<double>();
    modulation = modulation_from_string(cfg.at("modulation").get<std::string>());
    dc.schedule = NoiseSchedule::from_kind(schedule_kind_from_string(cfg.at("schedule").get<std::string>()),
                                           cfg.at("diffusion_steps").get<int>());
  } catch (const json::exception& ex) {
    throw UsageError(std::string("bad train config: ") + ex.what());
  }
  tc.validate();
  if (layers < 1) throw UsageError("layers must be >= 1");
  if (!a.resume.empty() && !fs::exists(a.resume)) throw UsageError("resume archive not found: " + a.resume);

  const auto bundles = dataset_bundles(a.dataset);
  if (bundles.empty()) throw Error(ErrorKind::EmptyDataset, "no bundles under " + a.dataset);
  std::vector<ScenePair> pairs;
  json names = json::array();
  for (const auto& b : bundles) {
    pairs.push_back(read_bundle(b));
    names.push_back(b.filename().string());
    if (!pairs.back().source.has_descriptors() || !pairs.back().target.has_descriptors()) {
      throw Error(ErrorKind::MissingDescriptors, "bundle without descriptors: " + b.string());
    }
    if (pairs.back().source.descriptor_dim() != pairs.front().source.descriptor_dim()) {
      throw Error(ErrorKind::ShapeMismatch, "bundles have different descriptor dimensions");
    }
  }
  dc.mode = pairs.front().mode;
  const auto data = make_training_set(pairs, dc.sinkhorn_iterations);

  TrainState state;
  if (a.resume.empty()) {
    Rng init_rng(derive_seed(tc.seed, 0));
    AttentionParams p = AttentionParams::init(static_cast<int>(pairs.front().source.descriptor_dim()), layers,
                                              init_rng, init_scale);
    p.encoding.modulation = modulation;
    state = make_train_state(std::move(p), tc.seed);
  } else {
    state = read_train_state(a.resume);
  }
  const std::size_t before = state.loss_history.size();
  OutputStage stage(a.common.out);
  const std::uint64_t probe_seed = derive_seed(tc.seed, kProbeStream);
  const double initial_probe = probe_loss(state.params, data, dc, tc, kProbesPerExample, probe_seed);
  train_steps(state, data, dc, tc, tc.iterations);
  const double final_probe = probe_loss(state.params, data, dc, tc, kProbesPerExample, probe_seed);

  const std::vector<double> run(state.loss_history.begin() + static_cast<std::ptrdiff_t>(before),
                                state.loss_history.end());
  const double ratio = initial_probe > 0.0 ? final_probe / initial_probe : 1.0;
  write_train_state(stage.dir() / "params.bin", state);
  std::string csv = "iteration,loss\n";
  for (std::size_t i = 0; i < state.loss_history.size(); ++i) {
    char line[64];
    std::snprintf(line, sizeof line, "%zu,%.17g\n", i, state.loss_history[i]);
    csv += line;
  }
  write_text(stage.dir() / "loss_history.csv", csv);
  json resolved = cfg;
  resolved["dataset"] = a.dataset;
  resolved["bundles"] = names;
  resolved["resume"] = a.resume;
  const json summary = {{"format_version", kResultFormatVersion},
                        {"command", "train"},
                        {"config", resolved},
                        {"iterations_total", state.iteration},
                        {"probe_loss", {{"initial", initial_probe}, {"final", final_probe}, {"ratio", ratio}}},
                        {"history_ratio", loss_ratio(run, 10)},
                        {"timing", {{"total_seconds", seconds_since(t0)}}}};
  write_text(stage.dir() / "train.json", summary.dump(2) + "\n");
  stage.commit();
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.3f", ratio);
  out << "loss ratio (final/initial): " << buf << '\n';
  return kExitOk;
}

// ---------------------------------------------------------------- eval

struct EvalArgs {
  Common common;
  std::string bundle;
  std::string pred;
  double tau_ratio = 0.04;
};

Correspondences read_prediction(const fs::path& path, const ScenePair& pair) {
  if (path.extension() != ".json") {
    const MatchMatrix m = read_matrix_binary(path);
    if (m.rows() != pair.source.size() || m.cols() != pair.target.size()) {
      throw Error(ErrorKind::ShapeMismatch, "prediction matrix shape does not match the bundle");
    }
    return extract_topk(m, std::min(m.rows(), m.cols()), true);
  }
  const json j = read_json_file(path);
  Correspondences out;
  try {
    if (j.contains("correspondences") || j.contains("gt_pairs")) {
      for (const auto& c : j.contains("correspondences") ? j.at("correspondences") : j.at("gt_pairs")) {
        out.push_back({c.at(0).get<std::size_t>(), c.at(1).get<std::size_t>(),
                       c.size() > 2 ? c.at(2).get<double>() : 1.0});
      }
    } else {
      const MatchMatrix m = matrix_from_json(j);
      return extract_topk(m, std::min(m.rows(), m.cols()), true);
    }
  } catch (const json::exception& ex) {
    throw Error(ErrorKind::Format, path.string() + ": " + ex.what());
  }
  for (const auto& c : out) {
    if (c.source >= pair.source.size() || c.target >= pair.target.size()) {
      throw Error(ErrorKind::Format, path.string() + ": correspondence index out of range");
    }
  }
  return out;
}

int cmd_eval(EvalArgs& a, std::ostream& out) {
  const auto t0 = std::chrono::steady_clock::now();
  require_bundle(a.bundle);
  if (!fs::exists(a.pred)) throw UsageError("prediction file not found: " + a.pred);
  if (!(a.tau_ratio > 0.0)) throw UsageError("--tau-ratio must be > 0");
  const ScenePair pair = read_bundle(a.bundle);
  const Correspondences pred = read_prediction(a.pred, pair);
  const MetricsReport report = evaluate_correspondences(pred, pair, a.tau_ratio * pair.scene_diameter);
  const json result = {{"format_version", kResultFormatVersion},
                       {"command", "eval"},
                       {"config", {{"bundle", a.bundle}, {"pred", a.pred}, {"tau_ratio", a.tau_ratio}}},
                       {"metrics", to_json(report)},
                       {"timing", {{"total_seconds", seconds_since(t0)}}}};
  if (!a.common.out.empty()) {
    OutputStage stage(a.common.out);
    write_text(stage.dir() / "eval.json", result.dump(2) + "\n");
    stage.commit();
  }
  out << result.dump(2) << '\n';
  return kExitOk;
}

// ---------------------------------------------------------------- sweep

struct SweepArgs {
  Common common;
  std::string steps;
  std::string overlaps;
  std::size_t trials = 0;
  std::size_t workers = 0;
  std::string denoiser;
  CLI::App* app = nullptr;
};

int cmd_sweep(SweepArgs& a, std::ostream& out) {
  json cfg_json = load_config(a.common);
  const auto given = [&](const char* name) { return a.app->get_option(name)->count() > 0; };
  if (given("--steps")) cfg_json["sampling"] = {{"steps", parse_int_list(a.steps)}};
  if (given("--overlaps")) cfg_json["overlaps"] = parse_double_list(a.overlaps);
  if (given("--trials")) cfg_json["trials"] = a.trials;
  if (given("--denoiser")) apply_override(cfg_json, "denoiser.kind=" + json(a.denoiser).dump());
  if (a.common.seed_opt->count() > 0) cfg_json["seed"] = a.common.seed;
  if (given("--workers")) {
    cfg_json["workers"] = a.workers;
  } else if (!cfg_json.contains("workers")) {
    cfg_json["workers"] = std::max(1u, std::thread::hardware_concurrency());
  }
  const ExperimentConfig cfg = experiment_config_from_json(cfg_json);
  if (cfg.denoiser.trained() && !fs::exists(cfg.denoiser.params_path())) {
    throw UsageError("trained parameter archive not found: " + cfg.denoiser.params_path());
  }
  OutputStage stage(a.common.out);
  const ExperimentResult r = run_experiment(cfg);
  write_experiment(stage.dir(), r);
  stage.commit();
  for (const auto& g : r.summary) {
    out << "overlap=" << g.overlap << " steps=" << g.steps << " trials=" << g.count << " failed=" << g.failed;
    if (!g.empty) {
      out << " ir=" << g.metrics.at("inlier_ratio").mean << " nfmr=" << g.metrics.at("nfmr").mean;
    }
    out << '\n';
  }
  return kExitOk;
}

// ---------------------------------------------------------------- inspect

struct InspectArgs {
  Common common;
  std::string matrix;
  std::string reference;
};

int cmd_inspect(InspectArgs& a, std::ostream& out) {
  if (!fs::exists(a.matrix)) throw UsageError("matrix file not found: " + a.matrix);
  if (!a.reference.empty() && !fs::exists(a.reference)) throw UsageError("reference file not found: " + a.reference);
  const MatchMatrix m = read_matrix_any(a.matrix);
  json result = {{"format_version", kResultFormatVersion},
                 {"command", "inspect"},
                 {"config", {{"matrix", a.matrix}, {"reference", a.reference}}},
                 {"stats", stats_json(matrix_stats(m))}};
  if (!a.reference.empty()) {
    const MatchMatrix ref = read_matrix_any(a.reference);
    if (ref.rows() != m.rows() || ref.cols() != m.cols()) {
      throw Error(ErrorKind::ShapeMismatch, "reference matrix shape differs");
    }
    result["argmax_agreement"] = argmax_agreement(m, ref);
  }
  if (!a.common.out.empty()) {
    OutputStage stage(a.common.out);
    write_text(stage.dir() / "inspect.json", result.dump(2) + "\n");
    stage.commit();
  }
  out << result.dump(2) << '\n';
  return kExitOk;
}

}  // namespace

int exit_code_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Io:
    case ErrorKind::Format: return kExitIo;
    case ErrorKind::NonFiniteInput:
    case ErrorKind::ZeroMassInput:
    case ErrorKind::NonFiniteNoise:
    case ErrorKind::DegenerateAlphaBar:
    case ErrorKind::DegenerateConfiguration:
    case ErrorKind::InvalidWeights: return kExitNumeric;
    default: return kExitUsage;
  }
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  log::init_from_env();
  CLI::App app{"Diffusion matching in matrix space for point-cloud registration", "diffreg"};
  app.require_subcommand(1);

  GenerateArgs gen;
  auto* g = app.add_subcommand("generate", "Generate a synthetic scene bundle");
  add_common(*g, gen.common, true);
  g->add_option("--n-points", gen.n_points, "Points per cloud");
  g->add_option("--overlap", gen.overlap, "Overlap fraction");
  g->add_option("--noise", gen.noise, "Target noise sigma");
  g->add_flag("--noise-relative", gen.noise_relative, "Noise sigma as a fraction of the scene diameter");
  g->add_option("--mode", gen.mode, "rigid|deformable");
  g->add_option("--deformation", gen.deformation, "Deformation RMS amplitude (m)");
  g->add_option("--descriptors", gen.descriptors, "oracle|local-statistics|none");
  g->add_option("--descriptor-dim", gen.descriptor_dim, "Oracle descriptor dimension");
  g->add_option("--corruption", gen.corruption, "Fraction of corrupted descriptors per cloud");
  g->add_option("--translation", gen.translation, "Translation range (m)");
  g->add_flag("--identity", gen.identity, "Identity ground-truth transform");
  g->add_flag("--no-shuffle", gen.no_shuffle, "Keep generation order");
  gen.app = g;

  RegisterArgs reg;
  auto* r = app.add_subcommand("register", "Register a bundle by reverse sampling");
  add_common(*r, reg.common, true);
  r->add_option("bundle", reg.bundle, "Bundle directory")->required();
  r->add_option("--steps", reg.steps, "Denoiser calls")->check(CLI::PositiveNumber);
  r->add_option("--denoiser", reg.denoiser, "analytic | trained:PATH");
  r->add_option("--init", reg.init, "noise | matrix:PATH");
  r->add_flag("--dump-trajectory", reg.dump_trajectory, "Write every trajectory frame");
  reg.app = r;

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train the attention denoiser");
  add_common(*t, tr.common, true);
  t->add_option("dataset", tr.dataset, "Bundle directory or directory of bundles")->required();
  t->add_option("--iterations", tr.iterations, "Optimisation steps");
  t->add_option("--lr", tr.lr, "Learning rate");
  t->add_option("--momentum", tr.momentum, "Momentum");
  t->add_option("--clip", tr.clip, "Global gradient-norm clip (0 disables)");
  t->add_option("--layers", tr.layers, "Attention layers");
  t->add_option("--init-scale", tr.init_scale, "Weight initialisation scale");
  t->add_option("--modulation", tr.modulation, "rotary|elementwise");
  t->add_option("--resume", tr.resume, "Continue from a parameter archive and its state file");
  tr.app = t;

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Recompute metrics from stored predictions");
  add_common(*e, ev.common, false);
  e->add_option("bundle", ev.bundle, "Bundle directory")->required();
  e->add_option("--pred", ev.pred, "Correspondence JSON or matrix file")->required();
  e->add_option("--tau-ratio", ev.tau_ratio, "Inlier threshold as a fraction of the scene diameter");

  SweepArgs sw;
  auto* s = app.add_subcommand("sweep", "Run an experiment grid");
  add_common(*s, sw.common, true);
  s->add_option("--steps", sw.steps, "Comma-separated step counts");
  s->add_option("--overlaps", sw.overlaps, "Comma-separated overlap fractions");
  s->add_option("--trials", sw.trials, "Trials per grid cell");
  s->add_option("--workers", sw.workers, "Worker threads")->check(CLI::PositiveNumber);
  s->add_option("--denoiser", sw.denoiser, "analytic | trained:PATH");
  sw.app = s;

  InspectArgs in;
  auto* i = app.add_subcommand("inspect", "Print matching-matrix statistics");
  add_common(*i, in.common, false);
  i->add_option("matrix", in.matrix, "Matrix file (.bin or .json)")->required();
  i->add_option("--reference", in.reference, "Matrix to compare argmax against");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& ex) {
    err << "error: " << ex.what() << '\n';
    return kExitUsage;
  }

  CLI::App* sub = app.get_subcommands().front();
  for (const Common* c : {&gen.common, &reg.common, &tr.common, &ev.common, &sw.common, &in.common}) {
    if (!c->verbosity.empty() && !log::set_level(c->verbosity)) {
      err << "error: unknown verbosity '" << c->verbosity << "'\n";
      return kExitUsage;
    }
  }
  try {
    if (sub == g) return cmd_generate(gen, out);
    if (sub == r) return cmd_register(reg, out);
    if (sub == t) return cmd_train(tr, out);
    if (sub == e) return cmd_eval(ev, out);
    if (sub == s) return cmd_sweep(sw, out);
    return cmd_inspect(in, out);
  } catch (const UsageError& ex) {
    err << "error: " << ex.what() << '\n';
    return kExitUsage;
  } catch (const Error& ex) {
    err << "error: " << ex.what() << '\n';
    return exit_code_for(ex.kind());
  } catch (const std::filesystem::filesystem_error& ex) {
    err << "error: " << ex.what() << '\n';
    return kExitIo;
  }
}

}  // namespace diffreg::cli
