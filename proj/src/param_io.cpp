#include "diffreg/param_io.hpp"

#include "diffreg/error.hpp"

#include <bit>
#include <fstream>
#include <sstream>

namespace diffreg {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

namespace {

std::filesystem::path manifest_path(const std::filesystem::path& p) { return p.string() + ".json"; }

nlohmann::json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Io, "cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& ex) {
    throw Error(ErrorKind::Format, path.string() + ": " + ex.what());
  }
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorKind::Io, "cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw Error(ErrorKind::Io, "write failed: " + path.string());
}

}  // namespace

nlohmann::json params_manifest(const AttentionParams& params) {
  nlohmann::json tensors = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& t : const_cast<AttentionParams&>(params).tensors()) {
    tensors.push_back({{"name", t.name}, {"rows", t.rows}, {"cols", t.cols}, {"offset", offset}});
    offset += static_cast<std::size_t>(t.size());
  }
  return {{"format_version", kParamFormatVersion},
          {"kind", "attention"},
          {"dtype", "float64-le"},
          {"order", "column-major"},
          {"dim", params.dim},
          {"layers", params.layers.size()},
          {"encoding",
           {{"bands", params.encoding.bands},
            {"base_frequency", params.encoding.base_frequency},
            {"modulation", to_string(params.encoding.modulation)}}},
          {"count", offset},
          {"tensors", std::move(tensors)}};
}

void write_params(const std::filesystem::path& path, const AttentionParams& params) {
  params.validate();
  const Eigen::VectorXd flat = params.flatten();
  {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error(ErrorKind::Io, "cannot open " + path.string() + " for writing");
    out.write(reinterpret_cast<const char*>(flat.data()), static_cast<std::streamsize>(flat.size() * sizeof(double)));
    if (!out) throw Error(ErrorKind::Io, "write failed: " + path.string());
  }
  write_text(manifest_path(path), params_manifest(params).dump(2) + "\n");
}

AttentionParams read_params(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw Error(ErrorKind::Io, "parameter archive not found: " + path.string());
  const nlohmann::json m = read_json(manifest_path(path));
  AttentionParams p;
  try {
    if (!m.contains("format_version")) throw Error(ErrorKind::Format, "manifest lacks format_version");
    if (m.at("format_version").get<int>() != kParamFormatVersion) {
      throw Error(ErrorKind::Format, "unsupported parameter format_version " + m.at("format_version").dump());
    }
    const int dim = m.at("dim").get<int>();
    const int layers = m.at("layers").get<int>();
    if (dim < 1 || layers < 1) throw Error(ErrorKind::Format, "manifest has empty shapes");
    Rng unused(0);
    p = AttentionParams::init(dim, layers, unused, 0.0);
    const auto& enc = m.at("encoding");
    p.encoding.bands = enc.at("bands").get<int>();
    p.encoding.base_frequency = enc.at("base_frequency").get<double>();
    p.encoding.modulation = modulation_from_string(enc.at("modulation").get<std::string>());

    const auto refs = p.tensors();
    const auto& tensors = m.at("tensors");
    if (tensors.size() != refs.size()) throw Error(ErrorKind::Format, "manifest tensor count mismatch");
    for (std::size_t k = 0; k < refs.size(); ++k) {
      if (tensors[k].at("name").get<std::string>() != refs[k].name ||
          tensors[k].at("rows").get<Eigen::Index>() != refs[k].rows ||
          tensors[k].at("cols").get<Eigen::Index>() != refs[k].cols) {
        throw Error(ErrorKind::Format, "manifest tensor " + std::to_string(k) + " does not match the layout");
      }
    }
  } catch (const nlohmann::json::exception& ex) {
    throw Error(ErrorKind::Format, manifest_path(path).string() + ": " + ex.what());
  }

  const auto count = static_cast<std::streamsize>(p.parameter_count());
  Eigen::VectorXd flat(count);
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::Io, "cannot open " + path.string());
  in.read(reinterpret_cast<char*>(flat.data()), count * static_cast<std::streamsize>(sizeof(double)));
  if (!in) throw Error(ErrorKind::Format, path.string() + ": truncated archive");
  if (in.peek() != std::char_traits<char>::eof()) throw Error(ErrorKind::Format, path.string() + ": trailing bytes");
  p.unflatten(flat);
  if (!p.all_finite()) throw Error(ErrorKind::Format, path.string() + ": non-finite parameters");
  return p;
}

std::filesystem::path state_path_for(const std::filesystem::path& params_path) {
  return params_path.string() + ".state.json";
}

std::filesystem::path velocity_path_for(const std::filesystem::path& params_path) {
  return params_path.string() + ".velocity";
}

void write_train_state(const std::filesystem::path& path, const TrainState& state) {
  write_params(path, state.params);
  write_params(velocity_path_for(path), state.velocity);
  std::ostringstream rng;
  rng << state.rng;
  const nlohmann::json j = {{"format_version", kParamFormatVersion},
                            {"iteration", state.iteration},
                            {"rng", rng.str()},
                            {"loss_history", state.loss_history}};
  write_text(state_path_for(path), j.dump(2) + "\n");
}

TrainState read_train_state(const std::filesystem::path& path) {
  TrainState s;
  s.params = read_params(path);
  s.velocity = read_params(velocity_path_for(path));
  const nlohmann::json j = read_json(state_path_for(path));
  try {
    if (j.at("format_version").get<int>() != kParamFormatVersion) {
      throw Error(ErrorKind::Format, "unsupported train state format_version");
    }
    s.iteration = j.at("iteration").get<std::uint64_t>();
    s.loss_history = j.at("loss_history").get<std::vector<double>>();
    std::istringstream rng(j.at("rng").get<std::string>());
    rng >> s.rng;
    if (!rng) throw Error(ErrorKind::Format, "unreadable RNG state");
  } catch (const nlohmann::json::exception& ex) {
    throw Error(ErrorKind::Format, state_path_for(path).string() + ": " + ex.what());
  }
  if (s.velocity.parameter_count() != s.params.parameter_count()) {
    throw Error(ErrorKind::Format, "velocity layout differs from the parameters");
  }
  return s;
}

}  // namespace diffreg
