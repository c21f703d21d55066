#include "diffreg/point_io.hpp"

#include "diffreg/error.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

namespace diffreg {

namespace {

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorKind::Io, "cannot open " + path.string() + " for writing");
  out << std::setprecision(std::numeric_limits<double>::max_digits10);
  return out;
}

std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Io, "cannot open " + path.string());
  return in;
}

double parse_double(const std::string& token, const std::filesystem::path& path) {
  double value = 0.0;
  const auto* end = token.data() + token.size();
  const auto [ptr, ec] = std::from_chars(token.data(), end, value);
  if (ec != std::errc() || ptr != end) throw Error(ErrorKind::Format, path.string() + ": bad number '" + token + "'");
  return value;
}

}  // namespace

void write_ply(const std::filesystem::path& path, const PointCloud& cloud) {
  auto out = open_out(path);
  const auto dim = cloud.has_descriptors() ? cloud.descriptor_dim() : 0;
  out << "ply\nformat ascii 1.0\n";
  out << "element vertex " << cloud.size() << "\n";
  out << "property double x\nproperty double y\nproperty double z\n";
  for (std::size_t k = 0; k < dim; ++k) out << "property double d" << k << "\n";
  out << "end_header\n";
  for (Eigen::Index i = 0; i < cloud.points.rows(); ++i) {
    out << cloud.points(i, 0) << ' ' << cloud.points(i, 1) << ' ' << cloud.points(i, 2);
    for (std::size_t k = 0; k < dim; ++k) out << ' ' << cloud.descriptors(i, static_cast<Eigen::Index>(k));
    out << '\n';
  }
  if (!out) throw Error(ErrorKind::Io, "write failed: " + path.string());
}

PointCloud read_ply(const std::filesystem::path& path) {
  auto in = open_in(path);
  std::string line;
  if (!std::getline(in, line) || line != "ply") throw Error(ErrorKind::Format, path.string() + ": missing ply magic");

  std::size_t count = 0;
  bool in_vertex = false;
  std::vector<std::string> props;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::string word;
    ls >> word;
    if (word == "format") {
      std::string fmt;
      ls >> fmt;
      if (fmt != "ascii") throw Error(ErrorKind::Format, path.string() + ": only ascii PLY is supported");
    } else if (word == "element") {
      std::string name;
      ls >> name;
      in_vertex = name == "vertex";
      if (in_vertex) ls >> count;
    } else if (word == "property" && in_vertex) {
      std::string type;
      std::string name;
      ls >> type >> name;
      props.push_back(name);
    } else if (word == "end_header") {
      break;
    }
  }

  int ix = -1;
  int iy = -1;
  int iz = -1;
  std::vector<int> desc_cols;
  for (std::size_t p = 0; p < props.size(); ++p) {
    const auto& name = props[p];
    if (name == "x") ix = static_cast<int>(p);
    else if (name == "y") iy = static_cast<int>(p);
    else if (name == "z") iz = static_cast<int>(p);
  }
  if (ix < 0 || iy < 0 || iz < 0) throw Error(ErrorKind::Format, path.string() + ": vertex lacks x/y/z");
  for (std::size_t k = 0;; ++k) {
    const auto it = std::find(props.begin(), props.end(), "d" + std::to_string(k));
    if (it == props.end()) break;
    desc_cols.push_back(static_cast<int>(it - props.begin()));
  }

  PointCloud cloud;
  cloud.points.resize(static_cast<Eigen::Index>(count), 3);
  cloud.descriptors.resize(desc_cols.empty() ? 0 : static_cast<Eigen::Index>(count),
                           static_cast<Eigen::Index>(desc_cols.size()));
  std::vector<std::string> tokens(props.size());
  for (std::size_t i = 0; i < count; ++i) {
    if (!std::getline(in, line)) throw Error(ErrorKind::Format, path.string() + ": truncated vertex list");
    std::istringstream ls(line);
    for (auto& t : tokens) {
      if (!(ls >> t)) throw Error(ErrorKind::Format, path.string() + ": short vertex row");
    }
    const auto r = static_cast<Eigen::Index>(i);
    cloud.points(r, 0) = parse_double(tokens[static_cast<std::size_t>(ix)], path);
    cloud.points(r, 1) = parse_double(tokens[static_cast<std::size_t>(iy)], path);
    cloud.points(r, 2) = parse_double(tokens[static_cast<std::size_t>(iz)], path);
    for (std::size_t k = 0; k < desc_cols.size(); ++k) {
      cloud.descriptors(r, static_cast<Eigen::Index>(k)) =
          parse_double(tokens[static_cast<std::size_t>(desc_cols[k])], path);
    }
  }
  cloud.validate();
  return cloud;
}

void write_xyz(const std::filesystem::path& path, const PointCloud& cloud) {
  auto out = open_out(path);
  for (Eigen::Index i = 0; i < cloud.points.rows(); ++i) {
    out << cloud.points(i, 0) << ' ' << cloud.points(i, 1) << ' ' << cloud.points(i, 2) << '\n';
  }
  if (!out) throw Error(ErrorKind::Io, "write failed: " + path.string());
}

PointCloud read_xyz(const std::filesystem::path& path) {
  auto in = open_in(path);
  std::vector<double> coords;
  std::string tok;
  while (in >> tok) coords.push_back(parse_double(tok, path));
  if (coords.size() % 3 != 0) throw Error(ErrorKind::Format, path.string() + ": coordinate count not a multiple of 3");
  PointCloud cloud;
  cloud.points.resize(static_cast<Eigen::Index>(coords.size() / 3), 3);
  for (std::size_t i = 0; i < coords.size(); ++i) {
    cloud.points(static_cast<Eigen::Index>(i / 3), static_cast<Eigen::Index>(i % 3)) = coords[i];
  }
  cloud.validate();
  return cloud;
}

}  // namespace diffreg
