#include "diffreg/matrix_io.hpp"

#include "diffreg/error.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>

namespace diffreg {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

void write_matrix_binary(const std::filesystem::path& path, const MatchMatrix& m) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::Io, "cannot open " + path.string() + " for writing");
  const auto rows = static_cast<std::uint32_t>(m.rows());
  const auto cols = static_cast<std::uint32_t>(m.cols());
  out.write(reinterpret_cast<const char*>(&rows), sizeof rows);
  out.write(reinterpret_cast<const char*>(&cols), sizeof cols);
  for (Eigen::Index i = 0; i < m.entries.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.entries.cols(); ++j) {
      const double v = m.entries(i, j);
      out.write(reinterpret_cast<const char*>(&v), sizeof v);
    }
  }
  if (!out) throw Error(ErrorKind::Io, "write failed: " + path.string());
}

MatchMatrix read_matrix_binary(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::Io, "cannot open " + path.string());
  std::uint32_t rows = 0;
  std::uint32_t cols = 0;
  in.read(reinterpret_cast<char*>(&rows), sizeof rows);
  in.read(reinterpret_cast<char*>(&cols), sizeof cols);
  if (!in) throw Error(ErrorKind::Format, path.string() + ": truncated header");
  Eigen::MatrixXd e(rows, cols);
  for (Eigen::Index i = 0; i < e.rows(); ++i) {
    for (Eigen::Index j = 0; j < e.cols(); ++j) {
      double v = 0.0;
      in.read(reinterpret_cast<char*>(&v), sizeof v);
      e(i, j) = v;
    }
  }
  if (!in) throw Error(ErrorKind::Format, path.string() + ": truncated payload");
  if (in.peek() != std::char_traits<char>::eof()) throw Error(ErrorKind::Format, path.string() + ": trailing bytes");
  return MatchMatrix(std::move(e));
}

nlohmann::json matrix_to_json(const MatchMatrix& m) {
  nlohmann::json data = nlohmann::json::array();
  for (Eigen::Index i = 0; i < m.entries.rows(); ++i) {
    nlohmann::json row = nlohmann::json::array();
    for (Eigen::Index j = 0; j < m.entries.cols(); ++j) row.push_back(m.entries(i, j));
    data.push_back(std::move(row));
  }
  return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", std::move(data)}};
}

MatchMatrix matrix_from_json(const nlohmann::json& j) {
  try {
    const auto rows = j.at("rows").get<std::size_t>();
    const auto cols = j.at("cols").get<std::size_t>();
    const auto& data = j.at("data");
    if (data.size() != rows) throw Error(ErrorKind::Format, "matrix json row count mismatch");
    Eigen::MatrixXd e(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    for (std::size_t i = 0; i < rows; ++i) {
      if (data[i].size() != cols) throw Error(ErrorKind::Format, "matrix json column count mismatch");
      for (std::size_t c = 0; c < cols; ++c) {
        e(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) = data[i][c].get<double>();
      }
    }
    return MatchMatrix(std::move(e));
  } catch (const nlohmann::json::exception& ex) {
    throw Error(ErrorKind::Format, std::string("matrix json: ") + ex.what());
  }
}

}  // namespace diffreg
