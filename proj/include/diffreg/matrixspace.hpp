#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <span>
#include <vector>

namespace diffreg {

/// N×M relaxed matching matrix. After projection it lies in the transport
/// polytope with row marginals 1/N and column marginals 1/M (total mass 1).
struct MatchMatrix {
  Eigen::MatrixXd entries;

  MatchMatrix() = default;
  explicit MatchMatrix(Eigen::MatrixXd values) : entries(std::move(values)) {}

  static MatchMatrix uniform(std::size_t rows, std::size_t cols);

  [[nodiscard]] std::size_t rows() const { return static_cast<std::size_t>(entries.rows()); }
  [[nodiscard]] std::size_t cols() const { return static_cast<std::size_t>(entries.cols()); }
  [[nodiscard]] double operator()(std::size_t i, std::size_t j) const {
    return entries(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
  }
};

struct Correspondence {
  std::size_t source;
  std::size_t target;
  double confidence;
};
using Correspondences = std::vector<Correspondence>;

struct IndexPair {
  std::size_t source;
  std::size_t target;
  friend bool operator==(const IndexPair&, const IndexPair&) = default;
};

inline constexpr int kDenoiserSinkhornIterations = 10;
inline constexpr int kAccurateSinkhornIterations = 100;

/// Alternating column/row normalisation toward uniform marginals, ending on
/// a row normalisation. With `in_log_domain` the entries are treated as
/// log-scores and normalised in log space before exponentiating; otherwise
/// they are clamped at zero, and shifted by the global minimum if nothing
/// positive remains. Rows or columns with zero mass are refilled uniformly.
///
/// Throws NonFiniteInput, ZeroMassInput, InvalidArgument (iterations < 1).
MatchMatrix sinkhorn_project(const MatchMatrix& m, int iterations = kAccurateSinkhornIterations,
                             bool in_log_domain = false);

/// Mass 1/|pairs| on every listed cell, zero elsewhere, then projected with
/// `iterations` Sinkhorn sweeps (0 skips the projection). Throws EmptyGroundTruth.
MatchMatrix ground_truth_matrix(std::size_t rows, std::size_t cols, std::span<const IndexPair> pairs,
                                int iterations = kDenoiserSinkhornIterations);

/// The k highest cells, confidence = entry / row max, ties by (i, j).
/// With `mutual`, only cells that are both row- and column-argmax compete.
Correspondences extract_topk(const MatchMatrix& m, std::size_t k, bool mutual);

/// Row-wise argmax (smallest index on ties).
std::vector<std::size_t> row_argmax(const MatchMatrix& m);

struct MatrixStats {
  std::size_t rows = 0;
  std::size_t cols = 0;
  double mass = 0.0;
  double min_entry = 0.0;
  double max_entry = 0.0;
  double row_sum_max_deviation = 0.0;  // from 1/N
  double col_sum_max_deviation = 0.0;  // from 1/M
  double mean_row_entropy = 0.0;       // nats, rows normalised to distributions
};

MatrixStats matrix_stats(const MatchMatrix& m);

/// Fraction of rows whose argmax agrees.
double argmax_agreement(const MatchMatrix& a, const MatchMatrix& b);

}  // namespace diffreg
