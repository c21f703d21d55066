#include "diffreg/matrixspace.hpp"

#include "diffreg/error.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace diffreg {

MatchMatrix MatchMatrix::uniform(std::size_t rows, std::size_t cols) {
  const auto n = static_cast<Eigen::Index>(rows);
  const auto m = static_cast<Eigen::Index>(cols);
  return MatchMatrix(Eigen::MatrixXd::Constant(n, m, 1.0 / static_cast<double>(rows * cols)));
}

namespace {

void normalize_rows(Eigen::MatrixXd& a, double target) {
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    const double s = a.row(i).sum();
    if (s > 0.0) a.row(i) *= target / s;
    else a.row(i).setConstant(target / static_cast<double>(a.cols()));
  }
}

void normalize_cols(Eigen::MatrixXd& a, double target) {
  for (Eigen::Index j = 0; j < a.cols(); ++j) {
    const double s = a.col(j).sum();
    if (s > 0.0) a.col(j) *= target / s;
    else a.col(j).setConstant(target / static_cast<double>(a.rows()));
  }
}

void log_normalize_rows(Eigen::MatrixXd& l, double log_target) {
  for (Eigen::Index i = 0; i < l.rows(); ++i) {
    const double mx = l.row(i).maxCoeff();
    const double lse = mx + std::log((l.row(i).array() - mx).exp().sum());
    l.row(i).array() += log_target - lse;
  }
}

void log_normalize_cols(Eigen::MatrixXd& l, double log_target) {
  for (Eigen::Index j = 0; j < l.cols(); ++j) {
    const double mx = l.col(j).maxCoeff();
    const double lse = mx + std::log((l.col(j).array() - mx).exp().sum());
    l.col(j).array() += log_target - lse;
  }
}

}  // namespace

MatchMatrix sinkhorn_project(const MatchMatrix& m, int iterations, bool in_log_domain) {
  if (iterations < 1) throw Error(ErrorKind::InvalidArgument, "sinkhorn iterations must be >= 1");
  if (m.entries.size() == 0) throw Error(ErrorKind::InvalidArgument, "empty matrix");
  if (!m.entries.allFinite()) throw Error(ErrorKind::NonFiniteInput, "sinkhorn input has non-finite entries");

  if (in_log_domain) {
    // Normalisation in log space never underflows a whole row or column.
    Eigen::MatrixXd l = m.entries;
    const double log_row = -std::log(static_cast<double>(l.rows()));
    const double log_col = -std::log(static_cast<double>(l.cols()));
    for (int it = 0; it < iterations; ++it) {
      log_normalize_cols(l, log_col);
      log_normalize_rows(l, log_row);
    }
    return MatchMatrix(l.array().exp().matrix());
  }

  Eigen::MatrixXd a;
  {
    a = m.entries.cwiseMax(0.0);
    if (!(a.sum() > 0.0)) {
      const double lo = m.entries.minCoeff();
      if (!(m.entries.maxCoeff() > lo)) throw Error(ErrorKind::ZeroMassInput, "no positive mass and no shift possible");
      a = m.entries.array() - lo;
    }
  }

  const double row_target = 1.0 / static_cast<double>(a.rows());
  const double col_target = 1.0 / static_cast<double>(a.cols());
  for (int it = 0; it < iterations; ++it) {
    normalize_cols(a, col_target);
    normalize_rows(a, row_target);
  }
  return MatchMatrix(std::move(a));
}

MatchMatrix ground_truth_matrix(std::size_t rows, std::size_t cols, std::span<const IndexPair> pairs,
                                int iterations) {
  if (pairs.empty()) throw Error(ErrorKind::EmptyGroundTruth, "no ground-truth pairs");
  Eigen::MatrixXd e = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  const double mass = 1.0 / static_cast<double>(pairs.size());
  for (const auto& p : pairs) {
    if (p.source >= rows || p.target >= cols) throw Error(ErrorKind::InvalidArgument, "ground-truth pair out of range");
    e(static_cast<Eigen::Index>(p.source), static_cast<Eigen::Index>(p.target)) = mass;
  }
  MatchMatrix out(std::move(e));
  return iterations > 0 ? sinkhorn_project(out, iterations, false) : out;
}

std::vector<std::size_t> row_argmax(const MatchMatrix& m) {
  std::vector<std::size_t> out(m.rows());
  for (Eigen::Index i = 0; i < m.entries.rows(); ++i) {
    Eigen::Index j = 0;
    m.entries.row(i).maxCoeff(&j);
    out[static_cast<std::size_t>(i)] = static_cast<std::size_t>(j);
  }
  return out;
}

Correspondences extract_topk(const MatchMatrix& m, std::size_t k, bool mutual) {
  const std::size_t n = m.rows();
  const std::size_t cols = m.cols();
  if (k < 1 || k > n * cols) {
    throw Error(ErrorKind::InvalidArgument, "k=" + std::to_string(k) + " outside [1, N*M]");
  }
  const Eigen::VectorXd row_max = m.entries.rowwise().maxCoeff();

  std::vector<std::size_t> cells;
  if (mutual) {
    const auto ra = row_argmax(m);
    std::vector<std::size_t> ca(cols);
    for (Eigen::Index j = 0; j < m.entries.cols(); ++j) {
      Eigen::Index i = 0;
      m.entries.col(j).maxCoeff(&i);
      ca[static_cast<std::size_t>(j)] = static_cast<std::size_t>(i);
    }
    for (std::size_t i = 0; i < n; ++i) {
      if (ca[ra[i]] == i) cells.push_back(i * cols + ra[i]);
    }
  } else {
    cells.resize(n * cols);
    std::iota(cells.begin(), cells.end(), std::size_t{0});
  }

  const auto value = [&](std::size_t c) { return m(c / cols, c % cols); };
  const auto better = [&](std::size_t a, std::size_t b) {
    const double va = value(a);
    const double vb = value(b);
    return va > vb || (va == vb && a < b);  // row-major index order == (i, j) order
  };
  const std::size_t take = std::min(k, cells.size());
  std::partial_sort(cells.begin(), cells.begin() + static_cast<std::ptrdiff_t>(take), cells.end(), better);

  Correspondences out;
  out.reserve(take);
  for (std::size_t t = 0; t < take; ++t) {
    const std::size_t i = cells[t] / cols;
    const std::size_t j = cells[t] % cols;
    const double rmax = row_max(static_cast<Eigen::Index>(i));
    out.push_back({i, j, rmax > 0.0 ? m(i, j) / rmax : 0.0});
  }
  return out;
}

MatrixStats matrix_stats(const MatchMatrix& m) {
  MatrixStats s;
  s.rows = m.rows();
  s.cols = m.cols();
  if (m.entries.size() == 0) return s;
  s.mass = m.entries.sum();
  s.min_entry = m.entries.minCoeff();
  s.max_entry = m.entries.maxCoeff();
  const double rt = 1.0 / static_cast<double>(s.rows);
  const double ct = 1.0 / static_cast<double>(s.cols);
  s.row_sum_max_deviation = (m.entries.rowwise().sum().array() - rt).abs().maxCoeff();
  s.col_sum_max_deviation = (m.entries.colwise().sum().array() - ct).abs().maxCoeff();
  double entropy = 0.0;
  for (Eigen::Index i = 0; i < m.entries.rows(); ++i) {
    const double rs = m.entries.row(i).cwiseMax(0.0).sum();
    if (!(rs > 0.0)) continue;
    for (Eigen::Index j = 0; j < m.entries.cols(); ++j) {
      const double p = std::max(m.entries(i, j), 0.0) / rs;
      if (p > 0.0) entropy -= p * std::log(p);
    }
  }
  s.mean_row_entropy = entropy / static_cast<double>(s.rows);
  return s;
}

double argmax_agreement(const MatchMatrix& a, const MatchMatrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw Error(ErrorKind::ShapeMismatch, "argmax_agreement shapes differ");
  const auto ra = row_argmax(a);
  const auto rb = row_argmax(b);
  std::size_t agree = 0;
  for (std::size_t i = 0; i < ra.size(); ++i) agree += ra[i] == rb[i] ? 1 : 0;
  return ra.empty() ? 0.0 : static_cast<double>(agree) / static_cast<double>(ra.size());
}

}  // namespace diffreg
