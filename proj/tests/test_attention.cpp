#include "diffreg/attention.hpp"
#include "diffreg/error.hpp"

#include "doctest.h"
#include "support.hpp"

#include <cmath>
#include <numbers>

using namespace diffreg;
using namespace diffreg::testing;

namespace {

using Grid = std::vector<std::vector<double>>;

Grid to_grid(const Eigen::MatrixXd& m) {
  Grid g(static_cast<std::size_t>(m.rows()), std::vector<double>(static_cast<std::size_t>(m.cols())));
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) g[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] = m(i, j);
  }
  return g;
}

double scalar_gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }

/// y_i = W x_i + b for every row x_i.
Grid affine(const Grid& x, const Grid& w, const std::vector<double>& b) {
  Grid y(x.size(), std::vector<double>(w.size(), 0.0));
  for (std::size_t i = 0; i < x.size(); ++i) {
    for (std::size_t o = 0; o < w.size(); ++o) {
      double s = b.empty() ? 0.0 : b[o];
      for (std::size_t c = 0; c < x[i].size(); ++c) s += w[o][c] * x[i][c];
      y[i][o] = s;
    }
  }
  return y;
}

Grid rotate_pairs(const Grid& theta, const Grid& u) {
  Grid out = u;
  for (std::size_t i = 0; i < u.size(); ++i) {
    for (std::size_t c = 0; c + 1 < u[i].size(); c += 2) {
      const double co = theta[i][c];
      const double si = theta[i][c + 1];
      out[i][c] = co * u[i][c] - si * u[i][c + 1];
      out[i][c + 1] = si * u[i][c] + co * u[i][c + 1];
    }
  }
  return out;
}

std::vector<double> vec(const Eigen::VectorXd& v) { return {v.data(), v.data() + v.size()}; }

/// Loop-level restatement of one attention block with rotary modulation.
Grid scalar_block(const AttentionLayer& layer, const Grid& fa, const Grid& ta, const Grid& fb, const Grid& tb) {
  const std::size_t d = fa[0].size();
  const Grid q = rotate_pairs(ta, affine(fa, to_grid(layer.wq), {}));
  const Grid k = rotate_pairs(tb, affine(fb, to_grid(layer.wk), {}));
  const Grid v = affine(fb, to_grid(layer.wv), {});
  Grid h(fa.size(), std::vector<double>(2 * d, 0.0));
  for (std::size_t i = 0; i < fa.size(); ++i) {
    std::vector<double> s(fb.size());
    double mx = -1e300;
    for (std::size_t j = 0; j < fb.size(); ++j) {
      double dot = 0.0;
      for (std::size_t c = 0; c < d; ++c) dot += q[i][c] * k[j][c];
      s[j] = dot / std::sqrt(static_cast<double>(d));
      mx = std::max(mx, s[j]);
    }
    double z = 0.0;
    for (double& x : s) z += (x = std::exp(x - mx));
    for (std::size_t c = 0; c < d; ++c) {
      h[i][c] = q[i][c];
      for (std::size_t j = 0; j < fb.size(); ++j) h[i][d + c] += s[j] / z * v[j][c];
    }
  }
  Grid a1 = affine(h, to_grid(layer.w1), vec(layer.b1));
  for (auto& r : a1) {
    for (double& x : r) x = scalar_gelu(x);
  }
  Grid a2 = affine(a1, to_grid(layer.w2), vec(layer.b2));
  for (auto& r : a2) {
    for (double& x : r) x = scalar_gelu(x);
  }
  Grid out = affine(a2, to_grid(layer.w3), vec(layer.b3));
  for (std::size_t i = 0; i < fa.size(); ++i) {
    for (std::size_t c = 0; c < d; ++c) out[i][c] += fa[i][c];
  }
  return out;
}

/// Encoding of a point at frequency 2·2^o per axis for d = 4: (cos x, sin x, cos y, sin y) at octave 0.
Grid scalar_encoding(const Points& p) {
  Grid g(static_cast<std::size_t>(p.rows()), std::vector<double>(4));
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    auto& r = g[static_cast<std::size_t>(i)];
    r = {std::cos(2.0 * p(i, 0)), std::sin(2.0 * p(i, 0)), std::cos(2.0 * p(i, 1)), std::sin(2.0 * p(i, 1))};
  }
  return g;
}

AttentionInputs random_inputs(const AttentionParams& params, std::size_t n, std::size_t m, Rng& rng) {
  const Points ps = random_points(n, rng, 0.5);
  const Points pt = random_points(m, rng, 0.5);
  return make_attention_inputs(params, ps, pt, random_unit_rows(n, static_cast<std::size_t>(params.dim), rng),
                               random_unit_rows(m, static_cast<std::size_t>(params.dim), rng));
}

double frobenius_dot(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) { return a.cwiseProduct(b).sum(); }

/// Five-point pair with perturbed descriptors and jittered target positions.
ScenePair small_pair(Rng& rng) {
  ScenePair pair;
  pair.source.points = gaussian_matrix(5, 3, rng) * 0.3;
  pair.target.points = pair.source.points + gaussian_matrix(5, 3, rng) * 0.01;
  pair.source.descriptors = gaussian_matrix(5, 4, rng);
  pair.target.descriptors = pair.source.descriptors + 0.3 * gaussian_matrix(5, 4, rng);
  for (std::size_t i = 0; i < 5; ++i) pair.gt_pairs.push_back({i, i});
  pair.overlap_mask_source.assign(5, true);
  pair.scene_diameter = diameter(pair.source.points);
  return pair;
}

}  // namespace

TEST_SUITE("attention") {
  TEST_CASE("encoding follows the channel layout") {
    PositionalEncoding enc;
    enc.dim = 9;
    enc.bands = 2;
    Points p(1, 3);
    p << 0.3, -0.2, 0.7;
    const Eigen::RowVector3d origin(0.1, 0.1, 0.1);
    const Eigen::MatrixXd e = enc.encode(p, origin);
    for (int k = 0; k < 4; ++k) {
      const double w = 2.0 * std::pow(2.0, (k / 3) % 2);
      const double x = p(0, k % 3) - origin(k % 3);
      CHECK(e(0, 2 * k) == doctest::Approx(std::cos(w * x)).epsilon(1e-14));
      CHECK(e(0, 2 * k + 1) == doctest::Approx(std::sin(w * x)).epsilon(1e-14));
    }
    CHECK(e(0, 8) == 1.0);
  }

  TEST_CASE("identical points receive identical encodings") {
    PositionalEncoding enc;
    enc.dim = 16;
    Points p(3, 3);
    p << 0.2, 0.4, 0.6, 0.2, 0.4, 0.6, -1, 0, 1;
    const Eigen::MatrixXd e = enc.encode(p, Eigen::RowVector3d::Zero());
    CHECK(e.row(0) == e.row(1));
    CHECK(e.row(0) != e.row(2));
  }

  TEST_CASE("modulate_adjoint is the adjoint of modulate") {
    Rng rng(60);
    for (auto mod : {Modulation::Elementwise, Modulation::Rotary}) {
      for (int d : {4, 5}) {
        const Eigen::MatrixXd theta = gaussian_matrix(6, d, rng);
        const Eigen::MatrixXd u = gaussian_matrix(6, d, rng);
        const Eigen::MatrixXd g = gaussian_matrix(6, d, rng);
        const double lhs = frobenius_dot(modulate(mod, theta, u), g);
        const double rhs = frobenius_dot(u, modulate_adjoint(mod, theta, g));
        CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
      }
    }
  }

  TEST_CASE("rotary scores depend only on relative position") {
    Rng rng(61);
    PositionalEncoding enc;
    enc.dim = 12;
    const Points a = random_points(4, rng);
    const Points b = random_points(4, rng);
    const Eigen::MatrixXd u = gaussian_matrix(4, 12, rng);
    const Eigen::MatrixXd w = gaussian_matrix(4, 12, rng);
    const Eigen::RowVector3d o1 = Eigen::RowVector3d::Zero();
    const Eigen::RowVector3d o2(0.37, -1.2, 2.5);
    const Eigen::MatrixXd s1 =
        modulate(Modulation::Rotary, enc.encode(a, o1), u) * modulate(Modulation::Rotary, enc.encode(b, o1), w).transpose();
    const Eigen::MatrixXd s2 =
        modulate(Modulation::Rotary, enc.encode(a, o2), u) * modulate(Modulation::Rotary, enc.encode(b, o2), w).transpose();
    CHECK((s1 - s2).cwiseAbs().maxCoeff() < 1e-12);
  }

  TEST_CASE("zero output layers make the network the identity") {
    Rng rng(62);
    const AttentionParams params = AttentionParams::init(8, 3, rng, 1.0, true);
    const AttentionInputs in = random_inputs(params, 6, 7, rng);
    const AttentionOutput out = attention_forward(params, in);
    CHECK(out.features.source == in.source_features);
    CHECK(out.features.target == in.target_features);
  }

  TEST_CASE("forward pass matches a loop-level oracle") {
    Rng rng(63);
    AttentionParams params = AttentionParams::init(4, 2, rng, 1.0, false);
    for (auto& layer : params.layers) {
      layer.b1 = gaussian_matrix(8, 1, rng) * 0.1;
      layer.b2 = gaussian_matrix(4, 1, rng) * 0.1;
      layer.b3 = gaussian_matrix(4, 1, rng) * 0.1;
    }
    const Points ps = random_points(3, rng);
    const Points pt = random_points(3, rng);
    const Eigen::MatrixXd fs = random_unit_rows(3, 4, rng);
    const Eigen::MatrixXd ft = random_unit_rows(3, 4, rng);
    const AttentionInputs in{fs, ft, params.encoding.encode(ps, Eigen::RowVector3d::Zero()),
                             params.encoding.encode(pt, Eigen::RowVector3d::Zero())};
    const AttentionOutput out = attention_forward(params, in);

    const Grid ts = scalar_encoding(ps);
    const Grid tt = scalar_encoding(pt);
    const Grid s1 = scalar_block(params.layers[0], to_grid(fs), ts, to_grid(fs), ts);
    const Grid t1 = scalar_block(params.layers[0], to_grid(ft), tt, to_grid(ft), tt);
    const Grid s2 = scalar_block(params.layers[1], s1, ts, t1, tt);
    const Grid t2 = scalar_block(params.layers[1], t1, tt, s1, ts);
    AttentionParams single = params;
    single.layers.resize(1);
    const AttentionOutput one = attention_forward(single, in);
    for (std::size_t i = 0; i < 3; ++i) {
      for (std::size_t c = 0; c < 4; ++c) {
        const auto r = static_cast<Eigen::Index>(i);
        const auto col = static_cast<Eigen::Index>(c);
        CHECK(std::abs(one.features.source(r, col) - s1[i][c]) < 1e-10);
        CHECK(std::abs(one.features.target(r, col) - t1[i][c]) < 1e-10);
        CHECK(std::abs(out.features.source(r, col) - s2[i][c]) < 1e-10);
        CHECK(std::abs(out.features.target(r, col) - t2[i][c]) < 1e-10);
      }
    }
  }

  TEST_CASE("permuting the source permutes its features and leaves the target alone") {
    Rng rng(64);
    const AttentionParams params = AttentionParams::init(8, 4, rng);
    for (int trial = 0; trial < 20; ++trial) {
      const AttentionInputs in = random_inputs(params, 9, 7, rng);
      const auto perm = random_permutation(9, rng);
      AttentionInputs shuffled = in;
      for (std::size_t i = 0; i < 9; ++i) {
        const auto to = static_cast<Eigen::Index>(i);
        const auto from = static_cast<Eigen::Index>(perm[i]);
        shuffled.source_features.row(to) = in.source_features.row(from);
        shuffled.source_encoding.row(to) = in.source_encoding.row(from);
      }
      const AttentionOutput a = attention_forward(params, in);
      const AttentionOutput b = attention_forward(params, shuffled);
      for (std::size_t i = 0; i < 9; ++i) {
        const double diff = (b.features.source.row(static_cast<Eigen::Index>(i)) -
                             a.features.source.row(static_cast<Eigen::Index>(perm[i])))
                                .cwiseAbs()
                                .maxCoeff();
        REQUIRE(diff < 1e-12);
      }
      REQUIRE((a.features.target - b.features.target).cwiseAbs().maxCoeff() < 1e-12);
    }
  }

  TEST_CASE("shape errors are reported") {
    Rng rng(65);
    const AttentionParams params = AttentionParams::init(4, 1, rng);
    AttentionInputs in = random_inputs(params, 3, 3, rng);
    in.source_encoding = Eigen::MatrixXd::Zero(3, 5);
    try {
      (void)attention_forward(params, in);
      FAIL("mismatched encoding accepted");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::ShapeMismatch);
    }
  }

  TEST_CASE("zero upstream gradient gives zero gradients") {
    Rng rng(66);
    const AttentionParams params = AttentionParams::init(6, 2, rng);
    const AttentionInputs in = random_inputs(params, 5, 4, rng);
    const AttentionOutput out = attention_forward(params, in);
    const AttentionGradients g =
        attention_backward(params, out.cache, Eigen::MatrixXd::Zero(5, 6), Eigen::MatrixXd::Zero(4, 6));
    CHECK(g.params.flatten().cwiseAbs().maxCoeff() == 0.0);
    CHECK(g.source_input.cwiseAbs().maxCoeff() == 0.0);
    CHECK(g.target_input.cwiseAbs().maxCoeff() == 0.0);
  }

  TEST_CASE("backward without a forward cache is rejected") {
    Rng rng(67);
    const AttentionParams params = AttentionParams::init(4, 2, rng);
    try {
      (void)attention_backward(params, AttentionCache{}, Eigen::MatrixXd::Zero(2, 4), Eigen::MatrixXd::Zero(2, 4));
      FAIL("empty cache accepted");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::MissingForwardCache);
    }
    try {
      (void)sinkhorn_log_backward(SinkhornTape{}, Eigen::MatrixXd::Zero(2, 2));
      FAIL("empty tape accepted");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::MissingForwardCache);
    }
  }

  TEST_CASE("network gradients agree with central differences") {
    Rng rng(68);
    for (auto mod : {Modulation::Elementwise, Modulation::Rotary}) {
      AttentionParams params = AttentionParams::init(4, 2, rng);
      params.encoding.modulation = mod;
      const AttentionInputs in = random_inputs(params, 4, 3, rng);
      const Eigen::MatrixXd gs = gaussian_matrix(4, 4, rng);
      const Eigen::MatrixXd gt = gaussian_matrix(3, 4, rng);
      const auto loss = [&](const AttentionParams& p, const AttentionInputs& x) {
        const AttentionOutput o = attention_forward(p, x);
        return frobenius_dot(o.features.source, gs) + frobenius_dot(o.features.target, gt);
      };
      const AttentionOutput out = attention_forward(params, in);
      const AttentionGradients g = attention_backward(params, out.cache, gs, gt);
      const Eigen::VectorXd theta = params.flatten();
      const Eigen::VectorXd grad = g.params.flatten();
      const double h = 1e-6;
      for (Eigen::Index i = 0; i < theta.size(); i += 7) {
        AttentionParams p = params;
        Eigen::VectorXd t = theta;
        t[i] += h;
        p.unflatten(t);
        const double up = loss(p, in);
        t[i] -= 2 * h;
        p.unflatten(t);
        const double down = loss(p, in);
        const double fd = (up - down) / (2 * h);
        REQUIRE(std::abs(fd - grad[i]) <= 1e-6 * std::max(1.0, std::abs(fd)));
      }
      for (Eigen::Index r = 0; r < 4; ++r) {
        for (Eigen::Index c = 0; c < 4; ++c) {
          AttentionInputs x = in;
          x.source_features(r, c) += h;
          const double up = loss(params, x);
          x.source_features(r, c) -= 2 * h;
          const double fd = (up - loss(params, x)) / (2 * h);
          REQUIRE(std::abs(fd - g.source_input(r, c)) <= 1e-6 * std::max(1.0, std::abs(fd)));
        }
      }
    }
  }

  TEST_CASE("log-domain Sinkhorn backward agrees with central differences") {
    Rng rng(69);
    const Eigen::MatrixXd logits = gaussian_matrix(4, 5, rng) * 2.0;
    const Eigen::MatrixXd upstream = gaussian_matrix(4, 5, rng);
    const SinkhornTape tape = sinkhorn_log_forward(logits, 10);
    const Eigen::MatrixXd grad = sinkhorn_log_backward(tape, upstream);
    const double h = 1e-6;
    for (Eigen::Index i = 0; i < 4; ++i) {
      for (Eigen::Index j = 0; j < 5; ++j) {
        Eigen::MatrixXd x = logits;
        x(i, j) += h;
        const double up = frobenius_dot(sinkhorn_log_forward(x, 10).output, upstream);
        x(i, j) -= 2 * h;
        const double fd = (up - frobenius_dot(sinkhorn_log_forward(x, 10).output, upstream)) / (2 * h);
        REQUIRE(std::abs(fd - grad(i, j)) < 1e-7);
      }
    }
  }

  TEST_CASE("Sinkhorn gradient has no component along a constant logit shift") {
    Rng rng(70);
    for (int trial = 0; trial < 20; ++trial) {
      const Eigen::MatrixXd logits = gaussian_matrix(6, 6, rng) * 3.0;
      const SinkhornTape tape = sinkhorn_log_forward(logits, 10);
      const Eigen::MatrixXd grad = sinkhorn_log_backward(tape, gaussian_matrix(6, 6, rng));
      REQUIRE(std::abs(grad.sum()) < 1e-8);
      // The first column normalisation absorbs any per-column shift.
      REQUIRE(grad.colwise().sum().cwiseAbs().maxCoeff() < 1e-8);
    }
  }

  TEST_CASE("denoiser loss gradient agrees with central differences") {
    double worst = 0.0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      Rng rng(derive_seed(71, seed));
      const ScenePair pair = small_pair(rng);
      const AttentionParams params = AttentionParams::init(4, 2, rng);
      const DiffusionConfig dc;
      const MatchMatrix e0 = ground_truth_matrix(pair);
      const MatchMatrix et = forward_diffuse(e0, 1 + static_cast<int>(seed) * 90, dc, rng);
      const GThetaConfig gc;
      const LossAndGradient base = denoiser_loss_and_gradient(params, et, pair, e0, gc);
      const Eigen::VectorXd theta = params.flatten();
      const Eigen::VectorXd grad = base.gradient.flatten();
      std::uniform_int_distribution<Eigen::Index> pick(0, theta.size() - 1);
      for (int k = 0; k < 20; ++k) {
        const Eigen::Index i = pick(rng);
        const double h = 1e-5;
        AttentionParams p = params;
        Eigen::VectorXd t = theta;
        t[i] += h;
        p.unflatten(t);
        const double up = denoiser_loss_and_gradient(p, et, pair, e0, gc).loss;
        t[i] -= 2 * h;
        p.unflatten(t);
        const double down = denoiser_loss_and_gradient(p, et, pair, e0, gc).loss;
        const double fd = (up - down) / (2 * h);
        worst = std::max(worst, std::abs(fd - grad[i]) / std::max({std::abs(fd), std::abs(grad[i]), 1e-7}));
      }
    }
    CHECK(worst < 1e-4);
  }

  TEST_CASE("flatten and unflatten are inverse") {
    Rng rng(72);
    AttentionParams params = AttentionParams::init(5, 3, rng);
    const Eigen::VectorXd flat = params.flatten();
    CHECK(flat.size() == static_cast<Eigen::Index>(params.parameter_count()));
    AttentionParams other = params.zeros_like();
    other.unflatten(flat);
    CHECK(other.flatten() == flat);
    CHECK_THROWS_AS(other.unflatten(Eigen::VectorXd::Zero(3)), Error);
  }
}
