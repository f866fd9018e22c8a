#include <cmath>

#include "doctest.h"
#include "exitweave/errors.hpp"
#include "exitweave/wpn.hpp"
#include "oracles.hpp"

using namespace exitweave;
using namespace exitweave::wpn;

namespace {

double logit(double s) { return std::log(s / (1 - s)); }

// Straight-line WPN forward for one loss row.
std::vector<double> wpn_row(const WpnParams& p, std::span<const double> x) {
  std::vector<double> h(x.begin(), x.end());
  const auto& layers = p.layers();
  for (std::size_t d = 0; d < layers.size(); ++d) {
    const auto& l = layers[d];
    std::vector<double> next(l.out);
    for (std::size_t o = 0; o < l.out; ++o) {
      double s = p.values()[l.bias_offset + o];
      for (std::size_t i = 0; i < l.in; ++i) s += p.values()[l.weight_offset + o * l.in + i] * h[i];
      next[o] = d + 1 < layers.size() ? std::max(0.0, s) : s;
    }
    h = next;
  }
  return h;
}

}  // namespace

TEST_SUITE("wpn") {

TEST_CASE("forward: zeros, row independence, oracle") {
  const WpnConfig cfg{3, 7, 2, 0.8};
  RngStream rng(5);
  const auto losses = oracle::random_matrix(6, 3, rng, 0, 4);
  CHECK(wpn_forward(WpnParams(cfg), losses).raw == Matrix(6, 3));

  auto p = init_wpn(cfg, rng);
  Matrix dup(2, 3, std::vector<double>{1, 2, 3, 1, 2, 3});
  const auto r = wpn_forward(p, dup).raw;
  for (std::size_t k = 0; k < 3; ++k) CHECK(r(0, k) == r(1, k));

  for (double& v : p.values()) v = rng.uniform(-1, 1);
  const auto out = wpn_forward(p, losses).raw;
  for (std::size_t i = 0; i < 6; ++i) {
    const auto ref = wpn_row(p, losses.row(i));
    for (std::size_t k = 0; k < 3; ++k) CHECK(std::abs(out(i, k) - ref[k]) <= 1e-12);
  }
  CHECK_THROWS_AS(wpn_forward(p, Matrix(2, 4)), ShapeError);
}

TEST_CASE("make_weights reference cases") {
  const auto flat = make_weights(Matrix(3, 2, 0.7), 0.8);
  for (double w : flat.weights.values()) CHECK(w == doctest::Approx(1.0).epsilon(1e-15));

  // pre = delta * (2 s - 1) = [0.3, -0.1] with delta = 0.5
  const Matrix raw(2, 1, std::vector<double>{logit((0.3 / 0.5 + 1) / 2), logit((-0.1 / 0.5 + 1) / 2)});
  const auto w = make_weights(raw, 0.5);
  CHECK(w.perturbation_pre(0, 0) == doctest::Approx(0.3).epsilon(1e-14));
  CHECK(w.perturbation(0, 0) == doctest::Approx(0.2).epsilon(1e-14));
  CHECK(w.perturbation(1, 0) == doctest::Approx(-0.2).epsilon(1e-14));
  CHECK(w.weights(0, 0) == doctest::Approx(1.2).epsilon(1e-14));
  CHECK(w.weights(1, 0) == doctest::Approx(0.8).epsilon(1e-14));

  RngStream rng(6);
  const auto any = oracle::random_matrix(4, 3, rng, -5, 5);
  const auto zero = make_weights(any, 0.0);
  for (double v : zero.weights.values()) CHECK(v == 1.0);
}

TEST_CASE("perturbations are zero-sum, bounded, permutation-equivariant") {
  RngStream rng(17);
  for (int t = 0; t < 200; ++t) {
    const double delta = rng.uniform(0, 0.99);
    const auto raw = oracle::random_matrix(1 + rng.below(10), 1 + rng.below(5), rng, -8, 8);
    const auto w = make_weights(raw, delta);
    double sum = 0, wsum = 0;
    for (std::size_t j = 0; j < raw.size(); ++j) {
      sum += w.perturbation.values()[j];
      wsum += w.weights.values()[j];
      CHECK(std::abs(w.perturbation_pre.values()[j]) < delta + 1e-15);
    }
    CHECK(std::abs(sum) <= 1e-9);
    CHECK(std::abs(wsum / static_cast<double>(raw.size()) - 1) <= 1e-9);
  }

  const WpnConfig cfg{2, 5, 1, 0.6};
  auto p = init_wpn(cfg, rng);
  const auto losses = oracle::random_matrix(4, 2, rng, 0, 3);
  Matrix swapped = losses;
  for (std::size_t k = 0; k < 2; ++k) std::swap(swapped(0, k), swapped(3, k));
  const auto a = make_weights(wpn_forward(p, losses), 0.6).weights;
  const auto b = make_weights(wpn_forward(p, swapped), 0.6).weights;
  for (std::size_t k = 0; k < 2; ++k) {
    CHECK(a(0, k) == doctest::Approx(b(3, k)).epsilon(1e-14));
    CHECK(a(1, k) == doctest::Approx(b(1, k)).epsilon(1e-14));
  }
}

TEST_CASE("meta_weight_grad: zero and orthogonal directions, formula") {
  backbone::PerSampleGrads g(2, 2, 3);
  g.at(0, 0)[0] = 1;
  g.at(0, 1)[1] = 2;
  g.at(1, 0)[2] = -1;
  g.at(1, 1)[0] = 0.5;
  CHECK(meta_weight_grad(g, std::vector<double>(3, 0.0), 0.1, 2) == Matrix(2, 2));
  const std::vector<double> mg{0, 0, 4};
  const auto d = meta_weight_grad(g, mg, 0.1, 2);
  CHECK(d(0, 0) == 0.0);
  CHECK(d(0, 1) == 0.0);
  CHECK(d(1, 1) == 0.0);
  CHECK(d(1, 0) == doctest::Approx(-(0.1 / 2) * -4));
}

TEST_CASE("wpn_backward null space and cache checks") {
  const WpnConfig cfg{3, 6, 1, 0.7};
  RngStream rng(23);
  const auto p = init_wpn(cfg, rng);
  const auto losses = oracle::random_matrix(5, 3, rng, 0, 3);
  const auto fwd = wpn_forward(p, losses);
  const auto sw = make_weights(fwd, cfg.delta);
  for (double v : wpn_backward(fwd.cache, sw.cache, Matrix(5, 3))) CHECK(v == 0.0);
  for (double v : wpn_backward(fwd.cache, sw.cache, Matrix(5, 3, 2.5))) CHECK(std::abs(v) <= 1e-14);

  const auto other = wpn_forward(p, losses);
  CHECK_THROWS_AS(wpn_backward(other.cache, sw.cache, Matrix(5, 3)), UsageError);
  CHECK_THROWS_AS(wpn_backward(fwd.cache, make_weights(fwd.raw, cfg.delta).cache, Matrix(5, 3)), UsageError);
  CHECK_THROWS_AS(wpn_backward(fwd.cache, sw.cache, Matrix(4, 3)), ShapeError);
}

TEST_CASE("wpn_backward matches finite differences of <w, v>") {
  const WpnConfig cfg{3, 6, 2, 0.7};
  RngStream rng(29);
  const auto p = init_wpn(cfg, rng);
  const auto losses = oracle::random_matrix(5, 3, rng, 0, 3);
  const auto v = oracle::random_matrix(5, 3, rng, -1, 1);
  const auto fwd = wpn_forward(p, losses);
  const auto g = wpn_backward(fwd.cache, make_weights(fwd, cfg.delta).cache, v);
  std::vector<double> theta(p.values().begin(), p.values().end()), fd(theta.size());
  auto f = [&](const std::vector<double>& t) {
    const auto w = make_weights(wpn_forward(WpnParams(cfg, t), losses), cfg.delta).weights;
    double s = 0;
    for (std::size_t j = 0; j < w.size(); ++j) s += w.values()[j] * v.values()[j];
    return s;
  };
  for (std::size_t j = 0; j < theta.size(); ++j) {
    auto up = theta, down = theta;
    up[j] += 1e-6;
    down[j] -= 1e-6;
    fd[j] = (f(up) - f(down)) / 2e-6;
  }
  CHECK(numkit::relative_error(g, fd) <= 1e-6);
}

TEST_CASE("adam: first step, zero gradient, textbook trajectory") {
  std::vector<double> x{1.0};
  auto st = AdamState::zeros(1);
  adam_update(x, std::vector<double>{1.0}, st, 1e-3);
  CHECK(1.0 - x[0] == doctest::Approx(1e-3).epsilon(1e-6));
  CHECK(st.step == 1);

  std::vector<double> z{0.5, -0.5};
  auto zs = AdamState::zeros(2);
  adam_update(z, std::vector<double>(2, 0.0), zs, 1e-2);
  CHECK(z == std::vector<double>{0.5, -0.5});

  RngStream rng(31);
  const WpnConfig cfg{2, 4, 1, 0.5};
  auto p = init_wpn(cfg, rng);
  std::vector<double> ref(p.values().begin(), p.values().end());
  auto state = AdamState::zeros(p.size());
  oracle::Adam textbook;
  for (int step = 0; step < 10; ++step) {
    std::vector<double> g(p.size());
    for (double& v : g) v = rng.normal();
    p = adam_step(p, g, state, 1e-2);
    textbook.step(ref, g, 1e-2);
  }
  for (std::size_t j = 0; j < ref.size(); ++j) CHECK(std::abs(p.values()[j] - ref[j]) <= 1e-12);
}

TEST_CASE("config validation") {
  CHECK_THROWS_AS((WpnConfig{2, 0, 1, 0.5}.validate()), ConfigError);
  CHECK_THROWS_AS((WpnConfig{2, 4, 1, 1.0}.validate()), ConfigError);
  CHECK_NOTHROW((WpnConfig{2, 4, 1, 0.0}.validate()));
}

}  // TEST_SUITE
