#include <cmath>

#include "doctest.h"
#include "exitweave/backbone.hpp"
#include "exitweave/errors.hpp"
#include "exitweave/numkit.hpp"
#include "oracles.hpp"

using namespace exitweave;
using namespace exitweave::backbone;

namespace {

BackboneParams random_params(const BackboneConfig& cfg, RngStream& rng, double scale = 0.7) {
  BackboneParams p(cfg);
  for (double& v : p.values()) v = rng.uniform(-scale, scale);
  return p;
}

}  // namespace

TEST_SUITE("backbone") {

TEST_CASE("parameter count and layout by hand") {
  const BackboneConfig cfg{2, {8, 8}, 3};
  // blocks 2*8+8, 8*8+8; heads 8*3+3 twice
  const std::size_t expect = (16 + 8) + (64 + 8) + 2 * (24 + 3);
  const auto layout = make_layout(cfg);
  CHECK(layout.total == expect);
  CHECK(layout.blocks[0].weight_offset == 0);
  CHECK(layout.blocks[0].bias_offset == 16);
  CHECK(layout.blocks[1].weight_offset == 24);
  CHECK(layout.heads[0].weight_offset == 96);
  CHECK(layout.heads[1].end() == expect);
  CHECK(BackboneParams(cfg).size() == expect);
  CHECK_THROWS_AS(BackboneParams(cfg, std::vector<double>(expect - 1)), ShapeError);
  CHECK_THROWS_AS((BackboneConfig{2, {8}, 3}.validate()), ConfigError);
  CHECK_THROWS_AS((BackboneConfig{2, {8, 0}, 3}.validate()), ConfigError);
}

TEST_CASE("zero heads give uniform predictions") {
  const BackboneConfig cfg{3, {5, 4, 6}, 4};
  RngStream rng(2);
  auto p = random_params(cfg, rng);
  for (const auto& h : p.layout().heads) {
    for (std::size_t j = h.weight_offset; j < h.end(); ++j) p.values()[j] = 0.0;
  }
  const auto batch = oracle::random_batch(5, 3, 4, rng);
  const auto out = forward_all(p, batch);
  for (double l : out.losses.values()) CHECK(l == doctest::Approx(std::log(4.0)).epsilon(1e-14));
  for (double c : out.confidences.values()) CHECK(c == doctest::Approx(0.25).epsilon(1e-14));
}

TEST_CASE("forward pass matches the hand-indexed oracle") {
  RngStream rng(11);
  for (int trial = 0; trial < 5; ++trial) {
    const BackboneConfig cfg{3 + static_cast<std::size_t>(trial), {4, 6, 3}, 5};
    const auto p = random_params(cfg, rng);
    const auto batch = oracle::random_batch(7, cfg.input_dim, 5, rng);
    const auto out = forward_all(p, batch);
    std::vector<double> theta(p.values().begin(), p.values().end());
    for (std::size_t i = 0; i < 7; ++i) {
      const auto ref = oracle::forward_sample(cfg, theta, batch.x.row(i).data(), batch.y[i]);
      for (std::size_t k = 0; k < 3; ++k) {
        CHECK(std::abs(out.losses(i, k) - ref.losses[k]) <= 1e-12);
        for (std::size_t c = 0; c < 5; ++c) CHECK(std::abs(out.logit_row(i, k)[c] - ref.logits[k][c]) <= 1e-12);
        const auto& z = ref.logits[k];
        const auto best = std::max_element(z.begin(), z.end()) - z.begin();
        CHECK(out.prediction(i, k) == best);
      }
    }
  }
}

TEST_CASE("exit k's gradient does not touch later blocks or other heads") {
  const BackboneConfig cfg{4, {5, 5, 5}, 3};
  RngStream rng(4);
  const auto p = random_params(cfg, rng);
  const auto batch = oracle::random_batch(4, 4, 3, rng);
  const auto g = per_sample_grads(p, batch);
  const auto& lay = p.layout();
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t k = 0; k < 3; ++k) {
      const auto row = g.at(i, k);
      for (std::size_t b = k + 1; b < 3; ++b) {
        for (std::size_t j = lay.blocks[b].weight_offset; j < lay.blocks[b].end(); ++j) CHECK(row[j] == 0.0);
      }
      for (std::size_t h = 0; h < 3; ++h) {
        if (h == k) continue;
        for (std::size_t j = lay.heads[h].weight_offset; j < lay.heads[h].end(); ++j) CHECK(row[j] == 0.0);
      }
    }
  }
}

TEST_CASE("per-sample gradients match central differences") {
  const BackboneConfig cfg{3, {4, 5, 3}, 4};
  RngStream rng(8);
  const auto p = random_params(cfg, rng);
  const auto batch = oracle::random_batch(3, 3, 4, rng);
  const auto g = per_sample_grads(p, batch);
  std::vector<double> theta(p.values().begin(), p.values().end());
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t k = 0; k < 3; ++k) {
      std::vector<double> fd(theta.size());
      for (std::size_t j = 0; j < theta.size(); ++j) {
        const double h = 1e-6;
        auto up = theta, down = theta;
        up[j] += h;
        down[j] -= h;
        const double lu = oracle::forward_sample(cfg, up, batch.x.row(i).data(), batch.y[i]).losses[k];
        const double ld = oracle::forward_sample(cfg, down, batch.x.row(i).data(), batch.y[i]).losses[k];
        fd[j] = (lu - ld) / (2 * h);
      }
      CHECK(numkit::relative_error(g.at(i, k), fd) <= 1e-6);
    }
  }
}

TEST_CASE("batch gradient equals the mean of per-sample gradients") {
  const BackboneConfig cfg{5, {6, 4, 4}, 3};
  RngStream rng(13);
  const auto p = random_params(cfg, rng);
  const auto batch = oracle::random_batch(9, 5, 3, rng);
  const auto g = per_sample_grads(p, batch);
  Matrix coeffs(9, 3, 1.0 / 9);
  const auto whole = grad_exit_losses(p, batch.x, batch.y, coeffs);
  const auto via = grad_weighted_loss(g, Matrix(9, 3, 1.0));
  CHECK(numkit::relative_error(whole, via) <= 1e-12);

  RngStream wr(14);
  const auto w = oracle::random_matrix(9, 3, wr, 0.2, 1.8);
  Matrix c2(9, 3);
  for (std::size_t j = 0; j < c2.size(); ++j) c2.values()[j] = w.values()[j] / 9;
  CHECK(numkit::relative_error(grad_exit_losses(p, batch.x, batch.y, c2), grad_weighted_loss(g, w)) <= 1e-12);
}

TEST_CASE("weighted loss reference values") {
  const Matrix losses(2, 2, std::vector<double>{1, 2, 3, 4});
  CHECK(weighted_train_loss(losses, Matrix(2, 2, 1.0)) == doctest::Approx(5.0));
  CHECK(cumulative_loss(losses) == doctest::Approx(5.0));
  const Matrix w(2, 2, std::vector<double>{0.5, 1.5, 1.5, 0.5});
  // (0.5 + 4.5) / 2 + (3 + 2) / 2
  CHECK(weighted_train_loss(losses, w) == doctest::Approx(5.0));
  const Matrix w2(2, 2, std::vector<double>{2, 0, 0, 0});
  CHECK(weighted_train_loss(losses, w2) == doctest::Approx(1.0));
  CHECK_THROWS_AS(weighted_train_loss(losses, Matrix(2, 3, 1.0)), ShapeError);
}

TEST_CASE("sgd step reference values") {
  const BackboneConfig cfg{1, {1, 1}, 2};
  const std::size_t p = make_layout(cfg).total;
  const BackboneParams params(cfg, std::vector<double>(p, 1.0));
  std::vector<double> g(p, 2.0);
  SgdState st;
  const auto plain = sgd_step(params, g, 0.1, SgdOptions{0.0, 0.0}, st);
  for (double v : plain.values()) CHECK(v == doctest::Approx(0.8));

  SgdState mom;
  const auto s1 = sgd_step(params, g, 0.1, SgdOptions{0.9, 0.0}, mom);
  const auto s2 = sgd_step(s1, g, 0.1, SgdOptions{0.9, 0.0}, mom);
  // v1 = 2, v2 = 0.9*2 + 2 = 3.8
  for (double v : s2.values()) CHECK(v == doctest::Approx(1.0 - 0.2 - 0.38));

  SgdState wd;
  const auto s3 = sgd_step(params, std::vector<double>(p, 0.0), 0.1, SgdOptions{0.0, 0.5}, wd);
  for (double v : s3.values()) CHECK(v == doctest::Approx(0.95));
  CHECK_THROWS_AS(sgd_step(params, std::vector<double>(p + 1), 0.1, SgdOptions{}, st), ShapeError);
}

TEST_CASE("pseudo step is pure and equals theta - lr * weighted gradient") {
  const BackboneConfig cfg{3, {4, 4}, 3};
  RngStream rng(21);
  const auto p = random_params(cfg, rng);
  const auto before = p;
  const auto batch = oracle::random_batch(6, 3, 3, rng);
  const auto g = per_sample_grads(p, batch);
  const auto w = oracle::random_matrix(6, 2, rng, 0.3, 1.7);
  const auto q = pseudo_step(p, g, w, 0.25);
  CHECK(p == before);
  for (std::size_t j = 0; j < p.size(); ++j) {
    double s = 0;
    for (std::size_t i = 0; i < 6; ++i) {
      for (std::size_t k = 0; k < 2; ++k) s += w(i, k) * g.at(i, k)[j];
    }
    CHECK(std::abs(q.values()[j] - (p.values()[j] - 0.25 * s / 6)) <= 1e-12);
  }
}

TEST_CASE("multiply-add counts") {
  const auto one = count_mul_adds(BackboneConfig{2, {4}, 3});
  REQUIRE(one.size() == 1);
  CHECK(one[0] == 20.0);
  // input 10, widths 8/6/4, 5 classes:
  //   exit 1: 10*8 + 8*5 = 120
  //   exit 2: 120 + 8*6 + 6*5 = 198
  //   exit 3: 198 + 6*4 + 4*5 = 242
  const auto three = count_mul_adds(BackboneConfig{10, {8, 6, 4}, 5});
  CHECK(three == std::vector<double>{120, 198, 242});
  RngStream rng(3);
  for (int t = 0; t < 50; ++t) {
    BackboneConfig cfg{1 + rng.below(20), {}, 2 + rng.below(20)};
    for (std::size_t k = 0; k < 2 + rng.below(5); ++k) cfg.trunk_widths.push_back(1 + rng.below(64));
    const auto c = count_mul_adds(cfg);
    for (std::size_t k = 1; k < c.size(); ++k) CHECK(c[k] > c[k - 1]);
  }
}

TEST_CASE("bad batches are rejected") {
  const BackboneConfig cfg{3, {4, 4}, 3};
  const BackboneParams p(cfg);
  CHECK_THROWS_AS(forward_all(p, Matrix(2, 4), std::vector<int>{0, 1}), ShapeError);
  CHECK_THROWS_AS(forward_all(p, Matrix(2, 3), std::vector<int>{0, 3}), IndexError);
  Matrix bad(1, 3);
  bad(0, 1) = std::nan("");
  CHECK_THROWS_AS(forward_all(p, bad, std::vector<int>{0}), NumericError);
}

}  // TEST_SUITE
