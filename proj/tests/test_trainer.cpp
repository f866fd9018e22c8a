#include <cmath>

#include "doctest.h"
#include "exitweave/datahub.hpp"
#include "exitweave/errors.hpp"
#include "exitweave/trainer.hpp"
#include "oracles.hpp"

using namespace exitweave;
using namespace exitweave::trainer;
using backbone::BackboneConfig;

namespace {

const BackboneConfig kNet{4, {6, 5, 4}, 3};

TrainConfig small_config(VariantKind variant = VariantKind::L2W) {
  TrainConfig c;
  c.alpha = 0.1;
  c.beta = 1e-3;
  c.batch_size = 12;
  c.epochs = 1;
  c.variant = variant;
  c.seed = 5;
  return c;
}

wpn::WpnConfig small_wpn(double delta = 0.8) { return wpn::WpnConfig{3, 8, 1, delta}; }

std::vector<double> as_vec(std::span<const double> s) { return {s.begin(), s.end()}; }

double max_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0;
  for (std::size_t j = 0; j < a.size(); ++j) m = std::max(m, std::abs(a[j] - b[j]));
  return m;
}

}  // namespace

TEST_SUITE("trainer") {

TEST_CASE("split_batch halves in order") {
  Batch b{Matrix(4, 1, std::vector<double>{0, 1, 2, 3}), {0, 1, 2, 0}};
  const auto [a, c] = split_batch(b);
  CHECK(a.x.values()[0] == 0);
  CHECK(a.x.values()[1] == 1);
  CHECK(c.x.values()[0] == 2);
  CHECK(c.y == std::vector<int>{2, 0});
  const auto [a2, c2] = split_batch(b);
  CHECK(a2.x == a.x);
  CHECK(c2.y == c.y);
  Batch odd{Matrix(3, 1), {0, 0, 0}};
  CHECK_THROWS_AS(split_batch(odd), ConfigError);
}

TEST_CASE("interval and schedule") {
  CHECK(wpn_update_due(0, 1));
  CHECK(wpn_update_due(5, 1));
  CHECK_FALSE(wpn_update_due(0, 3));
  CHECK_FALSE(wpn_update_due(1, 3));
  CHECK(wpn_update_due(2, 3));
  CHECK(wpn_update_due(5, 3));
  TrainConfig c;
  c.alpha = 0.2;
  CHECK(learning_rate(c, 0, 100) == 0.2);
  CHECK(learning_rate(c, 50, 100) == doctest::Approx(0.1));
  c.lr_schedule = LrSchedule::Constant;
  CHECK(learning_rate(c, 70, 100) == 0.2);
}

TEST_CASE("fixed exit weights") {
  const auto up = fixed_exit_weights(5, true);
  const std::vector<double> want{0.6, 0.8, 1.0, 1.2, 1.4};
  for (std::size_t k = 0; k < 5; ++k) CHECK(up[k] == doctest::Approx(want[k]).epsilon(1e-15));
  const auto down = fixed_exit_weights(5, false);
  CHECK(down.front() == doctest::Approx(1.4));
  CHECK(down.back() == doctest::Approx(0.6));
}

TEST_CASE("meta objective against the formula") {
  backbone::ExitOutputs out;
  out.batch = 1;
  out.exits = 1;
  out.losses = Matrix(1, 1, 0.0);
  RngStream rng(3);
  for (int t = 0; t < 50; ++t) {
    const std::size_t n = 2 + rng.below(12), k = 1 + rng.below(4);
    out.batch = n;
    out.exits = k;
    out.losses = oracle::random_matrix(n, k, rng, 0, 3);
    const auto conf = oracle::random_matrix(n, k, rng);
    const double q = rng.uniform(0.3, 3.0);
    const auto alloc = exitpolicy::allocate_meta(conf, q);
    const auto obj = meta_objective(out, alloc);
    CHECK(std::abs(obj.value - oracle::meta_objective(out.losses, alloc.subsets)) <= 1e-12);
    for (std::size_t e = 0; e < k; ++e) {
      for (std::size_t j = 0; j < n; ++j) {
        const bool in = std::find(alloc.subsets[e].begin(), alloc.subsets[e].end(), j) != alloc.subsets[e].end();
        CHECK(obj.coeffs(j, e) == (in ? 1.0 / static_cast<double>(alloc.subsets[e].size()) : 0.0));
      }
    }
    if (k == 1) {
      double mean = 0;
      for (double v : out.losses.values()) mean += v;
      CHECK(obj.value == doctest::Approx(mean / n).epsilon(1e-14));
    }
  }
  exitpolicy::AllocationResult short_alloc{{{0}}, {1}};
  out.exits = 1;
  out.batch = 3;
  out.losses = Matrix(3, 1);
  CHECK_THROWS_AS(meta_objective(out, short_alloc), ShapeError);
}

TEST_CASE("one L2W substep equals the hand-assembled update") {
  auto cfg = small_config();
  cfg.momentum = 0.9;
  cfg.weight_decay = 1e-3;
  auto state = init_state(kNet, small_wpn(), cfg);
  RngStream rng(77);
  const auto train = oracle::random_batch(6, 4, 3, rng);
  const auto meta = oracle::random_batch(6, 4, 3, rng);
  state.sgd.velocity.assign(state.backbone.size(), 0.01);
  const auto before = state;

  l2w_substep(state, cfg, train, meta, 0.1);

  // pseudo step, by hand
  const std::size_t p = before.backbone.size();
  const auto losses = backbone::forward_all(before.backbone, train).losses;
  const auto psg = backbone::per_sample_grads(before.backbone, train);
  const auto fwd = wpn::wpn_forward(before.wpn, losses);
  const auto sw = wpn::make_weights(fwd, 0.8);
  std::vector<double> pseudo = as_vec(before.backbone.values());
  for (std::size_t j = 0; j < p; ++j) {
    double s = 0;
    for (std::size_t i = 0; i < 6; ++i) {
      for (std::size_t k = 0; k < 3; ++k) s += sw.weights(i, k) * psg.at(i, k)[j];
    }
    pseudo[j] -= 0.1 * s / 6;
  }
  // meta loss on the oracle allocation at the pseudo parameters
  Matrix conf(6, 3), mloss(6, 3);
  for (std::size_t i = 0; i < 6; ++i) {
    const auto f = oracle::forward_sample(kNet, pseudo, meta.x.row(i).data(), meta.y[i]);
    for (std::size_t k = 0; k < 3; ++k) {
      const auto pr = numkit::softmax_stable(f.logits[k]);
      conf(i, k) = *std::max_element(pr.begin(), pr.end());
      mloss(i, k) = f.losses[k];
    }
  }
  const auto subsets = oracle::allocate(conf, cfg.q);
  Matrix coeffs(6, 3);
  for (std::size_t k = 0; k < 3; ++k) {
    for (std::size_t j : subsets[k]) coeffs(j, k) = 1.0 / static_cast<double>(subsets[k].size());
  }
  const auto mg = backbone::grad_exit_losses(BackboneParams(kNet, pseudo), meta.x, meta.y, coeffs);
  Matrix dw(6, 3);
  for (std::size_t i = 0; i < 6; ++i) {
    for (std::size_t k = 0; k < 3; ++k) dw(i, k) = -(0.1 / 6) * numkit::dot(mg, psg.at(i, k));
  }
  const auto gg = wpn::wpn_backward(fwd.cache, sw.cache, dw);
  auto g_theta = as_vec(before.wpn.values());
  oracle::Adam adam;
  adam.step(g_theta, gg, cfg.beta);
  CHECK(max_diff(state.wpn.values(), g_theta) <= 1e-12);

  // real step with the refreshed weights and momentum
  const auto w2 = wpn::make_weights(wpn::wpn_forward(wpn::WpnParams(small_wpn(), g_theta), losses), 0.8).weights;
  auto theta = as_vec(before.backbone.values());
  for (std::size_t j = 0; j < p; ++j) {
    double s = 0;
    for (std::size_t i = 0; i < 6; ++i) {
      for (std::size_t k = 0; k < 3; ++k) s += w2(i, k) * psg.at(i, k)[j];
    }
    const double g = s / 6 + cfg.weight_decay * theta[j];
    const double v = cfg.momentum * 0.01 + g;
    theta[j] -= 0.1 * v;
  }
  CHECK(max_diff(state.backbone.values(), theta) <= 1e-12);
}

TEST_CASE("delta = 0 reduces each substep to the unweighted update") {
  auto cfg = small_config();
  auto state = init_state(kNet, small_wpn(0.0), cfg);
  RngStream rng(12);
  for (int it = 0; it < 5; ++it) {
    const auto batch = oracle::random_batch(12, 4, 3, rng);
    const auto [a, b] = split_batch(batch);
    auto ref_params = state.backbone;
    auto ref_sgd = state.sgd;
    for (const auto* half : {&a, &b}) {
      const auto g = backbone::grad_exit_losses(ref_params, half->x, half->y, Matrix(6, 3, 1.0 / 6));
      ref_params = backbone::sgd_step(ref_params, g, 0.1, backbone::SgdOptions{cfg.momentum, cfg.weight_decay},
                                      ref_sgd);
    }
    train_step_variant(state, cfg, batch, 0.1);
    CHECK(max_diff(state.backbone.values(), ref_params.values()) <= 1e-12);
  }
}

TEST_CASE("interval longer than the run leaves the WPN untouched") {
  auto cfg = small_config();
  cfg.interval = 100;
  auto state = init_state(kNet, small_wpn(), cfg);
  const auto wpn0 = state.wpn;
  RngStream rng(4);
  StepLog log(3);
  for (int it = 0; it < 10; ++it) train_step_variant(state, cfg, oracle::random_batch(12, 4, 3, rng), 0.1, &log);
  CHECK(state.wpn == wpn0);
  CHECK(log.wpn_updates == 0);
  CHECK(log.backbone_updates == 20);
  CHECK(state.iteration == 10);
}

TEST_CASE("two backbone and two WPN updates per mini-batch; runs repeat bit for bit") {
  auto cfg = small_config();
  RngStream rng(9);
  std::vector<Batch> batches;
  for (int it = 0; it < 3; ++it) batches.push_back(oracle::random_batch(12, 4, 3, rng));
  auto run = [&] {
    auto state = init_state(kNet, small_wpn(), cfg);
    StepLog log(3);
    for (const auto& b : batches) train_step_variant(state, cfg, b, 0.1, &log);
    CHECK(log.backbone_updates == 6);
    CHECK(log.wpn_updates == 6);
    CHECK(log.loss_rows == 36);
    return state;
  };
  const auto s1 = run();
  const auto s2 = run();
  CHECK(s1.backbone == s2.backbone);
  CHECK(s1.wpn == s2.wpn);
  CHECK(s1.adam.m == s2.adam.m);
}

TEST_CASE("baseline equals unit weights on the full batch") {
  auto cfg = small_config(VariantKind::Baseline);
  auto state = init_state(kNet, small_wpn(), cfg);
  RngStream rng(10);
  const auto batch = oracle::random_batch(12, 4, 3, rng);
  auto ref = state.backbone;
  auto sgd = state.sgd;
  const auto g = backbone::grad_weighted_loss(backbone::per_sample_grads(ref, batch), Matrix(12, 3, 1.0));
  ref = backbone::sgd_step(ref, g, 0.1, backbone::SgdOptions{cfg.momentum, cfg.weight_decay}, sgd);
  train_step_variant(state, cfg, batch, 0.1);
  CHECK(max_diff(state.backbone.values(), ref.values()) <= 1e-12);
}

TEST_CASE("vanilla selection masks each exit to its allocated training samples") {
  auto cfg = small_config(VariantKind::VanillaSelection);
  cfg.momentum = 0;
  cfg.weight_decay = 0;
  auto state = init_state(kNet, small_wpn(), cfg);
  RngStream rng(11);
  const auto batch = oracle::random_batch(12, 4, 3, rng);
  const auto [a, b] = split_batch(batch);
  auto theta = as_vec(state.backbone.values());
  for (const auto* half : {&a, &b}) {
    Matrix conf(6, 3);
    for (std::size_t i = 0; i < 6; ++i) {
      const auto f = oracle::forward_sample(kNet, theta, half->x.row(i).data(), half->y[i]);
      for (std::size_t k = 0; k < 3; ++k) {
        const auto pr = numkit::softmax_stable(f.logits[k]);
        conf(i, k) = *std::max_element(pr.begin(), pr.end());
      }
    }
    const auto subsets = oracle::allocate(conf, cfg.q);
    // masked loss: (1/N) sum_k sum_{j in S_k} l_jk
    Matrix mask(6, 3);
    for (std::size_t k = 0; k < 3; ++k) {
      for (std::size_t j : subsets[k]) mask(j, k) = 1.0 / 6;
    }
    const auto g = backbone::grad_exit_losses(BackboneParams(kNet, theta), half->x, half->y, mask);
    for (std::size_t j = 0; j < theta.size(); ++j) theta[j] -= 0.1 * g[j];
  }
  train_step_variant(state, cfg, batch, 0.1);
  CHECK(max_diff(state.backbone.values(), theta) <= 1e-12);
}

TEST_CASE("frozen WPN needs its checkpoint") {
  auto cfg = small_config(VariantKind::FrozenWpn);
  cfg.frozen_wpn_path = "/nonexistent/wpn.ckpt";
  CHECK_THROWS_AS(init_state(kNet, small_wpn(), cfg), IoError);
  cfg.frozen_wpn_path.clear();
  CHECK_THROWS_AS(cfg.validate(), ConfigError);

  // round trip through a run checkpoint; the frozen WPN never moves
  auto l2w = small_config();
  const auto donor = init_state(kNet, small_wpn(), l2w);
  const auto dir = oracle::tmp_dir("frozen");
  checkpoint::write_checkpoint(dir / "donor.bin", state_to_checkpoint(donor, nlohmann::json::object()));
  cfg.frozen_wpn_path = (dir / "donor.bin").string();
  auto state = init_state(kNet, small_wpn(), cfg);
  CHECK(state.wpn == donor.wpn);
  RngStream rng(1);
  train_step_variant(state, cfg, oracle::random_batch(12, 4, 3, rng), 0.1);
  CHECK(state.wpn == donor.wpn);
  CHECK_THROWS_AS(init_state(kNet, wpn::WpnConfig{3, 9, 1, 0.8}, cfg), CompatibilityError);
}

TEST_CASE("every variant runs and stays finite") {
  RngStream rng(21);
  const auto batch = oracle::random_batch(12, 4, 3, rng);
  for (auto v : {VariantKind::L2W, VariantKind::Baseline, VariantKind::FixedWeightsAscending,
                 VariantKind::FixedWeightsDescending, VariantKind::VanillaSelection,
                 VariantKind::VanillaMetaObjective}) {
    CAPTURE(to_string(v));
    CHECK(parse_variant(to_string(v)) == v);
    auto cfg = small_config(v);
    auto state = init_state(kNet, small_wpn(), cfg);
    train_step_variant(state, cfg, batch, 0.1);
    CHECK(numkit::all_finite(state.backbone.values()));
    CHECK(state.iteration == 1);
  }
  CHECK_THROWS_AS(parse_variant("l2x"), ConfigError);
}

TEST_CASE("run_training: zero epochs, determinism, separable data") {
  RngStream rng(2);
  auto train = datahub::gen_synthetic_gaussians(2, 2, 100, 0.1, rng);
  auto val = datahub::gen_synthetic_gaussians(2, 2, 40, 0.1, rng, datahub::Split::Val);
  const BackboneConfig net{2, {8, 8}, 2};
  const wpn::WpnConfig wc{2, 8, 1, 0.8};

  TrainConfig cfg;
  cfg.epochs = 0;
  cfg.batch_size = 20;
  const auto empty = run_training(cfg, net, wc, train, val);
  CHECK(empty.history.empty());
  CHECK(empty.state.backbone == init_state(net, wc, cfg).backbone);

  cfg.epochs = 2;
  cfg.alpha = 0.05;
  const auto r1 = run_training(cfg, net, wc, train, val);
  const auto r2 = run_training(cfg, net, wc, train, val);
  REQUIRE(r1.history.size() == 2);
  CHECK(r1.state.backbone == r2.state.backbone);
  CHECK(r1.history[1].train_loss == r2.history[1].train_loss);
  CHECK(r1.history[1].backbone_updates == 2 * (200 / 20));

  cfg.variant = VariantKind::Baseline;
  cfg.epochs = 50;
  cfg.alpha = 0.1;
  const auto base = run_training(cfg, net, wc, train, val);
  CHECK(base.history.back().val_anytime_accuracy.back() == 1.0);
}

TEST_CASE("checkpoint state round trip and shape checks") {
  auto cfg = small_config();
  auto state = init_state(kNet, small_wpn(), cfg);
  RngStream rng(8);
  train_step_variant(state, cfg, oracle::random_batch(12, 4, 3, rng), 0.1);
  const auto ckpt = state_to_checkpoint(state, {{"note", "x"}});
  const auto back = state_from_checkpoint(ckpt, kNet, small_wpn());
  CHECK(back.backbone == state.backbone);
  CHECK(back.wpn == state.wpn);
  CHECK(back.sgd.velocity == state.sgd.velocity);
  CHECK(back.adam.v == state.adam.v);
  CHECK(back.adam.step == state.adam.step);
  CHECK(back.iteration == 1);
  CHECK_THROWS_AS(state_from_checkpoint(ckpt, BackboneConfig{4, {6, 5, 5}, 3}, small_wpn()), CompatibilityError);
}

}  // TEST_SUITE
