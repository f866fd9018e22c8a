// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
// criterion fails.
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <string>

#include "exitweave/app.hpp"
#include "exitweave/errors.hpp"
#include "oracles.hpp"

using namespace exitweave;

namespace {

struct Outcome {
  bool passed = false;
  std::string detail;
};

std::string fmt(const char* f, double a, double b = 0, double c = 0, double d = 0) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), f, a, b, c, d);
  return buf;
}

double cpu_seconds(std::clock_t start) { return static_cast<double>(std::clock() - start) / CLOCKS_PER_SEC; }

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::filesystem::path write_config(const std::filesystem::path& path, const nlohmann::json& doc) {
  std::ofstream(path) << doc.dump(2);
  return path;
}

nlohmann::json read_json(const std::filesystem::path& p) { return nlohmann::json::parse(slurp(p)); }

// ---- 1 ----------------------------------------------------------------------

Outcome backbone_gradients() {
  const std::clock_t start = std::clock();
  RngStream rng(101);
  double worst = 0;
  std::size_t skipped = 0, checks = 0;
  int failed = 0;
  for (int n = 0; n < 20; ++n) {
    app::GradcheckSetup s;
    do {
      s.backbone.input_dim = 2 + rng.below(8);
      s.backbone.num_classes = 2 + rng.below(5);
      s.backbone.trunk_widths.clear();
      const std::size_t k = 2 + rng.below(3);
      for (std::size_t j = 0; j < k; ++j) s.backbone.trunk_widths.push_back(2 + rng.below(12));
    } while (backbone::make_layout(s.backbone).total > 2000);
    s.half_batch = 3 + rng.below(4);
    s.seed = 1000 + static_cast<std::uint64_t>(n);
    const auto r = app::check_backbone_grads(s);
    worst = std::max(worst, r.max_rel_error);
    skipped += r.skipped;
    checks += r.checks;
    failed += r.passed ? 0 : 1;
  }
  const double secs = cpu_seconds(start);
  return {failed == 0 && secs <= 60,
          fmt("20 configs, max rel err %.2e (tol 1e-5), %g of %g entries at kinks skipped, %.1f s CPU", worst,
              static_cast<double>(skipped), static_cast<double>(checks), secs)};
}

// ---- 2 ----------------------------------------------------------------------

Outcome meta_gradients() {
  const std::clock_t start = std::clock();
  RngStream rng(202);
  double worst_w = 0, worst_g = 0;
  int failed = 0;
  for (int n = 0; n < 10; ++n) {
    app::GradcheckSetup s;
    s.backbone = backbone::BackboneConfig{3 + rng.below(5), {}, 2 + rng.below(4)};
    const std::size_t k = 2 + rng.below(3);
    for (std::size_t j = 0; j < k; ++j) s.backbone.trunk_widths.push_back(3 + rng.below(8));
    s.wpn = wpn::WpnConfig{k, 4 + rng.below(12), 1 + rng.below(2), rng.uniform(0.2, 0.9)};
    s.half_batch = 4 + rng.below(6);
    s.lr = rng.uniform(0.05, 0.5);
    s.q = rng.uniform(0.4, 1.5);
    s.seed = 2000 + static_cast<std::uint64_t>(n);
    const auto w = app::check_meta_weight_grad(s);
    const auto g = app::check_end_to_end(s);
    worst_w = std::max(worst_w, w.max_rel_error);
    worst_g = std::max(worst_g, g.max_rel_error);
    failed += (w.passed ? 0 : 1) + (g.passed ? 0 : 1);
  }
  const double secs = cpu_seconds(start);
  return {failed == 0 && secs <= 120,
          fmt("10 instances, dL/dw max rel err %.2e, dL/dTheta_g max rel err %.2e (tol 1e-4), %.1f s CPU", worst_w,
              worst_g, secs)};
}

// ---- 3 ----------------------------------------------------------------------

Outcome baseline_reduction() {
  const backbone::BackboneConfig net{16, {8, 16, 32}, 8};
  trainer::TrainConfig cfg;
  cfg.alpha = 0.05;
  cfg.batch_size = 64;
  cfg.seed = 3;
  auto state = trainer::init_state(net, wpn::WpnConfig{3, 64, 1, 0.0}, cfg);
  RngStream data_rng(33);
  const auto data = datahub::gen_synthetic_gaussians(8, 16, 100, 0.35, data_rng);
  double worst = 0;
  std::size_t updates = 0;
  for (std::size_t it = 0; it < 100; ++it) {
    const auto batches = datahub::make_batches(data.size(), 64, it, 9);
    const auto [a, b] = trainer::split_batch(data.gather(batches[0]));
    for (const auto* pair : {&a, &b}) {
      const auto& train = *pair;
      const auto& meta = pair == &a ? b : a;
      auto ref_sgd = state.sgd;
      const auto g = backbone::grad_exit_losses(state.backbone, train.x, train.y, numkit::Matrix(32, 3, 1.0 / 32));
      const auto ref = backbone::sgd_step(state.backbone, g, cfg.alpha,
                                          backbone::SgdOptions{cfg.momentum, cfg.weight_decay}, ref_sgd);
      trainer::l2w_substep(state, cfg, train, meta, cfg.alpha);
      for (std::size_t j = 0; j < ref.size(); ++j) {
        worst = std::max(worst, std::abs(ref.values()[j] - state.backbone.values()[j]));
      }
      ++updates;
    }
    state.iteration += 1;
  }
  return {worst <= 1e-12, fmt("%g substeps over 100 iterations, max parameter difference %.2e (tol 1e-12)",
                              static_cast<double>(updates), worst)};
}

// ---- 4 ----------------------------------------------------------------------

Outcome allocation() {
  RngStream rng(404);
  int bad = 0;
  for (int n = 0; n < 1000; ++n) {
    const std::size_t rows = 1 + rng.below(80), k = 1 + rng.below(6);
    const double q = rng.uniform(0.05, 3.0);
    auto conf = oracle::random_matrix(rows, k, rng);
    if (n % 3 == 0) {
      for (double& v : conf.values()) v = std::round(v * 5) / 5;
    }
    const auto a = exitpolicy::allocate_meta(conf, q);
    const auto sz = oracle::sizes(rows, q, k);
    std::set<std::size_t> seen;
    std::size_t total = 0;
    bool ok = a.sizes == sz && a.subsets.size() == k;
    const auto ref = oracle::allocate(conf, q);
    for (std::size_t e = 0; ok && e < k; ++e) {
      ok = a.subsets[e].size() == sz[e];
      total += a.subsets[e].size();
      seen.insert(a.subsets[e].begin(), a.subsets[e].end());
      auto x = a.subsets[e], y = ref[e];
      std::sort(x.begin(), x.end());
      std::sort(y.begin(), y.end());
      ok = ok && x == y;
    }
    ok = ok && total == rows && seen.size() == rows && *seen.rbegin() == rows - 1;
    bad += ok ? 0 : 1;
  }
  const auto f = exitpolicy::exit_fractions(0.5, 5);
  const double published[] = {0.52, 0.26, 0.13, 0.06, 0.03};
  double dev = 0;
  for (std::size_t k = 0; k < 5; ++k) dev = std::max(dev, std::abs(f[k] - published[k]));
  return {bad == 0 && dev <= 0.005,
          fmt("%g of 1000 instances wrong; q=0.5 fractions [%.4f %.4f %.4f", bad, f[0], f[1], f[2]) +
              fmt(" %.4f %.4f], max deviation %.4f (tol 0.005)", f[3], f[4], dev)};
}

// ---- 5 ----------------------------------------------------------------------

Outcome perturbation() {
  RngStream rng(505);
  double worst_sum = 0, worst_mean = 0;
  int outside = 0;
  for (int n = 0; n < 1000; ++n) {
    const std::size_t k = 1 + rng.below(6);
    const wpn::WpnConfig cfg{k, 1 + rng.below(32), 1 + rng.below(3), rng.uniform(0.0, 0.999)};
    const auto p = wpn::init_wpn(cfg, rng);
    const auto losses = oracle::random_matrix(1 + rng.below(64), k, rng, 0, rng.uniform(0.1, 30));
    const auto w = wpn::make_weights(wpn::wpn_forward(p, losses), cfg.delta);
    double s = 0, m = 0;
    for (std::size_t j = 0; j < w.weights.size(); ++j) {
      s += w.perturbation.values()[j];
      m += w.weights.values()[j];
      const double pre = w.perturbation_pre.values()[j];
      if (cfg.delta > 0 && !(pre > -cfg.delta && pre < cfg.delta)) ++outside;
    }
    worst_sum = std::max(worst_sum, std::abs(s));
    worst_mean = std::max(worst_mean, std::abs(m / static_cast<double>(w.weights.size()) - 1));
  }
  // Raw outputs beyond about 37 in magnitude round the sigmoid to 0 or 1, so
  // the open bound can only hold as a closed one there; checked separately.
  int beyond = 0;
  for (int n = 0; n < 100; ++n) {
    const auto raw = oracle::random_matrix(8, 4, rng, -1e3, 1e3);
    const double delta = rng.uniform(0.0, 0.999);
    const auto w = wpn::make_weights(raw, delta);
    for (double pre : w.perturbation_pre.values()) beyond += std::abs(pre) > delta ? 1 : 0;
  }
  return {worst_sum <= 1e-9 && worst_mean <= 1e-9 && outside == 0 && beyond == 0,
          fmt("max |sum| %.2e, max |mean(w)-1| %.2e, %g entries outside (-delta, delta); saturated raw: %g beyond delta",
              worst_sum, worst_mean, outside, beyond)};
}

// ---- 6 ----------------------------------------------------------------------

backbone::ExitOutputs confidence_only(const numkit::Matrix& conf) {
  backbone::ExitOutputs out;
  out.batch = conf.rows();
  out.exits = conf.cols();
  out.confidences = conf;
  out.predictions.assign(conf.size(), 0);
  out.labels.assign(conf.rows(), 0);
  return out;
}

Outcome calibration() {
  RngStream rng(606);
  int bad = 0;
  for (int n = 0; n < 200; ++n) {
    const std::size_t rows = 1 + rng.below(200), k = 2 + rng.below(5);
    const double q = rng.uniform(0.05, 4.0);
    const auto conf = oracle::random_matrix(rows, k, rng);
    const auto th = exitpolicy::calibrate_thresholds(conf, q);
    const auto counts = exitpolicy::exit_counts(exitpolicy::dynamic_infer(confidence_only(conf), th), k);
    bad += counts == exitpolicy::allocate_meta(conf, q).sizes ? 0 : 1;
  }
  // Tied confidences at a threshold all pass it, so replay can only move
  // samples to earlier exits; reported, not part of the criterion.
  int tie_moved = 0, tie_later = 0;
  for (int n = 0; n < 200; ++n) {
    auto conf = oracle::random_matrix(1 + rng.below(200), 3, rng);
    for (double& v : conf.values()) v = std::round(v * 10) / 10;
    const auto counts = exitpolicy::exit_counts(
        exitpolicy::dynamic_infer(confidence_only(conf), exitpolicy::calibrate_thresholds(conf, 0.75)), 3);
    const auto sizes = exitpolicy::allocate_meta(conf, 0.75).sizes;
    tie_moved += counts == sizes ? 0 : 1;
    tie_later += counts[0] < sizes[0] ? 1 : 0;
  }
  return {bad == 0, fmt("%g of 200 (table, q) pairs replay to different exit counts; "
                        "with coarse tied confidences %g of 200 differ (%g with fewer first-exit samples)",
                        bad, tie_moved, tie_later)};
}

// ---- 7 ----------------------------------------------------------------------

Outcome cost_monotonicity(const std::filesystem::path& source) {
  const auto dir = oracle::tmp_dir("acceptance_cost");
  auto doc = read_json(source / "configs" / "efficacy_l2w.json");
  doc["train"]["epochs"] = 30;
  doc["output"]["dir"] = (dir / "run").string();
  std::ostringstream log;
  app::cmd_train(app::TrainOptions{write_config(dir / "run.json", doc), {}, {}}, log);
  const auto rec = app::cmd_eval(app::EvalOptions{dir / "run" / "checkpoint.bin", {}, {}, {}}, log);
  int violations = 0;
  for (std::size_t j = 1; j < rec.dynamic.size(); ++j) {
    violations += rec.dynamic[j].expected_cost < rec.dynamic[j - 1].expected_cost ? 1 : 0;
  }
  return {violations == 0, fmt("%g q points from %.2f to %.2f, %g decreases in expected mul-adds",
                               static_cast<double>(rec.dynamic.size()), rec.dynamic.front().q, rec.dynamic.back().q,
                               violations)};
}

// ---- 8 ----------------------------------------------------------------------

Outcome efficacy(const std::filesystem::path& source) {
  const std::clock_t start = std::clock();
  const auto dir = oracle::tmp_dir("acceptance_efficacy");
  std::vector<double> l2w_dyn, base_dyn;
  double l2w_exit1 = 0, base_exit1 = 0;
  const int seeds = 5;
  for (const char* variant : {"l2w", "baseline"}) {
    const bool is_l2w = std::string(variant) == "l2w";
    auto& dyn = is_l2w ? l2w_dyn : base_dyn;
    auto& exit1 = is_l2w ? l2w_exit1 : base_exit1;
    for (int seed = 1; seed <= seeds; ++seed) {
      const auto out = dir / (std::string(variant) + "-" + std::to_string(seed));
      std::ostringstream log;
      app::cmd_train(app::TrainOptions{source / "configs" / ("efficacy_" + std::string(variant) + ".json"), out,
                                       static_cast<std::uint64_t>(seed)},
                     log);
      const auto rec = app::cmd_eval(app::EvalOptions{out / "checkpoint.bin", {}, {}, {}}, log);
      dyn.resize(rec.dynamic.size(), 0.0);
      for (std::size_t j = 0; j < rec.dynamic.size(); ++j) dyn[j] += rec.dynamic[j].accuracy / seeds;
      exit1 += rec.anytime.front().accuracy / seeds;
    }
  }
  std::size_t wins = 0;
  for (std::size_t j = 0; j < l2w_dyn.size(); ++j) wins += l2w_dyn[j] >= base_dyn[j] ? 1 : 0;
  const double share = static_cast<double>(wins) / static_cast<double>(l2w_dyn.size());
  const double secs = cpu_seconds(start);
  return {share >= 0.6 && l2w_exit1 >= base_exit1 - 0.005 && secs <= 900,
          fmt("L2W >= baseline at %.0f%% of q points (need 60%%), exit-1 accuracy %.2f%% vs %.2f%%, ", 100 * share,
              100 * l2w_exit1, 100 * base_exit1) +
              fmt("%.0f s CPU", secs)};
}

// ---- 9 ----------------------------------------------------------------------

Outcome longtail() {
  const std::size_t per_class = 500;
  datahub::Dataset ds{numkit::Matrix(100 * per_class, 1), std::vector<int>(100 * per_class), 100,
                      datahub::Split::Train};
  for (std::size_t i = 0; i < ds.size(); ++i) ds.labels[i] = static_cast<int>(i / per_class);
  std::string detail;
  bool ok = true;
  for (double f : {20.0, 50.0, 100.0, 200.0}) {
    RngStream rng(static_cast<std::uint64_t>(f));
    const auto lt = datahub::longtail_subsample(ds, f, rng);
    const auto counts = lt.dataset.class_counts();
    const double mx = static_cast<double>(*std::max_element(counts.begin(), counts.end()));
    const double mn = static_cast<double>(*std::min_element(counts.begin(), counts.end()));
    const double ratio = mx / mn;
    // smallest class is per_class / F before rounding
    const double ideal_min = static_cast<double>(per_class) / f;
    const double lo = mx / (ideal_min + 0.5);
    const double hi = mx / std::max(1.0, ideal_min - 0.5);
    ok = ok && mx == per_class && ratio >= lo && ratio <= hi;
    detail += fmt("F=%g ratio %.2f; ", f, ratio);
  }
  detail.resize(detail.size() - 2);
  return {ok, detail};
}

// ---- 10 ---------------------------------------------------------------------

Outcome determinism(const std::filesystem::path& source) {
  const auto dir = oracle::tmp_dir("acceptance_determinism");
  std::ostringstream log;
  for (const char* run : {"a", "b"}) {
    app::cmd_train(app::TrainOptions{source / "configs" / "tiny.json", dir / run, 4}, log);
    app::cmd_eval(app::EvalOptions{dir / run / "checkpoint.bin", {}, {}, {}}, log);
  }
  int differ = 0;
  const char* files[] = {"history.json", "history.csv", "metrics.json", "anytime.csv", "dynamic.csv", "scatter.csv"};
  for (const char* f : files) differ += slurp(dir / "a" / f) == slurp(dir / "b" / f) ? 0 : 1;
  // the checkpoints record their own output directory; compare the state
  const bool same_state = checkpoint::read_checkpoint(dir / "a" / "checkpoint.bin").arrays ==
                          checkpoint::read_checkpoint(dir / "b" / "checkpoint.bin").arrays;
  return {differ == 0 && same_state,
          fmt("%g of 6 history/metrics files differ between two runs; checkpoint arrays ", differ) +
              (same_state ? "identical" : "differ")};
}

}  // namespace

int main() {
  const std::filesystem::path source = EXITWEAVE_SOURCE_DIR;
  struct Criterion {
    const char* name;
    std::function<Outcome()> run;
  };
  const Criterion criteria[] = {
      {"backbone gradient fidelity", backbone_gradients},
      {"meta-gradient fidelity", meta_gradients},
      {"delta=0 reduces to the unweighted update", baseline_reduction},
      {"allocation correctness", allocation},
      {"perturbation contract", perturbation},
      {"calibration round trip", calibration},
      {"cost monotone in q", [&] { return cost_monotonicity(source); }},
      {"desk-scale efficacy", [&] { return efficacy(source); }},
      {"long-tail imbalance", longtail},
      {"determinism", [&] { return determinism(source); }},
  };
  int failures = 0;
  int n = 0;
  for (const auto& c : criteria) {
    ++n;
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    failures += o.passed ? 0 : 1;
    std::printf("%s [%2d] %s: %s\n", o.passed ? "PASS" : "FAIL", n, c.name, o.detail.c_str());
    std::fflush(stdout);
  }
  std::printf("%d of %d criteria passed\n", n - failures, n);
  return failures == 0 ? 0 : 1;
}
