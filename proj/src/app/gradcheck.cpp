#include <algorithm>
#include <cmath>
#include <numeric>

#include "exitweave/app.hpp"
#include "exitweave/errors.hpp"
#include "exitweave/rng.hpp"

namespace exitweave::app {

namespace {

using backbone::Batch;
using backbone::BackboneParams;
using numkit::Matrix;

constexpr double kStepBackbone = 1e-5;  // scaled by max(1, |theta|)
constexpr double kStepWeights = 1e-4;
constexpr double kStepWpn = 1e-4;

struct Fixture {
  BackboneParams params;
  wpn::WpnParams wpn;
  Batch train;
  Batch meta;
};

Batch random_batch(const backbone::BackboneConfig& bc, std::size_t n, RngStream rng) {
  Batch b{Matrix(n, bc.input_dim), std::vector<int>(n)};
  for (double& v : b.x.values()) v = rng.normal();
  for (int& y : b.y) y = static_cast<int>(rng.below(bc.num_classes));
  return b;
}

Fixture make_fixture(const GradcheckSetup& s) {
  s.backbone.validate();
  const std::size_t p = backbone::make_layout(s.backbone).total;
  if (p > kGradcheckMaxBackboneParams) {
    throw UsageError("gradient check refused: backbone has " + std::to_string(p) + " parameters, the limit is " +
                     std::to_string(kGradcheckMaxBackboneParams) + " (finite differences cost two passes each)");
  }
  wpn::WpnConfig wc = s.wpn;
  wc.num_exits = s.backbone.num_exits();
  wc.validate();
  if (s.half_batch == 0) throw UsageError("gradient check needs a nonempty batch");
  const RngStream root(s.seed);
  RngStream rb = root.child("gradcheck-backbone");
  RngStream rw = root.child("gradcheck-wpn");
  auto params = backbone::init_params(s.backbone, rb);
  // Zero biases behind a fully dead block put the next pre-activations
  // exactly on the rectifier's corner, where central differences see half
  // the one-sided slope at every step size. Small random biases move the
  // check off that set.
  RngStream rbias = root.child("gradcheck-bias");
  const auto& lay = params.layout();
  for (const auto* group : {&lay.blocks, &lay.heads}) {
    for (const auto& l : *group) {
      for (std::size_t j = 0; j < l.out; ++j) params.values()[l.bias_offset + j] = rbias.uniform(-0.1, 0.1);
    }
  }
  return Fixture{std::move(params), wpn::init_wpn(wc, rw),
                 random_batch(s.backbone, s.half_batch, root.child("gradcheck-train")),
                 random_batch(s.backbone, s.half_batch, root.child("gradcheck-meta"))};
}

std::vector<std::size_t> pick_coords(std::size_t n, std::size_t max_coords, std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  if (max_coords == 0 || n <= max_coords) return idx;
  RngStream rng = RngStream(seed).child("gradcheck-coords");
  for (std::size_t i = 0; i < max_coords; ++i) {
    std::swap(idx[i], idx[i + static_cast<std::size_t>(rng.below(n - i))]);
  }
  idx.resize(max_coords);
  std::sort(idx.begin(), idx.end());
  return idx;
}

// Central differences along the chosen coordinates, taken at steps h and h/2.
// On a piecewise-smooth function the two agree to O(h^2) unless a kink (a
// ReLU switching) lies inside the wider stencil; such coordinates are marked
// and left out of the comparison.
struct FiniteDiff {
  std::vector<double> wide;
  std::vector<double> narrow;
};

template <class F>
FiniteDiff central_diff(std::vector<double> x, std::span<const std::size_t> coords, double h, F&& f) {
  FiniteDiff fd{std::vector<double>(coords.size()), std::vector<double>(coords.size())};
  for (std::size_t c = 0; c < coords.size(); ++c) {
    const std::size_t j = coords[c];
    const double saved = x[j];
    for (int pass = 0; pass < 2; ++pass) {
      const double step = pass == 0 ? h : h / 2;
      x[j] = saved + step;
      const double up = f(x);
      x[j] = saved - step;
      const double down = f(x);
      (pass == 0 ? fd.wide : fd.narrow)[c] = (up - down) / (2.0 * step);
    }
    x[j] = saved;
  }
  return fd;
}

struct Comparison {
  double error = 0.0;
  std::size_t compared = 0;
  std::size_t skipped = 0;
};

// Relative error over the coordinates where the two step sizes agree to
// within a tenth of the tolerance.
Comparison compare(std::span<const double> analytic, std::span<const double> wide, std::span<const double> narrow,
                   double tol) {
  const double scale = std::max({numkit::max_abs(wide), numkit::max_abs(analytic), 1e-12});
  Comparison out;
  double diff = 0.0;
  double norm = 1e-12;
  for (std::size_t c = 0; c < wide.size(); ++c) {
    if (std::abs(wide[c] - narrow[c]) > 0.1 * tol * scale) {
      ++out.skipped;
      continue;
    }
    ++out.compared;
    diff = std::max(diff, std::abs(analytic[c] - narrow[c]));
    norm = std::max({norm, std::abs(analytic[c]), std::abs(narrow[c])});
  }
  out.error = diff / norm;
  return out;
}

SuiteResult finish(std::string name, const Comparison& cmp, double tol, std::size_t checks) {
  const bool enough = cmp.skipped * 10 <= cmp.compared + cmp.skipped;
  return SuiteResult{std::move(name), cmp.error, tol, checks, cmp.skipped, cmp.error <= tol && enough};
}

// Meta loss at the pseudo-updated backbone, with the allocation held fixed.
double meta_loss_at(const BackboneParams& params, const backbone::PerSampleGrads& psg, const Matrix& weights,
                    const Batch& meta, double lr, const exitpolicy::AllocationResult& alloc) {
  const auto pseudo = backbone::pseudo_step(params, psg, weights, lr);
  return trainer::meta_objective(backbone::forward_all(pseudo, meta), alloc).value;
}

}  // namespace

bool GradcheckReport::passed() const {
  return !suites.empty() && std::all_of(suites.begin(), suites.end(), [](const SuiteResult& s) { return s.passed; });
}

SuiteResult check_backbone_grads(const GradcheckSetup& setup) {
  const auto fx = make_fixture(setup);
  const auto psg = backbone::per_sample_grads(fx.params, fx.train);
  const std::size_t p = fx.params.size();
  const std::size_t b = fx.train.size();
  const std::size_t k_exits = fx.params.num_exits();

  // [(i*K + k) * P + j] = d l_ik / d theta_j at steps h and h/2
  std::vector<double> wide(b * k_exits * p), narrow(b * k_exits * p);
  std::vector<double> theta(fx.params.values().begin(), fx.params.values().end());
  for (std::size_t j = 0; j < p; ++j) {
    const double saved = theta[j];
    for (int pass = 0; pass < 2; ++pass) {
      const double h = kStepBackbone * std::max(1.0, std::abs(saved)) / (pass == 0 ? 1.0 : 2.0);
      theta[j] = saved + h;
      const auto up = backbone::forward_all(BackboneParams(fx.params.config(), theta), fx.train);
      theta[j] = saved - h;
      const auto down = backbone::forward_all(BackboneParams(fx.params.config(), theta), fx.train);
      auto& fd = pass == 0 ? wide : narrow;
      for (std::size_t i = 0; i < b; ++i) {
        for (std::size_t k = 0; k < k_exits; ++k) {
          fd[(i * k_exits + k) * p + j] = (up.losses(i, k) - down.losses(i, k)) / (2.0 * h);
        }
      }
    }
    theta[j] = saved;
  }
  Comparison total;
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t k = 0; k < k_exits; ++k) {
      const std::size_t at = (i * k_exits + k) * p;
      const auto cmp = compare(psg.at(i, k), std::span(wide).subspan(at, p), std::span(narrow).subspan(at, p),
                               kBackboneGradTolerance);
      total.error = std::max(total.error, cmp.error);
      total.compared += cmp.compared;
      total.skipped += cmp.skipped;
    }
  }
  return finish("backbone per-sample", total, kBackboneGradTolerance, b * k_exits * p);
}

SuiteResult check_meta_weight_grad(const GradcheckSetup& setup) {
  const auto fx = make_fixture(setup);
  const auto out = backbone::forward_all(fx.params, fx.train);
  const auto psg = backbone::per_sample_grads(fx.params, fx.train);
  const auto weights = wpn::make_weights(wpn::wpn_forward(fx.wpn, out.losses), fx.wpn.config().delta).weights;
  const auto pseudo = backbone::pseudo_step(fx.params, psg, weights, setup.lr);
  const auto meta_out = backbone::forward_all(pseudo, fx.meta);
  const auto alloc = exitpolicy::allocate_meta(meta_out.confidences, setup.q);
  const auto obj = trainer::meta_objective(meta_out, alloc);
  const auto meta_grad = backbone::grad_exit_losses(pseudo, fx.meta.x, fx.meta.y, obj.coeffs);
  const auto analytic = wpn::meta_weight_grad(psg, meta_grad, setup.lr, psg.batch);

  std::vector<std::size_t> coords(weights.size());
  std::iota(coords.begin(), coords.end(), std::size_t{0});
  const std::vector<double> w0(weights.values().begin(), weights.values().end());
  const auto numeric = central_diff(w0, coords, kStepWeights, [&](const std::vector<double>& w) {
    return meta_loss_at(fx.params, psg, Matrix(weights.rows(), weights.cols(), w), fx.meta, setup.lr, alloc);
  });
  return finish("meta weight gradient", compare(analytic.values(), numeric.wide, numeric.narrow, kMetaGradTolerance),
                kMetaGradTolerance, coords.size());
}

SuiteResult check_wpn_backward(const GradcheckSetup& setup) {
  const auto fx = make_fixture(setup);
  const auto out = backbone::forward_all(fx.params, fx.train);
  const double delta = fx.wpn.config().delta;
  RngStream rng = RngStream(setup.seed).child("gradcheck-direction");
  Matrix v(out.losses.rows(), out.losses.cols());
  for (double& x : v.values()) x = rng.normal();

  const auto fwd = wpn::wpn_forward(fx.wpn, out.losses);
  const auto sw = wpn::make_weights(fwd, delta);
  const auto analytic = wpn::wpn_backward(fwd.cache, sw.cache, v);

  const auto coords = pick_coords(fx.wpn.size(), setup.max_coords, setup.seed);
  const std::vector<double> g0(fx.wpn.values().begin(), fx.wpn.values().end());
  const auto numeric = central_diff(g0, coords, kStepWpn, [&](const std::vector<double>& g) {
    const auto w = wpn::make_weights(wpn::wpn_forward(wpn::WpnParams(fx.wpn.config(), g), out.losses), delta).weights;
    return numkit::dot(w.values(), v.values());
  });
  std::vector<double> picked;
  for (std::size_t j : coords) picked.push_back(analytic[j]);
  return finish("wpn backward", compare(picked, numeric.wide, numeric.narrow, kMetaGradTolerance),
                kMetaGradTolerance, coords.size());
}

SuiteResult check_end_to_end(const GradcheckSetup& setup) {
  const auto fx = make_fixture(setup);
  const auto out = backbone::forward_all(fx.params, fx.train);
  const auto psg = backbone::per_sample_grads(fx.params, fx.train);
  const auto step = trainer::compute_meta_step(fx.params, psg, out.losses, fx.wpn, fx.meta, setup.lr, setup.q,
                                               trainer::MetaKind::Allocated);
  const double delta = fx.wpn.config().delta;

  const auto coords = pick_coords(fx.wpn.size(), setup.max_coords, setup.seed);
  const std::vector<double> g0(fx.wpn.values().begin(), fx.wpn.values().end());
  const auto numeric = central_diff(g0, coords, kStepWpn, [&](const std::vector<double>& g) {
    const auto w = wpn::make_weights(wpn::wpn_forward(wpn::WpnParams(fx.wpn.config(), g), out.losses), delta).weights;
    return meta_loss_at(fx.params, psg, w, fx.meta, setup.lr, step.allocation);
  });
  std::vector<double> picked;
  for (std::size_t j : coords) picked.push_back(step.wpn_grad[j]);
  return finish("end-to-end meta", compare(picked, numeric.wide, numeric.narrow, kMetaGradTolerance),
                kMetaGradTolerance, coords.size());
}

GradcheckReport run_gradcheck(const GradcheckSetup& setup) {
  make_fixture(setup);  // validates before any suite runs
  return GradcheckReport{{check_backbone_grads(setup), check_meta_weight_grad(setup), check_wpn_backward(setup),
                          check_end_to_end(setup)}};
}

}  // namespace exitweave::app
