#include "exitweave/wpn.hpp"

#include <atomic>
#include <cmath>
#include <string>

#include "exitweave/errors.hpp"
#include "exitweave/kernels.hpp"

namespace exitweave::wpn {

namespace {

std::vector<WpnLayer> make_layers(const WpnConfig& cfg) {
  std::vector<WpnLayer> layers;
  std::size_t offset = 0;
  std::size_t in = cfg.num_exits;
  for (std::size_t d = 0; d <= cfg.hidden_depth; ++d) {
    const std::size_t out = d == cfg.hidden_depth ? cfg.num_exits : cfg.hidden_width;
    WpnLayer l{offset, offset + in * out, in, out};
    layers.push_back(l);
    offset = l.bias_offset + out;
    in = out;
  }
  return layers;
}

std::size_t total_size(const std::vector<WpnLayer>& layers) {
  return layers.empty() ? 0 : layers.back().bias_offset + layers.back().out;
}

std::atomic<std::uint64_t> next_cache_id{1};

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// Sign of the meta-weight gradient. The sabotaged build flips it so the
// gradient checker can prove it notices.
#ifdef EXITWEAVE_SABOTAGE_SIGN
constexpr double kMetaGradSign = 1.0;
#else
constexpr double kMetaGradSign = -1.0;
#endif

}  // namespace

void WpnConfig::validate() const {
  if (num_exits == 0) throw ConfigError("wpn: num_exits must be >= 1");
  if (hidden_width == 0) throw ConfigError("wpn: hidden_width must be >= 1");
  if (hidden_depth == 0) throw ConfigError("wpn: hidden_depth must be >= 1");
  if (!(delta >= 0.0 && delta < 1.0)) throw ConfigError("wpn: delta must lie in [0, 1)");
}

WpnParams::WpnParams(WpnConfig config)
    : config_(config), layers_(make_layers(config_)), theta_(total_size(layers_), 0.0) {}

WpnParams::WpnParams(WpnConfig config, std::vector<double> values)
    : config_(config), layers_(make_layers(config_)), theta_(std::move(values)) {
  if (theta_.size() != total_size(layers_)) {
    throw ShapeError("wpn parameter vector has " + std::to_string(theta_.size()) +
                     " entries, layout needs " + std::to_string(total_size(layers_)));
  }
}

WpnParams init_wpn(const WpnConfig& config, RngStream& rng) {
  config.validate();
  WpnParams params(config);
  auto theta = params.values();
  const auto& layers = params.layers();
  // U(-1/sqrt(fan_in), 1/sqrt(fan_in)) on weights and biases; keeps the
  // initial raw outputs small so the first weights sit near 1.
  for (const auto& l : layers) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(l.in));
    for (std::size_t j = 0; j < l.in * l.out; ++j) theta[l.weight_offset + j] = rng.uniform(-bound, bound);
    for (std::size_t j = 0; j < l.out; ++j) theta[l.bias_offset + j] = rng.uniform(-bound, bound);
  }
  return params;
}

ForwardResult wpn_forward(const WpnParams& params, const Matrix& loss_matrix) {
  const auto& cfg = params.config();
  if (loss_matrix.cols() != cfg.num_exits) {
    throw ShapeError("wpn_forward: loss matrix has " + std::to_string(loss_matrix.cols()) +
                     " columns, WPN expects K = " + std::to_string(cfg.num_exits));
  }
  if (!numkit::all_finite(loss_matrix.values())) throw NumericError("wpn_forward: non-finite loss");
  const std::size_t b = loss_matrix.rows();
  ForwardResult result{Matrix(b, cfg.num_exits),
                       ForwardCache{next_cache_id.fetch_add(1), params, loss_matrix, {}, {}}};
  auto& cache = result.cache;
  const auto& layers = params.layers();
  for (std::size_t d = 0; d < cfg.hidden_depth; ++d) {
    cache.hidden_pre.emplace_back(b, layers[d].out);
    cache.hidden_post.emplace_back(b, layers[d].out);
  }
  for (std::size_t i = 0; i < b; ++i) {
    std::span<const double> input = loss_matrix.row(i);
    for (std::size_t d = 0; d < cfg.hidden_depth; ++d) {
      auto pre = cache.hidden_pre[d].row(i);
      numkit::affine(params.weight(layers[d]), params.bias(layers[d]), input, pre);
      auto post = cache.hidden_post[d].row(i);
      for (std::size_t r = 0; r < pre.size(); ++r) post[r] = pre[r] > 0.0 ? pre[r] : 0.0;
      input = post;
    }
    const auto& out_layer = layers.back();
    numkit::affine(params.weight(out_layer), params.bias(out_layer), input, result.raw.row(i));
  }
  return result;
}

SampleWeights make_weights(const Matrix& raw, double delta) {
  if (!numkit::all_finite(raw.values())) throw NumericError("make_weights: non-finite WPN output");
  SampleWeights w{Matrix(raw.rows(), raw.cols()), Matrix(raw.rows(), raw.cols()),
                  Matrix(raw.rows(), raw.cols()), WeightCache{0, Matrix(raw.rows(), raw.cols()), delta}};
  const std::size_t n = raw.size();
  if (n == 0) return w;
  auto s = w.cache.sigmoid.values();
  auto pre = w.perturbation_pre.values();
  double sum = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    s[j] = sigmoid(raw.values()[j]);
    pre[j] = delta * (2.0 * s[j] - 1.0);
    sum += pre[j];
  }
  const double mean = sum / static_cast<double>(n);
  auto pert = w.perturbation.values();
  auto weights = w.weights.values();
  for (std::size_t j = 0; j < n; ++j) {
    pert[j] = pre[j] - mean;
    weights[j] = 1.0 + pert[j];
  }
  return w;
}

SampleWeights make_weights(const ForwardResult& forward, double delta) {
  SampleWeights w = make_weights(forward.raw, delta);
  w.cache.forward_id = forward.cache.id;
  return w;
}

Matrix meta_weight_grad(const backbone::PerSampleGrads& grads, std::span<const double> meta_grad,
                        double lr, std::size_t n) {
  if (n == 0) throw ShapeError("meta_weight_grad: N must be positive");
  Matrix out;
  kernels::omp::project_grads(grads, meta_grad, out);
  const double scale = kMetaGradSign * lr / static_cast<double>(n);
  for (double& v : out.values()) v *= scale;
  return out;
}

std::vector<double> wpn_backward(const ForwardCache& forward, const WeightCache& weights,
                                 const Matrix& dloss_dweights) {
  if (weights.forward_id == 0 || weights.forward_id != forward.id) {
    throw UsageError("wpn_backward: weight cache was not produced from this forward cache");
  }
  const auto& params = forward.params;
  const auto& cfg = params.config();
  const std::size_t b = forward.input.rows();
  const std::size_t k_exits = cfg.num_exits;
  if (dloss_dweights.rows() != b || dloss_dweights.cols() != k_exits ||
      weights.sigmoid.rows() != b || weights.sigmoid.cols() != k_exits) {
    throw ShapeError("wpn_backward: dL/dw must be B x K matching the cached forward pass");
  }

  // Mean subtraction: its Jacobian I - (1/n) 11^T is symmetric, so the
  // pullback just removes the mean of the incoming gradient.
  const std::size_t n = b * k_exits;
  double mean = 0.0;
  for (double g : dloss_dweights.values()) mean += g;
  mean /= static_cast<double>(n);
  Matrix draw(b, k_exits);
  for (std::size_t j = 0; j < n; ++j) {
    const double s = weights.sigmoid.values()[j];
    draw.values()[j] = (dloss_dweights.values()[j] - mean) * weights.delta * 2.0 * s * (1.0 - s);
  }

  std::vector<double> grad(params.size(), 0.0);
  const auto& layers = params.layers();
  const std::size_t depth = cfg.hidden_depth;
  std::vector<double> dh(cfg.hidden_width);
  std::vector<double> da(cfg.hidden_width);
  for (std::size_t i = 0; i < b; ++i) {
    auto accumulate = [&](const WpnLayer& l, std::span<const double> x, std::span<const double> dy) {
      for (std::size_t r = 0; r < l.out; ++r) {
        double* w = grad.data() + l.weight_offset + r * l.in;
        for (std::size_t c = 0; c < l.in; ++c) w[c] += dy[r] * x[c];
        grad[l.bias_offset + r] += dy[r];
      }
    };
    std::span<const double> dy = draw.row(i);
    const auto& out_layer = layers.back();
    accumulate(out_layer, forward.hidden_post[depth - 1].row(i), dy);
    std::fill(dh.begin(), dh.end(), 0.0);
    numkit::affine_transpose_accumulate(params.weight(out_layer), dy, dh);
    std::size_t d = depth;
    while (d-- > 0) {
      const auto pre = forward.hidden_pre[d].row(i);
      for (std::size_t r = 0; r < pre.size(); ++r) da[r] = pre[r] > 0.0 ? dh[r] : 0.0;
      std::span<const double> x = d == 0 ? forward.input.row(i) : forward.hidden_post[d - 1].row(i);
      accumulate(layers[d], x, da);
      if (d > 0) {
        std::fill(dh.begin(), dh.end(), 0.0);
        numkit::affine_transpose_accumulate(params.weight(layers[d]), da, dh);
      }
    }
  }
  return grad;
}

void adam_update(std::span<double> theta, std::span<const double> grad, AdamState& state,
                 double lr, const AdamOptions& options) {
  if (grad.size() != theta.size()) throw ShapeError("adam: gradient length does not match parameters");
  if (state.m.empty() && state.v.empty()) state = AdamState::zeros(theta.size());
  if (state.m.size() != theta.size() || state.v.size() != theta.size()) {
    throw ShapeError("adam: moment buffers do not match parameters");
  }
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(options.beta1, t);
  const double bc2 = 1.0 - std::pow(options.beta2, t);
  for (std::size_t p = 0; p < theta.size(); ++p) {
    state.m[p] = options.beta1 * state.m[p] + (1.0 - options.beta1) * grad[p];
    state.v[p] = options.beta2 * state.v[p] + (1.0 - options.beta2) * grad[p] * grad[p];
    const double m_hat = state.m[p] / bc1;
    const double v_hat = state.v[p] / bc2;
    theta[p] -= lr * m_hat / (std::sqrt(v_hat) + options.eps);
  }
}

WpnParams adam_step(const WpnParams& params, std::span<const double> grad, AdamState& state,
                    double lr, const AdamOptions& options) {
  WpnParams next = params;
  adam_update(next.values(), grad, state, lr, options);
  return next;
}

}  // namespace exitweave::wpn
