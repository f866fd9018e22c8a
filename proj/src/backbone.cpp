#include "exitweave/backbone.hpp"

#include <cmath>
#include <string>

#include "exitweave/errors.hpp"
#include "exitweave/kernels.hpp"

namespace exitweave::backbone {

void BackboneConfig::validate() const {
  if (num_exits() < 2) throw ConfigError("backbone needs at least 2 exits");
  if (input_dim == 0) throw ConfigError("backbone input_dim must be >= 1");
  if (num_classes < 2) throw ConfigError("backbone needs at least 2 classes");
  for (std::size_t w : trunk_widths) {
    if (w == 0) throw ConfigError("trunk widths must be >= 1");
  }
}

ParamLayout make_layout(const BackboneConfig& config) {
  ParamLayout layout;
  std::size_t offset = 0;
  std::size_t in = config.input_dim;
  for (std::size_t w : config.trunk_widths) {
    LayerSlice s{offset, offset + w * in, in, w};
    layout.blocks.push_back(s);
    offset = s.end();
    in = w;
  }
  for (std::size_t w : config.trunk_widths) {
    LayerSlice s{offset, offset + config.num_classes * w, w, config.num_classes};
    layout.heads.push_back(s);
    offset = s.end();
  }
  layout.total = offset;
  return layout;
}

BackboneParams::BackboneParams(BackboneConfig config)
    : config_(std::move(config)), layout_(make_layout(config_)), theta_(layout_.total, 0.0) {}

BackboneParams::BackboneParams(BackboneConfig config, std::vector<double> values)
    : config_(std::move(config)), layout_(make_layout(config_)), theta_(std::move(values)) {
  if (theta_.size() != layout_.total) {
    throw ShapeError("backbone parameter vector has " + std::to_string(theta_.size()) +
                     " entries, layout needs " + std::to_string(layout_.total));
  }
}

BackboneParams init_params(const BackboneConfig& config, RngStream& rng) {
  config.validate();
  BackboneParams params(config);
  auto theta = params.values();
  auto fill = [&](const LayerSlice& l, double gain) {
    const double bound = std::sqrt(gain / static_cast<double>(l.in));
    for (std::size_t j = 0; j < l.in * l.out; ++j) theta[l.weight_offset + j] = rng.uniform(-bound, bound);
  };
  for (const auto& l : params.layout().blocks) fill(l, 6.0);
  for (const auto& l : params.layout().heads) fill(l, 3.0);
  return params;
}

ExitOutputs forward_all(const BackboneParams& params, const Matrix& batch,
                        std::span<const int> labels) {
  ExitOutputs out;
  kernels::omp::forward_all(params, batch, labels, out);
  return out;
}

PerSampleGrads per_sample_grads(const BackboneParams& params, const Matrix& batch,
                                std::span<const int> labels) {
  PerSampleGrads out;
  kernels::omp::per_sample_grads(params, batch, labels, out);
  return out;
}

namespace {

void check_table_shapes(const Matrix& a, const Matrix& b, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(what) + ": table shapes differ (" + std::to_string(a.rows()) + "x" +
                     std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                     std::to_string(b.cols()) + ")");
  }
}

}  // namespace

double weighted_train_loss(const Matrix& losses, const Matrix& weights) {
  check_table_shapes(losses, weights, "weighted_train_loss");
  const double n = static_cast<double>(losses.rows());
  double total = 0.0;
  for (std::size_t k = 0; k < losses.cols(); ++k) {
    double s = 0.0;
    for (std::size_t i = 0; i < losses.rows(); ++i) s += weights(i, k) * losses(i, k);
    total += s / n;
  }
  return total;
}

double cumulative_loss(const Matrix& losses) {
  const double n = static_cast<double>(losses.rows());
  double total = 0.0;
  for (std::size_t k = 0; k < losses.cols(); ++k) {
    double s = 0.0;
    for (std::size_t i = 0; i < losses.rows(); ++i) s += losses(i, k);
    total += s / n;
  }
  return total;
}

std::vector<double> grad_weighted_loss(const PerSampleGrads& grads, const Matrix& weights) {
  if (grads.batch == 0) throw ShapeError("grad_weighted_loss: empty batch");
  std::vector<double> out(grads.params);
  kernels::omp::weighted_grad_sum(grads, weights, 1.0 / static_cast<double>(grads.batch), out);
  return out;
}

std::vector<double> grad_exit_losses(const BackboneParams& params, const Matrix& batch,
                                     std::span<const int> labels, const Matrix& coeffs) {
  std::vector<double> out(params.size());
  kernels::omp::exit_loss_grads(params, batch, labels, coeffs, out);
  return out;
}

BackboneParams sgd_step(const BackboneParams& params, std::span<const double> grad, double lr,
                        const SgdOptions& options, SgdState& state) {
  if (grad.size() != params.size()) {
    throw ShapeError("sgd_step: gradient has " + std::to_string(grad.size()) + " entries, expected " +
                     std::to_string(params.size()));
  }
  BackboneParams next = params;
  auto theta = next.values();
  const bool use_momentum = options.momentum != 0.0;
  if (use_momentum && state.velocity.empty()) state.velocity.assign(params.size(), 0.0);
  if (use_momentum && state.velocity.size() != params.size()) {
    throw ShapeError("sgd_step: momentum buffer does not match the parameter count");
  }
  for (std::size_t p = 0; p < theta.size(); ++p) {
    double g = grad[p];
    if (options.weight_decay != 0.0) g += options.weight_decay * theta[p];
    if (use_momentum) {
      state.velocity[p] = options.momentum * state.velocity[p] + g;
      g = state.velocity[p];
    }
    theta[p] -= lr * g;
  }
  return next;
}

BackboneParams pseudo_step(const BackboneParams& params, const PerSampleGrads& grads,
                           const Matrix& weights, double lr) {
  if (grads.params != params.size()) throw ShapeError("pseudo_step: gradient table does not match params");
  const auto grad = grad_weighted_loss(grads, weights);
  BackboneParams next = params;
  auto theta = next.values();
  for (std::size_t p = 0; p < theta.size(); ++p) theta[p] -= lr * grad[p];
  return next;
}

std::vector<double> count_mul_adds(const BackboneConfig& config) {
  if (config.trunk_widths.empty() || config.input_dim == 0 || config.num_classes == 0) {
    throw ConfigError("count_mul_adds: empty configuration");
  }
  std::vector<double> cost;
  double acc = 0.0;
  std::size_t in = config.input_dim;
  for (std::size_t w : config.trunk_widths) {
    if (w == 0) throw ConfigError("trunk widths must be >= 1");
    acc += static_cast<double>(in * w);
    acc += static_cast<double>(w * config.num_classes);
    cost.push_back(acc);
    in = w;
  }
  return cost;
}

}  // namespace exitweave::backbone
