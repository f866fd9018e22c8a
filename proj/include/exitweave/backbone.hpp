#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "exitweave/numkit.hpp"
#include "exitweave/rng.hpp"

namespace exitweave::backbone {

using numkit::Matrix;

// K-exit perceptron: trunk block k is affine + rectifier and feeds block k+1
// and exit head k. Sub-network k = blocks 1..k plus head k.
struct BackboneConfig {
  std::size_t input_dim = 0;
  std::vector<std::size_t> trunk_widths;  // one per exit
  std::size_t num_classes = 0;

  std::size_t num_exits() const { return trunk_widths.size(); }

  // Requires K >= 2, every width >= 1, input_dim >= 1, num_classes >= 2.
  void validate() const;

  bool operator==(const BackboneConfig&) const = default;
};

// Location of one affine layer inside the flat parameter vector. The weight
// block is out x in, row-major; the bias follows immediately.
struct LayerSlice {
  std::size_t weight_offset = 0;
  std::size_t bias_offset = 0;
  std::size_t in = 0;
  std::size_t out = 0;

  std::size_t end() const { return bias_offset + out; }
};

// Flat layout: trunk blocks 1..K first, then heads 1..K.
struct ParamLayout {
  std::vector<LayerSlice> blocks;
  std::vector<LayerSlice> heads;
  std::size_t total = 0;
};

ParamLayout make_layout(const BackboneConfig& config);

class BackboneParams {
 public:
  explicit BackboneParams(BackboneConfig config);  // all zeros
  BackboneParams(BackboneConfig config, std::vector<double> values);

  const BackboneConfig& config() const { return config_; }
  const ParamLayout& layout() const { return layout_; }
  std::size_t size() const { return theta_.size(); }
  std::size_t num_exits() const { return config_.num_exits(); }

  std::span<double> values() { return theta_; }
  std::span<const double> values() const { return theta_; }

  std::span<const double> weight(const LayerSlice& l) const {
    return {theta_.data() + l.weight_offset, l.in * l.out};
  }
  std::span<const double> bias(const LayerSlice& l) const {
    return {theta_.data() + l.bias_offset, l.out};
  }

  bool operator==(const BackboneParams& other) const {
    return config_ == other.config_ && theta_ == other.theta_;
  }

 private:
  BackboneConfig config_;
  ParamLayout layout_;
  std::vector<double> theta_;
};

struct Batch {
  Matrix x;                // B x input_dim
  std::vector<int> y;      // B labels
  std::size_t size() const { return y.size(); }
};

// Per-sample, per-exit evaluation of the whole network.
struct ExitOutputs {
  std::size_t batch = 0;
  std::size_t exits = 0;
  std::size_t classes = 0;
  std::vector<double> logits;    // B x K x C
  std::vector<double> probs;     // B x K x C
  Matrix losses;                 // B x K, l_i^(k)
  Matrix confidences;            // B x K, max_c p_c^(k)
  std::vector<int> predictions;  // B x K, argmax_c p_c^(k)
  std::vector<int> labels;       // B

  std::span<const double> logit_row(std::size_t i, std::size_t k) const {
    return {logits.data() + (i * exits + k) * classes, classes};
  }
  std::span<const double> prob_row(std::size_t i, std::size_t k) const {
    return {probs.data() + (i * exits + k) * classes, classes};
  }
  int prediction(std::size_t i, std::size_t k) const { return predictions[i * exits + k]; }
};

// Dense B x K x P table; entry (i, k) = grad of l_i^(k) w.r.t. all parameters.
struct PerSampleGrads {
  std::size_t batch = 0;
  std::size_t exits = 0;
  std::size_t params = 0;
  std::vector<double> data;

  PerSampleGrads() = default;
  PerSampleGrads(std::size_t b, std::size_t k, std::size_t p)
      : batch(b), exits(k), params(p), data(b * k * p, 0.0) {}

  std::span<double> at(std::size_t i, std::size_t k) {
    return {data.data() + (i * exits + k) * params, params};
  }
  std::span<const double> at(std::size_t i, std::size_t k) const {
    return {data.data() + (i * exits + k) * params, params};
  }
};

// He-style uniform init: trunk weights U(-sqrt(6/fan_in), +), heads
// U(-sqrt(3/fan_in), +), biases zero.
BackboneParams init_params(const BackboneConfig& config, RngStream& rng);

ExitOutputs forward_all(const BackboneParams& params, const Matrix& batch,
                        std::span<const int> labels);
inline ExitOutputs forward_all(const BackboneParams& params, const Batch& batch) {
  return forward_all(params, batch.x, batch.y);
}

PerSampleGrads per_sample_grads(const BackboneParams& params, const Matrix& batch,
                                std::span<const int> labels);
inline PerSampleGrads per_sample_grads(const BackboneParams& params, const Batch& batch) {
  return per_sample_grads(params, batch.x, batch.y);
}

// sum_k (1/N) sum_i w_ik l_ik with N = B.
double weighted_train_loss(const Matrix& losses, const Matrix& weights);

// sum_k (1/N) sum_i l_ik, same accumulation order as weighted_train_loss.
double cumulative_loss(const Matrix& losses);

// (1/N) sum_{i,k} w_ik grads[i][k].
std::vector<double> grad_weighted_loss(const PerSampleGrads& grads, const Matrix& weights);

// sum_{i,k} coeffs_ik grad l_ik computed by ordinary reverse-mode backprop
// through the batch, without materialising per-sample gradients.
std::vector<double> grad_exit_losses(const BackboneParams& params, const Matrix& batch,
                                     std::span<const int> labels, const Matrix& coeffs);

struct SgdOptions {
  double momentum = 0.9;
  double weight_decay = 1e-4;
};

struct SgdState {
  std::vector<double> velocity;  // empty until the first momentum step
};

// g = grad + wd * theta; v = mu * v + g; theta -= lr * v (v = g when mu = 0).
BackboneParams sgd_step(const BackboneParams& params, std::span<const double> grad, double lr,
                        const SgdOptions& options, SgdState& state);

// theta - lr * grad_weighted_loss(grads, weights). Plain step: no momentum,
// no weight decay, no optimizer state touched.
BackboneParams pseudo_step(const BackboneParams& params, const PerSampleGrads& grads,
                           const Matrix& weights, double lr);

// c[k]: multiply-adds per sample to reach a decision at exit k during
// early-exit inference (trunk blocks 1..k plus heads 1..k).
std::vector<double> count_mul_adds(const BackboneConfig& config);

}  // namespace exitweave::backbone
