#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "exitweave/backbone.hpp"
#include "exitweave/numkit.hpp"
#include "exitweave/rng.hpp"

namespace exitweave::wpn {

using numkit::Matrix;

// Weight prediction network: an MLP mapping a sample's K exit losses to K
// raw scores, which make_weights squashes into per-exit loss weights.
struct WpnConfig {
  std::size_t num_exits = 0;
  std::size_t hidden_width = 500;
  std::size_t hidden_depth = 1;
  double delta = 0.8;

  void validate() const;
  bool operator==(const WpnConfig&) const = default;
};

struct WpnLayer {
  std::size_t weight_offset = 0;
  std::size_t bias_offset = 0;
  std::size_t in = 0;
  std::size_t out = 0;
};

class WpnParams {
 public:
  explicit WpnParams(WpnConfig config);  // all zeros
  WpnParams(WpnConfig config, std::vector<double> values);

  const WpnConfig& config() const { return config_; }
  // hidden_depth hidden layers followed by the output layer.
  const std::vector<WpnLayer>& layers() const { return layers_; }
  std::size_t size() const { return theta_.size(); }

  std::span<double> values() { return theta_; }
  std::span<const double> values() const { return theta_; }

  std::span<const double> weight(const WpnLayer& l) const {
    return {theta_.data() + l.weight_offset, l.in * l.out};
  }
  std::span<const double> bias(const WpnLayer& l) const {
    return {theta_.data() + l.bias_offset, l.out};
  }

  bool operator==(const WpnParams& other) const {
    return config_ == other.config_ && theta_ == other.theta_;
  }

 private:
  WpnConfig config_;
  std::vector<WpnLayer> layers_;
  std::vector<double> theta_;
};

WpnParams init_wpn(const WpnConfig& config, RngStream& rng);

struct ForwardCache {
  std::uint64_t id = 0;
  WpnParams params;                 // snapshot used for the forward pass
  Matrix input;                     // B x K losses
  std::vector<Matrix> hidden_pre;   // per hidden layer, B x width
  std::vector<Matrix> hidden_post;  // per hidden layer, B x width
};

struct ForwardResult {
  Matrix raw;  // B x K
  ForwardCache cache;
};

// Rows are mapped independently. Losses are treated as constants.
ForwardResult wpn_forward(const WpnParams& params, const Matrix& loss_matrix);

struct WeightCache {
  std::uint64_t forward_id = 0;  // 0 when built from a bare raw matrix
  Matrix sigmoid;                // B x K
  double delta = 0.0;
};

struct SampleWeights {
  Matrix perturbation_pre;  // delta * (2 sigmoid(raw) - 1), inside (-delta, delta)
  Matrix perturbation;      // perturbation_pre minus its global mean; sums to 0
  Matrix weights;           // 1 + perturbation; mean 1
  WeightCache cache;
};

SampleWeights make_weights(const Matrix& raw, double delta);
SampleWeights make_weights(const ForwardResult& forward, double delta);

// Exact dL_meta/dw through the plain pseudo step:
//   (i, k) -> -(lr / n) <meta_grad, grads[i][k]>.
Matrix meta_weight_grad(const backbone::PerSampleGrads& grads, std::span<const double> meta_grad,
                        double lr, std::size_t n);

// dL/dTheta_g from dL/dw, through w = 1 + (pre - mean(pre)), the squashing,
// and the MLP. Throws UsageError if the caches do not belong together.
std::vector<double> wpn_backward(const ForwardCache& forward, const WeightCache& weights,
                                 const Matrix& dloss_dweights);

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  std::uint64_t step = 0;

  static AdamState zeros(std::size_t n) { return {std::vector<double>(n, 0.0), std::vector<double>(n, 0.0), 0}; }
};

// Bias-corrected Adam on a flat vector, in place.
void adam_update(std::span<double> theta, std::span<const double> grad, AdamState& state,
                 double lr, const AdamOptions& options = {});

WpnParams adam_step(const WpnParams& params, std::span<const double> grad, AdamState& state,
                    double lr, const AdamOptions& options = {});

}  // namespace exitweave::wpn
