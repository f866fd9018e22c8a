#include <algorithm>
#include <string>

#include "exitweave/errors.hpp"
#include "exitweave/kernels.hpp"
#include "kernels_detail.hpp"

namespace exitweave::kernels {

namespace detail {

SampleWorkspace::SampleWorkspace(const BackboneParams& params) {
  const auto& cfg = params.config();
  const std::size_t k_exits = cfg.num_exits();
  const std::size_t c = cfg.num_classes;
  std::size_t widest = cfg.input_dim;
  for (std::size_t w : cfg.trunk_widths) {
    pre.emplace_back(w, 0.0);
    post.emplace_back(w, 0.0);
    dh.emplace_back(w, 0.0);
    widest = std::max(widest, w);
  }
  logits.assign(k_exits * c, 0.0);
  probs.assign(k_exits * c, 0.0);
  losses.assign(k_exits, 0.0);
  dz.assign(c, 0.0);
  da.assign(widest, 0.0);
  scratch.assign(widest, 0.0);
}

void check_batch(const BackboneParams& params, const numkit::Matrix& batch,
                 std::span<const int> labels) {
  const auto& cfg = params.config();
  if (batch.cols() != cfg.input_dim) {
    throw ShapeError("batch has " + std::to_string(batch.cols()) + " features, backbone expects " +
                     std::to_string(cfg.input_dim));
  }
  if (batch.rows() != labels.size()) {
    throw ShapeError("batch has " + std::to_string(batch.rows()) + " rows but " +
                     std::to_string(labels.size()) + " labels");
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= cfg.num_classes) {
      throw IndexError("label " + std::to_string(y) + " outside [0, " +
                       std::to_string(cfg.num_classes) + ")");
    }
  }
  if (!numkit::all_finite(batch.values())) throw NumericError("batch contains non-finite values");
}

void forward_sample(const BackboneParams& params, std::span<const double> x, int label,
                    SampleWorkspace& ws) {
  const auto& layout = params.layout();
  const std::size_t c = params.config().num_classes;
  std::span<const double> input = x;
  for (std::size_t j = 0; j < layout.blocks.size(); ++j) {
    const auto& blk = layout.blocks[j];
    numkit::affine(params.weight(blk), params.bias(blk), input, ws.pre[j]);
    for (std::size_t r = 0; r < blk.out; ++r) ws.post[j][r] = ws.pre[j][r] > 0.0 ? ws.pre[j][r] : 0.0;
    const auto& head = layout.heads[j];
    std::span<double> z(ws.logits.data() + j * c, c);
    numkit::affine(params.weight(head), params.bias(head), ws.post[j], z);
    std::span<double> p(ws.probs.data() + j * c, c);
    numkit::softmax_into(z, p);
    ws.losses[j] = numkit::cross_entropy_loss(z, label);
    input = ws.post[j];
  }
}

void store_sample(const SampleWorkspace& ws, std::size_t i, int label, backbone::ExitOutputs& out) {
  const std::size_t k_exits = out.exits;
  const std::size_t c = out.classes;
  std::copy(ws.logits.begin(), ws.logits.end(), out.logits.begin() + i * k_exits * c);
  std::copy(ws.probs.begin(), ws.probs.end(), out.probs.begin() + i * k_exits * c);
  for (std::size_t k = 0; k < k_exits; ++k) {
    const double* p = ws.probs.data() + k * c;
    std::size_t best = 0;
    for (std::size_t j = 1; j < c; ++j) {
      if (p[j] > p[best]) best = j;
    }
    out.losses(i, k) = ws.losses[k];
    out.confidences(i, k) = p[best];
    out.predictions[i * k_exits + k] = static_cast<int>(best);
  }
  out.labels[i] = label;
}

namespace {

// Gradient of an affine layer given dy: dW += dy x^T, db += dy.
void accumulate_affine_grad(const backbone::LayerSlice& l, std::span<const double> x,
                            std::span<const double> dy, std::span<double> grad) {
  for (std::size_t r = 0; r < l.out; ++r) {
    const double g = dy[r];
    double* w = grad.data() + l.weight_offset + r * l.in;
    for (std::size_t cc = 0; cc < l.in; ++cc) w[cc] += g * x[cc];
    grad[l.bias_offset + r] += g;
  }
}

// Backward from block j's post-activation gradient dh down to the input.
void backprop_trunk(const BackboneParams& params, std::span<const double> x, std::size_t top,
                    SampleWorkspace& ws, std::span<double> grad, bool accumulate_lower) {
  const auto& layout = params.layout();
  std::size_t j = top + 1;
  while (j-- > 0) {
    const auto& blk = layout.blocks[j];
    std::span<double> da(ws.da.data(), blk.out);
    for (std::size_t r = 0; r < blk.out; ++r) da[r] = ws.pre[j][r] > 0.0 ? ws.dh[j][r] : 0.0;
    std::span<const double> input = j == 0 ? x : std::span<const double>(ws.post[j - 1]);
    accumulate_affine_grad(blk, input, da, grad);
    if (j > 0) {
      if (!accumulate_lower) std::fill(ws.dh[j - 1].begin(), ws.dh[j - 1].end(), 0.0);
      numkit::affine_transpose_accumulate(params.weight(blk), da, ws.dh[j - 1]);
    }
  }
}

}  // namespace

void backprop_exit(const BackboneParams& params, std::span<const double> x, int label,
                   std::size_t exit, SampleWorkspace& ws, std::span<double> grad) {
  const auto& head = params.layout().heads[exit];
  const std::size_t c = params.config().num_classes;
  for (std::size_t j = 0; j < c; ++j) ws.dz[j] = ws.probs[exit * c + j];
  ws.dz[static_cast<std::size_t>(label)] -= 1.0;
  accumulate_affine_grad(head, ws.post[exit], ws.dz, grad);
  std::fill(ws.dh[exit].begin(), ws.dh[exit].end(), 0.0);
  numkit::affine_transpose_accumulate(params.weight(head), ws.dz, ws.dh[exit]);
  backprop_trunk(params, x, exit, ws, grad, false);
}

void backprop_combined(const BackboneParams& params, std::span<const double> x, int label,
                       std::span<const double> coeffs, SampleWorkspace& ws,
                       std::span<double> grad) {
  const auto& layout = params.layout();
  const std::size_t c = params.config().num_classes;
  const std::size_t k_exits = layout.heads.size();
  for (auto& v : ws.dh) std::fill(v.begin(), v.end(), 0.0);
  // Sweep top-down: at block j the upstream gradient holds head j plus
  // everything that flowed back from blocks above.
  std::size_t j = k_exits;
  while (j-- > 0) {
    const double coeff = coeffs[j];
    if (coeff != 0.0) {
      for (std::size_t cc = 0; cc < c; ++cc) ws.dz[cc] = coeff * ws.probs[j * c + cc];
      ws.dz[static_cast<std::size_t>(label)] -= coeff;
      accumulate_affine_grad(layout.heads[j], ws.post[j], ws.dz, grad);
      numkit::affine_transpose_accumulate(params.weight(layout.heads[j]), ws.dz, ws.dh[j]);
    }
    const auto& blk = layout.blocks[j];
    std::span<double> da(ws.da.data(), blk.out);
    for (std::size_t r = 0; r < blk.out; ++r) da[r] = ws.pre[j][r] > 0.0 ? ws.dh[j][r] : 0.0;
    std::span<const double> input = j == 0 ? x : std::span<const double>(ws.post[j - 1]);
    accumulate_affine_grad(blk, input, da, grad);
    if (j > 0) numkit::affine_transpose_accumulate(params.weight(blk), da, ws.dh[j - 1]);
  }
}

}  // namespace detail

void prepare_outputs(const BackboneParams& params, std::size_t batch, ExitOutputs& out) {
  const std::size_t k_exits = params.num_exits();
  const std::size_t c = params.config().num_classes;
  out.batch = batch;
  out.exits = k_exits;
  out.classes = c;
  out.logits.assign(batch * k_exits * c, 0.0);
  out.probs.assign(batch * k_exits * c, 0.0);
  out.losses = Matrix(batch, k_exits);
  out.confidences = Matrix(batch, k_exits);
  out.predictions.assign(batch * k_exits, 0);
  out.labels.assign(batch, 0);
}

namespace serial {

void forward_all(const BackboneParams& params, const Matrix& batch, std::span<const int> labels,
                 ExitOutputs& out) {
  detail::check_batch(params, batch, labels);
  prepare_outputs(params, batch.rows(), out);
  detail::SampleWorkspace ws(params);
  for (std::size_t i = 0; i < batch.rows(); ++i) {
    detail::forward_sample(params, batch.row(i), labels[i], ws);
    detail::store_sample(ws, i, labels[i], out);
  }
}

void per_sample_grads(const BackboneParams& params, const Matrix& batch,
                      std::span<const int> labels, PerSampleGrads& out) {
  detail::check_batch(params, batch, labels);
  const std::size_t k_exits = params.num_exits();
  out = PerSampleGrads(batch.rows(), k_exits, params.size());
  detail::SampleWorkspace ws(params);
  for (std::size_t i = 0; i < batch.rows(); ++i) {
    detail::forward_sample(params, batch.row(i), labels[i], ws);
    for (std::size_t k = 0; k < k_exits; ++k) {
      detail::backprop_exit(params, batch.row(i), labels[i], k, ws, out.at(i, k));
    }
  }
}

void exit_loss_grads(const BackboneParams& params, const Matrix& batch,
                     std::span<const int> labels, const Matrix& coeffs, std::span<double> out) {
  detail::check_batch(params, batch, labels);
  if (coeffs.rows() != batch.rows() || coeffs.cols() != params.num_exits()) {
    throw ShapeError("exit_loss_grads: coefficient table must be B x K");
  }
  if (out.size() != params.size()) throw ShapeError("exit_loss_grads: output must have P entries");
  std::fill(out.begin(), out.end(), 0.0);
  detail::SampleWorkspace ws(params);
  std::vector<double> sample_grad(params.size());
  for (std::size_t i = 0; i < batch.rows(); ++i) {
    std::fill(sample_grad.begin(), sample_grad.end(), 0.0);
    detail::forward_sample(params, batch.row(i), labels[i], ws);
    detail::backprop_combined(params, batch.row(i), labels[i], coeffs.row(i), ws, sample_grad);
    for (std::size_t p = 0; p < out.size(); ++p) out[p] += sample_grad[p];
  }
}

void weighted_grad_sum(const PerSampleGrads& grads, const Matrix& weights, double scale,
                       std::span<double> out) {
  if (weights.rows() != grads.batch || weights.cols() != grads.exits) {
    throw ShapeError("weighted_grad_sum: weights must be B x K");
  }
  if (out.size() != grads.params) throw ShapeError("weighted_grad_sum: output must have P entries");
  std::fill(out.begin(), out.end(), 0.0);
  for (std::size_t i = 0; i < grads.batch; ++i) {
    for (std::size_t k = 0; k < grads.exits; ++k) {
      const double w = weights(i, k);
      const auto g = grads.at(i, k);
      for (std::size_t p = 0; p < grads.params; ++p) out[p] += w * g[p];
    }
  }
  for (double& v : out) v *= scale;
}

void project_grads(const PerSampleGrads& grads, std::span<const double> direction, Matrix& out) {
  if (direction.size() != grads.params) throw ShapeError("project_grads: direction must have P entries");
  out = Matrix(grads.batch, grads.exits);
  for (std::size_t i = 0; i < grads.batch; ++i) {
    for (std::size_t k = 0; k < grads.exits; ++k) out(i, k) = numkit::dot(grads.at(i, k), direction);
  }
}

}  // namespace serial

}  // namespace exitweave::kernels
