#include <algorithm>
#include <cstdint>
#include <exception>

#include "exitweave/errors.hpp"
#include "exitweave/kernels.hpp"
#include "kernels_detail.hpp"

namespace exitweave::kernels::omp {

namespace {

// Parameter-range tile for the reductions over (i, k).
constexpr std::size_t kParamTile = 512;

std::int64_t signed_count(std::size_t n) { return static_cast<std::int64_t>(n); }

// Exceptions may not cross an OpenMP region boundary; the first one thrown
// inside a loop body is parked here and rethrown by the caller.
class ExceptionSlot {
 public:
  template <class F>
  void run(F&& body) {
    try {
      body();
    } catch (...) {
#pragma omp critical(exitweave_exception_slot)
      if (!error_) error_ = std::current_exception();
    }
  }
  void rethrow() const {
    if (error_) std::rethrow_exception(error_);
  }

 private:
  std::exception_ptr error_;
};

}  // namespace

void forward_all(const BackboneParams& params, const Matrix& batch, std::span<const int> labels,
                 ExitOutputs& out) {
  detail::check_batch(params, batch, labels);
  prepare_outputs(params, batch.rows(), out);
  const std::int64_t n = signed_count(batch.rows());
  ExceptionSlot slot;
#pragma omp parallel
  {
    detail::SampleWorkspace ws(params);
#pragma omp for schedule(static)
    for (std::int64_t i = 0; i < n; ++i) {
      const auto row = static_cast<std::size_t>(i);
      slot.run([&] {
        detail::forward_sample(params, batch.row(row), labels[row], ws);
        detail::store_sample(ws, row, labels[row], out);
      });
    }
  }
  slot.rethrow();
}

void per_sample_grads(const BackboneParams& params, const Matrix& batch,
                      std::span<const int> labels, PerSampleGrads& out) {
  detail::check_batch(params, batch, labels);
  const std::size_t k_exits = params.num_exits();
  out = PerSampleGrads(batch.rows(), k_exits, params.size());
  const std::int64_t n = signed_count(batch.rows());
  ExceptionSlot slot;
#pragma omp parallel
  {
    detail::SampleWorkspace ws(params);
#pragma omp for schedule(static)
    for (std::int64_t i = 0; i < n; ++i) {
      const auto row = static_cast<std::size_t>(i);
      slot.run([&] {
        detail::forward_sample(params, batch.row(row), labels[row], ws);
        for (std::size_t k = 0; k < k_exits; ++k) {
          detail::backprop_exit(params, batch.row(row), labels[row], k, ws, out.at(row, k));
        }
      });
    }
  }
  slot.rethrow();
}

void exit_loss_grads(const BackboneParams& params, const Matrix& batch,
                     std::span<const int> labels, const Matrix& coeffs, std::span<double> out) {
  detail::check_batch(params, batch, labels);
  if (coeffs.rows() != batch.rows() || coeffs.cols() != params.num_exits()) {
    throw ShapeError("exit_loss_grads: coefficient table must be B x K");
  }
  if (out.size() != params.size()) throw ShapeError("exit_loss_grads: output must have P entries");
  const std::size_t p_count = params.size();
  const std::size_t b = batch.rows();
  std::vector<double> per_sample(b * p_count, 0.0);
  const std::int64_t n = signed_count(b);
  ExceptionSlot slot;
#pragma omp parallel
  {
    detail::SampleWorkspace ws(params);
#pragma omp for schedule(static)
    for (std::int64_t i = 0; i < n; ++i) {
      const auto row = static_cast<std::size_t>(i);
      std::span<double> g(per_sample.data() + row * p_count, p_count);
      slot.run([&] {
        detail::forward_sample(params, batch.row(row), labels[row], ws);
        detail::backprop_combined(params, batch.row(row), labels[row], coeffs.row(row), ws, g);
      });
    }
  }
  slot.rethrow();
  const std::int64_t tiles = signed_count((p_count + kParamTile - 1) / kParamTile);
#pragma omp parallel for schedule(static)
  for (std::int64_t t = 0; t < tiles; ++t) {
    const std::size_t lo = static_cast<std::size_t>(t) * kParamTile;
    const std::size_t hi = std::min(p_count, lo + kParamTile);
    for (std::size_t p = lo; p < hi; ++p) out[p] = 0.0;
    for (std::size_t i = 0; i < b; ++i) {
      const double* g = per_sample.data() + i * p_count;
      for (std::size_t p = lo; p < hi; ++p) out[p] += g[p];
    }
  }
}

void weighted_grad_sum(const PerSampleGrads& grads, const Matrix& weights, double scale,
                       std::span<double> out) {
  if (weights.rows() != grads.batch || weights.cols() != grads.exits) {
    throw ShapeError("weighted_grad_sum: weights must be B x K");
  }
  if (out.size() != grads.params) throw ShapeError("weighted_grad_sum: output must have P entries");
  const std::size_t p_count = grads.params;
  const std::int64_t tiles = signed_count((p_count + kParamTile - 1) / kParamTile);
#pragma omp parallel for schedule(static)
  for (std::int64_t t = 0; t < tiles; ++t) {
    const std::size_t lo = static_cast<std::size_t>(t) * kParamTile;
    const std::size_t hi = std::min(p_count, lo + kParamTile);
    for (std::size_t p = lo; p < hi; ++p) out[p] = 0.0;
    for (std::size_t i = 0; i < grads.batch; ++i) {
      for (std::size_t k = 0; k < grads.exits; ++k) {
        const double w = weights(i, k);
        const double* g = grads.at(i, k).data();
        for (std::size_t p = lo; p < hi; ++p) out[p] += w * g[p];
      }
    }
    for (std::size_t p = lo; p < hi; ++p) out[p] *= scale;
  }
}

void project_grads(const PerSampleGrads& grads, std::span<const double> direction, Matrix& out) {
  if (direction.size() != grads.params) throw ShapeError("project_grads: direction must have P entries");
  out = Matrix(grads.batch, grads.exits);
  const std::int64_t n = signed_count(grads.batch * grads.exits);
#pragma omp parallel for schedule(static)
  for (std::int64_t e = 0; e < n; ++e) {
    const auto idx = static_cast<std::size_t>(e);
    const std::size_t i = idx / grads.exits;
    const std::size_t k = idx % grads.exits;
    out(i, k) = numkit::dot(grads.at(i, k), direction);
  }
}

}  // namespace exitweave::kernels::omp
