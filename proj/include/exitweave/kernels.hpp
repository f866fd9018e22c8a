#pragma once

// Batch kernels behind the backbone and WPN meta-gradient code. Each kernel
// exists twice: `serial` is the plain reference loop kept for testing and
// benchmarking, `omp` is the OpenMP version used in production. Work is split
// so that every output element is produced by exactly one thread with the
// same accumulation order as the serial loop, which keeps the two bit-identical
// for any thread count.

#include <span>

#include "exitweave/backbone.hpp"

namespace exitweave::kernels {

using backbone::BackboneParams;
using backbone::ExitOutputs;
using backbone::PerSampleGrads;
using numkit::Matrix;

namespace serial {

void forward_all(const BackboneParams& params, const Matrix& batch, std::span<const int> labels,
                 ExitOutputs& out);
void per_sample_grads(const BackboneParams& params, const Matrix& batch,
                      std::span<const int> labels, PerSampleGrads& out);
// out = sum_{i,k} coeffs_ik grad l_ik; out must be sized P.
void exit_loss_grads(const BackboneParams& params, const Matrix& batch,
                     std::span<const int> labels, const Matrix& coeffs, std::span<double> out);
// out[p] = scale * sum_i sum_k weights_ik grads[i][k][p], (i, k) ascending.
void weighted_grad_sum(const PerSampleGrads& grads, const Matrix& weights, double scale,
                       std::span<double> out);
// out(i, k) = <grads[i][k], direction>.
void project_grads(const PerSampleGrads& grads, std::span<const double> direction, Matrix& out);

}  // namespace serial

namespace omp {

void forward_all(const BackboneParams& params, const Matrix& batch, std::span<const int> labels,
                 ExitOutputs& out);
void per_sample_grads(const BackboneParams& params, const Matrix& batch,
                      std::span<const int> labels, PerSampleGrads& out);
void exit_loss_grads(const BackboneParams& params, const Matrix& batch,
                     std::span<const int> labels, const Matrix& coeffs, std::span<double> out);
void weighted_grad_sum(const PerSampleGrads& grads, const Matrix& weights, double scale,
                       std::span<double> out);
void project_grads(const PerSampleGrads& grads, std::span<const double> direction, Matrix& out);

}  // namespace omp

// Sizes `out` for a batch of B samples.
void prepare_outputs(const BackboneParams& params, std::size_t batch, ExitOutputs& out);

}  // namespace exitweave::kernels
