#pragma once

// Single-sample building blocks shared by the serial and OpenMP kernels.

#include <span>
#include <vector>

#include "exitweave/backbone.hpp"

namespace exitweave::kernels::detail {

using backbone::BackboneParams;

struct SampleWorkspace {
  std::vector<std::vector<double>> pre;   // per block, before the rectifier
  std::vector<std::vector<double>> post;  // per block, after the rectifier
  std::vector<double> logits;             // K x C
  std::vector<double> probs;              // K x C
  std::vector<double> losses;             // K
  std::vector<double> dz;                 // C
  std::vector<std::vector<double>> dh;    // per block, upstream gradient
  std::vector<double> da;                 // widest block
  std::vector<double> scratch;            // widest block

  explicit SampleWorkspace(const BackboneParams& params);
};

void check_batch(const BackboneParams& params, const numkit::Matrix& batch,
                 std::span<const int> labels);

void forward_sample(const BackboneParams& params, std::span<const double> x, int label,
                    SampleWorkspace& ws);

void store_sample(const SampleWorkspace& ws, std::size_t i, int label,
                  backbone::ExitOutputs& out);

// Writes grad l^(k) into `grad` (sized P, pre-zeroed). Requires a prior
// forward_sample on the same input.
void backprop_exit(const BackboneParams& params, std::span<const double> x, int label,
                   std::size_t exit, SampleWorkspace& ws, std::span<double> grad);

// Accumulates sum_k coeffs[k] grad l^(k) into `grad` with one backward sweep.
void backprop_combined(const BackboneParams& params, std::span<const double> x, int label,
                       std::span<const double> coeffs, SampleWorkspace& ws,
                       std::span<double> grad);

}  // namespace exitweave::kernels::detail
