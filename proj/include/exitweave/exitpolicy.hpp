#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "exitweave/backbone.hpp"
#include "exitweave/numkit.hpp"

namespace exitweave::exitpolicy {

using numkit::Matrix;

// Threshold assigned to an exit that selects nobody during calibration. It is
// above every attainable confidence, so no sample can leave there.
inline constexpr double kUnreachableThreshold = 1.0 + 1e-3;

// f[k] = q^k / sum_j q^j for k = 1..K. Throws DomainError unless q > 0.
std::vector<double> exit_fractions(double q, std::size_t num_exits);

// N_k = floor(f[k] * n) for k < K, the last exit takes the remainder.
std::vector<std::size_t> allocation_sizes(std::size_t n, double q, std::size_t num_exits);

struct AllocationResult {
  std::vector<std::vector<std::size_t>> subsets;  // sample indices, in selection order
  std::vector<std::size_t> sizes;
};

// Sequential greedy partition: exit k takes the N_k most confident samples
// (by its own confidence) among those no earlier exit took. Ties go to the
// lower sample index. The last exit takes everything left.
AllocationResult allocate_meta(const Matrix& confidences, double q);

struct ThresholdVector {
  std::vector<double> eps;  // eps.back() == 0
};

// Runs allocate_meta on the calibration confidences and sets eps_k to the
// confidence of the last sample exit k selected (kUnreachableThreshold if it
// selected none).
ThresholdVector calibrate_thresholds(const Matrix& val_confidences, double q);

struct ExitDecision {
  std::size_t exit = 0;  // 0-based
  int prediction = 0;
  bool correct = false;
};

// Early exiting: sample leaves at the first k with confidence_k >= eps_k,
// otherwise at the last exit.
std::vector<ExitDecision> dynamic_infer(const backbone::ExitOutputs& outputs,
                                        const ThresholdVector& thresholds);

std::vector<std::size_t> exit_counts(std::span<const ExitDecision> decisions, std::size_t num_exits);

double accuracy(std::span<const ExitDecision> decisions);

// sum_k (count_k / N) c[k].
double expected_cost(std::span<const std::size_t> counts, std::span<const double> cost);

// Throws DomainError unless the cost vector is nonempty and strictly increasing.
void validate_cost_model(std::span<const double> cost);

// Per-exit accuracy over every sample (anytime prediction).
std::vector<double> anytime_accuracy(const backbone::ExitOutputs& outputs);

struct BudgetPoint {
  double q = 0.0;
  ThresholdVector thresholds;
  std::vector<std::size_t> exit_counts;
  double accuracy = 0.0;
  double expected_cost = 0.0;
};

// Calibrates on `calibration`, infers on `evaluation`.
BudgetPoint evaluate_budget(const backbone::ExitOutputs& calibration,
                            const backbone::ExitOutputs& evaluation, double q,
                            std::span<const double> cost);

}  // namespace exitweave::exitpolicy
