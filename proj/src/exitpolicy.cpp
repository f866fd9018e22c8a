#include "exitweave/exitpolicy.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "exitweave/errors.hpp"

namespace exitweave::exitpolicy {

std::vector<double> exit_fractions(double q, std::size_t num_exits) {
  if (!(q > 0.0) || !std::isfinite(q)) {
    throw DomainError("budget controller q must be a positive finite number, got " + std::to_string(q));
  }
  if (num_exits == 0) throw DomainError("exit_fractions: need at least one exit");
  // Normalise by the largest power so extreme q neither overflows nor
  // underflows: q^k / q^m with m the dominant exponent.
  const double ref = q >= 1.0 ? static_cast<double>(num_exits) : 1.0;
  std::vector<double> f(num_exits);
  double total = 0.0;
  for (std::size_t k = 0; k < num_exits; ++k) {
    f[k] = std::pow(q, static_cast<double>(k + 1) - ref);
    total += f[k];
  }
  for (double& v : f) v /= total;
  return f;
}

std::vector<std::size_t> allocation_sizes(std::size_t n, double q, std::size_t num_exits) {
  const auto f = exit_fractions(q, num_exits);
  std::vector<std::size_t> sizes(num_exits, 0);
  std::size_t used = 0;
  for (std::size_t k = 0; k + 1 < num_exits; ++k) {
    auto s = static_cast<std::size_t>(std::floor(f[k] * static_cast<double>(n)));
    s = std::min(s, n - used);
    sizes[k] = s;
    used += s;
  }
  sizes[num_exits - 1] = n - used;
  return sizes;
}

AllocationResult allocate_meta(const Matrix& confidences, double q) {
  const std::size_t n = confidences.rows();
  const std::size_t k_exits = confidences.cols();
  if (n == 0) throw DomainError("allocate_meta: empty meta set");
  if (k_exits == 0) throw DomainError("allocate_meta: confidence table has no exits");
  AllocationResult result;
  result.sizes = allocation_sizes(n, q, k_exits);
  result.subsets.resize(k_exits);

  std::vector<std::size_t> pool(n);
  std::iota(pool.begin(), pool.end(), std::size_t{0});
  for (std::size_t k = 0; k + 1 < k_exits; ++k) {
    const std::size_t take = result.sizes[k];
    auto by_confidence = [&](std::size_t a, std::size_t b) {
      const double ca = confidences(a, k);
      const double cb = confidences(b, k);
      return ca != cb ? ca > cb : a < b;
    };
    std::partial_sort(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(take), pool.end(),
                      by_confidence);
    result.subsets[k].assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(take));
    pool.erase(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(take));
    std::sort(pool.begin(), pool.end());
  }
  result.subsets[k_exits - 1] = pool;
  return result;
}

ThresholdVector calibrate_thresholds(const Matrix& val_confidences, double q) {
  const auto alloc = allocate_meta(val_confidences, q);
  const std::size_t k_exits = val_confidences.cols();
  ThresholdVector t;
  t.eps.assign(k_exits, 0.0);
  for (std::size_t k = 0; k + 1 < k_exits; ++k) {
    const auto& subset = alloc.subsets[k];
    t.eps[k] = subset.empty() ? kUnreachableThreshold : val_confidences(subset.back(), k);
  }
  return t;
}

std::vector<ExitDecision> dynamic_infer(const backbone::ExitOutputs& outputs,
                                        const ThresholdVector& thresholds) {
  if (thresholds.eps.size() != outputs.exits) {
    throw ShapeError("dynamic_infer: " + std::to_string(thresholds.eps.size()) + " thresholds for " +
                     std::to_string(outputs.exits) + " exits");
  }
  std::vector<ExitDecision> decisions(outputs.batch);
  const std::size_t last = outputs.exits - 1;
  for (std::size_t i = 0; i < outputs.batch; ++i) {
    std::size_t k = 0;
    while (k < last && outputs.confidences(i, k) < thresholds.eps[k]) ++k;
    const int pred = outputs.prediction(i, k);
    decisions[i] = ExitDecision{k, pred, pred == outputs.labels[i]};
  }
  return decisions;
}

std::vector<std::size_t> exit_counts(std::span<const ExitDecision> decisions, std::size_t num_exits) {
  std::vector<std::size_t> counts(num_exits, 0);
  for (const auto& d : decisions) {
    if (d.exit >= num_exits) throw IndexError("exit_counts: decision exit out of range");
    counts[d.exit] += 1;
  }
  return counts;
}

double accuracy(std::span<const ExitDecision> decisions) {
  if (decisions.empty()) return 0.0;
  std::size_t hits = 0;
  for (const auto& d : decisions) hits += d.correct ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(decisions.size());
}

double expected_cost(std::span<const std::size_t> counts, std::span<const double> cost) {
  if (counts.size() != cost.size()) throw ShapeError("expected_cost: counts and cost differ in length");
  const std::size_t n = std::accumulate(counts.begin(), counts.end(), std::size_t{0});
  if (n == 0) throw DomainError("expected_cost: no samples counted");
  double total = 0.0;
  for (std::size_t k = 0; k < counts.size(); ++k) {
    total += static_cast<double>(counts[k]) / static_cast<double>(n) * cost[k];
  }
  return total;
}

void validate_cost_model(std::span<const double> cost) {
  if (cost.empty()) throw DomainError("cost model is empty");
  for (std::size_t k = 1; k < cost.size(); ++k) {
    if (!(cost[k - 1] < cost[k])) throw DomainError("cost model must be strictly increasing");
  }
}

std::vector<double> anytime_accuracy(const backbone::ExitOutputs& outputs) {
  std::vector<double> acc(outputs.exits, 0.0);
  if (outputs.batch == 0) return acc;
  for (std::size_t k = 0; k < outputs.exits; ++k) {
    std::size_t hits = 0;
    for (std::size_t i = 0; i < outputs.batch; ++i) hits += outputs.prediction(i, k) == outputs.labels[i] ? 1 : 0;
    acc[k] = static_cast<double>(hits) / static_cast<double>(outputs.batch);
  }
  return acc;
}

BudgetPoint evaluate_budget(const backbone::ExitOutputs& calibration,
                            const backbone::ExitOutputs& evaluation, double q,
                            std::span<const double> cost) {
  if (calibration.exits != evaluation.exits) throw ShapeError("evaluate_budget: exit counts differ");
  BudgetPoint point;
  point.q = q;
  point.thresholds = calibrate_thresholds(calibration.confidences, q);
  const auto decisions = dynamic_infer(evaluation, point.thresholds);
  point.exit_counts = exit_counts(decisions, evaluation.exits);
  point.accuracy = accuracy(decisions);
  point.expected_cost = expected_cost(point.exit_counts, cost);
  return point;
}

}  // namespace exitweave::exitpolicy
