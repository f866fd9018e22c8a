#include "exitweave/numkit.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "exitweave/errors.hpp"

namespace exitweave::numkit {

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows * cols) {
    throw ShapeError("matrix data length " + std::to_string(data_.size()) + " != " +
                     std::to_string(rows) + "x" + std::to_string(cols));
  }
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                     " times " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
  }
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double acc = 0.0;
      for (std::size_t s = 0; s < a.cols(); ++s) acc += a(i, s) * b(s, j);
      out(i, j) = acc;
    }
  }
  return out;
}

void affine(std::span<const double> weight, std::span<const double> bias,
            std::span<const double> x, std::span<double> out) {
  const std::size_t in = x.size();
  for (std::size_t r = 0; r < out.size(); ++r) {
    const double* w = weight.data() + r * in;
    double acc = 0.0;
    for (std::size_t c = 0; c < in; ++c) acc += w[c] * x[c];
    out[r] = bias[r] + acc;
  }
}

void affine_transpose_accumulate(std::span<const double> weight, std::span<const double> dy,
                                 std::span<double> out) {
  const std::size_t in = out.size();
  for (std::size_t r = 0; r < dy.size(); ++r) {
    const double g = dy[r];
    if (g == 0.0) continue;
    const double* w = weight.data() + r * in;
    for (std::size_t c = 0; c < in; ++c) out[c] += w[c] * g;
  }
}

void softmax_into(std::span<const double> logits, std::span<double> out) {
  if (logits.empty()) throw ShapeError("softmax of empty vector");
  if (!all_finite(logits)) throw NumericError("softmax: non-finite logit");
  const double m = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (std::size_t c = 0; c < logits.size(); ++c) {
    out[c] = std::exp(logits[c] - m);
    z += out[c];
  }
  for (std::size_t c = 0; c < logits.size(); ++c) out[c] /= z;
}

std::vector<double> softmax_stable(std::span<const double> logits) {
  std::vector<double> out(logits.size());
  softmax_into(logits, out);
  return out;
}

double cross_entropy_loss(std::span<const double> logits, int label) {
  if (label < 0 || static_cast<std::size_t>(label) >= logits.size()) {
    throw IndexError("cross_entropy: label " + std::to_string(label) + " outside [0, " +
                     std::to_string(logits.size()) + ")");
  }
  if (!all_finite(logits)) throw NumericError("cross_entropy: non-finite logit");
  const double m = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double v : logits) z += std::exp(v - m);
  return (m + std::log(z)) - logits[static_cast<std::size_t>(label)];
}

CrossEntropy cross_entropy(std::span<const double> logits, int label) {
  CrossEntropy ce;
  ce.loss = cross_entropy_loss(logits, label);
  ce.grad = softmax_stable(logits);
  ce.grad[static_cast<std::size_t>(label)] -= 1.0;
  return ce;
}

double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("dot: length mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

double max_abs(std::span<const double> v) {
  double m = 0.0;
  for (double x : v) m = std::max(m, std::abs(x));
  return m;
}

double relative_error(std::span<const double> analytic, std::span<const double> numeric,
                      double floor) {
  if (analytic.size() != numeric.size()) throw ShapeError("relative_error: length mismatch");
  double diff = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff = std::max(diff, std::abs(analytic[i] - numeric[i]));
  }
  const double scale = std::max({max_abs(analytic), max_abs(numeric), floor});
  return diff / scale;
}

bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

std::vector<double> linspace(double lo, double hi, std::size_t n) {
  std::vector<double> out(n);
  if (n == 1) {
    out[0] = lo;
    return out;
  }
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(n - 1);
  }
  return out;
}

}  // namespace exitweave::numkit
