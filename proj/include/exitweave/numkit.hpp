#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace exitweave::numkit {

// Dense row-major matrix of doubles. Value type; copies are deep.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

  static Matrix identity(std::size_t n);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }

  bool operator==(const Matrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

// Standard product. Accumulation runs row-major with the inner loop over the
// shared dimension, always in the same order.
Matrix matmul(const Matrix& a, const Matrix& b);

// out[r] = bias[r] + sum_c weight[r * in + c] * x[c], c ascending.
void affine(std::span<const double> weight, std::span<const double> bias,
            std::span<const double> x, std::span<double> out);

// out[c] += sum_r weight[r * in + c] * dy[r], r ascending (transposed product).
void affine_transpose_accumulate(std::span<const double> weight, std::span<const double> dy,
                                 std::span<double> out);

std::vector<double> softmax_stable(std::span<const double> logits);
void softmax_into(std::span<const double> logits, std::span<double> out);

struct CrossEntropy {
  double loss = 0.0;
  std::vector<double> grad;  // softmax(logits) - one_hot(label)
};

CrossEntropy cross_entropy(std::span<const double> logits, int label);

// -log softmax(logits)[label] via log-sum-exp; no gradient.
double cross_entropy_loss(std::span<const double> logits, int label);

double dot(std::span<const double> a, std::span<const double> b);
double max_abs(std::span<const double> v);

// ||a - b||_inf / max(||a||_inf, ||b||_inf, floor). Used by every
// finite-difference check in the project.
double relative_error(std::span<const double> analytic, std::span<const double> numeric,
                      double floor = 1e-12);

bool all_finite(std::span<const double> v);

std::vector<double> linspace(double lo, double hi, std::size_t n);

}  // namespace exitweave::numkit
