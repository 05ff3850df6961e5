#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace dsmoe::tensor {

// Dense row-major matrix of doubles. Rows are tokens, columns are features,
// throughout the routing and layer code.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols);
  // Throws ShapeError if data.size() != rows * cols, ValidationError if any
  // entry is non-finite.
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

  static Matrix identity(std::size_t n);
  static Matrix filled(std::size_t rows, std::size_t cols, double value);
  // Builds from nested rows; all rows must have equal length.
  static Matrix from_rows(const std::vector<std::vector<double>>& rows);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) {
    return data_[r * cols_ + c];
  }
  double operator()(std::size_t r, std::size_t c) const {
    return data_[r * cols_ + c];
  }

  std::span<double> row(std::size_t r) {
    return {data_.data() + r * cols_, cols_};
  }
  std::span<const double> row(std::size_t r) const {
    return {data_.data() + r * cols_, cols_};
  }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }

  bool all_finite() const;

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

Matrix matmul(const Matrix& a, const Matrix& b);
Matrix transpose(const Matrix& a);
Matrix add(const Matrix& a, const Matrix& b);
Matrix subtract(const Matrix& a, const Matrix& b);
Matrix scale(const Matrix& a, double factor);
// Adds a 1 x cols bias row to every row of a.
Matrix add_row_bias(const Matrix& a, const Matrix& bias);
// Multiplies row r of a by factors[r].
Matrix scale_rows(const Matrix& a, std::span<const double> factors);
double sum(const Matrix& a);
double max_abs_diff(const Matrix& a, const Matrix& b);

// tanh-approximated GELU, the GPT feed-forward activation.
double gelu(double x);
double gelu_derivative(double x);
Matrix gelu(const Matrix& a);

std::vector<double> softmax(std::span<const double> v);
Matrix softmax_rows(const Matrix& logits);
Matrix log_softmax_rows(const Matrix& logits);

// Mean over rows of -log softmax(logits)[label].
double cross_entropy(const Matrix& logits,
                     std::span<const std::int64_t> labels);

// Mean over rows of KL(softmax(p_logits) || softmax(q_logits)). The first
// argument is the reference (teacher) distribution.
double kl_divergence(const Matrix& p_logits, const Matrix& q_logits);

}  // namespace dsmoe::tensor
