#include "dsmoe/tensor.h"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

#include "dsmoe/errors.h"

namespace dsmoe::tensor {

namespace {

std::string dims(const Matrix& m) {
  std::ostringstream os;
  os << m.rows() << "x" << m.cols();
  return os.str();
}

void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + dims(a) +
                     " vs " + dims(b));
  }
}

// log(sum(exp(v))) with max subtraction.
double log_sum_exp(std::span<const double> v) {
  const double m = *std::max_element(v.begin(), v.end());
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

}  // namespace

Matrix::Matrix(std::size_t rows, std::size_t cols)
    : rows_(rows), cols_(cols), data_(rows * cols, 0.0) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows * cols) {
    throw ShapeError("Matrix: data length " + std::to_string(data_.size()) +
                     " does not match " + std::to_string(rows) + "x" +
                     std::to_string(cols));
  }
  if (!all_finite()) throw ValidationError("Matrix: non-finite entry");
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

Matrix Matrix::filled(std::size_t rows, std::size_t cols, double value) {
  Matrix m(rows, cols);
  std::fill(m.data_.begin(), m.data_.end(), value);
  return m;
}

Matrix Matrix::from_rows(const std::vector<std::vector<double>>& rows) {
  const std::size_t cols = rows.empty() ? 0 : rows.front().size();
  std::vector<double> data;
  data.reserve(rows.size() * cols);
  for (const auto& r : rows) {
    if (r.size() != cols) throw ShapeError("Matrix::from_rows: ragged rows");
    data.insert(data.end(), r.begin(), r.end());
  }
  return Matrix(rows.size(), cols, std::move(data));
}

bool Matrix::all_finite() const {
  return std::all_of(data_.begin(), data_.end(),
                     [](double x) { return std::isfinite(x); });
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dimension mismatch " + dims(a) + " x " +
                     dims(b));
  }
  Matrix out(a.rows(), b.cols());
  // i-k-j order: each output entry accumulates over k left to right.
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto out_row = out.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      const auto b_row = b.row(k);
      for (std::size_t j = 0; j < b.cols(); ++j) out_row[j] += aik * b_row[j];
    }
  }
  return out;
}

Matrix transpose(const Matrix& a) {
  Matrix out(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  return out;
}

Matrix add(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "add");
  Matrix out = a;
  auto o = out.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] += bd[i];
  return out;
}

Matrix subtract(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "subtract");
  Matrix out = a;
  auto o = out.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] -= bd[i];
  return out;
}

Matrix scale(const Matrix& a, double factor) {
  Matrix out = a;
  for (double& x : out.data()) x *= factor;
  return out;
}

Matrix add_row_bias(const Matrix& a, const Matrix& bias) {
  if (bias.rows() != 1 || bias.cols() != a.cols()) {
    throw ShapeError("add_row_bias: bias " + dims(bias) + " for input " +
                     dims(a));
  }
  Matrix out = a;
  for (std::size_t i = 0; i < out.rows(); ++i) {
    auto r = out.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) r[j] += bias(0, j);
  }
  return out;
}

Matrix scale_rows(const Matrix& a, std::span<const double> factors) {
  if (factors.size() != a.rows()) {
    throw ShapeError("scale_rows: " + std::to_string(factors.size()) +
                     " factors for " + dims(a));
  }
  Matrix out = a;
  for (std::size_t i = 0; i < out.rows(); ++i)
    for (double& x : out.row(i)) x *= factors[i];
  return out;
}

double sum(const Matrix& a) {
  double s = 0.0;
  for (double x : a.data()) s += x;
  return s;
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "max_abs_diff");
  double m = 0.0;
  auto ad = a.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < ad.size(); ++i)
    m = std::max(m, std::abs(ad[i] - bd[i]));
  return m;
}

namespace {
constexpr double kGeluC = 0.044715;
const double kSqrt2OverPi = std::sqrt(2.0 / std::numbers::pi);
}  // namespace

double gelu(double x) {
  return 0.5 * x * (1.0 + std::tanh(kSqrt2OverPi * (x + kGeluC * x * x * x)));
}

double gelu_derivative(double x) {
  const double u = kSqrt2OverPi * (x + kGeluC * x * x * x);
  const double t = std::tanh(u);
  const double du = kSqrt2OverPi * (1.0 + 3.0 * kGeluC * x * x);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

Matrix gelu(const Matrix& a) {
  Matrix out = a;
  for (double& x : out.data()) x = gelu(x);
  return out;
}

std::vector<double> softmax(std::span<const double> v) {
  if (v.empty()) throw ShapeError("softmax: empty vector");
  const double m = *std::max_element(v.begin(), v.end());
  std::vector<double> out(v.size());
  double s = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[i] = std::exp(v[i] - m);
    s += out[i];
  }
  for (double& x : out) x /= s;
  return out;
}

Matrix softmax_rows(const Matrix& logits) {
  if (logits.cols() == 0) throw ShapeError("softmax_rows: zero columns");
  Matrix out(logits.rows(), logits.cols());
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    const auto p = softmax(logits.row(i));
    std::copy(p.begin(), p.end(), out.row(i).begin());
  }
  return out;
}

Matrix log_softmax_rows(const Matrix& logits) {
  if (logits.cols() == 0) throw ShapeError("log_softmax_rows: zero columns");
  Matrix out(logits.rows(), logits.cols());
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    const double lse = log_sum_exp(logits.row(i));
    auto o = out.row(i);
    const auto in = logits.row(i);
    for (std::size_t j = 0; j < o.size(); ++j) o[j] = in[j] - lse;
  }
  return out;
}

double cross_entropy(const Matrix& logits,
                     std::span<const std::int64_t> labels) {
  if (labels.size() != logits.rows()) {
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) +
                     " labels for " + dims(logits));
  }
  if (logits.rows() == 0) return 0.0;
  double total = 0.0;
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    const auto y = labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= logits.cols()) {
      throw IndexError("cross_entropy: label " + std::to_string(y) +
                       " out of range for " + std::to_string(logits.cols()) +
                       " classes");
    }
    const auto row = logits.row(i);
    total += log_sum_exp(row) - row[static_cast<std::size_t>(y)];
  }
  return total / static_cast<double>(logits.rows());
}

double kl_divergence(const Matrix& p_logits, const Matrix& q_logits) {
  require_same_shape(p_logits, q_logits, "kl_divergence");
  if (p_logits.rows() == 0) return 0.0;
  const Matrix log_p = log_softmax_rows(p_logits);
  const Matrix log_q = log_softmax_rows(q_logits);
  double total = 0.0;
  for (std::size_t i = 0; i < log_p.rows(); ++i) {
    double row_kl = 0.0;
    for (std::size_t j = 0; j < log_p.cols(); ++j) {
      const double lp = log_p(i, j);
      row_kl += std::exp(lp) * (lp - log_q(i, j));
    }
    // Rounding can leave a true-zero divergence a few ulps below zero.
    total += std::max(0.0, row_kl);
  }
  return total / static_cast<double>(log_p.rows());
}

}  // namespace dsmoe::tensor
