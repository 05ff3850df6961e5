#include "dsmoe/autograd.h"

#include <algorithm>
#include <cmath>
#include <string>

#include "dsmoe/errors.h"

namespace dsmoe::tensor {

Var Tape::leaf(Matrix value, bool requires_grad) {
  Node n;
  n.grad = Matrix(value.rows(), value.cols());
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

Var Tape::record(Matrix value, std::vector<std::size_t> inputs,
                 std::function<void(Tape&, const Node&)> backward) {
  Node n;
  n.grad = Matrix(value.rows(), value.cols());
  n.value = std::move(value);
  for (auto id : inputs) n.requires_grad = n.requires_grad || needs_grad(id);
  n.inputs = std::move(inputs);
  n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

void Tape::accumulate(std::size_t id, const Matrix& g) {
  if (!needs_grad(id)) return;
  auto dst = nodes_[id].grad.data();
  auto src = g.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

Var Tape::matmul(Var a, Var b) {
  return record(tensor::matmul(value(a), value(b)), {a.id, b.id},
                [a, b](Tape& t, const Node& self) {
                  if (t.needs_grad(a.id))
                    t.accumulate(a.id, tensor::matmul(self.grad,
                                                      transpose(t.value(b))));
                  if (t.needs_grad(b.id))
                    t.accumulate(b.id, tensor::matmul(transpose(t.value(a)),
                                                      self.grad));
                });
}

Var Tape::add(Var a, Var b) {
  return record(tensor::add(value(a), value(b)), {a.id, b.id},
                [a, b](Tape& t, const Node& self) {
                  t.accumulate(a.id, self.grad);
                  t.accumulate(b.id, self.grad);
                });
}

Var Tape::add_row_bias(Var a, Var bias) {
  return record(tensor::add_row_bias(value(a), value(bias)), {a.id, bias.id},
                [a, bias](Tape& t, const Node& self) {
                  t.accumulate(a.id, self.grad);
                  Matrix gb(1, self.grad.cols());
                  for (std::size_t i = 0; i < self.grad.rows(); ++i)
                    for (std::size_t j = 0; j < self.grad.cols(); ++j)
                      gb(0, j) += self.grad(i, j);
                  t.accumulate(bias.id, gb);
                });
}

Var Tape::scale(Var a, double factor) {
  return record(tensor::scale(value(a), factor), {a.id},
                [a, factor](Tape& t, const Node& self) {
                  t.accumulate(a.id, tensor::scale(self.grad, factor));
                });
}

Var Tape::gelu(Var a) {
  return record(tensor::gelu(value(a)), {a.id},
                [a](Tape& t, const Node& self) {
                  const Matrix& x = t.value(a);
                  Matrix g = self.grad;
                  auto gd = g.data();
                  auto xd = x.data();
                  for (std::size_t i = 0; i < gd.size(); ++i)
                    gd[i] *= gelu_derivative(xd[i]);
                  t.accumulate(a.id, g);
                });
}

Var Tape::softmax_rows(Var a) {
  return record(tensor::softmax_rows(value(a)), {a.id},
                [a](Tape& t, const Node& self) {
                  const Matrix& y = self.value;
                  Matrix g(y.rows(), y.cols());
                  for (std::size_t i = 0; i < y.rows(); ++i) {
                    double dot = 0.0;
                    for (std::size_t j = 0; j < y.cols(); ++j)
                      dot += self.grad(i, j) * y(i, j);
                    for (std::size_t j = 0; j < y.cols(); ++j)
                      g(i, j) = y(i, j) * (self.grad(i, j) - dot);
                  }
                  t.accumulate(a.id, g);
                });
}

Var Tape::scale_rows(Var a, Var factors) {
  const Matrix& f = value(factors);
  if (f.cols() != 1 || f.rows() != value(a).rows()) {
    throw ShapeError("Tape::scale_rows: factors must be rows x 1");
  }
  std::vector<double> fv(f.data().begin(), f.data().end());
  return record(tensor::scale_rows(value(a), fv), {a.id, factors.id},
                [a, factors](Tape& t, const Node& self) {
                  const Matrix& x = t.value(a);
                  const Matrix& fm = t.value(factors);
                  Matrix ga = self.grad;
                  Matrix gf(fm.rows(), 1);
                  for (std::size_t i = 0; i < x.rows(); ++i) {
                    double dot = 0.0;
                    for (std::size_t j = 0; j < x.cols(); ++j) {
                      dot += self.grad(i, j) * x(i, j);
                      ga(i, j) *= fm(i, 0);
                    }
                    gf(i, 0) = dot;
                  }
                  t.accumulate(a.id, ga);
                  t.accumulate(factors.id, gf);
                });
}

Var Tape::gather_rows(Var a, std::span<const std::int64_t> index) {
  const Matrix& x = value(a);
  Matrix out(index.size(), x.cols());
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] < 0) continue;
    if (static_cast<std::size_t>(index[i]) >= x.rows())
      throw IndexError("Tape::gather_rows: row index out of range");
    const auto src = x.row(static_cast<std::size_t>(index[i]));
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  std::vector<std::int64_t> idx(index.begin(), index.end());
  return record(std::move(out), {a.id},
                [a, idx](Tape& t, const Node& self) {
                  const Matrix& x = t.value(a);
                  Matrix g(x.rows(), x.cols());
                  for (std::size_t i = 0; i < idx.size(); ++i) {
                    if (idx[i] < 0) continue;
                    auto dst = g.row(static_cast<std::size_t>(idx[i]));
                    const auto src = self.grad.row(i);
                    for (std::size_t j = 0; j < dst.size(); ++j)
                      dst[j] += src[j];
                  }
                  t.accumulate(a.id, g);
                });
}

Var Tape::scatter_add_rows(Var a, std::span<const std::int64_t> index,
                           std::size_t out_rows) {
  const Matrix& x = value(a);
  if (index.size() != x.rows())
    throw ShapeError("Tape::scatter_add_rows: index length != rows");
  Matrix out(out_rows, x.cols());
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] < 0) continue;
    if (static_cast<std::size_t>(index[i]) >= out_rows)
      throw IndexError("Tape::scatter_add_rows: row index out of range");
    auto dst = out.row(static_cast<std::size_t>(index[i]));
    const auto src = x.row(i);
    for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
  }
  std::vector<std::int64_t> idx(index.begin(), index.end());
  return record(std::move(out), {a.id},
                [a, idx](Tape& t, const Node& self) {
                  const Matrix& x = t.value(a);
                  Matrix g(x.rows(), x.cols());
                  for (std::size_t i = 0; i < idx.size(); ++i) {
                    if (idx[i] < 0) continue;
                    const auto src =
                        self.grad.row(static_cast<std::size_t>(idx[i]));
                    std::copy(src.begin(), src.end(), g.row(i).begin());
                  }
                  t.accumulate(a.id, g);
                });
}

Var Tape::pick(Var a, std::span<const std::int64_t> rows,
               std::span<const std::int64_t> cols) {
  if (rows.size() != cols.size())
    throw ShapeError("Tape::pick: rows and cols differ in length");
  const Matrix& x = value(a);
  Matrix out(rows.size(), 1);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || cols[i] < 0 ||
        static_cast<std::size_t>(rows[i]) >= x.rows() ||
        static_cast<std::size_t>(cols[i]) >= x.cols())
      throw IndexError("Tape::pick: index out of range");
    out(i, 0) = x(static_cast<std::size_t>(rows[i]),
                  static_cast<std::size_t>(cols[i]));
  }
  std::vector<std::int64_t> r(rows.begin(), rows.end());
  std::vector<std::int64_t> c(cols.begin(), cols.end());
  return record(std::move(out), {a.id},
                [a, r, c](Tape& t, const Node& self) {
                  const Matrix& x = t.value(a);
                  Matrix g(x.rows(), x.cols());
                  for (std::size_t i = 0; i < r.size(); ++i)
                    g(static_cast<std::size_t>(r[i]),
                      static_cast<std::size_t>(c[i])) += self.grad(i, 0);
                  t.accumulate(a.id, g);
                });
}

Var Tape::sum(Var a) {
  Matrix out(1, 1);
  out(0, 0) = tensor::sum(value(a));
  return record(std::move(out), {a.id}, [a](Tape& t, const Node& self) {
    const Matrix& x = t.value(a);
    t.accumulate(a.id, Matrix::filled(x.rows(), x.cols(), self.grad(0, 0)));
  });
}

Var Tape::cross_entropy(Var logits, std::span<const std::int64_t> labels) {
  Matrix out(1, 1);
  out(0, 0) = tensor::cross_entropy(value(logits), labels);
  std::vector<std::int64_t> y(labels.begin(), labels.end());
  return record(std::move(out), {logits.id},
                [logits, y](Tape& t, const Node& self) {
                  const Matrix& z = t.value(logits);
                  if (z.rows() == 0) return;
                  Matrix g = tensor::softmax_rows(z);
                  const double inv_n = 1.0 / static_cast<double>(z.rows());
                  for (std::size_t i = 0; i < z.rows(); ++i) {
                    g(i, static_cast<std::size_t>(y[i])) -= 1.0;
                    for (double& v : g.row(i)) v *= inv_n * self.grad(0, 0);
                  }
                  t.accumulate(logits.id, g);
                });
}

Var Tape::kl_divergence(Var p_logits, Var q_logits) {
  Matrix out(1, 1);
  out(0, 0) = tensor::kl_divergence(value(p_logits), value(q_logits));
  return record(
      std::move(out), {p_logits.id, q_logits.id},
      [p_logits, q_logits](Tape& t, const Node& self) {
        const Matrix log_p = log_softmax_rows(t.value(p_logits));
        const Matrix log_q = log_softmax_rows(t.value(q_logits));
        const std::size_t n = log_p.rows();
        if (n == 0) return;
        const double w = self.grad(0, 0) / static_cast<double>(n);
        Matrix gp(n, log_p.cols());
        Matrix gq(n, log_p.cols());
        for (std::size_t i = 0; i < n; ++i) {
          double mean_ratio = 0.0;
          for (std::size_t j = 0; j < log_p.cols(); ++j)
            mean_ratio += std::exp(log_p(i, j)) * (log_p(i, j) - log_q(i, j));
          for (std::size_t j = 0; j < log_p.cols(); ++j) {
            const double p = std::exp(log_p(i, j));
            const double q = std::exp(log_q(i, j));
            gp(i, j) = w * p * ((log_p(i, j) - log_q(i, j)) - mean_ratio);
            gq(i, j) = w * (q - p);
          }
        }
        t.accumulate(p_logits.id, gp);
        t.accumulate(q_logits.id, gq);
      });
}

void Tape::backward(Var loss) {
  const Matrix& l = value(loss);
  if (l.rows() != 1 || l.cols() != 1) {
    throw ShapeError("Tape::backward: loss must be 1x1, got " +
                     std::to_string(l.rows()) + "x" + std::to_string(l.cols()));
  }
  for (auto& n : nodes_) std::fill(n.grad.data().begin(), n.grad.data().end(), 0.0);
  nodes_[loss.id].grad(0, 0) = 1.0;
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    const Node& n = nodes_[i];
    if (n.backward && n.requires_grad) n.backward(*this, n);
  }
}

}  // namespace dsmoe::tensor
