#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <utility>
#include <vector>

#include "dsmoe/tensor.h"

namespace dsmoe::tensor {

class Tape;

// Handle to a value recorded on a Tape.
struct Var {
  std::size_t id = 0;
};

// Reverse-mode gradient tape covering the ops used by the toy MoE layers and
// the distillation objective. Ops are recorded in call order; backward()
// replays them in exact reverse order and accumulates gradients additively.
class Tape {
 public:
  Var leaf(Matrix value, bool requires_grad = true);
  Var constant(Matrix value) { return leaf(std::move(value), false); }

  const Matrix& value(Var v) const { return nodes_.at(v.id).value; }
  // Zero matrix if v received no gradient.
  const Matrix& grad(Var v) const { return nodes_.at(v.id).grad; }
  std::size_t size() const { return nodes_.size(); }

  Var matmul(Var a, Var b);
  Var add(Var a, Var b);
  Var add_row_bias(Var a, Var bias);
  Var scale(Var a, double factor);
  Var gelu(Var a);
  Var softmax_rows(Var a);
  // Multiplies row r of a by factors(r, 0); factors is rows x 1.
  Var scale_rows(Var a, Var factors);
  // Output row i = a.row(index[i]), or zeros when index[i] < 0.
  Var gather_rows(Var a, std::span<const std::int64_t> index);
  // Output has out_rows rows; row index[i] accumulates a.row(i). Rows of a
  // with index[i] < 0 are discarded.
  Var scatter_add_rows(Var a, std::span<const std::int64_t> index,
                       std::size_t out_rows);
  // n x 1 column holding a(rows[i], cols[i]).
  Var pick(Var a, std::span<const std::int64_t> rows,
           std::span<const std::int64_t> cols);
  Var sum(Var a);
  Var cross_entropy(Var logits, std::span<const std::int64_t> labels);
  Var kl_divergence(Var p_logits, Var q_logits);

  // Throws ShapeError unless loss is 1x1.
  void backward(Var loss);

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    std::vector<std::size_t> inputs;
    // Propagates this node's grad into its inputs' grads.
    std::function<void(Tape&, const Node&)> backward;
  };

  Var record(Matrix value, std::vector<std::size_t> inputs,
             std::function<void(Tape&, const Node&)> backward);
  Matrix& grad_of(std::size_t id) { return nodes_[id].grad; }
  bool needs_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  void accumulate(std::size_t id, const Matrix& g);

  std::vector<Node> nodes_;
};

}  // namespace dsmoe::tensor
