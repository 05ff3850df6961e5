#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "dsmoe/tensor.h"

// Token routing for MoE layers: top-k gating, a dense token-to-expert mapping
// table built with an exclusive scan, capacity-bounded scatter into expert
// buffers, and the gate-scaled combine back to token order.
//
// The sparse one-hot reference path at the bottom of this header computes the
// same buffers through literal S x E x c_e dispatch/combine tensors. Both
// paths count their multiply-adds so the complexity gap can be measured.

namespace dsmoe::routing {

using tensor::Matrix;

inline constexpr std::int64_t kDropped = -1;

struct GatingConfig {
  int k = 1;
  int num_experts = 1;
  double capacity_factor = 1.0;

  // Throws ValidationError unless k in {1,2}, num_experts >= 1 and
  // capacity_factor > 0.
  void validate() const;

  friend bool operator==(const GatingConfig&, const GatingConfig&) = default;
};

// c_e = ceil(capacity_factor * tokens * k / num_experts).
std::size_t expert_capacity(const GatingConfig& cfg, std::size_t tokens);

// Per-token top-k selection. Entry (s, j) is the j-th best expert of token s.
struct TopKGates {
  std::size_t tokens = 0;
  int k = 1;
  int num_experts = 1;
  std::vector<std::int64_t> experts;  // tokens * k, descending logit
  std::vector<double> probs;          // softmax over all E, at experts
  Matrix full_probs;                  // tokens x E

  std::int64_t expert(std::size_t s, int j) const {
    return experts[s * static_cast<std::size_t>(k) + static_cast<std::size_t>(j)];
  }
  double prob(std::size_t s, int j) const {
    return probs[s * static_cast<std::size_t>(k) + static_cast<std::size_t>(j)];
  }
};

// Ties resolve toward the lower expert index. Probabilities are not
// renormalized over the selected experts.
TopKGates top_k_gate(const Matrix& logits, const GatingConfig& cfg);

// Work-efficient exclusive prefix sum: up-sweep then down-sweep over a
// power-of-two padded tree.
std::vector<std::int64_t> exclusive_scan_blelloch(
    std::span<const std::int64_t> values);

struct Assignment {
  std::int64_t expert = 0;
  double prob = 0.0;
  std::int64_t slot = kDropped;

  bool dropped() const { return slot == kDropped; }
  friend bool operator==(const Assignment&, const Assignment&) = default;
};

struct DispatchPlan {
  std::size_t tokens = 0;
  int k = 1;
  int num_experts = 1;
  std::size_t capacity = 0;
  // Dense mapping table: tokens * k entries, row-major by token.
  std::vector<Assignment> table;
  // Kept tokens per expert.
  std::vector<std::int64_t> expert_load;

  std::span<const Assignment> token(std::size_t s) const {
    return {table.data() + s * static_cast<std::size_t>(k),
            static_cast<std::size_t>(k)};
  }
};

DispatchPlan build_dispatch_plan(const TopKGates& gates,
                                 const GatingConfig& cfg, std::size_t tokens);

struct ExpertBuffers {
  std::vector<Matrix> buffers;  // num_experts, each capacity x M
  // Token held by each slot, kDropped when empty.
  std::vector<std::vector<std::int64_t>> slot_token;
};

struct OpCounter {
  std::uint64_t multiply_adds = 0;
};

// Dense mapping-table dispatch. Each table entry is resolved to its expert by
// lookup and contracted against a one-hot row over that expert's c_e slots,
// i.e. S * k * c_e * M multiply-adds; there is no expert-count factor.
ExpertBuffers scatter_tokens(const Matrix& batch, const DispatchPlan& plan,
                             OpCounter* counter = nullptr);

// out[s] = sum over kept assignments of prob * outputs[expert][slot]. Same
// S * k * c_e * M cost as scatter_tokens.
Matrix combine_tokens(const ExpertBuffers& outputs, const DispatchPlan& plan,
                      std::size_t tokens, OpCounter* counter = nullptr);

// Reference path. Builds the one-hot dispatch tensor D[s][e][c] for each of
// the k choices (slot positions from a plain sequential cumsum over the
// token/expert mask) and contracts it with the batch: k * S * E * c_e * M.
ExpertBuffers sparse_dispatch_oracle(const Matrix& batch,
                                     const TopKGates& gates,
                                     const GatingConfig& cfg,
                                     OpCounter* counter = nullptr);

// Combine through C[s][e][c] = prob * D[s][e][c], contracted over (e, c).
Matrix sparse_combine_oracle(const ExpertBuffers& outputs,
                             const TopKGates& gates, const GatingConfig& cfg,
                             OpCounter* counter = nullptr);

}  // namespace dsmoe::routing
