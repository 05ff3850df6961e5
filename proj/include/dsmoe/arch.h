#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "dsmoe/autograd.h"
#include "dsmoe/routing.h"
#include "dsmoe/tensor.h"

namespace dsmoe::arch {

using tensor::Matrix;

enum class LayerKind { kDense, kMoE };

// One transformer block's feed-forward position. A Residual-MoE layer keeps a
// shared MLP that every token passes, with the gated expert added on top.
struct LayerSpec {
  LayerKind kind = LayerKind::kDense;
  std::size_t hidden = 0;
  int ffn_mult = 4;
  int experts = 0;
  bool residual = false;
  routing::GatingConfig gating;

  bool is_moe() const { return kind == LayerKind::kMoE; }
  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

// Shape of a GPT-style dense base model.
struct DenseConfig {
  int num_layers = 24;
  std::size_t hidden = 1024;
  int heads = 16;
  std::size_t vocab = 50257;
  std::size_t seq_len = 2048;
};

struct MoeModelConfig {
  int num_layers = 0;
  std::size_t hidden = 0;
  int heads = 0;
  std::size_t vocab = 0;
  std::size_t seq_len = 0;
  std::vector<LayerSpec> layers;
  double moe_loss_coeff = 0.01;

  // Throws ValidationError on inconsistent layer list or gating configs.
  void validate() const;
  int moe_layer_count() const;
  std::vector<int> moe_layer_indices() const;

  friend bool operator==(const MoeModelConfig&,
                         const MoeModelConfig&) = default;
};

struct MoeOptions {
  int k = 1;
  double capacity_factor = 1.0;
};

MoeModelConfig build_dense(const DenseConfig& base);

// MoE on every other feed-forward layer (odd positions), `experts` each.
MoeModelConfig build_standard(const DenseConfig& base, int experts,
                              const MoeOptions& options = {});

// Pyramid layer stack: expert_schedule[i] experts on the i-th MoE position.
// The schedule must be non-decreasing and cover every MoE position.
MoeModelConfig build_pr_moe(const DenseConfig& base,
                            std::span<const int> expert_schedule,
                            bool residual, const MoeOptions& options = {});

// low_layers x low_experts followed by high_layers x high_experts.
std::vector<int> pyramid_schedule(int low_layers, int low_experts,
                                  int high_layers, int high_experts);

// Parameter totals. Shared MLPs and gates count as non-expert.
struct ParamCount {
  std::uint64_t total = 0;
  std::uint64_t expert = 0;
  std::uint64_t non_expert = 0;
  std::uint64_t active_per_token = 0;

  friend bool operator==(const ParamCount&, const ParamCount&) = default;
};

std::uint64_t ffn_params(std::size_t hidden, int ffn_mult);
std::uint64_t attention_params(std::size_t hidden);
// Tied token embedding, learned positions, final layer norm.
std::uint64_t embedding_params(const MoeModelConfig& cfg);
ParamCount count_layer_params(const LayerSpec& spec);
ParamCount count_params(const MoeModelConfig& cfg);

// 2 * active parameters per token. The sequence-quadratic attention score term
// is not included.
double count_flops_per_token(const MoeModelConfig& cfg);

// ---- Toy-scale forward evaluation ----

struct FfnParams {
  Matrix w_in;   // M x ffn_mult*M
  Matrix b_in;   // 1 x ffn_mult*M
  Matrix w_out;  // ffn_mult*M x M
  Matrix b_out;  // 1 x M
};

struct LayerParams {
  FfnParams mlp;  // dense FFN, or the shared MLP of a residual layer
  Matrix gate;    // M x E
  std::vector<FfnParams> experts;
};

FfnParams init_ffn(std::size_t hidden, int ffn_mult, std::mt19937_64& rng,
                   double stddev);
FfnParams zero_ffn(std::size_t hidden, int ffn_mult);
LayerParams init_layer_params(const LayerSpec& spec, std::mt19937_64& rng,
                              double stddev = 0.2);

Matrix ffn_forward(const Matrix& x, const FfnParams& p);

struct LayerForward {
  Matrix output;
  std::optional<routing::TopKGates> gates;
  std::optional<routing::DispatchPlan> plan;
};

// Dense: x + FFN(x). MoE: x + combine(experts(scatter(x))). Residual MoE:
// x + MLP(x) + combine(...). Dropped assignments contribute nothing, so the
// skip connection carries the token.
LayerForward forward_layer(const Matrix& x, const LayerSpec& spec,
                           const LayerParams& params);

// Tape-recorded counterpart of forward_layer for gradient-based training.
struct FfnVars {
  tensor::Var w_in, b_in, w_out, b_out;
};
struct LayerVars {
  FfnVars mlp;
  tensor::Var gate;
  std::vector<FfnVars> experts;
};

LayerVars register_layer(tensor::Tape& tape, const LayerParams& params,
                         const LayerSpec& spec);
tensor::Var ffn_forward(tensor::Tape& tape, tensor::Var x, const FfnVars& p);
tensor::Var forward_layer(tensor::Tape& tape, tensor::Var x,
                          const LayerSpec& spec, const LayerVars& vars);
// Reads trained values back out of the tape.
LayerParams read_layer(const tensor::Tape& tape, const LayerVars& vars,
                       const LayerSpec& spec);

// Auxiliary balance loss E * sum_e f_e * P_e, with f_e the fraction of routing
// decisions (before capacity drops) that picked expert e and P_e the mean
// gate probability of e. Equals 1 under perfectly uniform routing.
double load_balance_loss(const routing::DispatchPlan& plan,
                         const Matrix& probs);

}  // namespace dsmoe::arch
