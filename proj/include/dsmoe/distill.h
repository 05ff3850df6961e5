#pragma once

#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "dsmoe/arch.h"
#include "dsmoe/autograd.h"
#include "dsmoe/tensor.h"

// Mixture-of-Students: depth-reduced MoE students and the staged
// distillation objective CE + alpha * KL(teacher || student), where the KL
// term is switched off once training reaches the stage boundary.

namespace dsmoe::distill {

using tensor::Matrix;

inline constexpr std::int64_t kNoBoundary =
    std::numeric_limits<std::int64_t>::max();

struct KDConfig {
  double alpha = 1.0;
  // First step at which the KD term is disabled.
  std::int64_t stage_boundary = kNoBoundary;
  // Softens both distributions; the KD term is scaled by T^2.
  double temperature = 1.0;

  void validate() const;
  double effective_alpha(std::int64_t step) const {
    return step >= stage_boundary ? 0.0 : alpha;
  }
};

enum class RemovalPolicy {
  // Contiguous block ending at the last MoE layer below the top expert stage,
  // so the top-of-pyramid layers survive. Default.
  kBelowTopStage,
  // Drop the deepest layers.
  kDeepest,
  // Use RemovalOptions::layers verbatim.
  kExplicit,
};

struct RemovalOptions {
  RemovalPolicy policy = RemovalPolicy::kBelowTopStage;
  std::vector<int> layers;
};

struct StudentPlan {
  arch::MoeModelConfig teacher;
  int depth = 0;
  std::vector<int> removed;  // teacher layer indices, ascending
  arch::MoeModelConfig student;
};

StudentPlan derive_student(const arch::MoeModelConfig& teacher,
                           int target_depth,
                           const RemovalOptions& options = {});

// Returns the CE node itself when the effective alpha is zero, so the result
// is bitwise the plain cross-entropy.
tensor::Var kd_objective(tensor::Tape& tape, tensor::Var student_logits,
                         tensor::Var teacher_logits,
                         std::span<const std::int64_t> labels,
                         const KDConfig& cfg, std::int64_t step);

struct KDTerms {
  double ce = 0.0;
  double kd = 0.0;  // alpha_eff * T^2 * KL
  double total = 0.0;
};

KDTerms kd_objective_value(const Matrix& student_logits,
                           const Matrix& teacher_logits,
                           std::span<const std::int64_t> labels,
                           const KDConfig& cfg, std::int64_t step);

// ---- toy-scale training ----

struct ToyDims {
  std::size_t hidden = 16;
  std::size_t vocab = 16;
  int experts = 4;
  int ffn_mult = 4;
};

// One MoE block followed by an output projection.
struct ToyModel {
  arch::LayerSpec layer;
  arch::LayerParams params;
  Matrix w_out;  // hidden x vocab
  Matrix b_out;  // 1 x vocab

  Matrix logits(const Matrix& x) const;
};

ToyModel make_toy_student(const ToyDims& dims, std::uint64_t seed,
                          double init_stddev = 0.1);

struct ToyVars {
  arch::LayerVars layer;
  tensor::Var w_out, b_out;
};

ToyVars register_toy(tensor::Tape& tape, const ToyModel& model);
tensor::Var toy_logits(tensor::Tape& tape, tensor::Var x,
                       const ToyModel& model, const ToyVars& vars);

// Trainable matrices of a model and their tape handles, in matching order.
std::vector<Matrix*> toy_parameters(ToyModel& model);
std::vector<tensor::Var> toy_parameter_vars(const ToyVars& vars);

// Labels are drawn from softmax(x * true_weights); inputs are standard normal.
struct SyntheticTask {
  ToyDims dims;
  Matrix true_weights;

  static SyntheticTask make(const ToyDims& dims, std::uint64_t seed,
                            double logit_scale = 2.0);

  struct Batch {
    Matrix x;
    std::vector<std::int64_t> labels;
  };
  Batch sample(std::size_t batch, std::mt19937_64& rng) const;
};

// A fixed teacher whose logits are x * (shrink * true + noise): informative
// but biased away from the label distribution. Its experts are zeroed so the
// MoE block reduces to the identity skip path.
ToyModel make_toy_teacher(const SyntheticTask& task, double shrink,
                          double noise_stddev, std::uint64_t seed);

struct TrainConfig {
  std::int64_t steps = 400;
  std::size_t batch = 32;
  double learning_rate = 0.1;
  std::uint64_t seed = 42;
  std::size_t heldout = 1024;
};

struct StepRecord {
  std::int64_t step = 0;
  double ce = 0.0;
  double kd = 0.0;
  double total = 0.0;

  friend bool operator==(const StepRecord&, const StepRecord&) = default;
};

struct Trajectory {
  std::vector<StepRecord> steps;
  double heldout_ce = 0.0;
  ToyModel model;
};

// Plain SGD on the tape-computed gradients. Throws TrainingError on a
// non-finite loss or parameter.
Trajectory train_toy(ToyModel student, const ToyModel& teacher,
                     const SyntheticTask& task, const KDConfig& kd,
                     const TrainConfig& cfg);

// Mean CE of the model on a held-out set drawn with the given seed.
double heldout_cross_entropy(const ToyModel& model, const SyntheticTask& task,
                             std::size_t n, std::uint64_t seed);

}  // namespace dsmoe::distill
