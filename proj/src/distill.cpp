#include "dsmoe/distill.h"

#include <algorithm>
#include <cmath>
#include <set>
#include <string>

#include "dsmoe/errors.h"

namespace dsmoe::distill {

void KDConfig::validate() const {
  if (!(alpha >= 0.0) || !std::isfinite(alpha))
    throw ValidationError("KDConfig: alpha must be a non-negative real");
  if (!(temperature > 0.0) || !std::isfinite(temperature))
    throw ValidationError("KDConfig: temperature must be positive");
  if (stage_boundary < 0)
    throw ValidationError("KDConfig: stage_boundary must be >= 0");
}

namespace {

std::vector<int> below_top_stage_block(const arch::MoeModelConfig& teacher,
                                       int count) {
  const auto moe = teacher.moe_layer_indices();
  if (moe.empty())
    throw ValidationError("derive_student: teacher has no MoE layers");
  int top = 0;
  for (int i : moe) top = std::max(top, teacher.layers[i].experts);
  int anchor = -1;
  for (int i : moe)
    if (teacher.layers[i].experts < top) anchor = i;
  if (anchor < 0) {
    // Uniform schedule: keep the final two MoE layers as the top stage.
    if (moe.size() < 3)
      throw ValidationError("derive_student: too few MoE layers to preserve "
                            "the top stage");
    anchor = moe[moe.size() - 3];
  }
  const int start = anchor - count + 1;
  if (start < 0)
    throw ValidationError("derive_student: cannot remove " +
                          std::to_string(count) +
                          " layers below the top expert stage");
  std::vector<int> out;
  for (int i = start; i <= anchor; ++i) out.push_back(i);
  return out;
}

}  // namespace

StudentPlan derive_student(const arch::MoeModelConfig& teacher,
                           int target_depth, const RemovalOptions& options) {
  teacher.validate();
  if (target_depth >= teacher.num_layers)
    throw ValidationError("derive_student: target depth " +
                          std::to_string(target_depth) +
                          " must be below teacher depth " +
                          std::to_string(teacher.num_layers));
  if (target_depth < 1)
    throw ValidationError("derive_student: target depth must be >= 1");
  const int count = teacher.num_layers - target_depth;

  std::vector<int> removed;
  switch (options.policy) {
    case RemovalPolicy::kBelowTopStage:
      removed = below_top_stage_block(teacher, count);
      break;
    case RemovalPolicy::kDeepest:
      for (int i = target_depth; i < teacher.num_layers; ++i)
        removed.push_back(i);
      break;
    case RemovalPolicy::kExplicit: {
      const std::set<int> unique(options.layers.begin(), options.layers.end());
      if (unique.size() != options.layers.size() ||
          static_cast<int>(unique.size()) != count)
        throw ValidationError("derive_student: explicit removal list must "
                              "name " + std::to_string(count) +
                              " distinct layers");
      for (int i : unique)
        if (i < 0 || i >= teacher.num_layers)
          throw ValidationError("derive_student: layer " + std::to_string(i) +
                                " out of range");
      removed.assign(unique.begin(), unique.end());
      break;
    }
  }

  StudentPlan plan;
  plan.teacher = teacher;
  plan.depth = target_depth;
  plan.removed = removed;
  plan.student = teacher;
  plan.student.num_layers = target_depth;
  plan.student.layers.clear();
  for (int i = 0; i < teacher.num_layers; ++i)
    if (!std::binary_search(removed.begin(), removed.end(), i))
      plan.student.layers.push_back(teacher.layers[i]);
  plan.student.validate();
  return plan;
}

tensor::Var kd_objective(tensor::Tape& tape, tensor::Var student_logits,
                         tensor::Var teacher_logits,
                         std::span<const std::int64_t> labels,
                         const KDConfig& cfg, std::int64_t step) {
  cfg.validate();
  const Matrix& s = tape.value(student_logits);
  const Matrix& t = tape.value(teacher_logits);
  if (s.rows() != t.rows() || s.cols() != t.cols())
    throw ShapeError("kd_objective: student/teacher logits shape mismatch");
  auto ce = tape.cross_entropy(student_logits, labels);
  const double alpha = cfg.effective_alpha(step);
  if (alpha == 0.0) return ce;

  tensor::Var sp = student_logits;
  tensor::Var tp = teacher_logits;
  double weight = alpha;
  if (cfg.temperature != 1.0) {
    sp = tape.scale(student_logits, 1.0 / cfg.temperature);
    tp = tape.scale(teacher_logits, 1.0 / cfg.temperature);
    weight *= cfg.temperature * cfg.temperature;
  }
  auto kl = tape.kl_divergence(tp, sp);
  return tape.add(ce, tape.scale(kl, weight));
}

KDTerms kd_objective_value(const Matrix& student_logits,
                           const Matrix& teacher_logits,
                           std::span<const std::int64_t> labels,
                           const KDConfig& cfg, std::int64_t step) {
  cfg.validate();
  if (student_logits.rows() != teacher_logits.rows() ||
      student_logits.cols() != teacher_logits.cols())
    throw ShapeError("kd_objective: student/teacher logits shape mismatch");
  KDTerms terms;
  terms.ce = tensor::cross_entropy(student_logits, labels);
  const double alpha = cfg.effective_alpha(step);
  if (alpha != 0.0) {
    const double inv_t = 1.0 / cfg.temperature;
    const double kl =
        cfg.temperature == 1.0
            ? tensor::kl_divergence(teacher_logits, student_logits)
            : tensor::kl_divergence(tensor::scale(teacher_logits, inv_t),
                                    tensor::scale(student_logits, inv_t));
    terms.kd = kl * (alpha * cfg.temperature * cfg.temperature);
  }
  terms.total = alpha == 0.0 ? terms.ce : terms.ce + terms.kd;
  return terms;
}

// ---- toy model ----

Matrix ToyModel::logits(const Matrix& x) const {
  const Matrix h = arch::forward_layer(x, layer, params).output;
  return tensor::add_row_bias(tensor::matmul(h, w_out), b_out);
}

namespace {

Matrix normal_matrix(std::size_t rows, std::size_t cols, std::mt19937_64& rng,
                     double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  Matrix m(rows, cols);
  for (double& x : m.data()) x = dist(rng);
  return m;
}

arch::LayerSpec toy_layer(const ToyDims& dims) {
  arch::LayerSpec l;
  l.kind = arch::LayerKind::kMoE;
  l.hidden = dims.hidden;
  l.ffn_mult = dims.ffn_mult;
  l.experts = dims.experts;
  l.gating = {1, dims.experts, 2.0};
  return l;
}

void check_toy_dims(const ToyDims& dims) {
  if (dims.hidden == 0 || dims.hidden > 32)
    throw ValidationError("toy model: hidden must be in [1, 32]");
  if (dims.vocab < 2 || dims.vocab > 64)
    throw ValidationError("toy model: vocab must be in [2, 64]");
  if (dims.experts < 1)
    throw ValidationError("toy model: need at least one expert");
}

}  // namespace

ToyModel make_toy_student(const ToyDims& dims, std::uint64_t seed,
                          double init_stddev) {
  check_toy_dims(dims);
  std::mt19937_64 rng(seed);
  ToyModel m;
  m.layer = toy_layer(dims);
  m.params = arch::init_layer_params(m.layer, rng, init_stddev);
  m.w_out = normal_matrix(dims.hidden, dims.vocab, rng, init_stddev);
  m.b_out = Matrix(1, dims.vocab);
  return m;
}

ToyVars register_toy(tensor::Tape& tape, const ToyModel& model) {
  ToyVars v;
  v.layer = arch::register_layer(tape, model.params, model.layer);
  v.w_out = tape.leaf(model.w_out);
  v.b_out = tape.leaf(model.b_out);
  return v;
}

tensor::Var toy_logits(tensor::Tape& tape, tensor::Var x,
                       const ToyModel& model, const ToyVars& vars) {
  auto h = arch::forward_layer(tape, x, model.layer, vars.layer);
  return tape.add_row_bias(tape.matmul(h, vars.w_out), vars.b_out);
}

std::vector<Matrix*> toy_parameters(ToyModel& model) {
  std::vector<Matrix*> out{&model.params.gate};
  for (auto& e : model.params.experts) {
    out.push_back(&e.w_in);
    out.push_back(&e.b_in);
    out.push_back(&e.w_out);
    out.push_back(&e.b_out);
  }
  out.push_back(&model.w_out);
  out.push_back(&model.b_out);
  return out;
}

std::vector<tensor::Var> toy_parameter_vars(const ToyVars& vars) {
  std::vector<tensor::Var> out{vars.layer.gate};
  for (const auto& e : vars.layer.experts) {
    out.push_back(e.w_in);
    out.push_back(e.b_in);
    out.push_back(e.w_out);
    out.push_back(e.b_out);
  }
  out.push_back(vars.w_out);
  out.push_back(vars.b_out);
  return out;
}

SyntheticTask SyntheticTask::make(const ToyDims& dims, std::uint64_t seed,
                                  double logit_scale) {
  check_toy_dims(dims);
  std::mt19937_64 rng(seed);
  SyntheticTask t;
  t.dims = dims;
  t.true_weights =
      normal_matrix(dims.hidden, dims.vocab, rng,
                    logit_scale / std::sqrt(static_cast<double>(dims.hidden)));
  return t;
}

SyntheticTask::Batch SyntheticTask::sample(std::size_t batch,
                                           std::mt19937_64& rng) const {
  Batch b;
  b.x = normal_matrix(batch, dims.hidden, rng, 1.0);
  const Matrix probs = tensor::softmax_rows(tensor::matmul(b.x, true_weights));
  std::uniform_real_distribution<double> u(0.0, 1.0);
  b.labels.resize(batch);
  for (std::size_t s = 0; s < batch; ++s) {
    const double r = u(rng);
    double acc = 0.0;
    std::size_t y = probs.cols() - 1;
    for (std::size_t c = 0; c < probs.cols(); ++c) {
      acc += probs(s, c);
      if (r < acc) {
        y = c;
        break;
      }
    }
    b.labels[s] = static_cast<std::int64_t>(y);
  }
  return b;
}

ToyModel make_toy_teacher(const SyntheticTask& task, double shrink,
                          double noise_stddev, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  ToyModel m;
  m.layer = toy_layer(task.dims);
  m.params.gate = Matrix(task.dims.hidden, static_cast<std::size_t>(task.dims.experts));
  for (int e = 0; e < task.dims.experts; ++e)
    m.params.experts.push_back(arch::zero_ffn(task.dims.hidden, task.dims.ffn_mult));
  const Matrix noise = normal_matrix(
      task.dims.hidden, task.dims.vocab, rng,
      noise_stddev / std::sqrt(static_cast<double>(task.dims.hidden)));
  m.w_out = tensor::add(tensor::scale(task.true_weights, shrink), noise);
  m.b_out = Matrix(1, task.dims.vocab);
  return m;
}

double heldout_cross_entropy(const ToyModel& model, const SyntheticTask& task,
                             std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const auto batch = task.sample(n, rng);
  return tensor::cross_entropy(model.logits(batch.x), batch.labels);
}

Trajectory train_toy(ToyModel student, const ToyModel& teacher,
                     const SyntheticTask& task, const KDConfig& kd,
                     const TrainConfig& cfg) {
  kd.validate();
  check_toy_dims(task.dims);
  if (student.layer.hidden != task.dims.hidden ||
      student.w_out.cols() != task.dims.vocab)
    throw ShapeError("train_toy: student does not match task dimensions");

  std::mt19937_64 stream(cfg.seed);
  Trajectory traj;
  traj.steps.reserve(static_cast<std::size_t>(std::max<std::int64_t>(cfg.steps, 0)));
  for (std::int64_t step = 0; step < cfg.steps; ++step) {
    const auto batch = task.sample(cfg.batch, stream);
    tensor::Tape tape;
    const ToyVars vars = register_toy(tape, student);
    auto x = tape.constant(batch.x);
    auto t = tape.constant(teacher.logits(batch.x));
    auto logits = toy_logits(tape, x, student, vars);
    auto loss = kd_objective(tape, logits, t, batch.labels, kd, step);

    const KDTerms terms = kd_objective_value(tape.value(logits), tape.value(t),
                                             batch.labels, kd, step);
    const double total = tape.value(loss)(0, 0);
    if (!std::isfinite(total))
      throw TrainingError("train_toy: non-finite loss", step);
    traj.steps.push_back({step, terms.ce, terms.kd, total});

    tape.backward(loss);
    const auto params = toy_parameters(student);
    const auto handles = toy_parameter_vars(vars);
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto dst = params[i]->data();
      const auto g = tape.grad(handles[i]).data();
      for (std::size_t j = 0; j < dst.size(); ++j)
        dst[j] -= cfg.learning_rate * g[j];
      if (!params[i]->all_finite())
        throw TrainingError("train_toy: non-finite parameter", step);
    }
  }
  traj.heldout_ce = heldout_cross_entropy(student, task, cfg.heldout,
                                          cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  traj.model = std::move(student);
  return traj;
}

}  // namespace dsmoe::distill
