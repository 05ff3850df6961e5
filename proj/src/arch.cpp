#include "dsmoe/arch.h"

#include <algorithm>
#include <string>

#include "dsmoe/errors.h"

namespace dsmoe::arch {

void MoeModelConfig::validate() const {
  if (num_layers < 1) throw ValidationError("model: num_layers must be >= 1");
  if (hidden == 0) throw ValidationError("model: hidden must be positive");
  if (layers.size() != static_cast<std::size_t>(num_layers))
    throw ValidationError("model: layer list length " +
                          std::to_string(layers.size()) + " != num_layers " +
                          std::to_string(num_layers));
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const LayerSpec& l = layers[i];
    if (l.hidden != hidden)
      throw ValidationError("model: layer " + std::to_string(i) +
                            " hidden size differs from model");
    if (l.ffn_mult < 1)
      throw ValidationError("model: layer " + std::to_string(i) +
                            " ffn_mult must be >= 1");
    if (l.is_moe()) {
      if (l.experts < 1)
        throw ValidationError("model: MoE layer " + std::to_string(i) +
                              " needs at least one expert");
      if (l.gating.num_experts != l.experts)
        throw ValidationError("model: layer " + std::to_string(i) +
                              " gating expert count mismatch");
      l.gating.validate();
    } else if (l.residual) {
      throw ValidationError("model: dense layer " + std::to_string(i) +
                            " cannot be residual");
    }
  }
}

int MoeModelConfig::moe_layer_count() const {
  return static_cast<int>(std::count_if(
      layers.begin(), layers.end(), [](const LayerSpec& l) { return l.is_moe(); }));
}

std::vector<int> MoeModelConfig::moe_layer_indices() const {
  std::vector<int> out;
  for (std::size_t i = 0; i < layers.size(); ++i)
    if (layers[i].is_moe()) out.push_back(static_cast<int>(i));
  return out;
}

namespace {

MoeModelConfig skeleton(const DenseConfig& base) {
  if (base.num_layers < 1 || base.hidden == 0)
    throw ValidationError("dense base: layers and hidden must be positive");
  MoeModelConfig cfg;
  cfg.num_layers = base.num_layers;
  cfg.hidden = base.hidden;
  cfg.heads = base.heads;
  cfg.vocab = base.vocab;
  cfg.seq_len = base.seq_len;
  LayerSpec dense;
  dense.hidden = base.hidden;
  cfg.layers.assign(base.num_layers, dense);
  return cfg;
}

LayerSpec moe_layer(std::size_t hidden, int experts, bool residual,
                    const MoeOptions& options) {
  LayerSpec l;
  l.kind = LayerKind::kMoE;
  l.hidden = hidden;
  l.experts = experts;
  l.residual = residual;
  l.gating = {options.k, experts, options.capacity_factor};
  return l;
}

}  // namespace

MoeModelConfig build_dense(const DenseConfig& base) {
  MoeModelConfig cfg = skeleton(base);
  cfg.validate();
  return cfg;
}

MoeModelConfig build_standard(const DenseConfig& base, int experts,
                              const MoeOptions& options) {
  if (base.num_layers % 2 != 0)
    throw ValidationError("build_standard: base layer count must be even");
  const std::vector<int> schedule(base.num_layers / 2, experts);
  return build_pr_moe(base, schedule, false, options);
}

MoeModelConfig build_pr_moe(const DenseConfig& base,
                            std::span<const int> expert_schedule,
                            bool residual, const MoeOptions& options) {
  if (base.num_layers % 2 != 0)
    throw ValidationError("build_pr_moe: base layer count must be even");
  const auto moe_positions = static_cast<std::size_t>(base.num_layers / 2);
  if (expert_schedule.size() != moe_positions)
    throw ValidationError("build_pr_moe: schedule has " +
                          std::to_string(expert_schedule.size()) +
                          " entries for " + std::to_string(moe_positions) +
                          " MoE layers");
  for (std::size_t i = 1; i < expert_schedule.size(); ++i)
    if (expert_schedule[i] < expert_schedule[i - 1])
      throw ValidationError("build_pr_moe: expert schedule decreases at MoE "
                            "layer " + std::to_string(i));

  MoeModelConfig cfg = skeleton(base);
  for (std::size_t i = 0; i < moe_positions; ++i)
    cfg.layers[2 * i + 1] =
        moe_layer(base.hidden, expert_schedule[i], residual, options);
  cfg.validate();
  return cfg;
}

std::vector<int> pyramid_schedule(int low_layers, int low_experts,
                                  int high_layers, int high_experts) {
  std::vector<int> s(static_cast<std::size_t>(low_layers), low_experts);
  s.insert(s.end(), static_cast<std::size_t>(high_layers), high_experts);
  return s;
}

std::uint64_t ffn_params(std::size_t hidden, int ffn_mult) {
  const std::uint64_t m = hidden;
  const std::uint64_t inner = m * static_cast<std::uint64_t>(ffn_mult);
  return 2 * m * inner + inner + m;
}

std::uint64_t attention_params(std::size_t hidden) {
  const std::uint64_t m = hidden;
  // Q, K, V and output projections with biases.
  return 4 * m * m + 4 * m;
}

std::uint64_t embedding_params(const MoeModelConfig& cfg) {
  const std::uint64_t m = cfg.hidden;
  return cfg.vocab * m + cfg.seq_len * m + 2 * m;
}

ParamCount count_layer_params(const LayerSpec& spec) {
  const std::uint64_t m = spec.hidden;
  const std::uint64_t ffn = ffn_params(spec.hidden, spec.ffn_mult);
  const std::uint64_t base = attention_params(spec.hidden) + 4 * m;  // + 2 LN
  ParamCount c;
  if (!spec.is_moe()) {
    c.non_expert = base + ffn;
    c.active_per_token = c.non_expert;
  } else {
    const auto experts = static_cast<std::uint64_t>(spec.experts);
    c.expert = experts * ffn;
    c.non_expert = base + m * experts + (spec.residual ? ffn : 0);
    c.active_per_token =
        c.non_expert + static_cast<std::uint64_t>(spec.gating.k) * ffn;
  }
  c.total = c.expert + c.non_expert;
  return c;
}

ParamCount count_params(const MoeModelConfig& cfg) {
  cfg.validate();
  ParamCount c;
  c.non_expert = embedding_params(cfg);
  c.active_per_token = c.non_expert;
  for (const LayerSpec& l : cfg.layers) {
    const ParamCount lc = count_layer_params(l);
    c.expert += lc.expert;
    c.non_expert += lc.non_expert;
    c.active_per_token += lc.active_per_token;
  }
  c.total = c.expert + c.non_expert;
  return c;
}

double count_flops_per_token(const MoeModelConfig& cfg) {
  return 2.0 * static_cast<double>(count_params(cfg).active_per_token);
}

// ---- forward ----

namespace {

Matrix random_matrix(std::size_t rows, std::size_t cols, std::mt19937_64& rng,
                     double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  Matrix m(rows, cols);
  for (double& x : m.data()) x = dist(rng);
  return m;
}

}  // namespace

FfnParams init_ffn(std::size_t hidden, int ffn_mult, std::mt19937_64& rng,
                   double stddev) {
  const std::size_t inner = hidden * static_cast<std::size_t>(ffn_mult);
  FfnParams p;
  p.w_in = random_matrix(hidden, inner, rng, stddev);
  p.b_in = random_matrix(1, inner, rng, stddev);
  p.w_out = random_matrix(inner, hidden, rng, stddev);
  p.b_out = random_matrix(1, hidden, rng, stddev);
  return p;
}

FfnParams zero_ffn(std::size_t hidden, int ffn_mult) {
  const std::size_t inner = hidden * static_cast<std::size_t>(ffn_mult);
  return {Matrix(hidden, inner), Matrix(1, inner), Matrix(inner, hidden),
          Matrix(1, hidden)};
}

LayerParams init_layer_params(const LayerSpec& spec, std::mt19937_64& rng,
                              double stddev) {
  LayerParams p;
  if (!spec.is_moe() || spec.residual)
    p.mlp = init_ffn(spec.hidden, spec.ffn_mult, rng, stddev);
  if (spec.is_moe()) {
    p.gate = random_matrix(spec.hidden, static_cast<std::size_t>(spec.experts),
                           rng, stddev);
    for (int e = 0; e < spec.experts; ++e)
      p.experts.push_back(init_ffn(spec.hidden, spec.ffn_mult, rng, stddev));
  }
  return p;
}

Matrix ffn_forward(const Matrix& x, const FfnParams& p) {
  const Matrix h = tensor::gelu(tensor::add_row_bias(tensor::matmul(x, p.w_in), p.b_in));
  return tensor::add_row_bias(tensor::matmul(h, p.w_out), p.b_out);
}

namespace {

void check_layer_input(const Matrix& x, const LayerSpec& spec,
                       const LayerParams& params) {
  if (x.cols() != spec.hidden)
    throw ShapeError("forward_layer: input has " + std::to_string(x.cols()) +
                     " columns, layer hidden is " +
                     std::to_string(spec.hidden));
  if (spec.is_moe() &&
      params.experts.size() != static_cast<std::size_t>(spec.experts))
    throw ShapeError("forward_layer: expert parameter count mismatch");
}

}  // namespace

LayerForward forward_layer(const Matrix& x, const LayerSpec& spec,
                           const LayerParams& params) {
  check_layer_input(x, spec, params);
  LayerForward out;
  if (!spec.is_moe()) {
    out.output = tensor::add(x, ffn_forward(x, params.mlp));
    return out;
  }
  const Matrix logits = tensor::matmul(x, params.gate);
  auto gates = routing::top_k_gate(logits, spec.gating);
  auto plan = routing::build_dispatch_plan(gates, spec.gating, x.rows());
  routing::ExpertBuffers buffers = routing::scatter_tokens(x, plan);
  for (std::size_t e = 0; e < buffers.buffers.size(); ++e)
    buffers.buffers[e] = ffn_forward(buffers.buffers[e], params.experts[e]);
  const Matrix moe = routing::combine_tokens(buffers, plan, x.rows());

  Matrix y = x;
  if (spec.residual) y = tensor::add(y, ffn_forward(x, params.mlp));
  out.output = tensor::add(y, moe);
  out.gates = std::move(gates);
  out.plan = std::move(plan);
  return out;
}

namespace {

FfnVars register_ffn(tensor::Tape& tape, const FfnParams& p) {
  return {tape.leaf(p.w_in), tape.leaf(p.b_in), tape.leaf(p.w_out),
          tape.leaf(p.b_out)};
}

FfnParams read_ffn(const tensor::Tape& tape, const FfnVars& v) {
  return {tape.value(v.w_in), tape.value(v.b_in), tape.value(v.w_out),
          tape.value(v.b_out)};
}

}  // namespace

LayerVars register_layer(tensor::Tape& tape, const LayerParams& params,
                         const LayerSpec& spec) {
  LayerVars v;
  if (!spec.is_moe() || spec.residual) v.mlp = register_ffn(tape, params.mlp);
  if (spec.is_moe()) {
    v.gate = tape.leaf(params.gate);
    for (const FfnParams& e : params.experts)
      v.experts.push_back(register_ffn(tape, e));
  }
  return v;
}

LayerParams read_layer(const tensor::Tape& tape, const LayerVars& vars,
                       const LayerSpec& spec) {
  LayerParams p;
  if (!spec.is_moe() || spec.residual) p.mlp = read_ffn(tape, vars.mlp);
  if (spec.is_moe()) {
    p.gate = tape.value(vars.gate);
    for (const FfnVars& e : vars.experts) p.experts.push_back(read_ffn(tape, e));
  }
  return p;
}

tensor::Var ffn_forward(tensor::Tape& tape, tensor::Var x, const FfnVars& p) {
  auto h = tape.gelu(tape.add_row_bias(tape.matmul(x, p.w_in), p.b_in));
  return tape.add_row_bias(tape.matmul(h, p.w_out), p.b_out);
}

tensor::Var forward_layer(tensor::Tape& tape, tensor::Var x,
                          const LayerSpec& spec, const LayerVars& vars) {
  const std::size_t tokens = tape.value(x).rows();
  if (tape.value(x).cols() != spec.hidden)
    throw ShapeError("forward_layer: input width does not match layer");
  if (!spec.is_moe()) return tape.add(x, ffn_forward(tape, x, vars.mlp));

  auto logits = tape.matmul(x, vars.gate);
  auto probs = tape.softmax_rows(logits);
  // Routing decisions are piecewise constant in the parameters; gradients
  // reach the gate through the selected probabilities.
  const auto gates = routing::top_k_gate(tape.value(logits), spec.gating);
  const auto plan = routing::build_dispatch_plan(gates, spec.gating, tokens);

  tensor::Var y = x;
  if (spec.residual) y = tape.add(y, ffn_forward(tape, x, vars.mlp));
  for (int e = 0; e < spec.experts; ++e) {
    std::vector<std::int64_t> token_ids;
    for (std::size_t s = 0; s < tokens; ++s)
      for (const auto& a : plan.token(s))
        if (a.expert == e && !a.dropped())
          token_ids.push_back(static_cast<std::int64_t>(s));
    if (token_ids.empty()) continue;
    const std::vector<std::int64_t> expert_col(token_ids.size(), e);
    auto in = tape.gather_rows(x, token_ids);
    auto out = ffn_forward(tape, in, vars.experts[static_cast<std::size_t>(e)]);
    auto weights = tape.pick(probs, token_ids, expert_col);
    auto scaled = tape.scale_rows(out, weights);
    y = tape.add(y, tape.scatter_add_rows(scaled, token_ids, tokens));
  }
  return y;
}

double load_balance_loss(const routing::DispatchPlan& plan,
                         const Matrix& probs) {
  const auto E = static_cast<std::size_t>(plan.num_experts);
  if (probs.rows() != plan.tokens || probs.cols() != E)
    throw ShapeError("load_balance_loss: probs shape does not match plan");
  if (plan.tokens == 0) return 0.0;
  std::vector<double> fraction(E, 0.0);
  for (const auto& a : plan.table) fraction[static_cast<std::size_t>(a.expert)] += 1.0;
  const double decisions = static_cast<double>(plan.table.size());
  double loss = 0.0;
  for (std::size_t e = 0; e < E; ++e) {
    double mean_prob = 0.0;
    for (std::size_t s = 0; s < probs.rows(); ++s) mean_prob += probs(s, e);
    mean_prob /= static_cast<double>(probs.rows());
    loss += (fraction[e] / decisions) * mean_prob;
  }
  return static_cast<double>(E) * loss;
}

}  // namespace dsmoe::arch
