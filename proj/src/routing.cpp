#include "dsmoe/routing.h"

#include <algorithm>
#include <bit>
#include <cmath>
#include <string>

#include "dsmoe/errors.h"

namespace dsmoe::routing {

void GatingConfig::validate() const {
  if (k != 1 && k != 2)
    throw ValidationError("GatingConfig: k must be 1 or 2, got " +
                          std::to_string(k));
  if (num_experts < 1)
    throw ValidationError("GatingConfig: num_experts must be >= 1");
  if (!(capacity_factor > 0.0) || !std::isfinite(capacity_factor))
    throw ValidationError("GatingConfig: capacity_factor must be positive");
  if (k > num_experts)
    throw ValidationError("GatingConfig: k exceeds num_experts");
}

std::size_t expert_capacity(const GatingConfig& cfg, std::size_t tokens) {
  const double raw = cfg.capacity_factor * static_cast<double>(tokens) *
                     cfg.k / cfg.num_experts;
  // Products such as 0.1 * 30 land a few ulps above the integer.
  const double rounded = std::round(raw);
  if (std::abs(raw - rounded) <= 1e-9 * std::max(1.0, raw))
    return static_cast<std::size_t>(rounded);
  return static_cast<std::size_t>(std::ceil(raw));
}

TopKGates top_k_gate(const Matrix& logits, const GatingConfig& cfg) {
  cfg.validate();
  if (logits.cols() != static_cast<std::size_t>(cfg.num_experts)) {
    throw ShapeError("top_k_gate: logits have " +
                     std::to_string(logits.cols()) + " columns for " +
                     std::to_string(cfg.num_experts) + " experts");
  }
  TopKGates g;
  g.tokens = logits.rows();
  g.k = cfg.k;
  g.num_experts = cfg.num_experts;
  g.full_probs = tensor::softmax_rows(logits);
  g.experts.reserve(g.tokens * cfg.k);
  g.probs.reserve(g.tokens * cfg.k);
  for (std::size_t s = 0; s < g.tokens; ++s) {
    const auto row = logits.row(s);
    std::int64_t first = -1;
    for (int j = 0; j < cfg.k; ++j) {
      std::int64_t best = -1;
      for (std::size_t e = 0; e < row.size(); ++e) {
        const auto ei = static_cast<std::int64_t>(e);
        if (ei == first) continue;
        // Strict comparison keeps the lowest index among equal logits.
        if (best < 0 || row[e] > row[static_cast<std::size_t>(best)]) best = ei;
      }
      g.experts.push_back(best);
      g.probs.push_back(g.full_probs(s, static_cast<std::size_t>(best)));
      first = best;
    }
  }
  return g;
}

std::vector<std::int64_t> exclusive_scan_blelloch(
    std::span<const std::int64_t> values) {
  const std::size_t n = values.size();
  if (n == 0) return {};
  const std::size_t padded = std::bit_ceil(n);
  std::vector<std::int64_t> tree(padded, 0);
  std::copy(values.begin(), values.end(), tree.begin());

  // Up-sweep: each level's updates touch disjoint elements, so the inner
  // loop is the parallel step of the work-depth schedule.
  for (std::size_t stride = 1; stride < padded; stride *= 2) {
    for (std::size_t i = 2 * stride - 1; i < padded; i += 2 * stride)
      tree[i] += tree[i - stride];
  }
  tree[padded - 1] = 0;
  // Down-sweep.
  for (std::size_t stride = padded / 2; stride >= 1; stride /= 2) {
    for (std::size_t i = 2 * stride - 1; i < padded; i += 2 * stride) {
      const std::int64_t left = tree[i - stride];
      tree[i - stride] = tree[i];
      tree[i] += left;
    }
  }
  tree.resize(n);
  return tree;
}

DispatchPlan build_dispatch_plan(const TopKGates& gates,
                                 const GatingConfig& cfg, std::size_t tokens) {
  cfg.validate();
  if (gates.tokens != tokens || gates.k != cfg.k ||
      gates.num_experts != cfg.num_experts) {
    throw ShapeError("build_dispatch_plan: gates do not match config/tokens");
  }
  DispatchPlan plan;
  plan.tokens = tokens;
  plan.k = cfg.k;
  plan.num_experts = cfg.num_experts;
  plan.capacity = expert_capacity(cfg, tokens);
  plan.table.resize(tokens * cfg.k);
  plan.expert_load.assign(cfg.num_experts, 0);

  for (std::size_t s = 0; s < tokens; ++s)
    for (int j = 0; j < cfg.k; ++j) {
      auto& a = plan.table[s * cfg.k + j];
      a.expert = gates.expert(s, j);
      a.prob = gates.prob(s, j);
      a.slot = kDropped;
    }

  // Per expert: mask over tokens, exclusive scan gives each token's position
  // in that expert's queue (ascending token order).
  std::vector<std::int64_t> mask(tokens);
  std::vector<std::int64_t> choice(tokens);
  for (int e = 0; e < cfg.num_experts; ++e) {
    for (std::size_t s = 0; s < tokens; ++s) {
      mask[s] = 0;
      choice[s] = -1;
      for (int j = 0; j < cfg.k; ++j)
        if (gates.expert(s, j) == e) {
          mask[s] = 1;
          choice[s] = j;
        }
    }
    const auto position = exclusive_scan_blelloch(mask);
    std::int64_t kept = 0;
    for (std::size_t s = 0; s < tokens; ++s) {
      if (!mask[s]) continue;
      if (static_cast<std::size_t>(position[s]) < plan.capacity) {
        plan.table[s * cfg.k + static_cast<std::size_t>(choice[s])].slot =
            position[s];
        ++kept;
      }
    }
    plan.expert_load[e] = kept;
  }
  return plan;
}

namespace {

void check_batch(const Matrix& batch, const DispatchPlan& plan) {
  if (batch.rows() != plan.tokens) {
    throw ShapeError("scatter_tokens: batch has " +
                     std::to_string(batch.rows()) + " tokens, plan has " +
                     std::to_string(plan.tokens));
  }
}

ExpertBuffers empty_buffers(int num_experts, std::size_t capacity,
                            std::size_t hidden) {
  ExpertBuffers out;
  out.buffers.assign(num_experts, Matrix(capacity, hidden));
  out.slot_token.assign(num_experts,
                        std::vector<std::int64_t>(capacity, kDropped));
  return out;
}

}  // namespace

ExpertBuffers scatter_tokens(const Matrix& batch, const DispatchPlan& plan,
                             OpCounter* counter) {
  check_batch(batch, plan);
  const std::size_t hidden = batch.cols();
  const std::size_t cap = plan.capacity;
  ExpertBuffers out = empty_buffers(plan.num_experts, cap, hidden);
  std::uint64_t ops = 0;
  for (std::size_t s = 0; s < plan.tokens; ++s) {
    const auto x = batch.row(s);
    for (const Assignment& a : plan.token(s)) {
      Matrix& buf = out.buffers[static_cast<std::size_t>(a.expert)];
      for (std::size_t c = 0; c < cap; ++c) {
        const double w =
            static_cast<std::int64_t>(c) == a.slot ? 1.0 : 0.0;
        auto dst = buf.row(c);
        for (std::size_t m = 0; m < hidden; ++m) dst[m] += w * x[m];
      }
      ops += cap * hidden;
      if (!a.dropped())
        out.slot_token[static_cast<std::size_t>(a.expert)]
                      [static_cast<std::size_t>(a.slot)] =
            static_cast<std::int64_t>(s);
    }
  }
  if (counter) counter->multiply_adds += ops;
  return out;
}

Matrix combine_tokens(const ExpertBuffers& outputs, const DispatchPlan& plan,
                      std::size_t tokens, OpCounter* counter) {
  if (tokens != plan.tokens)
    throw ShapeError("combine_tokens: token count does not match plan");
  if (outputs.buffers.size() != static_cast<std::size_t>(plan.num_experts))
    throw ShapeError("combine_tokens: expert count does not match plan");
  std::size_t hidden = 0;
  for (const Matrix& b : outputs.buffers) {
    if (b.rows() != plan.capacity)
      throw ShapeError("combine_tokens: buffer rows != expert capacity");
    hidden = b.cols();
  }
  for (const Matrix& b : outputs.buffers)
    if (b.cols() != hidden)
      throw ShapeError("combine_tokens: ragged expert buffers");

  const std::size_t cap = plan.capacity;
  Matrix out(tokens, hidden);
  std::uint64_t ops = 0;
  for (std::size_t s = 0; s < tokens; ++s) {
    auto dst = out.row(s);
    for (const Assignment& a : plan.token(s)) {
      const Matrix& buf = outputs.buffers[static_cast<std::size_t>(a.expert)];
      for (std::size_t c = 0; c < cap; ++c) {
        const double w =
            static_cast<std::int64_t>(c) == a.slot ? a.prob : 0.0;
        const auto src = buf.row(c);
        for (std::size_t m = 0; m < hidden; ++m) dst[m] += w * src[m];
      }
      ops += cap * hidden;
    }
  }
  if (counter) counter->multiply_adds += ops;
  return out;
}

namespace {

// Slot position of each (token, expert) pair from a sequential cumsum over
// the combined one-hot mask; kDropped beyond capacity or when unselected.
std::vector<std::int64_t> oracle_locations(const TopKGates& gates,
                                           std::size_t capacity) {
  const std::size_t S = gates.tokens;
  const std::size_t E = static_cast<std::size_t>(gates.num_experts);
  std::vector<std::int64_t> mask(S * E, 0);
  for (std::size_t s = 0; s < S; ++s)
    for (int j = 0; j < gates.k; ++j)
      mask[s * E + static_cast<std::size_t>(gates.expert(s, j))] = 1;
  std::vector<std::int64_t> loc(S * E, kDropped);
  std::vector<std::int64_t> running(E, 0);
  for (std::size_t s = 0; s < S; ++s)
    for (std::size_t e = 0; e < E; ++e) {
      if (!mask[s * E + e]) continue;
      if (static_cast<std::size_t>(running[e]) < capacity)
        loc[s * E + e] = running[e];
      ++running[e];
    }
  return loc;
}

// One-hot dispatch tensor for choice j, flattened [s][e][c].
std::vector<double> dispatch_tensor(const TopKGates& gates, int j,
                                    const std::vector<std::int64_t>& loc,
                                    std::size_t capacity) {
  const std::size_t S = gates.tokens;
  const std::size_t E = static_cast<std::size_t>(gates.num_experts);
  std::vector<double> d(S * E * capacity, 0.0);
  for (std::size_t s = 0; s < S; ++s) {
    const auto e = static_cast<std::size_t>(gates.expert(s, j));
    const auto c = loc[s * E + e];
    if (c != kDropped) d[(s * E + e) * capacity + static_cast<std::size_t>(c)] = 1.0;
  }
  return d;
}

}  // namespace

ExpertBuffers sparse_dispatch_oracle(const Matrix& batch,
                                     const TopKGates& gates,
                                     const GatingConfig& cfg,
                                     OpCounter* counter) {
  cfg.validate();
  if (batch.rows() != gates.tokens)
    throw ShapeError("sparse_dispatch_oracle: batch/gates token mismatch");
  const std::size_t S = gates.tokens;
  const std::size_t E = static_cast<std::size_t>(cfg.num_experts);
  const std::size_t M = batch.cols();
  const std::size_t cap = expert_capacity(cfg, S);
  const auto loc = oracle_locations(gates, cap);

  ExpertBuffers out = empty_buffers(cfg.num_experts, cap, M);
  std::uint64_t ops = 0;
  for (int j = 0; j < cfg.k; ++j) {
    const auto d = dispatch_tensor(gates, j, loc, cap);
    // buffers[e][c][m] += sum_s d[s][e][c] * batch[s][m]
    for (std::size_t s = 0; s < S; ++s) {
      const auto x = batch.row(s);
      for (std::size_t e = 0; e < E; ++e)
        for (std::size_t c = 0; c < cap; ++c) {
          const double w = d[(s * E + e) * cap + c];
          auto dst = out.buffers[e].row(c);
          for (std::size_t m = 0; m < M; ++m) dst[m] += w * x[m];
          if (w != 0.0) out.slot_token[e][c] = static_cast<std::int64_t>(s);
        }
    }
    ops += S * E * cap * M;
  }
  if (counter) counter->multiply_adds += ops;
  return out;
}

Matrix sparse_combine_oracle(const ExpertBuffers& outputs,
                             const TopKGates& gates, const GatingConfig& cfg,
                             OpCounter* counter) {
  cfg.validate();
  const std::size_t S = gates.tokens;
  const std::size_t E = static_cast<std::size_t>(cfg.num_experts);
  const std::size_t cap = expert_capacity(cfg, S);
  if (outputs.buffers.size() != E)
    throw ShapeError("sparse_combine_oracle: expert count mismatch");
  const std::size_t M = E ? outputs.buffers.front().cols() : 0;
  for (const Matrix& b : outputs.buffers)
    if (b.rows() != cap || b.cols() != M)
      throw ShapeError("sparse_combine_oracle: buffer shape mismatch");
  const auto loc = oracle_locations(gates, cap);

  Matrix out(S, M);
  std::uint64_t ops = 0;
  for (int j = 0; j < cfg.k; ++j) {
    auto weights = dispatch_tensor(gates, j, loc, cap);
    for (std::size_t s = 0; s < S; ++s)
      for (std::size_t i = 0; i < E * cap; ++i)
        weights[s * E * cap + i] *= gates.prob(s, j);
    for (std::size_t s = 0; s < S; ++s) {
      auto dst = out.row(s);
      for (std::size_t e = 0; e < E; ++e)
        for (std::size_t c = 0; c < cap; ++c) {
          const double w = weights[(s * E + e) * cap + c];
          const auto src = outputs.buffers[e].row(c);
          for (std::size_t m = 0; m < M; ++m) dst[m] += w * src[m];
        }
    }
    ops += S * E * cap * M;
  }
  if (counter) counter->multiply_adds += ops;
  return out;
}

}  // namespace dsmoe::routing
