// Acceptance suite: one PASS/FAIL line per criterion, exit 1 on any failure.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <iomanip>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "dsmoe/arch.h"
#include "dsmoe/comm.h"
#include "dsmoe/distill.h"
#include "dsmoe/parallel.h"
#include "dsmoe/routing.h"
#include "presets.h"
#include "test_util.h"

namespace {

using namespace dsmoe;
using tensor::Matrix;
using testing::numeric_gradient;
using testing::random_matrix;
using testing::relative_error;

// Pinned tolerances and budgets.
constexpr double kParamTol = 0.05;
constexpr double kParamBudgetS = 1.0;
constexpr double kFlopRatioLo = 4.5, kFlopRatioHi = 5.5;
constexpr double kStudentTol = 0.10;
constexpr int kRoutingInstances = 1000;
constexpr double kRoutingDiff = 1e-9;
constexpr double kOpRatioTol = 0.20;
constexpr double kRoutingBudgetS = 60.0;
constexpr double kScanBudgetS = 5.0;
constexpr double kCommBudgetS = 60.0;
constexpr int kGradientPoints = 50;
constexpr double kGradientTol = 1e-4;
constexpr double kSingleExpertTol = 1e-12;
constexpr int kKdSeeds = 10;
constexpr int kKdWinsNeeded = 6;
constexpr double kKdShrink = 0.8, kKdNoise = 0.5;

struct Outcome {
  bool pass = true;
  std::ostringstream detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      if (pass) detail << "failed: ";
      else detail << "; ";
      detail << what;
      pass = false;
    }
  }
};

double seconds_since(std::chrono::steady_clock::time_point t) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t).count();
}

double rel(double got, double want) { return std::abs(got - want) / want; }

const arch::MoeModelConfig& preset(const char* name) {
  return cli::find_preset(name)->config;
}

// ---- 1 ----
void parameter_counts(Outcome& o) {
  const auto start = std::chrono::steady_clock::now();
  const std::vector<std::pair<const char*, double>> want{
      {"dense-350M", 350e6},         {"dense-1.3B", 1.3e9},
      {"dense-6.7B", 6.7e9},         {"350M+MoE-128", 13e9},
      {"1.3B+MoE-128", 52e9},        {"350M+PR-MoE-32/64", 4e9},
      {"1.3B+PR-MoE-64/128", 31e9}};
  double worst = 0.0;
  for (const auto& [name, size] : want) {
    const double got = static_cast<double>(arch::count_params(preset(name)).total);
    worst = std::max(worst, rel(got, size));
    o.require(rel(got, size) <= kParamTol, std::string(name) + " off by " + std::to_string(rel(got, size)));
  }
  const double t = seconds_since(start);
  o.require(t < kParamBudgetS, "runtime over budget");
  if (o.pass) o.detail << "7 presets, worst rel err " << worst << ", " << t << " s";
}

// ---- 2 ----
void flop_ratio(Outcome& o) {
  const double ratio = arch::count_flops_per_token(preset("dense-6.7B")) /
                       arch::count_flops_per_token(preset("1.3B+MoE-128"));
  o.require(ratio >= kFlopRatioLo && ratio <= kFlopRatioHi, "ratio " + std::to_string(ratio));
  if (o.pass) o.detail << "6.7B dense / 1.3B+MoE-128 = " << ratio;
}

// ---- 3 ----
void student_sizes(Outcome& o) {
  const auto small = distill::derive_student(preset("350M+PR-MoE-32/64"), 21);
  const auto large = distill::derive_student(preset("1.3B+PR-MoE-64/128"), 21);
  const double s = static_cast<double>(arch::count_params(small.student).total);
  const double l = static_cast<double>(arch::count_params(large.student).total);
  o.require(rel(s, 3.5e9) <= kStudentTol, "small student " + std::to_string(s));
  o.require(rel(l, 27e9) <= kStudentTol, "large student " + std::to_string(l));
  if (o.pass) o.detail << "students " << s / 1e9 << "B and " << l / 1e9 << "B";
}

// ---- 4 ----
void routing_equivalence(Outcome& o) {
  const auto start = std::chrono::steady_clock::now();
  std::mt19937_64 rng(4);
  std::uniform_int_distribution<std::size_t> tokens(1, 256), hidden(1, 16);
  std::uniform_int_distribution<int> experts(1, 16), coin(0, 1), cf_pick(0, 2);
  const double cfs[] = {0.5, 1.0, 2.0};
  double worst_diff = 0.0, worst_ratio_err = 0.0;
  for (int i = 0; i < kRoutingInstances; ++i) {
    const int e = experts(rng);
    const int k = e == 1 ? 1 : 1 + coin(rng);
    const routing::GatingConfig cfg{k, e, cfs[cf_pick(rng)]};
    const std::size_t s = tokens(rng), m = hidden(rng);
    const Matrix x = random_matrix(s, m, rng);
    const auto gates = routing::top_k_gate(random_matrix(s, static_cast<std::size_t>(e), rng), cfg);

    routing::OpCounter dense_ops, oracle_ops;
    const auto plan = routing::build_dispatch_plan(gates, cfg, s);
    const auto dense = routing::scatter_tokens(x, plan, &dense_ops);
    const auto oracle = routing::sparse_dispatch_oracle(x, gates, cfg, &oracle_ops);
    double diff = 0.0;
    for (std::size_t b = 0; b < dense.buffers.size(); ++b)
      diff = std::max(diff, tensor::max_abs_diff(dense.buffers[b], oracle.buffers[b]));
    diff = std::max(diff, tensor::max_abs_diff(routing::combine_tokens(dense, plan, s, &dense_ops),
                                               routing::sparse_combine_oracle(oracle, gates, cfg,
                                                                              &oracle_ops)));
    worst_diff = std::max(worst_diff, diff);
    const double ratio = static_cast<double>(oracle_ops.multiply_adds) /
                         static_cast<double>(dense_ops.multiply_adds);
    worst_ratio_err = std::max(worst_ratio_err, std::abs(ratio - e) / e);
  }
  const double t = seconds_since(start);
  o.require(worst_diff <= kRoutingDiff, "max diff " + std::to_string(worst_diff));
  o.require(worst_ratio_err <= kOpRatioTol, "op ratio error " + std::to_string(worst_ratio_err));
  o.require(t < kRoutingBudgetS, "runtime over budget");
  if (o.pass)
    o.detail << kRoutingInstances << " instances, max diff " << worst_diff
             << ", worst op-ratio deviation from E " << worst_ratio_err << ", " << t << " s";
}

// ---- 5 ----
std::vector<std::int64_t> sequential_scan(const std::vector<std::int64_t>& v) {
  std::vector<std::int64_t> out(v.size());
  std::int64_t acc = 0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[i] = acc;
    acc += v[i];
  }
  return out;
}

void scan(Outcome& o) {
  const auto start = std::chrono::steady_clock::now();
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<std::int64_t> value(-1000, 1000);
  std::uniform_int_distribution<std::size_t> long_len(1026, 200000);
  int mismatches = 0;
  auto check = [&](std::size_t n) {
    std::vector<std::int64_t> v(n);
    for (auto& x : v) x = value(rng);
    mismatches += routing::exclusive_scan_blelloch(v) != sequential_scan(v);
  };
  for (std::size_t n = 0; n <= 1025; ++n) check(n);
  for (int i = 0; i < 100; ++i) check(long_len(rng));
  const double t = seconds_since(start);
  o.require(mismatches == 0, std::to_string(mismatches) + " mismatching vectors");
  o.require(t < kScanBudgetS, "runtime over budget");
  if (o.pass) o.detail << "1026 lengths and 100 long vectors match, " << t << " s";
}

// ---- 6 ----
parallel::ParallelPlan tensor_plan(int p, int g, int l) {
  parallel::ParallelPlan plan;
  plan.cluster.gpus_per_node = g;
  plan.cluster.nodes = p / g;
  plan.tensor_slice = l;
  plan.data_parallel = p / l;
  parallel::assign_devices(plan);
  return plan;
}

bool same_recv(const comm::CommResult& a, const comm::CommResult& b) {
  for (std::size_t i = 0; i < a.states.size(); ++i)
    if (a.states[i].recv != b.states[i].recv) return false;
  return a.states.size() == b.states.size();
}

void comm_schedules(Outcome& o) {
  const auto start = std::chrono::steady_clock::now();
  const comm::CostModel unit{1.0, 1.0};
  int combos = 0;
  std::uint64_t seed = 600;
  for (int p = 1; p <= 64; ++p)
    for (int g = 1; g <= p; ++g) {
      if (p % g) continue;
      const auto topo = tensor_plan(p, g, 1).cluster;
      const auto states = comm::random_states(p, g, 3, 64, ++seed);
      const auto flat = comm::flat_all_to_all(states, unit);
      const auto hier = comm::hierarchical_all_to_all(states, topo, unit);
      const std::string tag = " p=" + std::to_string(p) + " G=" + std::to_string(g);
      o.require(same_recv(hier, flat), "hierarchical recv differs" + tag);
      o.require(hier.trace.hops == g + p / g, "hierarchical hops" + tag);
      o.require(flat.trace.volume_bytes == 0 ||
                    static_cast<double>(hier.trace.volume_bytes) /
                            static_cast<double>(flat.trace.volume_bytes) == 2.0,
                "volume ratio" + tag);
      for (int l = 1; l <= g; ++l) {
        if (g % l) continue;
        ++combos;
        const auto plan = tensor_plan(p, g, l);
        const std::string ltag = tag + " L=" + std::to_string(l);
        const auto e2t = comm::replicated_states(p, g, l, comm::Direction::kExpertToTensor, 3, 64, ++seed);
        const auto co = comm::coordinated_all_to_all(e2t, plan, unit);
        o.require(same_recv(co, comm::flat_all_to_all(e2t, unit)), "coordinated recv differs" + ltag);
        o.require(co.trace.hops == p / l + l, "coordinated hops" + ltag);
        const auto t2e = comm::replicated_states(p, g, l, comm::Direction::kTensorToExpert, 3, 64, ++seed);
        const auto back = comm::coordinated_all_to_all(t2e, plan, unit, comm::Direction::kTensorToExpert);
        o.require(same_recv(back, comm::flat_all_to_all(comm::leaders_only(t2e, l), unit)),
                  "tensor-to-expert recv differs" + ltag);
      }
    }

  const comm::CostModel model{3e-6, 4e-4};
  const auto flat128 = comm::flat_all_to_all(comm::uniform_states(128, 8, 256), model);
  const auto co128 = comm::coordinated_all_to_all(
      comm::replicated_states(128, 8, 8, comm::Direction::kExpertToTensor, 1, 256, 7),
      tensor_plan(128, 8, 8), model);
  const double flat_term = flat128.trace.modeled_latency_s;
  const double co_term = co128.trace.all_to_all_latency();
  o.require(std::abs(flat_term - (128 * model.c1 + model.c2)) <= 1e-12, "flat latency term");
  o.require(std::abs(co_term - (16 * model.c1 + model.c2)) <= 1e-12, "coordinated latency term");
  const double t = seconds_since(start);
  o.require(t < kCommBudgetS, "runtime over budget");
  if (o.pass)
    o.detail << combos << " (p,G,L) combos equal to flat; at p=128, L=8 the a2a term is"
             << " 16*C1 + C2 = " << co_term << " against flat 128*C1 + C2 = " << flat_term
             << ", " << t << " s";
}

// ---- 7 ----
void gradients(Outcome& o) {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> alpha(0.0, 2.0), temp(0.5, 3.0);
  double worst = 0.0;
  for (int trial = 0; trial < kGradientPoints; ++trial) {
    Matrix s = random_matrix(5, 6, rng, 1.5);
    Matrix t = random_matrix(5, 6, rng, 1.5);
    std::vector<std::int64_t> y(5);
    for (auto& v : y) v = static_cast<std::int64_t>(rng() % 6);
    const distill::KDConfig cfg{alpha(rng), kGradientPoints / 2, temp(rng)};
    tensor::Tape tape;
    const auto vs = tape.leaf(s);
    const auto vt = tape.leaf(t);
    tape.backward(distill::kd_objective(tape, vs, vt, y, cfg, trial));
    auto value = [&] { return distill::kd_objective_value(s, t, y, cfg, trial).total; };
    worst = std::max({worst, relative_error(tape.grad(vs), numeric_gradient(&s, value)),
                      relative_error(tape.grad(vt), numeric_gradient(&t, value))});

    const double ce = tensor::cross_entropy(s, y);
    auto tape_total = [&](const distill::KDConfig& c, std::int64_t step) {
      tensor::Tape tp;
      return tp.value(distill::kd_objective(tp, tp.leaf(s), tp.constant(t), y, c, step))(0, 0);
    };
    o.require(tape_total({0.0, distill::kNoBoundary, cfg.temperature}, 0) == ce, "alpha=0 not CE");
    o.require(tape_total(cfg, cfg.stage_boundary + trial) == ce, "post-boundary not CE");
  }

  const distill::ToyDims dims{8, 6, 3, 2};
  const auto task = distill::SyntheticTask::make(dims, 71);
  const auto teacher = distill::make_toy_teacher(task, kKdShrink, kKdNoise, 72);
  for (int trial = 0; trial < kGradientPoints; ++trial) {
    auto model = distill::make_toy_student(dims, 700 + static_cast<std::uint64_t>(trial), 0.4);
    const auto batch = task.sample(12, rng);
    const Matrix t = teacher.logits(batch.x);
    const distill::KDConfig cfg{alpha(rng), trial % 2 ? distill::kNoBoundary : 0, temp(rng)};
    tensor::Tape tape;
    const auto vars = distill::register_toy(tape, model);
    const auto logits = distill::toy_logits(tape, tape.constant(batch.x), model, vars);
    tape.backward(distill::kd_objective(tape, logits, tape.constant(t), batch.labels, cfg, 0));
    auto value = [&] {
      return distill::kd_objective_value(model.logits(batch.x), t, batch.labels, cfg, 0).total;
    };
    const auto params = distill::toy_parameters(model);
    const auto handles = distill::toy_parameter_vars(vars);
    for (std::size_t i = 0; i < params.size(); ++i)
      worst = std::max(worst, relative_error(tape.grad(handles[i]), numeric_gradient(params[i], value)));
  }
  o.require(worst < kGradientTol, "worst rel err " + std::to_string(worst));
  if (o.pass)
    o.detail << 2 * kGradientPoints << " points, worst rel err " << worst
             << "; CE reductions bitwise";
}

// ---- 8 ----
arch::LayerSpec toy_spec(bool moe, int experts, bool residual, double cf, int k) {
  arch::LayerSpec l;
  l.kind = moe ? arch::LayerKind::kMoE : arch::LayerKind::kDense;
  l.hidden = 8;
  l.ffn_mult = 2;
  l.experts = moe ? experts : 0;
  l.residual = residual;
  if (moe) l.gating = {k, experts, cf};
  return l;
}

void reductions(Outcome& o) {
  for (const arch::DenseConfig base :
       {arch::DenseConfig{24, 1024, 16, 50257, 2048}, arch::DenseConfig{24, 2048, 16, 50257, 2048}})
    for (int e : {1, 8, 64, 128})
      for (int k : {1, 2}) {
        if (k > e) continue;
        const arch::MoeOptions opts{k, 1.25};
        const std::vector<int> uniform(12, e);
        o.require(arch::build_pr_moe(base, uniform, false, opts) == arch::build_standard(base, e, opts),
                  "uniform pyramid differs from standard at E=" + std::to_string(e));
      }

  std::mt19937_64 rng(8);
  double single = 0.0, residual = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix x = random_matrix(16, 8, rng);
    const auto moe = toy_spec(true, 1, false, 100.0, 1);
    const auto params = arch::init_layer_params(moe, rng);
    arch::LayerParams dense_params;
    dense_params.mlp = params.experts[0];
    single = std::max(single, tensor::max_abs_diff(
                                  arch::forward_layer(x, moe, params).output,
                                  arch::forward_layer(x, toy_spec(false, 0, false, 1.0, 1), dense_params).output));

    const int k = 1 + trial % 2;
    const auto res_spec = toy_spec(true, 4, true, 1.0, k);
    const auto res_params = arch::init_layer_params(res_spec, rng);
    const auto r = arch::forward_layer(x, res_spec, res_params).output;
    const auto s = arch::forward_layer(x, toy_spec(true, 4, false, 1.0, k), res_params).output;
    residual = std::max(residual,
                        tensor::max_abs_diff(r, tensor::add(s, arch::ffn_forward(x, res_params.mlp))));
  }
  o.require(single <= kSingleExpertTol, "single expert vs dense " + std::to_string(single));
  o.require(residual <= kSingleExpertTol, "residual decomposition " + std::to_string(residual));
  if (o.pass)
    o.detail << "uniform pyramid == standard; single-expert diff " << single
             << "; residual diff " << residual;
}

// ---- 9 ----
void planner(Outcome& o) {
  std::vector<int> schedule = arch::pyramid_schedule(4, 32, 4, 64);
  schedule.insert(schedule.end(), 4, 128);
  const auto cfg = arch::build_pr_moe({24, 2048, 16, 50257, 2048}, schedule, true);
  parallel::ClusterTopology cluster;
  cluster.nodes = 16;
  cluster.gpus_per_node = 8;
  const auto p = parallel::plan(cfg, cluster);
  for (const auto& lp : p.layers) {
    o.require(lp.expert_parallel == lp.experts, "EP != E at layer " + std::to_string(lp.layer));
    o.require(lp.expert_data_parallel == 128 / lp.experts, "expert DP at layer " + std::to_string(lp.layer));
  }
  for (const auto& d : p.devices)
    for (const auto& shards : d.shards)
      o.require(shards.size() == 1, "device " + std::to_string(d.rank) + " holds != 1 expert");
  const auto violations = parallel::validate(p);
  o.require(violations.empty(), std::to_string(violations.size()) + " violations");
  if (o.pass) o.detail << "EP {32,64,128} with expert-DP {4,2,1}, one expert per device, 0 violations";
}

// ---- 10 ----
void staged_kd(Outcome& o) {
  const distill::ToyDims dims;
  distill::TrainConfig tc;
  int wins = 0;
  std::ostringstream margins;
  for (int s = 0; s < kKdSeeds; ++s) {
    const auto task = distill::SyntheticTask::make(dims, 1000 + s);
    const auto teacher = distill::make_toy_teacher(task, kKdShrink, kKdNoise, 2000 + s);
    const auto student = distill::make_toy_student(dims, 3000 + s);
    tc.seed = 4000 + s;
    const auto staged = distill::train_toy(student, teacher, task, {1.0, tc.steps / 2, 1.0}, tc);
    const auto full = distill::train_toy(student, teacher, task, {1.0, distill::kNoBoundary, 1.0}, tc);
    wins += staged.heldout_ce <= full.heldout_ce;
    margins << (s ? " " : "") << std::setprecision(3) << full.heldout_ce - staged.heldout_ce;
  }
  o.require(wins >= kKdWinsNeeded, std::to_string(wins) + "/10 wins");
  o.detail << (o.pass ? "" : " ") << "staged <= full in " << wins << "/" << kKdSeeds
           << " seeds (full - staged: " << margins.str() << ")";
}

}  // namespace

int main() {
  const std::vector<std::pair<const char*, std::function<void(Outcome&)>>> criteria{
      {"parameter counts", parameter_counts},
      {"active-compute ratio", flop_ratio},
      {"student sizes", student_sizes},
      {"routing oracle equivalence", routing_equivalence},
      {"scan correctness", scan},
      {"communication schedules", comm_schedules},
      {"gradient correctness", gradients},
      {"architecture reductions", reductions},
      {"planner", planner},
      {"staged distillation", staged_kd}};
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome o;
    try {
      criteria[i].second(o);
    } catch (const std::exception& e) {
      o.require(false, std::string("exception: ") + e.what());
    }
    failed += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << "  " << std::setw(2) << i + 1 << "  "
              << criteria[i].first << ": " << o.detail.str() << std::endl;
  }
  std::cout << (criteria.size() - failed) << "/" << criteria.size() << " criteria passed\n";
  return failed == 0 ? 0 : 1;
}
