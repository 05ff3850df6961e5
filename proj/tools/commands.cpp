#include "commands.h"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <limits>
#include <random>
#include <sstream>
#include <tuple>

#include "CLI11.hpp"
#include "dsmoe/errors.h"
#include "dsmoe/routing.h"
#include "dsmoe/serialize.h"
#include "presets.h"

namespace dsmoe::cli {

namespace {

std::string join_violations(const std::vector<std::string>& v) {
  std::string s = "plan has " + std::to_string(v.size()) + " violation(s)";
  for (const auto& line : v) s += "\n  " + line;
  return s;
}

void set_precision(std::ostream& out) {
  out << std::setprecision(std::numeric_limits<double>::max_digits10);
}

// Model from --preset, then the config's model section, else the fallback.
ModelSection resolve_model(const CommandContext& ctx, const char* fallback) {
  if (ctx.preset) {
    const Preset* p = find_preset(*ctx.preset);
    if (!p) throw ConfigError("--preset: unknown preset '" + *ctx.preset + "'");
    return {p->name, p->config, p->reported_params};
  }
  if (ctx.config.model) return *ctx.config.model;
  if (!fallback) throw ConfigError("no model given (use --preset or a model section)");
  const Preset* p = find_preset(fallback);
  return {p->name, p->config, p->reported_params};
}

void params_row(std::ostream& out, const ModelSection& m) {
  const auto c = arch::count_params(m.config);
  out << m.name << ',' << c.total << ',' << c.expert << ',' << c.non_expert << ','
      << c.active_per_token << ',' << arch::count_flops_per_token(m.config) << ',';
  if (m.reported_params > 0.0) out << m.reported_params;
  out << '\n';
}

// Toy expert computation applied identically on both routing paths.
void scale_experts(routing::ExpertBuffers& b) {
  for (std::size_t e = 0; e < b.buffers.size(); ++e)
    for (double& v : b.buffers[e].data()) v *= 0.5 + static_cast<double>(e);
}

double elapsed_ms(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start)
      .count();
}

bool same_recv(const comm::CommResult& a, const comm::CommResult& b) {
  if (a.states.size() != b.states.size()) return false;
  for (std::size_t i = 0; i < a.states.size(); ++i)
    if (a.states[i].recv != b.states[i].recv) return false;
  return true;
}

parallel::ParallelPlan load_plan(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open plan '" + path + "'");
  try {
    return nlohmann::json::parse(in).get<parallel::ParallelPlan>();
  } catch (const ValidationError& e) {
    throw ConfigError(path + ": " + e.what());
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

parallel::ParallelPlan checked_plan(const CommandContext& ctx) {
  parallel::ParallelPlan p;
  if (ctx.plan_path) {
    p = load_plan(*ctx.plan_path);
  } else {
    const auto model = resolve_model(ctx, "1.3B+MoE-128");
    p = parallel::plan(model.config, ctx.config.cluster, ctx.config.plan);
  }
  const auto violations = parallel::validate(p);
  if (!violations.empty()) throw PlanViolation(violations);
  return p;
}

}  // namespace

PlanViolation::PlanViolation(std::vector<std::string> violations)
    : std::runtime_error(join_violations(violations)), violations_(std::move(violations)) {}

void cmd_params(const CommandContext& ctx, std::ostream& out) {
  set_precision(out);
  out << "model,total,expert,non_expert,active_per_token,flops_per_token,reported_params\n";
  if (ctx.preset || ctx.config.model) {
    params_row(out, resolve_model(ctx, nullptr));
    return;
  }
  for (const auto& p : presets()) params_row(out, {p.name, p.config, p.reported_params});
}

void cmd_route_bench(const CommandContext& ctx, std::ostream& out) {
  const auto& o = ctx.config.route_bench;
  const routing::GatingConfig cfg{o.k, o.experts, o.capacity_factor};
  std::mt19937_64 rng(ctx.config.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  tensor::Matrix batch(o.tokens, o.hidden), logits(o.tokens, static_cast<std::size_t>(o.experts));
  for (double& v : batch.data()) v = normal(rng);
  for (double& v : logits.data()) v = normal(rng);
  const auto gates = routing::top_k_gate(logits, cfg);

  routing::OpCounter dense_ops, oracle_ops;
  auto start = std::chrono::steady_clock::now();
  const auto plan = routing::build_dispatch_plan(gates, cfg, o.tokens);
  auto dense_buffers = routing::scatter_tokens(batch, plan, &dense_ops);
  scale_experts(dense_buffers);
  const auto dense_out = routing::combine_tokens(dense_buffers, plan, o.tokens, &dense_ops);
  const double dense_ms = elapsed_ms(start);

  start = std::chrono::steady_clock::now();
  auto oracle_buffers = routing::sparse_dispatch_oracle(batch, gates, cfg, &oracle_ops);
  scale_experts(oracle_buffers);
  const auto oracle_out = routing::sparse_combine_oracle(oracle_buffers, gates, cfg, &oracle_ops);
  const double oracle_ms = elapsed_ms(start);

  double divergence = max_abs_diff(dense_out, oracle_out);
  for (std::size_t e = 0; e < dense_buffers.buffers.size(); ++e)
    divergence = std::max(divergence,
                          max_abs_diff(dense_buffers.buffers[e], oracle_buffers.buffers[e]));
  const double ratio = dense_ops.multiply_adds == 0
                           ? 0.0
                           : static_cast<double>(oracle_ops.multiply_adds) /
                                 static_cast<double>(dense_ops.multiply_adds);

  set_precision(out);
  out << "tokens,experts,hidden,k,capacity_factor,capacity,dense_ops,oracle_ops,op_ratio,"
         "dense_ms,oracle_ms,max_divergence\n";
  out << o.tokens << ',' << o.experts << ',' << o.hidden << ',' << o.k << ','
      << o.capacity_factor << ',' << plan.capacity << ',' << dense_ops.multiply_adds << ','
      << oracle_ops.multiply_adds << ',' << ratio << ',' << dense_ms << ',' << oracle_ms << ','
      << divergence << '\n';
}

void cmd_simulate(const CommandContext& ctx, std::ostream& out) {
  const auto p = checked_plan(ctx);
  const auto& topo = p.cluster;
  const auto& cost = ctx.config.cost;
  const auto& o = ctx.config.simulate;
  const int ranks = topo.devices();
  const int g = topo.gpus_per_node;
  const int l = p.tensor_slice;

  const auto states = comm::random_states(ranks, g, o.max_items, o.max_bytes, ctx.config.seed);
  const auto flat = comm::flat_all_to_all(states, cost);
  const auto hier = comm::hierarchical_all_to_all(states, topo, cost);
  const auto replicated = comm::replicated_states(ranks, g, l, comm::Direction::kExpertToTensor,
                                                  o.max_items, o.max_bytes, ctx.config.seed);
  const auto flat_replicated = comm::flat_all_to_all(replicated, cost);
  const auto coord = comm::coordinated_all_to_all(replicated, p, cost);

  struct Row {
    const comm::CommResult* result;
    const comm::CommResult* reference;
  };
  const std::vector<Row> rows{{&flat, &flat}, {&hier, &flat}, {&coord, &flat_replicated}};

  set_precision(out);
  out << "schedule,ranks,gpus_per_node,tensor_slice,hops,volume_bytes,volume_ratio,"
         "modeled_latency_s,a2a_latency_s,estimated_latency_s,matches_flat\n";
  for (const auto& r : rows) {
    const auto& t = r.result->trace;
    const auto ref_volume = r.reference->trace.volume_bytes;
    const double ratio = ref_volume == 0 ? 0.0
                                         : static_cast<double>(t.volume_bytes) /
                                               static_cast<double>(ref_volume);
    out << t.schedule << ',' << ranks << ',' << g << ',' << t.tensor_slice << ',' << t.hops
        << ',' << t.volume_bytes << ',' << ratio << ',' << t.modeled_latency_s << ','
        << t.all_to_all_latency() << ',' << comm::estimate_latency(t, topo) << ','
        << (same_recv(*r.result, *r.reference) ? "true" : "false") << '\n';
  }

  if (ctx.trace_dir) {
    std::filesystem::create_directories(*ctx.trace_dir);
    for (const auto& r : rows) {
      const auto path = std::filesystem::path(*ctx.trace_dir) / (r.result->trace.schedule + ".csv");
      std::ofstream f(path);
      if (!f) throw ConfigError("cannot write trace '" + path.string() + "'");
      set_precision(f);
      r.result->trace.write_csv(f);
    }
  }
}

void cmd_plan(const CommandContext& ctx, std::ostream& out) {
  const nlohmann::json j = checked_plan(ctx);
  out << j.dump(2) << '\n';
}

void cmd_distill(const CommandContext& ctx, std::ostream& out) {
  const auto teacher = resolve_model(ctx, nullptr);
  const auto& o = ctx.config.distill;
  const int depth = o.depth > 0 ? o.depth : teacher.config.num_layers - 3;
  const auto sp = distill::derive_student(teacher.config, depth, o.removal);
  const auto tc = arch::count_params(sp.teacher);
  const auto sc = arch::count_params(sp.student);
  std::string removed;
  for (std::size_t i = 0; i < sp.removed.size(); ++i)
    removed += (i ? ";" : "") + std::to_string(sp.removed[i]);
  out << "teacher,teacher_layers,depth,removed,teacher_total,student_total,student_expert,"
         "student_non_expert,student_active_per_token\n";
  out << teacher.name << ',' << sp.teacher.num_layers << ',' << sp.depth << ',' << removed << ','
      << tc.total << ',' << sc.total << ',' << sc.expert << ',' << sc.non_expert << ','
      << sc.active_per_token << '\n';
}

void cmd_kd_demo(const CommandContext& ctx, std::ostream& out) {
  const auto& o = ctx.config.kd_demo;
  const std::uint64_t seed = ctx.config.seed;
  const auto task = distill::SyntheticTask::make(o.dims, seed);
  const auto teacher = distill::make_toy_teacher(task, o.shrink, o.noise, seed + 1);
  const auto student = distill::make_toy_student(o.dims, seed + 2);
  auto train = o.train;
  train.seed = seed + 3;
  const auto traj = distill::train_toy(student, teacher, task, o.kd, train);
  set_precision(out);
  out << "step,ce,kd,total\n";
  for (const auto& r : traj.steps)
    out << r.step << ',' << r.ce << ',' << r.kd << ',' << r.total << '\n';
  std::cerr << "heldout_ce " << std::setprecision(6) << traj.heldout_ce << '\n';
}

int run(int argc, char** argv) {
  CLI::App app{"Desk-scale mixture-of-experts toolkit"};
  app.require_subcommand(1);
  app.fallthrough();
  std::string config_path, out_path, preset, plan_path, trace_dir;
  std::uint64_t seed = 42;
  app.add_option("--config", config_path, "JSON run config");
  app.add_option("--out", out_path, "output file (default stdout)");
  app.add_option("--seed", seed, "random seed, overrides the config")->capture_default_str();
  app.add_option("--preset", preset, "built-in model name");

  using Command = void (*)(const CommandContext&, std::ostream&);
  const std::vector<std::tuple<const char*, const char*, Command>> verbs{
      {"params", "parameter and FLOP report", cmd_params},
      {"route-bench", "dense routing path against the sparse oracle", cmd_route_bench},
      {"simulate", "flat, hierarchical and coordinated all-to-all", cmd_simulate},
      {"plan", "parallel plan as JSON", cmd_plan},
      {"distill", "depth-reduced student from a teacher", cmd_distill},
      {"kd-demo", "toy distillation loss trajectory", cmd_kd_demo}};
  Command chosen = nullptr;
  for (const auto& [name, help, fn] : verbs) {
    auto* sub = app.add_subcommand(name, help);
    sub->callback([&chosen, fn = fn] { chosen = fn; });
    if (std::string(name) == "simulate") {
      sub->add_option("--plan", plan_path, "validated plan JSON instead of planning");
      sub->add_option("--trace", trace_dir, "directory for per-schedule trace CSVs");
    }
    if (std::string(name) == "plan")
      sub->add_option("--plan", plan_path, "validate an existing plan JSON");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    CommandContext ctx;
    if (!config_path.empty()) ctx.config = load_run_config(config_path);
    if (app.count("--seed") > 0) ctx.config.seed = seed;
    if (!preset.empty()) ctx.preset = preset;
    if (!plan_path.empty()) ctx.plan_path = plan_path;
    if (!trace_dir.empty()) ctx.trace_dir = trace_dir;

    // Render fully before touching --out so a failed command leaves no file.
    std::ostringstream report;
    chosen(ctx, report);
    if (out_path.empty()) {
      std::cout << report.str();
    } else {
      std::ofstream f(out_path);
      if (!f) throw ConfigError("cannot write '" + out_path + "'");
      f << report.str();
    }
    return kExitOk;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const PlanViolation& e) {
    std::cerr << e.what() << '\n';
    return kExitValidation;
  } catch (const TrainingError& e) {
    std::cerr << "numerical error: " << e.what() << '\n';
    return kExitNumerical;
  } catch (const PlanningError& e) {
    std::cerr << "planning error: " << e.what() << '\n';
    return kExitValidation;
  } catch (const ScheduleError& e) {
    std::cerr << "schedule error: " << e.what() << '\n';
    return kExitValidation;
  } catch (const ValidationError& e) {
    std::cerr << "validation error: " << e.what() << '\n';
    return kExitValidation;
  } catch (const ShapeError& e) {
    std::cerr << "validation error: " << e.what() << '\n';
    return kExitValidation;
  }
}

}  // namespace dsmoe::cli
