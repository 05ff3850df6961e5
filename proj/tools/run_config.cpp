#include "run_config.h"

#include <fstream>

#include "dsmoe/errors.h"
#include "dsmoe/serialize.h"
#include "presets.h"

namespace dsmoe::cli {

namespace {

using nlohmann::json;

void known_keys(const json& j, std::initializer_list<const char*> allowed,
                const std::string& where) {
  try {
    require_known_keys(j, allowed, where);
  } catch (const ValidationError& e) {
    throw ConfigError(e.what());
  }
}

template <typename T>
void field(const json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(where + "." + key + ": " + e.what());
  }
}

// Integer field with a lower bound; guards unsigned targets against
// negative input.
template <typename T>
void integer(const json& j, const char* key, T& out, const std::string& where,
             std::int64_t min) {
  if (!j.contains(key)) return;
  const json& v = j.at(key);
  if (!v.is_number_integer())
    throw ConfigError(where + "." + key + ": expected an integer");
  const auto n = v.get<std::int64_t>();
  if (n < min)
    throw ConfigError(where + "." + key + ": must be >= " + std::to_string(min));
  out = static_cast<T>(n);
}

void positive(double v, const std::string& name) {
  if (!(v > 0.0)) throw ConfigError(name + ": must be positive");
}

template <typename T>
T section(const json& j, const char* key, T value) {
  if (!j.contains(key)) return value;
  try {
    j.at(key).get_to(value);
  } catch (const ValidationError& e) {
    throw ConfigError(e.what());
  } catch (const json::exception& e) {
    throw ConfigError(std::string(key) + ": " + e.what());
  }
  return value;
}

RouteBenchOptions parse_route_bench(const json& j) {
  const std::string w = "route_bench";
  known_keys(j, {"tokens", "experts", "hidden", "k", "capacity_factor"}, w);
  RouteBenchOptions o;
  integer(j, "tokens", o.tokens, w, 0);
  integer(j, "experts", o.experts, w, 1);
  integer(j, "hidden", o.hidden, w, 1);
  integer(j, "k", o.k, w, 1);
  field(j, "capacity_factor", o.capacity_factor, w);
  positive(o.capacity_factor, w + ".capacity_factor");
  if (o.k > 2 || o.k > o.experts)
    throw ConfigError(w + ".k: must be 1 or 2 and at most experts");
  return o;
}

SimulateOptions parse_simulate(const json& j) {
  const std::string w = "simulate";
  known_keys(j, {"max_items", "max_bytes"}, w);
  SimulateOptions o;
  integer(j, "max_items", o.max_items, w, 0);
  integer(j, "max_bytes", o.max_bytes, w, 1);
  return o;
}

DistillOptions parse_distill(const json& j) {
  const std::string w = "distill";
  known_keys(j, {"depth", "policy", "layers"}, w);
  DistillOptions o;
  integer(j, "depth", o.depth, w, 1);
  std::string policy = "below_top_stage";
  field(j, "policy", policy, w);
  if (policy == "below_top_stage") {
    o.removal.policy = distill::RemovalPolicy::kBelowTopStage;
  } else if (policy == "deepest") {
    o.removal.policy = distill::RemovalPolicy::kDeepest;
  } else if (policy == "explicit") {
    o.removal.policy = distill::RemovalPolicy::kExplicit;
  } else {
    throw ConfigError(w + ".policy: unknown policy '" + policy + "'");
  }
  field(j, "layers", o.removal.layers, w);
  if (!o.removal.layers.empty() && o.removal.policy != distill::RemovalPolicy::kExplicit)
    throw ConfigError(w + ".layers: only valid with policy 'explicit'");
  return o;
}

KdDemoOptions parse_kd_demo(const json& j) {
  const std::string w = "kd_demo";
  known_keys(j,
             {"alpha", "stage_boundary", "temperature", "steps", "batch", "learning_rate",
              "heldout", "shrink", "noise", "hidden", "vocab", "experts"},
             w);
  KdDemoOptions o;
  field(j, "alpha", o.kd.alpha, w);
  if (j.contains("stage_boundary") && !j.at("stage_boundary").is_null())
    integer(j, "stage_boundary", o.kd.stage_boundary, w, 0);
  field(j, "temperature", o.kd.temperature, w);
  integer(j, "steps", o.train.steps, w, 1);
  integer(j, "batch", o.train.batch, w, 1);
  field(j, "learning_rate", o.train.learning_rate, w);
  integer(j, "heldout", o.train.heldout, w, 1);
  field(j, "shrink", o.shrink, w);
  field(j, "noise", o.noise, w);
  integer(j, "hidden", o.dims.hidden, w, 1);
  integer(j, "vocab", o.dims.vocab, w, 2);
  integer(j, "experts", o.dims.experts, w, 1);
  positive(o.train.learning_rate, w + ".learning_rate");
  if (o.noise < 0.0) throw ConfigError(w + ".noise: must be >= 0");
  try {
    o.kd.validate();
  } catch (const ValidationError& e) {
    throw ConfigError(std::string(w) + ": " + e.what());
  }
  return o;
}

}  // namespace

ModelSection parse_model(const json& j) {
  const std::string w = "model";
  if (!j.is_object()) throw ConfigError(w + ": expected an object");
  if (j.contains("preset")) {
    known_keys(j, {"preset"}, w + " (with preset)");
    std::string name;
    field(j, "preset", name, w);
    const Preset* p = find_preset(name);
    if (!p) throw ConfigError(w + ".preset: unknown preset '" + name + "'");
    return {p->name, p->config, p->reported_params};
  }
  known_keys(j,
             {"name", "layers", "hidden", "heads", "vocab", "seq_len", "experts", "residual",
              "k", "capacity_factor", "reported_params"},
             w);
  for (const char* required : {"layers", "hidden"})
    if (!j.contains(required)) throw ConfigError(w + "." + required + ": required field missing");

  ModelSection m;
  m.name = "custom";
  field(j, "name", m.name, w);
  field(j, "reported_params", m.reported_params, w);
  arch::DenseConfig base;
  integer(j, "layers", base.num_layers, w, 1);
  integer(j, "hidden", base.hidden, w, 1);
  integer(j, "heads", base.heads, w, 1);
  integer(j, "vocab", base.vocab, w, 1);
  integer(j, "seq_len", base.seq_len, w, 1);
  bool residual = false;
  field(j, "residual", residual, w);
  arch::MoeOptions opts;
  integer(j, "k", opts.k, w, 1);
  field(j, "capacity_factor", opts.capacity_factor, w);

  try {
    if (!j.contains("experts")) {
      m.config = arch::build_dense(base);
    } else if (j.at("experts").is_array()) {
      std::vector<int> schedule;
      field(j, "experts", schedule, w);
      m.config = arch::build_pr_moe(base, schedule, residual, opts);
    } else {
      int experts = 0;
      integer(j, "experts", experts, w, 0);
      if (experts == 0) {
        m.config = arch::build_dense(base);
      } else {
        const std::vector<int> schedule(static_cast<std::size_t>(base.num_layers / 2), experts);
        m.config = arch::build_pr_moe(base, schedule, residual, opts);
      }
    }
  } catch (const ValidationError& e) {
    throw ConfigError(w + ": " + e.what());
  }
  return m;
}

RunConfig parse_run_config(const json& j) {
  known_keys(j,
             {"seed", "model", "cluster", "plan", "cost", "route_bench", "simulate", "distill",
              "kd_demo"},
             "config");
  RunConfig c;
  integer(j, "seed", c.seed, "config", 0);
  if (j.contains("model")) c.model = parse_model(j.at("model"));
  c.cluster = section(j, "cluster", c.cluster);
  c.plan = section(j, "plan", c.plan);
  c.cost = section(j, "cost", c.cost);
  try {
    c.cluster.validate();
    c.cost.validate();
  } catch (const ValidationError& e) {
    throw ConfigError(e.what());
  }
  if (j.contains("route_bench")) c.route_bench = parse_route_bench(j.at("route_bench"));
  if (j.contains("simulate")) c.simulate = parse_simulate(j.at("simulate"));
  if (j.contains("distill")) c.distill = parse_distill(j.at("distill"));
  if (j.contains("kd_demo")) c.kd_demo = parse_kd_demo(j.at("kd_demo"));
  return c;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return parse_run_config(j);
}

}  // namespace dsmoe::cli
