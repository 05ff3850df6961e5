#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>

#include "dsmoe/arch.h"
#include "dsmoe/comm.h"
#include "dsmoe/distill.h"
#include "dsmoe/parallel.h"
#include "json.hpp"

namespace dsmoe::cli {

// Malformed or incomplete config: exit code 2.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ModelSection {
  std::string name;
  arch::MoeModelConfig config;
  double reported_params = 0.0;
};

struct RouteBenchOptions {
  std::size_t tokens = 256;
  int experts = 16;
  std::size_t hidden = 32;
  int k = 1;
  double capacity_factor = 1.0;
};

struct SimulateOptions {
  int max_items = 4;
  std::uint64_t max_bytes = 4096;
};

struct DistillOptions {
  int depth = 0;  // 0: teacher depth minus three
  distill::RemovalOptions removal;
};

struct KdDemoOptions {
  distill::KDConfig kd;
  distill::TrainConfig train;
  distill::ToyDims dims;
  double shrink = 0.8;
  double noise = 0.5;
};

struct RunConfig {
  std::uint64_t seed = 42;
  std::optional<ModelSection> model;
  parallel::ClusterTopology cluster;
  parallel::PlanOptions plan;
  comm::CostModel cost;
  RouteBenchOptions route_bench;
  SimulateOptions simulate;
  DistillOptions distill;
  KdDemoOptions kd_demo;
};

// Throws ConfigError naming the offending field.
RunConfig parse_run_config(const nlohmann::json& j);
RunConfig load_run_config(const std::string& path);

// "experts" may be a single count (every other layer) or a full schedule.
ModelSection parse_model(const nlohmann::json& j);

}  // namespace dsmoe::cli
