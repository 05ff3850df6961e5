#pragma once

#include <string>
#include <vector>

#include "dsmoe/arch.h"

namespace dsmoe::cli {

struct Preset {
  std::string name;
  arch::MoeModelConfig config;
  double reported_params = 0.0;  // published size, 0 when not listed
  int tensor_slice = 1;          // published MP degree
  int expert_parallel = 0;       // published EP degree, 0 for dense
};

// Dense baselines, standard MoE, PR-MoE and the inference-scale models.
const std::vector<Preset>& presets();

// nullptr when unknown.
const Preset* find_preset(const std::string& name);

}  // namespace dsmoe::cli
