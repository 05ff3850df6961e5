#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dsmoe/arch.h"

namespace dsmoe::parallel {

struct LinkSpec {
  double latency_s = 1e-6;          // alpha
  double bandwidth_bytes_s = 1e11;  // beta

  friend bool operator==(const LinkSpec&, const LinkSpec&) = default;
};

struct ClusterTopology {
  int nodes = 1;
  int gpus_per_node = 8;
  LinkSpec intra{2e-6, 1.5e11};
  LinkSpec inter{1e-5, 2.5e10};

  int devices() const { return nodes * gpus_per_node; }
  int node_of(int rank) const { return rank / gpus_per_node; }
  // Throws ValidationError on non-positive counts or link constants.
  void validate() const;

  friend bool operator==(const ClusterTopology&,
                         const ClusterTopology&) = default;
};

// How an expert is split when its slice degree exceeds one.
enum class SliceOrientation { kColumn, kRow };

struct LayerPlacement {
  int layer = 0;  // index into MoeModelConfig::layers
  int experts = 0;
  int expert_parallel = 1;
  int expert_data_parallel = 1;
  int expert_slice = 1;

  friend bool operator==(const LayerPlacement&,
                         const LayerPlacement&) = default;
};

struct ExpertShard {
  int expert = 0;
  int slice = 0;  // index within the expert_slice partition

  friend bool operator==(const ExpertShard&, const ExpertShard&) = default;
};

struct DeviceAssignment {
  int rank = 0;
  int node = 0;
  int tensor_group = 0;
  int tensor_rank = 0;
  // One entry per LayerPlacement, in the same order.
  std::vector<std::vector<ExpertShard>> shards;

  friend bool operator==(const DeviceAssignment&,
                         const DeviceAssignment&) = default;
};

struct ParallelPlan {
  ClusterTopology cluster;
  std::vector<LayerPlacement> layers;
  int tensor_slice = 1;
  int data_parallel = 1;  // non-expert replicas
  SliceOrientation orientation = SliceOrientation::kColumn;
  std::vector<DeviceAssignment> devices;

  friend bool operator==(const ParallelPlan&, const ParallelPlan&) = default;
};

struct PlanOptions {
  // Slice experts across the surplus devices instead of replicating them.
  bool latency_mode = false;
  int tensor_slice = 1;
  SliceOrientation orientation = SliceOrientation::kColumn;
};

// Throws PlanningError naming the violated constraint when the devices cannot
// be split into balanced groups.
ParallelPlan plan(const arch::MoeModelConfig& cfg,
                  const ClusterTopology& cluster,
                  const PlanOptions& options = {});

// Fills plan.devices from the layer degrees. Rank r holds slice r % slice of
// expert-parallel group (r / slice) % EP; the rest of the rank index selects
// the data-parallel replica. Ranks beyond EP * DP * slice get no experts.
void assign_devices(ParallelPlan& plan);

// Empty when the plan is valid.
std::vector<std::string> validate(const ParallelPlan& plan);

// Parameter bytes held by each device: its expert shards plus the
// tensor-sliced non-expert parameters.
std::vector<double> memory_per_device(const ParallelPlan& plan,
                                      const arch::MoeModelConfig& cfg,
                                      double bytes_per_param);

}  // namespace dsmoe::parallel
