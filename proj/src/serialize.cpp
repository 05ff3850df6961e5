#include "dsmoe/serialize.h"

#include <algorithm>

#include "dsmoe/errors.h"

namespace dsmoe {

void require_known_keys(const nlohmann::json& j,
                        std::initializer_list<const char*> allowed,
                        const std::string& where) {
  if (!j.is_object()) throw ValidationError(where + ": expected an object");
  for (const auto& [key, value] : j.items()) {
    const bool known = std::any_of(allowed.begin(), allowed.end(),
                                   [&](const char* a) { return key == a; });
    if (!known) throw ValidationError(where + ": unknown key '" + key + "'");
  }
}

namespace {

template <typename T>
void read(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

namespace parallel {

void to_json(nlohmann::json& j, const LinkSpec& v) {
  j = {{"latency_s", v.latency_s}, {"bandwidth_bytes_s", v.bandwidth_bytes_s}};
}

void from_json(const nlohmann::json& j, LinkSpec& v) {
  require_known_keys(j, {"latency_s", "bandwidth_bytes_s"}, "link");
  read(j, "latency_s", v.latency_s);
  read(j, "bandwidth_bytes_s", v.bandwidth_bytes_s);
}

void to_json(nlohmann::json& j, const ClusterTopology& v) {
  j = {{"nodes", v.nodes},
       {"gpus_per_node", v.gpus_per_node},
       {"intra", v.intra},
       {"inter", v.inter}};
}

void from_json(const nlohmann::json& j, ClusterTopology& v) {
  require_known_keys(j, {"nodes", "gpus_per_node", "intra", "inter"},
                     "cluster");
  read(j, "nodes", v.nodes);
  read(j, "gpus_per_node", v.gpus_per_node);
  read(j, "intra", v.intra);
  read(j, "inter", v.inter);
}

void to_json(nlohmann::json& j, const LayerPlacement& v) {
  j = {{"layer", v.layer},
       {"experts", v.experts},
       {"expert_parallel", v.expert_parallel},
       {"expert_data_parallel", v.expert_data_parallel},
       {"expert_slice", v.expert_slice}};
}

void from_json(const nlohmann::json& j, LayerPlacement& v) {
  require_known_keys(j, {"layer", "experts", "expert_parallel",
                         "expert_data_parallel", "expert_slice"},
                     "layer placement");
  read(j, "layer", v.layer);
  read(j, "experts", v.experts);
  read(j, "expert_parallel", v.expert_parallel);
  read(j, "expert_data_parallel", v.expert_data_parallel);
  read(j, "expert_slice", v.expert_slice);
}

void to_json(nlohmann::json& j, const ExpertShard& v) {
  j = nlohmann::json::array({v.expert, v.slice});
}

void from_json(const nlohmann::json& j, ExpertShard& v) {
  if (!j.is_array() || j.size() != 2)
    throw ValidationError("expert shard: expected [expert, slice]");
  v.expert = j[0].get<int>();
  v.slice = j[1].get<int>();
}

void to_json(nlohmann::json& j, const DeviceAssignment& v) {
  j = {{"rank", v.rank},
       {"node", v.node},
       {"tensor_group", v.tensor_group},
       {"tensor_rank", v.tensor_rank},
       {"shards", v.shards}};
}

void from_json(const nlohmann::json& j, DeviceAssignment& v) {
  require_known_keys(j, {"rank", "node", "tensor_group", "tensor_rank", "shards"},
                     "device");
  read(j, "rank", v.rank);
  read(j, "node", v.node);
  read(j, "tensor_group", v.tensor_group);
  read(j, "tensor_rank", v.tensor_rank);
  read(j, "shards", v.shards);
}

namespace {

const char* orientation_name(SliceOrientation o) {
  return o == SliceOrientation::kColumn ? "column" : "row";
}

SliceOrientation parse_orientation(const nlohmann::json& j) {
  const auto s = j.get<std::string>();
  if (s == "column") return SliceOrientation::kColumn;
  if (s == "row") return SliceOrientation::kRow;
  throw ValidationError("orientation must be 'column' or 'row', got '" + s + "'");
}

}  // namespace

void to_json(nlohmann::json& j, const ParallelPlan& v) {
  j = {{"cluster", v.cluster},
       {"layers", v.layers},
       {"tensor_slice", v.tensor_slice},
       {"data_parallel", v.data_parallel},
       {"orientation", orientation_name(v.orientation)},
       {"devices", v.devices}};
}

void from_json(const nlohmann::json& j, ParallelPlan& v) {
  require_known_keys(j, {"cluster", "layers", "tensor_slice", "data_parallel",
                         "orientation", "devices"},
                     "plan");
  read(j, "cluster", v.cluster);
  read(j, "layers", v.layers);
  read(j, "tensor_slice", v.tensor_slice);
  read(j, "data_parallel", v.data_parallel);
  if (j.contains("orientation")) v.orientation = parse_orientation(j["orientation"]);
  read(j, "devices", v.devices);
}

void to_json(nlohmann::json& j, const PlanOptions& v) {
  j = {{"latency_mode", v.latency_mode},
       {"tensor_slice", v.tensor_slice},
       {"orientation", orientation_name(v.orientation)}};
}

void from_json(const nlohmann::json& j, PlanOptions& v) {
  require_known_keys(j, {"latency_mode", "tensor_slice", "orientation"},
                     "plan options");
  read(j, "latency_mode", v.latency_mode);
  read(j, "tensor_slice", v.tensor_slice);
  if (j.contains("orientation")) v.orientation = parse_orientation(j["orientation"]);
}

}  // namespace parallel

namespace comm {

void to_json(nlohmann::json& j, const CostModel& v) {
  j = {{"c1", v.c1}, {"c2", v.c2}};
}

void from_json(const nlohmann::json& j, CostModel& v) {
  require_known_keys(j, {"c1", "c2"}, "cost model");
  read(j, "c1", v.c1);
  read(j, "c2", v.c2);
}

}  // namespace comm
}  // namespace dsmoe
