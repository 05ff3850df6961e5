#pragma once

#include <initializer_list>
#include <string>

#include "json.hpp"

#include "dsmoe/comm.h"
#include "dsmoe/parallel.h"

// JSON forms of planner and simulator inputs. Readers reject unknown keys
// with ValidationError; missing keys keep their defaults.

namespace dsmoe {

// Throws ValidationError when `j` is not an object or has a key outside
// `allowed`. `where` prefixes the message.
void require_known_keys(const nlohmann::json& j,
                        std::initializer_list<const char*> allowed,
                        const std::string& where);

namespace parallel {

void to_json(nlohmann::json& j, const LinkSpec& v);
void from_json(const nlohmann::json& j, LinkSpec& v);
void to_json(nlohmann::json& j, const ClusterTopology& v);
void from_json(const nlohmann::json& j, ClusterTopology& v);
void to_json(nlohmann::json& j, const LayerPlacement& v);
void from_json(const nlohmann::json& j, LayerPlacement& v);
void to_json(nlohmann::json& j, const ExpertShard& v);
void from_json(const nlohmann::json& j, ExpertShard& v);
void to_json(nlohmann::json& j, const DeviceAssignment& v);
void from_json(const nlohmann::json& j, DeviceAssignment& v);
void to_json(nlohmann::json& j, const ParallelPlan& v);
void from_json(const nlohmann::json& j, ParallelPlan& v);
void to_json(nlohmann::json& j, const PlanOptions& v);
void from_json(const nlohmann::json& j, PlanOptions& v);

}  // namespace parallel

namespace comm {

void to_json(nlohmann::json& j, const CostModel& v);
void from_json(const nlohmann::json& j, CostModel& v);

}  // namespace comm
}  // namespace dsmoe
