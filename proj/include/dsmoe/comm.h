#pragma once

#include <compare>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "dsmoe/parallel.h"

// Rank-level simulation of all-to-all schedules in logical time. Every
// schedule records one round-marker event per pairwise-exchange round (a
// "hop") and one p2p event per message, so hop counts and volumes are read
// straight off the trace.

namespace dsmoe::comm {

struct Item {
  int src = 0;
  int dst = 0;
  std::int64_t token = 0;
  std::uint64_t bytes = 0;

  friend bool operator==(const Item&, const Item&) = default;
  friend auto operator<=>(const Item&, const Item&) = default;
};

struct RankState {
  int rank = 0;
  int node = 0;
  std::vector<std::vector<Item>> send;  // indexed by destination rank
  std::vector<Item> recv;

  friend bool operator==(const RankState&, const RankState&) = default;
};

struct CostModel {
  double c1 = 1.0;  // per round
  double c2 = 1.0;  // per full logical payload moved

  void validate() const;
};

enum class EventKind { kP2P, kLayoutTransform, kA2APhase, kAllgather };

const char* kind_name(EventKind kind);

struct Event {
  int step = 0;
  EventKind kind = EventKind::kP2P;
  int src = -1;
  int dst = -1;
  std::uint64_t bytes = 0;
  double modeled_latency_s = 0.0;

  friend bool operator==(const Event&, const Event&) = default;
};

struct CommTrace {
  std::string schedule;
  int ranks = 0;
  int gpus_per_node = 0;
  int tensor_slice = 1;
  std::vector<Event> events;
  std::int64_t hops = 0;
  std::uint64_t volume_bytes = 0;
  double modeled_latency_s = 0.0;

  // Latency of every event outside the allgather phase.
  double all_to_all_latency() const;
  void write_csv(std::ostream& os) const;

  friend bool operator==(const CommTrace&, const CommTrace&) = default;
};

struct CommResult {
  std::vector<RankState> states;
  CommTrace trace;
};

// Round r: rank i sends to (i + r) mod p, r = 0..p-1.
CommResult flat_all_to_all(const std::vector<RankState>& states,
                           const CostModel& model);

// Intra-node exchange of per-local-index bundles, then inter-node exchange
// among ranks with the same local index, with layout transforms around each.
CommResult hierarchical_all_to_all(const std::vector<RankState>& states,
                                   const parallel::ClusterTopology& topology,
                                   const CostModel& model);

enum class Direction {
  // Tensor-sliced replicas send identical buffers. Rank g*L + l only sends to
  // ranks d with d % L == l; received items carry the group leader g*L as
  // their source.
  kTensorToExpert,
  // Each sender's buffers for the members of one tensor group are identical.
  // All-to-all within each tensor-rank subset, then allgather over the tensor
  // group.
  kExpertToTensor,
};

// Tensor groups are [g*L, (g+1)*L). Throws ScheduleError when the replica
// precondition does not hold.
CommResult coordinated_all_to_all(const std::vector<RankState>& states,
                                  const parallel::ParallelPlan& plan,
                                  const CostModel& model,
                                  Direction direction = Direction::kExpertToTensor);

// Per step: alpha of the slowest link used plus the largest message over its
// link bandwidth. Self messages and layout transforms are free.
double estimate_latency(const CommTrace& trace,
                        const parallel::ClusterTopology& topology);

// ---- payload helpers ----

// Random tagged items; each (src, dst) buffer holds 0..max_items items of
// 1..max_bytes bytes. Token ids are unique.
std::vector<RankState> random_states(int ranks, int gpus_per_node,
                                     int max_items, std::uint64_t max_bytes,
                                     std::uint64_t seed);

// Uniform buffers: every (src, dst) pair carries one item of `bytes`.
std::vector<RankState> uniform_states(int ranks, int gpus_per_node,
                                      std::uint64_t bytes);

// Random payloads satisfying the precondition of the given direction.
std::vector<RankState> replicated_states(int ranks, int gpus_per_node,
                                         int tensor_slice, Direction direction,
                                         int max_items, std::uint64_t max_bytes,
                                         std::uint64_t seed);

// Keeps only tensor-group leaders' send buffers: the flat reference for the
// tensor-to-expert direction.
std::vector<RankState> leaders_only(const std::vector<RankState>& states,
                                    int tensor_slice);

// Sorted multiset of every item in send (or recv) buffers.
std::vector<Item> sent_items(const std::vector<RankState>& states);
std::vector<Item> received_items(const std::vector<RankState>& states);

}  // namespace dsmoe::comm
