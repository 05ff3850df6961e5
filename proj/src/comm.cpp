#include "dsmoe/comm.h"

#include <algorithm>
#include <iomanip>
#include <map>
#include <ostream>
#include <random>

#include "dsmoe/errors.h"

namespace dsmoe::comm {

void CostModel::validate() const {
  if (!(c1 > 0.0) || !(c2 > 0.0))
    throw ValidationError("CostModel: C1 and C2 must be positive");
}

const char* kind_name(EventKind kind) {
  switch (kind) {
    case EventKind::kP2P: return "p2p";
    case EventKind::kLayoutTransform: return "layout-transform";
    case EventKind::kA2APhase: return "a2a-phase";
    case EventKind::kAllgather: return "allgather";
  }
  return "unknown";
}

double CommTrace::all_to_all_latency() const {
  double total = 0.0;
  for (const auto& e : events)
    if (e.kind != EventKind::kAllgather) total += e.modeled_latency_s;
  return total;
}

void CommTrace::write_csv(std::ostream& os) const {
  os << "step,kind,src,dst,bytes,modeled_latency_s\n";
  const auto old = os.precision(12);
  for (const auto& e : events)
    os << e.step << ',' << kind_name(e.kind) << ',' << e.src << ',' << e.dst
       << ',' << e.bytes << ',' << e.modeled_latency_s << '\n';
  os.precision(old);
}

namespace {

std::uint64_t bytes_of(const std::vector<Item>& items) {
  std::uint64_t b = 0;
  for (const auto& i : items) b += i.bytes;
  return b;
}

void append(std::vector<Item>& dst, const std::vector<Item>& src) {
  dst.insert(dst.end(), src.begin(), src.end());
}

void sort_by_source(std::vector<Item>& items) {
  std::stable_sort(items.begin(), items.end(),
                   [](const Item& a, const Item& b) { return a.src < b.src; });
}

int check_states(const std::vector<RankState>& states) {
  const int p = static_cast<int>(states.size());
  if (p < 1) throw ScheduleError("all-to-all needs at least one rank");
  for (int i = 0; i < p; ++i) {
    const auto& s = states[static_cast<std::size_t>(i)];
    if (s.rank != i)
      throw ScheduleError("rank " + std::to_string(i) + " is labelled " +
                          std::to_string(s.rank));
    if (static_cast<int>(s.send.size()) != p)
      throw ScheduleError("rank " + std::to_string(i) + " has " +
                          std::to_string(s.send.size()) +
                          " destination buffers, expected " +
                          std::to_string(p));
  }
  return p;
}

class TraceBuilder {
 public:
  TraceBuilder(std::string schedule, int ranks, const CostModel& model,
               double reference_bytes)
      : model_(model), reference_(reference_bytes) {
    model_.validate();
    trace_.schedule = std::move(schedule);
    trace_.ranks = ranks;
  }

  CommTrace& trace() { return trace_; }

  void round(EventKind kind) {
    ++step_;
    trace_.events.push_back({step_, kind, -1, -1, 0, model_.c1});
  }
  void transform(int rank, std::uint64_t bytes) {
    trace_.events.push_back({step_, EventKind::kLayoutTransform, rank, rank,
                             bytes, 0.0});
  }
  void begin_transform() { ++step_; }
  void message(int src, int dst, std::uint64_t bytes, bool bandwidth_term) {
    double cost = 0.0;
    if (bandwidth_term && reference_ > 0.0)
      cost = model_.c2 * static_cast<double>(bytes) / reference_;
    trace_.events.push_back({step_, EventKind::kP2P, src, dst, bytes, cost});
  }

  CommTrace finish() {
    for (const auto& e : trace_.events) {
      if (e.kind == EventKind::kA2APhase || e.kind == EventKind::kAllgather)
        ++trace_.hops;
      if (e.kind == EventKind::kP2P) trace_.volume_bytes += e.bytes;
      trace_.modeled_latency_s += e.modeled_latency_s;
    }
    return std::move(trace_);
  }

 private:
  CostModel model_;
  double reference_;
  CommTrace trace_;
  int step_ = -1;
};

std::vector<RankState> drained(const std::vector<RankState>& states) {
  std::vector<RankState> out = states;
  for (auto& s : out) {
    for (auto& b : s.send) b.clear();
    s.recv.clear();
  }
  return out;
}

// Payload equality with one tag field masked.
bool same_ignoring_dst(const std::vector<Item>& a, const std::vector<Item>& b) {
  return std::equal(a.begin(), a.end(), b.begin(), b.end(),
                    [](const Item& x, const Item& y) {
                      return x.src == y.src && x.token == y.token &&
                             x.bytes == y.bytes;
                    });
}

bool same_ignoring_src(const std::vector<Item>& a, const std::vector<Item>& b) {
  return std::equal(a.begin(), a.end(), b.begin(), b.end(),
                    [](const Item& x, const Item& y) {
                      return x.dst == y.dst && x.token == y.token &&
                             x.bytes == y.bytes;
                    });
}

}  // namespace

CommResult flat_all_to_all(const std::vector<RankState>& states,
                           const CostModel& model) {
  const int p = check_states(states);
  double reference = 0.0;
  for (const auto& s : states)
    for (const auto& b : s.send) reference += static_cast<double>(bytes_of(b));

  TraceBuilder tb("flat", p, model, reference);
  std::vector<std::vector<const std::vector<Item>*>> inbox(
      static_cast<std::size_t>(p),
      std::vector<const std::vector<Item>*>(static_cast<std::size_t>(p)));
  for (int r = 0; r < p; ++r) {
    tb.round(EventKind::kA2APhase);
    for (int i = 0; i < p; ++i) {
      const int d = (i + r) % p;
      const auto& buf = states[static_cast<std::size_t>(i)].send[static_cast<std::size_t>(d)];
      tb.message(i, d, bytes_of(buf), true);
      inbox[static_cast<std::size_t>(d)][static_cast<std::size_t>(i)] = &buf;
    }
  }

  CommResult out{drained(states), {}};
  for (int d = 0; d < p; ++d)
    for (int i = 0; i < p; ++i)
      append(out.states[static_cast<std::size_t>(d)].recv,
             *inbox[static_cast<std::size_t>(d)][static_cast<std::size_t>(i)]);
  out.trace = tb.finish();
  return out;
}

CommResult hierarchical_all_to_all(const std::vector<RankState>& states,
                                   const parallel::ClusterTopology& topology,
                                   const CostModel& model) {
  const int p = check_states(states);
  const int g = topology.gpus_per_node;
  if (g < 1 || p % g != 0)
    throw ScheduleError("hierarchical all-to-all: " + std::to_string(p) +
                        " ranks not divisible by " + std::to_string(g) +
                        " GPUs per node");
  const int n = p / g;
  const auto up = [](int v) { return static_cast<std::size_t>(v); };

  double reference = 0.0;
  for (const auto& s : states)
    for (const auto& b : s.send) reference += static_cast<double>(bytes_of(b));
  TraceBuilder tb("hierarchical", p, model, reference);
  tb.trace().gpus_per_node = g;

  // Gather the buffers bound for each local index, ordered by node.
  std::vector<std::vector<std::vector<Item>>> bundle(up(p), std::vector<std::vector<Item>>(up(g)));
  tb.begin_transform();
  for (int i = 0; i < p; ++i) {
    const auto& s = states[up(i)];
    for (int lg = 0; lg < g; ++lg)
      for (int nd = 0; nd < n; ++nd) append(bundle[up(i)][up(lg)], s.send[up(nd * g + lg)]);
    std::uint64_t total = 0;
    for (const auto& b : s.send) total += bytes_of(b);
    tb.transform(i, total);
  }

  // Intra-node: (node, g) -> (node, g') carries everything for local index g'.
  std::vector<std::vector<std::vector<Item>>> mid(up(p), std::vector<std::vector<Item>>(up(g)));
  for (int r = 0; r < g; ++r) {
    tb.round(EventKind::kA2APhase);
    for (int i = 0; i < p; ++i) {
      const int node = i / g, local = i % g;
      const int to_local = (local + r) % g;
      const int d = node * g + to_local;
      tb.message(i, d, bytes_of(bundle[up(i)][up(to_local)]), true);
      mid[up(d)][up(local)] = std::move(bundle[up(i)][up(to_local)]);
    }
  }

  // Regroup by destination node.
  std::vector<std::vector<std::vector<Item>>> outbound(up(p), std::vector<std::vector<Item>>(up(n)));
  tb.begin_transform();
  for (int i = 0; i < p; ++i) {
    std::uint64_t total = 0;
    for (const auto& from_local : mid[up(i)])
      for (const auto& item : from_local) {
        outbound[up(i)][up(item.dst / g)].push_back(item);
        total += item.bytes;
      }
    tb.transform(i, total);
  }

  // Inter-node: ranks sharing a local index.
  std::vector<std::vector<std::vector<Item>>> fin(up(p), std::vector<std::vector<Item>>(up(n)));
  for (int r = 0; r < n; ++r) {
    tb.round(EventKind::kA2APhase);
    for (int i = 0; i < p; ++i) {
      const int node = i / g, local = i % g;
      const int to_node = (node + r) % n;
      const int d = to_node * g + local;
      tb.message(i, d, bytes_of(outbound[up(i)][up(to_node)]), true);
      fin[up(d)][up(node)] = std::move(outbound[up(i)][up(to_node)]);
    }
  }

  CommResult out{drained(states), {}};
  tb.begin_transform();
  for (int d = 0; d < p; ++d) {
    auto& recv = out.states[up(d)].recv;
    for (const auto& part : fin[up(d)]) append(recv, part);
    sort_by_source(recv);
    tb.transform(d, bytes_of(recv));
  }
  out.trace = tb.finish();
  return out;
}

CommResult coordinated_all_to_all(const std::vector<RankState>& states,
                                  const parallel::ParallelPlan& plan,
                                  const CostModel& model, Direction direction) {
  const int p = check_states(states);
  const int l = plan.tensor_slice;
  if (plan.cluster.devices() != p)
    throw ScheduleError("coordinated all-to-all: plan covers " +
                        std::to_string(plan.cluster.devices()) +
                        " devices, states have " + std::to_string(p));
  if (l < 1 || p % l != 0)
    throw ScheduleError("coordinated all-to-all: tensor-slice degree " +
                        std::to_string(l) + " does not divide " +
                        std::to_string(p));
  const int q = p / l;
  const auto up = [](int v) { return static_cast<std::size_t>(v); };

  CommResult out{drained(states), {}};
  if (direction == Direction::kExpertToTensor) {
    double reference = 0.0;
    for (int s = 0; s < p; ++s) {
      const auto& send = states[up(s)].send;
      for (int grp = 0; grp < q; ++grp) {
        const auto& lead = send[up(grp * l)];
        reference += static_cast<double>(bytes_of(lead));
        for (int t = 1; t < l; ++t)
          if (!same_ignoring_dst(send[up(grp * l + t)], lead))
            throw ScheduleError("coordinated all-to-all: rank " +
                                std::to_string(s) +
                                " sends different payloads to tensor group " +
                                std::to_string(grp));
      }
    }
    TraceBuilder tb("coordinated", p, model, reference);
    tb.trace().gpus_per_node = plan.cluster.gpus_per_node;
    tb.trace().tensor_slice = l;

    std::vector<std::vector<const std::vector<Item>*>> got(
        up(p), std::vector<const std::vector<Item>*>(up(p), nullptr));
    for (int r = 0; r < q; ++r) {
      tb.round(EventKind::kA2APhase);
      for (int s = 0; s < p; ++s) {
        const int d = ((s / l + r) % q) * l + s % l;
        const auto& buf = states[up(s)].send[up(d)];
        tb.message(s, d, bytes_of(buf), true);
        got[up(d)][up(s)] = &buf;
      }
    }
    std::vector<std::vector<Item>> collected(up(p));
    for (int d = 0; d < p; ++d)
      for (int s = 0; s < p; ++s)
        if (got[up(d)][up(s)]) append(collected[up(d)], *got[up(d)][up(s)]);

    for (int r = 0; r < l; ++r) {
      tb.round(EventKind::kAllgather);
      for (int i = 0; i < p; ++i) {
        const int d = (i / l) * l + (i % l + r) % l;
        tb.message(i, d, bytes_of(collected[up(i)]), false);
        auto& recv = out.states[up(d)].recv;
        for (Item item : collected[up(i)]) {
          item.dst = d;
          recv.push_back(item);
        }
      }
    }
    for (auto& s : out.states) sort_by_source(s.recv);
    out.trace = tb.finish();
    return out;
  }

  double reference = 0.0;
  for (int grp = 0; grp < q; ++grp) {
    const auto& lead = states[up(grp * l)].send;
    for (int d = 0; d < p; ++d) {
      reference += static_cast<double>(bytes_of(lead[up(d)]));
      for (int t = 1; t < l; ++t)
        if (!same_ignoring_src(states[up(grp * l + t)].send[up(d)], lead[up(d)]))
          throw ScheduleError("coordinated all-to-all: tensor group " +
                              std::to_string(grp) +
                              " replicas hold different payloads for rank " +
                              std::to_string(d));
    }
  }
  TraceBuilder tb("coordinated", p, model, reference);
  tb.trace().gpus_per_node = plan.cluster.gpus_per_node;
  tb.trace().tensor_slice = l;

  std::vector<std::vector<const std::vector<Item>*>> got(
      up(p), std::vector<const std::vector<Item>*>(up(q), nullptr));
  for (int r = 0; r < q; ++r) {
    tb.round(EventKind::kA2APhase);
    for (int s = 0; s < p; ++s) {
      const int d = ((s / l + r) % q) * l + s % l;
      const auto& buf = states[up(s)].send[up(d)];
      tb.message(s, d, bytes_of(buf), true);
      got[up(d)][up(s / l)] = &buf;
    }
  }
  for (int d = 0; d < p; ++d) {
    auto& recv = out.states[up(d)].recv;
    for (int grp = 0; grp < q; ++grp)
      for (Item item : *got[up(d)][up(grp)]) {
        item.src = grp * l;
        recv.push_back(item);
      }
  }
  out.trace = tb.finish();
  return out;
}

double estimate_latency(const CommTrace& trace,
                        const parallel::ClusterTopology& topology) {
  struct StepCost {
    bool round = false;
    bool crosses = false;
    double transfer = 0.0;
  };
  std::map<int, StepCost> steps;
  for (const auto& e : trace.events) {
    auto& sc = steps[e.step];
    if (e.kind == EventKind::kA2APhase || e.kind == EventKind::kAllgather) {
      sc.round = true;
    } else if (e.kind == EventKind::kP2P && e.src != e.dst) {
      const bool cross = topology.node_of(e.src) != topology.node_of(e.dst);
      sc.crosses = sc.crosses || cross;
      const auto& link = cross ? topology.inter : topology.intra;
      sc.transfer = std::max(
          sc.transfer, static_cast<double>(e.bytes) / link.bandwidth_bytes_s);
    }
  }
  double total = 0.0;
  for (const auto& [step, sc] : steps) {
    if (sc.round)
      total += sc.crosses ? topology.inter.latency_s : topology.intra.latency_s;
    total += sc.transfer;
  }
  return total;
}

// ---- payload helpers ----

namespace {

std::vector<RankState> empty_states(int ranks, int gpus_per_node) {
  if (ranks < 1 || gpus_per_node < 1)
    throw ValidationError("ranks and gpus_per_node must be >= 1");
  std::vector<RankState> out(static_cast<std::size_t>(ranks));
  for (int i = 0; i < ranks; ++i) {
    out[static_cast<std::size_t>(i)].rank = i;
    out[static_cast<std::size_t>(i)].node = i / gpus_per_node;
    out[static_cast<std::size_t>(i)].send.resize(static_cast<std::size_t>(ranks));
  }
  return out;
}

std::vector<Item> random_buffer(int src, int dst, int max_items,
                                std::uint64_t max_bytes, std::int64_t& token,
                                std::mt19937_64& rng) {
  std::uniform_int_distribution<int> count(0, std::max(max_items, 0));
  std::uniform_int_distribution<std::uint64_t> size(1, std::max<std::uint64_t>(max_bytes, 1));
  std::vector<Item> out(static_cast<std::size_t>(count(rng)));
  for (auto& item : out) item = {src, dst, token++, size(rng)};
  return out;
}

}  // namespace

std::vector<RankState> random_states(int ranks, int gpus_per_node,
                                     int max_items, std::uint64_t max_bytes,
                                     std::uint64_t seed) {
  auto out = empty_states(ranks, gpus_per_node);
  std::mt19937_64 rng(seed);
  std::int64_t token = 0;
  for (int s = 0; s < ranks; ++s)
    for (int d = 0; d < ranks; ++d)
      out[static_cast<std::size_t>(s)].send[static_cast<std::size_t>(d)] =
          random_buffer(s, d, max_items, max_bytes, token, rng);
  return out;
}

std::vector<RankState> uniform_states(int ranks, int gpus_per_node,
                                      std::uint64_t bytes) {
  auto out = empty_states(ranks, gpus_per_node);
  std::int64_t token = 0;
  for (int s = 0; s < ranks; ++s)
    for (int d = 0; d < ranks; ++d)
      out[static_cast<std::size_t>(s)].send[static_cast<std::size_t>(d)] = {
          {s, d, token++, bytes}};
  return out;
}

std::vector<RankState> replicated_states(int ranks, int gpus_per_node,
                                         int tensor_slice, Direction direction,
                                         int max_items, std::uint64_t max_bytes,
                                         std::uint64_t seed) {
  if (tensor_slice < 1 || ranks % tensor_slice != 0)
    throw ValidationError("tensor_slice must divide ranks");
  auto out = empty_states(ranks, gpus_per_node);
  std::mt19937_64 rng(seed);
  std::int64_t token = 0;
  const int l = tensor_slice;
  const auto up = [](int v) { return static_cast<std::size_t>(v); };
  if (direction == Direction::kExpertToTensor) {
    for (int s = 0; s < ranks; ++s)
      for (int grp = 0; grp < ranks / l; ++grp) {
        const auto base = random_buffer(s, grp * l, max_items, max_bytes, token, rng);
        for (int t = 0; t < l; ++t) {
          auto copy = base;
          for (auto& item : copy) item.dst = grp * l + t;
          out[up(s)].send[up(grp * l + t)] = std::move(copy);
        }
      }
  } else {
    for (int grp = 0; grp < ranks / l; ++grp)
      for (int d = 0; d < ranks; ++d) {
        const auto base = random_buffer(grp * l, d, max_items, max_bytes, token, rng);
        for (int t = 0; t < l; ++t) {
          auto copy = base;
          for (auto& item : copy) item.src = grp * l + t;
          out[up(grp * l + t)].send[up(d)] = std::move(copy);
        }
      }
  }
  return out;
}

std::vector<RankState> leaders_only(const std::vector<RankState>& states,
                                    int tensor_slice) {
  auto out = states;
  for (auto& s : out)
    if (s.rank % tensor_slice != 0)
      for (auto& b : s.send) b.clear();
  return out;
}

std::vector<Item> sent_items(const std::vector<RankState>& states) {
  std::vector<Item> out;
  for (const auto& s : states)
    for (const auto& b : s.send) append(out, b);
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<Item> received_items(const std::vector<RankState>& states) {
  std::vector<Item> out;
  for (const auto& s : states) append(out, s.recv);
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace dsmoe::comm
