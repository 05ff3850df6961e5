#include "dsmoe/parallel.h"

#include <algorithm>
#include <set>
#include <sstream>

#include "dsmoe/errors.h"

namespace dsmoe::parallel {

void ClusterTopology::validate() const {
  if (nodes < 1 || gpus_per_node < 1)
    throw ValidationError("ClusterTopology: nodes and gpus_per_node must be >= 1");
  for (const LinkSpec* l : {&intra, &inter})
    if (!(l->latency_s > 0.0) || !(l->bandwidth_bytes_s > 0.0))
      throw ValidationError("ClusterTopology: link latency and bandwidth must be positive");
}

ParallelPlan plan(const arch::MoeModelConfig& cfg,
                  const ClusterTopology& cluster, const PlanOptions& options) {
  cfg.validate();
  cluster.validate();
  const int p = cluster.devices();
  const int l = options.tensor_slice;
  if (l < 1)
    throw PlanningError("tensor-slice degree must be >= 1");
  if (l > cluster.gpus_per_node || cluster.gpus_per_node % l != 0) {
    std::ostringstream os;
    os << "tensor-slice degree " << l << " must divide gpus_per_node "
       << cluster.gpus_per_node;
    throw PlanningError(os.str());
  }

  ParallelPlan out;
  out.cluster = cluster;
  out.tensor_slice = l;
  out.data_parallel = p / l;
  out.orientation = options.orientation;
  for (int i : cfg.moe_layer_indices()) {
    const int e = cfg.layers[i].experts;
    LayerPlacement lp;
    lp.layer = i;
    lp.experts = e;
    lp.expert_parallel = std::min(e, p);
    if (e >= p) {
      if (e % p != 0) {
        std::ostringstream os;
        os << "layer " << i << ": " << e << " experts do not divide evenly over "
           << p << " devices";
        throw PlanningError(os.str());
      }
    } else {
      if (p % e != 0) {
        std::ostringstream os;
        os << "layer " << i << ": " << p << " devices are not a multiple of "
           << e << " experts";
        throw PlanningError(os.str());
      }
      if (options.latency_mode)
        lp.expert_slice = p / e;
      else
        lp.expert_data_parallel = p / e;
    }
    out.layers.push_back(lp);
  }
  assign_devices(out);
  return out;
}

void assign_devices(ParallelPlan& plan) {
  const int p = plan.cluster.devices();
  const int l = std::max(plan.tensor_slice, 1);
  plan.devices.assign(static_cast<std::size_t>(p), {});
  for (int r = 0; r < p; ++r) {
    auto& d = plan.devices[static_cast<std::size_t>(r)];
    d.rank = r;
    d.node = plan.cluster.node_of(r);
    d.tensor_group = r / l;
    d.tensor_rank = r % l;
    d.shards.resize(plan.layers.size());
  }
  for (std::size_t li = 0; li < plan.layers.size(); ++li) {
    const auto& lp = plan.layers[li];
    const int ep = std::max(lp.expert_parallel, 1);
    const int slice = std::max(lp.expert_slice, 1);
    const int used = std::min(p, ep * std::max(lp.expert_data_parallel, 1) * slice);
    for (int r = 0; r < used; ++r) {
      const int group = (r / slice) % ep;
      // Balanced contiguous split: the first E % EP groups take one extra.
      const int base = lp.experts / ep;
      const int extra = lp.experts % ep;
      const int begin = group * base + std::min(group, extra);
      const int count = base + (group < extra ? 1 : 0);
      auto& shards = plan.devices[static_cast<std::size_t>(r)].shards[li];
      for (int e = begin; e < begin + count; ++e)
        shards.push_back({e, r % slice});
    }
  }
}

std::vector<std::string> validate(const ParallelPlan& plan) {
  std::vector<std::string> out;
  const int p = plan.cluster.devices();
  const int g = plan.cluster.gpus_per_node;
  const int l = plan.tensor_slice;

  if (l < 1 || l > g || g % l != 0) {
    std::ostringstream os;
    os << "tensor-slice group of " << l << " spans nodes of " << g << " GPUs";
    out.push_back(os.str());
  }
  if (l >= 1 && l * plan.data_parallel != p) {
    std::ostringstream os;
    os << "tensor-slice " << l << " x data-parallel " << plan.data_parallel
       << " != " << p << " devices";
    out.push_back(os.str());
  }
  if (static_cast<int>(plan.devices.size()) != p) {
    std::ostringstream os;
    os << "device map covers " << plan.devices.size() << " of " << p
       << " devices";
    out.push_back(os.str());
    return out;
  }

  for (std::size_t li = 0; li < plan.layers.size(); ++li) {
    const auto& lp = plan.layers[li];
    const long product = static_cast<long>(lp.expert_parallel) *
                         lp.expert_data_parallel * lp.expert_slice;
    if (product != p) {
      std::ostringstream os;
      os << "layer " << lp.layer << ": EP " << lp.expert_parallel
         << " x expert-DP " << lp.expert_data_parallel << " x slice "
         << lp.expert_slice << " != " << p << " devices";
      out.push_back(os.str());
    }
    std::size_t lo = SIZE_MAX, hi = 0;
    std::set<int> covered;
    for (const auto& d : plan.devices) {
      if (d.shards.size() != plan.layers.size()) {
        out.push_back("device " + std::to_string(d.rank) +
                      ": shard list does not match layer count");
        return out;
      }
      std::set<int> mine;
      for (const auto& s : d.shards[li]) {
        mine.insert(s.expert);
        covered.insert(s.expert);
      }
      lo = std::min(lo, mine.size());
      hi = std::max(hi, mine.size());
    }
    if (hi - lo > 1) {
      std::ostringstream os;
      os << "layer " << lp.layer << ": uneven experts per device (min " << lo
         << ", max " << hi << ")";
      out.push_back(os.str());
    }
    if (static_cast<int>(covered.size()) != lp.experts) {
      std::ostringstream os;
      os << "layer " << lp.layer << ": " << covered.size() << " of "
         << lp.experts << " experts placed";
      out.push_back(os.str());
    }
  }

  for (const auto& d : plan.devices) {
    if (l < 1) break;
    const int first = d.tensor_group * l;
    const int last = first + l - 1;
    if (plan.cluster.node_of(first) != plan.cluster.node_of(last)) {
      std::ostringstream os;
      os << "tensor-slice group " << d.tensor_group << " spans nodes";
      out.push_back(os.str());
      break;
    }
  }
  return out;
}

std::vector<double> memory_per_device(const ParallelPlan& plan,
                                      const arch::MoeModelConfig& cfg,
                                      double bytes_per_param) {
  const auto totals = arch::count_params(cfg);
  const double non_expert = static_cast<double>(totals.non_expert) *
                            bytes_per_param /
                            static_cast<double>(std::max(plan.tensor_slice, 1));
  std::vector<double> out;
  out.reserve(plan.devices.size());
  for (const auto& d : plan.devices) {
    double bytes = non_expert;
    for (std::size_t li = 0; li < plan.layers.size() && li < d.shards.size();
         ++li) {
      const auto& lp = plan.layers[li];
      const auto& spec = cfg.layers.at(static_cast<std::size_t>(lp.layer));
      const double per_expert =
          static_cast<double>(arch::count_layer_params(spec).expert) /
          static_cast<double>(spec.experts);
      bytes += static_cast<double>(d.shards[li].size()) * per_expert *
               bytes_per_param / static_cast<double>(std::max(lp.expert_slice, 1));
    }
    out.push_back(bytes);
  }
  return out;
}

}  // namespace dsmoe::parallel
