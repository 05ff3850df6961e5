#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "dsmoe/errors.h"
#include "dsmoe/parallel.h"
#include "dsmoe/serialize.h"

namespace dsmoe::parallel {
namespace {

arch::DenseConfig base_1_3b() { return {24, 2048, 16, 50257, 2048}; }

ClusterTopology cluster(int devices, int gpus_per_node = 8) {
  ClusterTopology c;
  c.gpus_per_node = std::min(devices, gpus_per_node);
  c.nodes = devices / c.gpus_per_node;
  return c;
}

arch::MoeModelConfig pyramid_32_64_128() {
  std::vector<int> schedule = arch::pyramid_schedule(4, 32, 4, 64);
  schedule.insert(schedule.end(), 4, 128);
  return arch::build_pr_moe(base_1_3b(), schedule, true);
}

TEST(TopologyTest, Validation) {
  EXPECT_NO_THROW(cluster(16).validate());
  ClusterTopology bad = cluster(16);
  bad.inter.latency_s = 0.0;
  EXPECT_THROW(bad.validate(), ValidationError);
  bad = cluster(16);
  bad.nodes = 0;
  EXPECT_THROW(bad.validate(), ValidationError);
}

TEST(PlanTest, MultiExpertMultiData) {
  const auto cfg = pyramid_32_64_128();
  const auto p = plan(cfg, cluster(128));
  ASSERT_EQ(p.layers.size(), 12u);
  for (const auto& lp : p.layers) {
    EXPECT_EQ(lp.expert_parallel, lp.experts);
    EXPECT_EQ(lp.expert_data_parallel, 128 / lp.experts);
    EXPECT_EQ(lp.expert_slice, 1);
  }
  for (const auto& d : p.devices)
    for (const auto& shards : d.shards) EXPECT_EQ(shards.size(), 1u);
  EXPECT_TRUE(validate(p).empty());
}

TEST(PlanTest, ExpertSlicingInLatencyMode) {
  const auto cfg = arch::build_standard(base_1_3b(), 128);
  const auto sliced = plan(cfg, cluster(256), {true, 1, SliceOrientation::kColumn});
  EXPECT_EQ(sliced.layers[0].expert_slice, 2);
  EXPECT_EQ(sliced.layers[0].expert_data_parallel, 1);
  EXPECT_TRUE(validate(sliced).empty());
  const auto replicated = plan(cfg, cluster(256));
  EXPECT_EQ(replicated.layers[0].expert_slice, 1);
  EXPECT_EQ(replicated.layers[0].expert_data_parallel, 2);
}

TEST(PlanTest, TrivialAndFewerDevices) {
  const auto cfg = arch::build_standard(base_1_3b(), 128);
  const auto p = plan(cfg, cluster(128));
  EXPECT_EQ(p.layers[0].expert_parallel, 128);
  EXPECT_EQ(p.layers[0].expert_data_parallel, 1);
  const auto q = plan(cfg, cluster(32));
  EXPECT_EQ(q.layers[0].expert_parallel, 32);
  for (const auto& d : q.devices) EXPECT_EQ(d.shards[0].size(), 4u);
  EXPECT_TRUE(validate(q).empty());
}

TEST(PlanTest, RejectsIndivisible) {
  const auto cfg = arch::build_standard(base_1_3b(), 128);
  EXPECT_THROW(plan(cfg, cluster(96, 8)), PlanningError);
  const auto small = arch::build_standard(base_1_3b(), 12);
  EXPECT_THROW(plan(small, cluster(16)), PlanningError);
  EXPECT_THROW(plan(cfg, cluster(128), {false, 16, SliceOrientation::kColumn}), PlanningError);
  EXPECT_THROW(plan(cfg, cluster(128), {false, 3, SliceOrientation::kColumn}), PlanningError);
}

TEST(PlanTest, GeneratedPlansValidateAndAreDeterministic) {
  const auto cfg = pyramid_32_64_128();
  for (int p : {32, 64, 128, 256, 512})
    for (bool latency : {false, true})
      for (int l : {1, 2, 4, 8}) {
        const PlanOptions opts{latency, l, SliceOrientation::kColumn};
        const auto a = plan(cfg, cluster(p), opts);
        EXPECT_TRUE(validate(a).empty()) << p << " " << l;
        EXPECT_EQ(a, plan(cfg, cluster(p), opts));
        EXPECT_EQ(a.data_parallel * a.tensor_slice, p);
      }
}

TEST(ValidateTest, UnevenExpertsCounterexample) {
  auto p = plan(arch::build_standard(base_1_3b(), 128), cluster(128));
  p.layers[0].expert_parallel = 96;
  assign_devices(p);
  const auto v = validate(p);
  ASSERT_FALSE(v.empty());
  EXPECT_TRUE(std::any_of(v.begin(), v.end(), [](const std::string& s) {
    return s.find("uneven experts per device") != std::string::npos;
  }));
}

TEST(ValidateTest, TensorGroupSpanningNodes) {
  auto p = plan(arch::build_standard(base_1_3b(), 128), cluster(128));
  p.tensor_slice = 16;
  p.data_parallel = 8;
  assign_devices(p);
  const auto v = validate(p);
  EXPECT_TRUE(std::any_of(v.begin(), v.end(), [](const std::string& s) {
    return s.find("spans nodes") != std::string::npos;
  }));
}

TEST(MemoryTest, Proportionality) {
  const auto cfg = arch::build_standard(base_1_3b(), 128);
  const auto counts = arch::count_params(cfg);
  const auto p128 = plan(cfg, cluster(128));
  const auto mem = memory_per_device(p128, cfg, 2.0);
  const double want = static_cast<double>(counts.expert) / 128.0 * 2.0 +
                      static_cast<double>(counts.non_expert) * 2.0;
  for (double m : mem) EXPECT_NEAR(m, want, 1e-6 * want);

  const auto p64 = plan(cfg, cluster(64));
  const double expert64 = memory_per_device(p64, cfg, 2.0)[0] - static_cast<double>(counts.non_expert) * 2.0;
  const double expert128 = mem[0] - static_cast<double>(counts.non_expert) * 2.0;
  EXPECT_NEAR(expert128, expert64 / 2.0, 1e-6 * expert64);

  const auto l8 = plan(cfg, cluster(128), {false, 8, SliceOrientation::kColumn});
  const double non_expert8 = memory_per_device(l8, cfg, 2.0)[0] - expert128;
  EXPECT_NEAR(non_expert8, static_cast<double>(counts.non_expert) * 2.0 / 8.0, 1e-3);
}

TEST(MemoryTest, ActivePathUnderFullExpertParallelism) {
  const auto cfg = arch::build_standard(base_1_3b(), 128);
  const double active = static_cast<double>(arch::count_params(cfg).active_per_token);
  EXPECT_LE(std::abs(active - 1.3e9) / 1.3e9, 0.05);
}

TEST(SerializeTest, PlanRoundTrip) {
  const auto p = plan(pyramid_32_64_128(), cluster(64), {true, 4, SliceOrientation::kRow});
  const nlohmann::json j = p;
  const auto back = j.get<ParallelPlan>();
  EXPECT_EQ(back, p);
  nlohmann::json extra = j;
  extra["bogus"] = 1;
  EXPECT_THROW(extra.get<ParallelPlan>(), ValidationError);
}

}  // namespace
}  // namespace dsmoe::parallel
