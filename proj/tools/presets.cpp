#include "presets.h"

namespace dsmoe::cli {

namespace {

arch::DenseConfig base(int layers, std::size_t hidden, int heads) {
  return {layers, hidden, heads, 50257, 2048};
}

std::vector<Preset> build_presets() {
  const auto b350 = base(24, 1024, 16);
  const auto b13 = base(24, 2048, 16);
  const auto b67 = base(32, 4096, 32);
  std::vector<Preset> out;
  out.push_back({"dense-350M", arch::build_dense(b350), 350e6, 1, 0});
  out.push_back({"dense-1.3B", arch::build_dense(b13), 1.3e9, 1, 0});
  out.push_back({"dense-6.7B", arch::build_dense(b67), 6.7e9, 1, 0});
  out.push_back({"350M+MoE-128", arch::build_standard(b350, 128), 13e9, 1, 128});
  out.push_back({"1.3B+MoE-128", arch::build_standard(b13, 128), 52e9, 1, 128});
  out.push_back({"350M+PR-MoE-32/64",
                 arch::build_pr_moe(b350, arch::pyramid_schedule(10, 32, 2, 64), true),
                 4e9, 1, 64});
  out.push_back({"1.3B+PR-MoE-64/128",
                 arch::build_pr_moe(b13, arch::pyramid_schedule(10, 64, 2, 128), true),
                 31e9, 1, 128});
  // Inference-scale standard MoE models; 128 head width assumed.
  out.push_back({"2.4B+MoE-128", arch::build_standard(base(16, 3584, 28), 128), 107.7e9, 1, 128});
  out.push_back({"8B+MoE-128", arch::build_standard(base(30, 4096, 32), 128), 349.0e9, 4, 128});
  out.push_back({"24B+MoE-128", arch::build_standard(base(40, 8192, 64), 128), 1064.9e9, 8, 128});
  out.push_back({"47B+MoE-128", arch::build_standard(base(58, 8192, 64), 128), 2024.0e9, 8, 128});
  return out;
}

}  // namespace

const std::vector<Preset>& presets() {
  static const std::vector<Preset> all = build_presets();
  return all;
}

const Preset* find_preset(const std::string& name) {
  for (const auto& p : presets())
    if (p.name == name) return &p;
  return nullptr;
}

}  // namespace dsmoe::cli
