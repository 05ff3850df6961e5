#pragma once

#include <optional>
#include <ostream>
#include <string>

#include "run_config.h"

namespace dsmoe::cli {

// Exit codes.
inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitValidation = 3;
inline constexpr int kExitNumerical = 4;

// Plan failed validation; carries the violation list.
class PlanViolation : public std::runtime_error {
 public:
  explicit PlanViolation(std::vector<std::string> violations);
  const std::vector<std::string>& violations() const { return violations_; }

 private:
  std::vector<std::string> violations_;
};

struct CommandContext {
  RunConfig config;
  std::optional<std::string> preset;
  std::optional<std::string> plan_path;   // simulate: prebuilt plan JSON
  std::optional<std::string> trace_dir;   // simulate: per-schedule traces
};

void cmd_params(const CommandContext& ctx, std::ostream& out);
void cmd_route_bench(const CommandContext& ctx, std::ostream& out);
void cmd_simulate(const CommandContext& ctx, std::ostream& out);
void cmd_plan(const CommandContext& ctx, std::ostream& out);
void cmd_distill(const CommandContext& ctx, std::ostream& out);
void cmd_kd_demo(const CommandContext& ctx, std::ostream& out);

// Parses argv, dispatches, and maps exceptions to exit codes.
int run(int argc, char** argv);

}  // namespace dsmoe::cli
