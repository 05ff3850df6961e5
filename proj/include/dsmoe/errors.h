#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace dsmoe {

// Operand shapes disagree (matrix dims, batch sizes, expert counts).
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// An index (label, expert id, slot) lies outside its valid range.
class IndexError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

// A configuration or constructor argument violates a documented invariant.
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// The parallel planner cannot map the model onto the requested cluster.
class PlanningError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A communication schedule precondition does not hold.
class ScheduleError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Training produced a non-finite loss.
class TrainingError : public std::runtime_error {
 public:
  TrainingError(const std::string& what, std::int64_t step)
      : std::runtime_error(what + " at step " + std::to_string(step)),
        step_(step) {}

  std::int64_t step() const { return step_; }

 private:
  std::int64_t step_;
};

}  // namespace dsmoe
