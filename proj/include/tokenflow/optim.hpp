#pragma once

#include "tokenflow/autograd.hpp"

#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

namespace tokenflow {

struct AdamOptions {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

/// Per-parameter overrides. A clamp range is applied as a projection after
/// every step.
struct ParamOptions {
  std::optional<double> lr;
  std::optional<double> weight_decay;
  double clamp_min = -std::numeric_limits<double>::infinity();
  double clamp_max = std::numeric_limits<double>::infinity();
};

struct StepStatus {
  bool applied = true;
  std::string reason;
};

/// Adam with decoupled weight decay.
class Adam {
 public:
  struct Slot {
    std::string name;
    Var param;
    ParamOptions options;
    Eigen::VectorXd m;
    Eigen::VectorXd v;
  };

  explicit Adam(AdamOptions options = {}) : options_(options) {}

  void add(std::string name, Var param, ParamOptions options = {});

  /// Applies one update from the accumulated gradients. Parameters without a
  /// gradient are treated as having zero gradient. A non-finite gradient
  /// anywhere skips the whole step.
  StepStatus step();
  void zero_grad();

  std::int64_t step_count() const { return step_; }
  const std::vector<Slot>& slots() const { return slots_; }
  const AdamOptions& options() const { return options_; }
  void set_lr(double lr) { options_.lr = lr; }

 private:
  AdamOptions options_;
  std::vector<Slot> slots_;
  std::int64_t step_ = 0;
};

}  // namespace tokenflow
