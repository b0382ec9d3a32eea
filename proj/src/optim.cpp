#include "tokenflow/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace tokenflow {

void Adam::add(std::string name, Var param, ParamOptions options) {
  if (!param.defined()) throw std::invalid_argument("adam: undefined parameter " + name);
  const Index n = param.numel();
  slots_.push_back({std::move(name), std::move(param), options, Eigen::VectorXd::Zero(n), Eigen::VectorXd::Zero(n)});
}

StepStatus Adam::step() {
  for (const auto& slot : slots_) {
    if (slot.param.has_grad() && !slot.param.grad().all_finite()) {
      return {false, "non-finite gradient in " + slot.name};
    }
  }
  ++step_;
  const double bc1 = 1.0 - std::pow(options_.beta1, double(step_));
  const double bc2 = 1.0 - std::pow(options_.beta2, double(step_));
  for (auto& slot : slots_) {
    Var& p = slot.param;
    const double lr = slot.options.lr.value_or(options_.lr);
    const double wd = slot.options.weight_decay.value_or(options_.weight_decay);
    auto& w = p.mutable_value().values();
    if (p.has_grad()) {
      const auto& g = p.grad().values();
      if (g.size() != w.size()) throw std::logic_error("adam: gradient shape mismatch for " + slot.name);
      slot.m = options_.beta1 * slot.m + (1.0 - options_.beta1) * g;
      slot.v = options_.beta2 * slot.v + (1.0 - options_.beta2) * g.cwiseAbs2();
    } else {
      slot.m *= options_.beta1;
      slot.v *= options_.beta2;
    }
    if (wd != 0.0) w *= (1.0 - lr * wd);
    w.array() -= lr * (slot.m.array() / bc1) / ((slot.v.array() / bc2).sqrt() + options_.eps);
    if (std::isfinite(slot.options.clamp_min) || std::isfinite(slot.options.clamp_max)) {
      w = w.cwiseMax(slot.options.clamp_min).cwiseMin(slot.options.clamp_max);
    }
  }
  return {};
}

void Adam::zero_grad() {
  for (auto& slot : slots_) slot.param.zero_grad();
}

}  // namespace tokenflow
