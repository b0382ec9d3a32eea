#include "tokenflow/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace tokenflow {

namespace {
thread_local Tape* g_active_tape = nullptr;
}

void Node::accumulate(const Tensor& g) {
  if (g.numel() != value.numel()) {
    throw std::logic_error(std::string("backward: gradient for '") + op + "' has shape " + shape_string(g.shape()) +
                           ", value has " + shape_string(value.shape()));
  }
  if (grad.numel() == 0) {
    grad = Tensor(value.shape(), g.values());
  } else {
    grad.values() += g.values();
  }
}

Var::Var(Tensor value, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

void Tape::record(const std::shared_ptr<Node>& node) {
  node->tape = this;
  nodes_.push_back(node);
}

void Tape::backward(const Var& loss) {
  if (!loss.defined()) throw std::invalid_argument("backward: undefined loss");
  if (loss.numel() != 1) {
    throw std::invalid_argument("backward: loss must be scalar, got shape " + shape_string(loss.shape()));
  }
  if (loss.node()->tape != this) {
    throw std::invalid_argument("backward: loss is not recorded on this tape (detached graph)");
  }
  loss.node()->accumulate(Tensor(loss.shape(), Tensor::Storage::Ones(1)));
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    Node& node = **it;
    if (node.grad.numel() != 0 && node.backward) node.backward(node);
  }
}

Tape* Tape::active() { return g_active_tape; }

TapeGuard::TapeGuard(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
TapeGuard::~TapeGuard() { g_active_tape = previous_; }

NoGradGuard::NoGradGuard() : previous_(g_active_tape) { g_active_tape = nullptr; }
NoGradGuard::~NoGradGuard() { g_active_tape = previous_; }

GradCheckResult grad_check_detailed(const ScalarFunction& f, const std::vector<Tensor>& point, double step) {
  std::vector<Var> leaves;
  leaves.reserve(point.size());
  for (const auto& p : point) leaves.push_back(Var::parameter(p));

  {
    Tape tape;
    TapeGuard guard(tape);
    Var loss = f(leaves);
    if (!loss.value().all_finite()) throw std::domain_error("grad_check: non-finite function value");
    tape.backward(loss);
  }

  auto evaluate = [&](std::size_t which, Index idx, double delta) {
    NoGradGuard no_grad;
    std::vector<Var> probe;
    probe.reserve(point.size());
    for (std::size_t i = 0; i < point.size(); ++i) {
      Tensor t = point[i];
      if (i == which) t[idx] += delta;
      probe.push_back(Var::constant(std::move(t)));
    }
    const double v = f(probe).item();
    if (!std::isfinite(v)) throw std::domain_error("grad_check: non-finite function value near point");
    return v;
  };

  GradCheckResult result;
  for (std::size_t i = 0; i < point.size(); ++i) {
    for (Index j = 0; j < point[i].numel(); ++j) {
      const double analytic = leaves[i].has_grad() ? leaves[i].grad()[j] : 0.0;
      const double numeric = (evaluate(i, j, step) - evaluate(i, j, -step)) / (2.0 * step);
      const double err = std::abs(analytic - numeric) / std::max(1e-8, std::abs(numeric));
      if (err >= result.max_rel_error) result = {err, i, j, analytic, numeric};
    }
  }
  return result;
}

double grad_check(const ScalarFunction& f, const std::vector<Tensor>& point, double step) {
  return grad_check_detailed(f, point, step).max_rel_error;
}

}  // namespace tokenflow
