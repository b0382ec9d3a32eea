#pragma once

#include "tokenflow/tensor.hpp"

#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace tokenflow {

class Tape;

/// One value in the computation: a leaf (parameter or constant) or the
/// result of a primitive recorded on a tape.
struct Node {
  Tensor value;
  Tensor grad;  // empty until something flows into it
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;
  const Tape* tape = nullptr;

  void accumulate(const Tensor& g);
  template <typename Derived>
  void accumulate_matrix(const Eigen::MatrixBase<Derived>& g) {
    if (grad.numel() == 0 && value.numel() != 0) {
      grad = Tensor::uninitialized(value.shape());
      grad.matrix() = g;
      return;
    }
    grad.matrix() += g;
  }
};

/// Handle to a Node. Copies share the node.
class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false);
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Var parameter(Tensor value) { return Var(std::move(value), true); }
  static Var constant(Tensor value) { return Var(std::move(value), false); }

  bool defined() const { return node_ != nullptr; }
  const Tensor& value() const { return node_->value; }
  /// In-place access for optimizer updates and checkpoint loading only.
  Tensor& mutable_value() { return node_->value; }
  const Tensor& grad() const { return node_->grad; }
  bool has_grad() const { return node_->grad.numel() != 0; }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool flag) { node_->requires_grad = flag; }
  void zero_grad() { node_->grad = Tensor(); }

  const Shape& shape() const { return node_->value.shape(); }
  Index numel() const { return node_->value.numel(); }
  double item() const { return node_->value.item(); }

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& handle() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

/// Define-by-run record of primitive applications. Nodes are appended in
/// execution order, which is a topological order by construction.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(const std::shared_ptr<Node>& node);
  /// Seeds d(loss)/d(loss) = 1 and runs every recorded backward in reverse.
  /// Leaf gradients accumulate (+=) across calls.
  void backward(const Var& loss);
  std::size_t size() const { return nodes_.size(); }
  const std::vector<std::shared_ptr<Node>>& nodes() const { return nodes_; }
  void clear() { nodes_.clear(); }

  /// Tape receiving new nodes on this thread, or nullptr.
  static Tape* active();

 private:
  friend class TapeGuard;
  std::vector<std::shared_ptr<Node>> nodes_;
};

/// Makes a tape active for the current thread for the guard's lifetime.
class TapeGuard {
 public:
  explicit TapeGuard(Tape& tape);
  ~TapeGuard();
  TapeGuard(const TapeGuard&) = delete;
  TapeGuard& operator=(const TapeGuard&) = delete;

 private:
  Tape* previous_;
};

/// Suspends recording (inference paths) for the guard's lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  Tape* previous_;
};

using ScalarFunction = std::function<Var(const std::vector<Var>&)>;

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_input = 0;
  Index worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

/// Compares reverse-mode gradients of a scalar function against central
/// differences: max |analytic - numeric| / max(1e-8, |numeric|).
GradCheckResult grad_check_detailed(const ScalarFunction& f, const std::vector<Tensor>& point, double step = 1e-5);
double grad_check(const ScalarFunction& f, const std::vector<Tensor>& point, double step = 1e-5);

}  // namespace tokenflow
