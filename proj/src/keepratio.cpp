#include "tokenflow/keepratio.hpp"

#include "tokenflow/ops.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace tokenflow {

Bracket bracket_ratio(double r, Index n) {
  if (n < 1) throw std::invalid_argument("bracket_ratio: N must be positive");
  const double nr = double(n) * r;
  if (!std::isfinite(r) || nr < 1.0 - kLatticeTolerance || r > 1.0 + kLatticeTolerance / double(n)) {
    throw std::invalid_argument("bracket_ratio: r=" + std::to_string(r) + " outside [1/N, 1] for N=" +
                                std::to_string(n));
  }
  Bracket b;
  const double nearest = std::round(nr);
  if (std::abs(nr - nearest) <= kLatticeTolerance) {
    b.k_down = b.k_up = Index(nearest);
    b.w_up = 0.0;
    b.w_down = 1.0;
    b.degenerate = true;
    return b;
  }
  b.k_down = Index(std::floor(nr));
  b.k_up = std::min(b.k_down + 1, n);
  b.w_up = nr - double(b.k_down);
  b.w_down = double(b.k_up) - nr;
  return b;
}

Index inference_k(double r, Index n) {
  const Index k = Index(std::ceil(double(n) * r - kLatticeTolerance));
  return std::clamp<Index>(k, 1, n);
}

Var dual_pass_combine(const Var& x, const Var& scores, const Var& ratio, const BlockParams& block, Index heads,
                      GateMode gate, DualPassTrace* trace) {
  const Index n = x.shape()[0];
  if (ratio.numel() != 1) throw std::invalid_argument("dual_pass_combine: ratio must hold one value");
  const Bracket b = bracket_ratio(ratio.value()[0], n);
  if (trace) trace->bracket = b;
  std::vector<double> s(scores.value().data(), scores.value().data() + scores.numel());
  if (b.degenerate) {
    return routed_block_forward(x, scores, select_topk(s, b.k_up), block, heads, gate, trace ? &trace->up : nullptr);
  }
  if (b.k_up > n || b.k_down < 1) throw std::invalid_argument("dual_pass_combine: bracket inconsistent with N");
  const Var up = gated_update(x, scores, select_topk(s, b.k_up), block, heads, gate, trace ? &trace->up : nullptr);
  const Var down =
      gated_update(x, scores, select_topk(s, b.k_down), block, heads, gate, trace ? &trace->down : nullptr);
  const Var nr = scale(ratio, double(n));
  const Var w_up = sub(nr, Var::constant(Tensor::full(ratio.shape(), double(b.k_down))));
  const Var w_down = sub(Var::constant(Tensor::full(ratio.shape(), double(b.k_up))), nr);
  return add(x, add(mul(up, w_up), mul(down, w_down)));
}

Var budget_penalty(std::span<const Var> ratios, double target, double lambda) {
  if (ratios.empty()) throw std::invalid_argument("budget_penalty: no ratios");
  std::vector<Var> columns;
  columns.reserve(ratios.size());
  for (const auto& r : ratios) columns.push_back(reshape(r, {1, 1}));
  const Var avg = mean(concat(columns, 0));
  const Var gap = sub(avg, Var::constant(Tensor::scalar(target)));
  return scale(mul(gap, gap), lambda);
}

double target_ratio_from_flops(double gamma, double flops_max, double r_min) {
  if (!(gamma > 0.0) || !(flops_max > 0.0)) {
    throw std::invalid_argument("target_ratio_from_flops: budget and full-model FLOPs must be positive");
  }
  return std::clamp(std::sqrt(gamma / flops_max), r_min, 1.0);
}

}  // namespace tokenflow
