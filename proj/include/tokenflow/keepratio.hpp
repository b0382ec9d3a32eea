#pragma once

#include "tokenflow/routing.hpp"

#include <span>

namespace tokenflow {

struct Bracket {
  Index k_down = 0;
  Index k_up = 0;
  double w_up = 0.0;
  double w_down = 1.0;
  bool degenerate = false;
};

/// N*r closer than this to an integer is treated as integral.
inline constexpr double kLatticeTolerance = 1e-9;

/// Rounds N*r to its two neighbouring integers. Throws if r lies outside
/// [1/N, 1] (with lattice tolerance).
Bracket bracket_ratio(double r, Index n);

/// Token count used at inference: ceil(N*r), floored at 1 for CLS.
Index inference_k(double r, Index n);

struct DualPassTrace {
  Bracket bracket;
  BlockTrace up;
  BlockTrace down;
};

/// X̄ = X + w_up * U_up + w_down * U_down where U_K is the gated block update
/// at Top-K; w_up = N r - K_down and w_down = K_up - N r are built from the
/// ratio Var so dX̄/dr = N (U_up - U_down). Degenerate brackets run one pass.
/// Both passes share the same scores.
Var dual_pass_combine(const Var& x, const Var& scores, const Var& ratio, const BlockParams& block, Index heads,
                      GateMode gate = GateMode::kRaw, DualPassTrace* trace = nullptr);

/// lambda * (mean(r) - target)^2 over ratio Vars of shape [1].
Var budget_penalty(std::span<const Var> ratios, double target, double lambda);

/// gamma' = sqrt(gamma / flops_max), clamped to [r_min, 1].
double target_ratio_from_flops(double gamma, double flops_max, double r_min = 0.0);

}  // namespace tokenflow
