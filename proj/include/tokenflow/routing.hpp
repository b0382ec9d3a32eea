#pragma once

#include "tokenflow/autograd.hpp"
#include "tokenflow/config.hpp"

#include <random>
#include <span>
#include <vector>

namespace tokenflow {

/// Linear(d -> d_r) -> GELU -> Linear(d_r -> 1).
struct RouterParams {
  Var w1, b1, w2, b2;
};

/// Pre-norm encoder block. The key projection has no bias: softmax is
/// invariant to it, so it could never receive a gradient.
struct BlockParams {
  Var ln1_g, ln1_b;
  Var wq, bq, wk, wv, bv, wo, bo;
  Var ln2_g, ln2_b;
  Var ff1_w, ff1_b, ff2_w, ff2_b;
};

struct RoutingDecision {
  std::vector<Index> selected;  // ascending
  std::vector<Index> bypassed;  // ascending
};

/// Shapes seen inside one block application; the complexity witness.
struct BlockTrace {
  Index attention_rows = 0;
  Index attention_cols = 0;
  Index tokens_processed = 0;
};

RouterParams init_router_params(const ModelConfig& config, std::mt19937_64& rng);
BlockParams init_block_params(const ModelConfig& config, std::mt19937_64& rng);

/// s = Router(X), returned as an [N, 1] column.
Var score_tokens(const Var& x, const RouterParams& params);

/// Top-K by score with ties to the lower index; cls_index is pinned into the
/// selection. Throws if K is outside [1, N].
RoutingDecision select_topk(std::span<const double> scores, Index k, Index cls_index = 0);

/// Residual-branch output of one encoder block on the given rows:
/// E(x) - x = MHA(LN1 x) + MLP(LN2 (x + MHA(LN1 x))).
Var block_delta(const Var& x, const BlockParams& block, Index heads, BlockTrace* trace = nullptr);

/// Gated block contribution s_i * E(X_sel)_i scattered into an all-zero [N, d]
/// matrix. Shared by the single- and dual-pass paths.
Var gated_update(const Var& x, const Var& scores, const RoutingDecision& decision, const BlockParams& block,
                 Index heads, GateMode gate, BlockTrace* trace = nullptr);

/// X̄_i = X_i + s_i * E(X_sel)_i for selected i, X̄_i = X_i otherwise.
Var routed_block_forward(const Var& x, const Var& scores, const RoutingDecision& decision, const BlockParams& block,
                         Index heads, GateMode gate = GateMode::kRaw, BlockTrace* trace = nullptr);

}  // namespace tokenflow
