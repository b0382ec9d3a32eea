#include "tokenflow/routing.hpp"

#include "tokenflow/init.hpp"
#include "tokenflow/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace tokenflow {

namespace {

constexpr double kInitSigma = 0.02;

Var weight(Index in, Index out, std::mt19937_64& rng) {
  return Var::parameter(truncated_normal({in, out}, kInitSigma, rng));
}

Var zeros(Index n) { return Var::parameter(Tensor({n})); }
Var ones(Index n) { return Var::parameter(Tensor::full({n}, 1.0)); }

}  // namespace

RouterParams init_router_params(const ModelConfig& config, std::mt19937_64& rng) {
  const Index dr = config.router_width();
  RouterParams p{weight(config.d, dr, rng), zeros(dr), weight(dr, 1, rng), zeros(1)};
  p.b2.mutable_value()[0] = config.router_bias_init;
  return p;
}

BlockParams init_block_params(const ModelConfig& config, std::mt19937_64& rng) {
  const Index d = config.d, f = config.d_ff;
  BlockParams b;
  b.ln1_g = ones(d);
  b.ln1_b = zeros(d);
  b.wq = weight(d, d, rng);
  b.bq = zeros(d);
  b.wk = weight(d, d, rng);
  b.wv = weight(d, d, rng);
  b.bv = zeros(d);
  b.wo = weight(d, d, rng);
  b.bo = zeros(d);
  b.ln2_g = ones(d);
  b.ln2_b = zeros(d);
  b.ff1_w = weight(d, f, rng);
  b.ff1_b = zeros(f);
  b.ff2_w = weight(f, d, rng);
  b.ff2_b = zeros(d);
  return b;
}

Var score_tokens(const Var& x, const RouterParams& p) {
  return linear(gelu(linear(x, p.w1, p.b1)), p.w2, p.b2);
}

RoutingDecision select_topk(std::span<const double> scores, Index k, Index cls_index) {
  const Index n = Index(scores.size());
  if (k < 1 || k > n) {
    throw std::invalid_argument("select_topk: K=" + std::to_string(k) + " outside [1," + std::to_string(n) + "]");
  }
  if (cls_index < 0 || cls_index >= n) throw std::invalid_argument("select_topk: CLS index out of range");
  // CLS first, then the rest by descending score with ties to the lower index.
  // Taking a prefix makes Top-(K-1) a subset of Top-K for every K.
  std::vector<Index> order;
  order.reserve(std::size_t(n));
  for (Index i = 0; i < n; ++i) {
    if (i != cls_index) order.push_back(i);
  }
  std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) { return scores[a] > scores[b]; });
  order.insert(order.begin(), cls_index);

  RoutingDecision d;
  std::vector<bool> chosen(std::size_t(n), false);
  for (Index i = 0; i < k; ++i) chosen[std::size_t(order[std::size_t(i)])] = true;
  for (Index i = 0; i < n; ++i) (chosen[std::size_t(i)] ? d.selected : d.bypassed).push_back(i);
  return d;
}

Var block_delta(const Var& x, const BlockParams& b, Index heads, BlockTrace* trace) {
  const Index k = x.shape()[0], d = x.shape()[1];
  if (d % heads != 0) throw std::invalid_argument("block_delta: d not divisible by heads");
  const Index dh = d / heads;
  const Var h1 = layer_norm(x, b.ln1_g, b.ln1_b);
  const Var q = linear(h1, b.wq, b.bq);
  const Var key = linear(h1, b.wk, Var());
  const Var v = linear(h1, b.wv, b.bv);
  std::vector<Var> outputs;
  outputs.reserve(std::size_t(heads));
  const double inv_sqrt = 1.0 / std::sqrt(double(dh));
  for (Index h = 0; h < heads; ++h) {
    const Var qh = slice_cols(q, h * dh, dh);
    const Var kh = slice_cols(key, h * dh, dh);
    const Var vh = slice_cols(v, h * dh, dh);
    const Var attn = softmax(scale(matmul(qh, transpose(kh)), inv_sqrt));  // [K, K]
    if (trace) {
      trace->attention_rows = attn.shape()[0];
      trace->attention_cols = attn.shape()[1];
    }
    outputs.push_back(matmul(attn, vh));
  }
  const Var a = linear(heads == 1 ? outputs[0] : concat(outputs, 1), b.wo, b.bo);
  const Var mid = add(x, a);
  const Var m = linear(gelu(linear(layer_norm(mid, b.ln2_g, b.ln2_b), b.ff1_w, b.ff1_b)), b.ff2_w, b.ff2_b);
  if (trace) trace->tokens_processed = k;
  return add(a, m);
}

Var gated_update(const Var& x, const Var& scores, const RoutingDecision& decision, const BlockParams& block,
                 Index heads, GateMode gate, BlockTrace* trace) {
  const Index n = x.shape()[0];
  if (scores.shape() != Shape{n, 1}) {
    throw std::invalid_argument("routed block: scores " + shape_string(scores.shape()) + " do not match " +
                                shape_string(x.shape()));
  }
  const Var delta = block_delta(gather_rows(x, decision.selected), block, heads, trace);
  Var s = gather_rows(scores, decision.selected);
  if (gate == GateMode::kSigmoid) s = sigmoid(s);
  return scatter_rows_add(Var::constant(Tensor(x.shape())), decision.selected, mul(delta, s));
}

Var routed_block_forward(const Var& x, const Var& scores, const RoutingDecision& decision, const BlockParams& block,
                         Index heads, GateMode gate, BlockTrace* trace) {
  const Index n = x.shape()[0];
  if (scores.shape() != Shape{n, 1}) {
    throw std::invalid_argument("routed block: scores " + shape_string(scores.shape()) + " do not match " +
                                shape_string(x.shape()));
  }
  const Var delta = block_delta(gather_rows(x, decision.selected), block, heads, trace);
  Var s = gather_rows(scores, decision.selected);
  if (gate == GateMode::kSigmoid) s = sigmoid(s);
  return scatter_rows_add(x, decision.selected, mul(delta, s));
}

}  // namespace tokenflow
