#include "tokenflow/keepratio.hpp"

#include "tokenflow/ops.hpp"
#include "test_support.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <limits>

using namespace tokenflow;
using tokenflow::testing::normal_tensor;

namespace {

struct Fixture {
  ModelConfig c = ModelConfig::tiny();
  BlockParams block;
  Tensor x;
  Tensor scores;
  Tensor upstream;

  explicit Fixture(std::uint64_t seed, Index n = 10) {
    std::mt19937_64 rng(seed);
    block = init_block_params(c, rng);
    for (Var* v : {&block.wq, &block.wk, &block.wv, &block.wo, &block.ff1_w, &block.ff2_w}) {
      v->mutable_value() = normal_tensor(v->shape(), rng, 0.4);
    }
    x = normal_tensor({n, c.d}, rng);
    scores = normal_tensor({n, 1}, rng);
    upstream = normal_tensor({n, c.d}, rng);
  }

  Index n() const { return x.dim(0); }

  std::vector<double> score_vec() const { return {scores.data(), scores.data() + scores.numel()}; }

  // Single routed block at a fixed K; the reference for one pass.
  Tensor single(Index k) const {
    return routed_block_forward(Var::constant(x), Var::constant(scores), select_topk(score_vec(), k), block, c.heads)
        .value();
  }

  Tensor combined(double r) const {
    return dual_pass_combine(Var::constant(x), Var::constant(scores), Var::constant(Tensor({1}, {r})), block, c.heads)
        .value();
  }
};

double dot(const Tensor& a, const Tensor& b) { return a.values().dot(b.values()); }

}  // namespace

TEST(Bracket, FractionalRatio) {
  const Bracket b = bracket_ratio(0.53, 10);
  EXPECT_EQ(b.k_down, 5);
  EXPECT_EQ(b.k_up, 6);
  EXPECT_NEAR(b.w_up, 0.3, 1e-12);
  EXPECT_NEAR(b.w_down, 0.7, 1e-12);
  EXPECT_FALSE(b.degenerate);
}

TEST(Bracket, LatticeValuesAreDegenerate) {
  for (const auto& [r, k] : std::vector<std::pair<double, Index>>{{0.5, 5}, {1.0, 10}, {0.1, 1}}) {
    const Bracket b = bracket_ratio(r, 10);
    EXPECT_TRUE(b.degenerate) << r;
    EXPECT_EQ(b.k_up, k);
    EXPECT_EQ(b.k_down, k);
    EXPECT_EQ(b.w_down, 1.0);
  }
  // 0.3 * 10 is 3.0000000000000004 in floating point.
  EXPECT_TRUE(bracket_ratio(0.3, 10).degenerate);
}

TEST(Bracket, OutOfRangeThrows) {
  EXPECT_THROW(bracket_ratio(0.05, 10), std::invalid_argument);
  EXPECT_THROW(bracket_ratio(1.01, 10), std::invalid_argument);
  EXPECT_THROW(bracket_ratio(std::numeric_limits<double>::quiet_NaN(), 10), std::invalid_argument);
  EXPECT_THROW(bracket_ratio(0.5, 0), std::invalid_argument);
}

TEST(Bracket, WeightsSumToOneAndReconstructNr) {
  for (double r = 0.1; r <= 1.0; r += 0.0137) {
    const Bracket b = bracket_ratio(r, 37);
    EXPECT_NEAR(b.w_up + b.w_down, 1.0, 1e-12);
    EXPECT_NEAR(b.w_up * double(b.k_up) + b.w_down * double(b.k_down), 37 * r, 1e-9);
  }
}

TEST(InferenceK, CeilingAndMonotone) {
  EXPECT_EQ(inference_k(0.53, 10), 6);
  EXPECT_EQ(inference_k(0.5, 10), 5);
  EXPECT_EQ(inference_k(0.3, 10), 3);
  EXPECT_EQ(inference_k(0.0, 10), 1);
  EXPECT_EQ(inference_k(1.0, 10), 10);
  Index prev = 0;
  for (double r = 0.0; r <= 1.0; r += 0.001) {
    const Index k = inference_k(r, 206);
    EXPECT_GE(k, prev);
    prev = k;
  }
}

TEST(DualPass, DegenerateEqualsSinglePass) {
  const Fixture f(1);
  EXPECT_EQ(f.combined(0.5), f.single(5));
  EXPECT_EQ(f.combined(1.0), f.single(10));
  DualPassTrace trace;
  dual_pass_combine(Var::constant(f.x), Var::constant(f.scores), Var::constant(Tensor({1}, {0.5})), f.block,
                    f.c.heads, GateMode::kRaw, &trace);
  EXPECT_TRUE(trace.bracket.degenerate);
  EXPECT_EQ(trace.up.tokens_processed, 5);
  EXPECT_EQ(trace.down.tokens_processed, 0);
}

TEST(DualPass, InterpolatesTheTwoSinglePasses) {
  const Fixture f(2);
  const Tensor up = f.single(6), down = f.single(5), mixed = f.combined(0.53);
  DualPassTrace trace;
  dual_pass_combine(Var::constant(f.x), Var::constant(f.scores), Var::constant(Tensor({1}, {0.53})), f.block,
                    f.c.heads, GateMode::kRaw, &trace);
  EXPECT_EQ(trace.up.attention_rows, 6);
  EXPECT_EQ(trace.down.attention_rows, 5);
  double worst = 0.0;
  for (Index i = 0; i < mixed.numel(); ++i) {
    worst = std::max(worst, std::abs(mixed[i] - (0.3 * up[i] + 0.7 * down[i])));
  }
  EXPECT_LT(worst, 1e-10);
}

TEST(DualPass, RatioGradientIsNTimesUpdateGap) {
  for (std::uint64_t seed : {3u, 4u, 5u}) {
    const Fixture f(seed);
    for (double r : {0.23, 0.53, 0.77, 0.95}) {
      Tape tape;
      const Var ratio = Var::parameter(Tensor({1}, {r}));
      {
        TapeGuard guard(tape);
        const Var y = dual_pass_combine(Var::constant(f.x), Var::constant(f.scores), ratio, f.block, f.c.heads);
        tape.backward(sum(mul(y, Var::constant(f.upstream))));
      }
      const Bracket b = bracket_ratio(r, f.n());
      // U_K = routed(K) - x, from independent single passes.
      const Tensor gap(f.x.shape(), f.single(b.k_up).values() - f.single(b.k_down).values());
      const double expected = double(f.n()) * dot(gap, f.upstream);
      EXPECT_NEAR(ratio.grad()[0], expected, 1e-9 * std::max(1.0, std::abs(expected)));
      // Central difference inside the bracket.
      const double h = 1e-4;
      const double fd = (dot(f.combined(r + h), f.upstream) - dot(f.combined(r - h), f.upstream)) / (2 * h);
      EXPECT_NEAR(ratio.grad()[0], fd, 1e-6 * std::max(1.0, std::abs(fd)));
    }
  }
}

TEST(DualPass, IdenticalPassesGiveZeroRatioGradient) {
  Fixture f(6);
  f.scores.values().setZero();  // every gated update vanishes in both passes
  Tape tape;
  const Var ratio = Var::parameter(Tensor({1}, {0.53}));
  {
    TapeGuard guard(tape);
    const Var y = dual_pass_combine(Var::constant(f.x), Var::constant(f.scores), ratio, f.block, f.c.heads);
    tape.backward(sum(mul(y, Var::constant(f.upstream))));
  }
  EXPECT_EQ(ratio.grad()[0], 0.0);
}

TEST(DualPass, ContinuousAcrossLatticePoints) {
  const Fixture f(7);
  for (Index k = 2; k < 10; ++k) {
    const double r = double(k) / 10.0;
    const Tensor at = f.combined(r);
    for (double eps : {1e-6, -1e-6}) {
      const Tensor near = f.combined(r + eps);
      EXPECT_LT((near.values() - at.values()).cwiseAbs().maxCoeff(), 1e-4) << "k=" << k << " eps=" << eps;
    }
  }
}

TEST(DualPass, OutputsAreCollinearWithinABracket) {
  const Fixture f(8);
  const Tensor a = f.combined(0.6), b = f.combined(0.7);
  for (double r : {0.61, 0.64, 0.66, 0.69}) {
    const double t = (r - 0.6) / 0.1;
    const Tensor y = f.combined(r);
    const double worst = (y.values() - ((1 - t) * a.values() + t * b.values())).cwiseAbs().maxCoeff();
    EXPECT_LT(worst, 1e-10) << r;
  }
}

TEST(Penalty, ZeroAtTargetAndQuadraticAway) {
  const std::vector<Var> at{Var::parameter(Tensor({1}, {0.3})), Var::parameter(Tensor({1}, {0.3}))};
  EXPECT_NEAR(budget_penalty(at, 0.3, 10.0).item(), 0.0, 1e-15);
  const std::vector<Var> away{Var::parameter(Tensor({1}, {0.3})), Var::parameter(Tensor({1}, {0.7}))};
  EXPECT_NEAR(budget_penalty(away, 0.3, 10.0).item(), 0.4, 1e-12);
  EXPECT_THROW(budget_penalty(std::vector<Var>{}, 0.3, 10.0), std::invalid_argument);
}

TEST(Penalty, GradientPerLayer) {
  // d/dr_l lambda (mean r - t)^2 = 2 lambda (mean r - t) / L.
  const std::vector<Var> r{Var::parameter(Tensor({1}, {0.3})), Var::parameter(Tensor({1}, {0.7})),
                           Var::parameter(Tensor({1}, {0.8}))};
  Tape tape;
  {
    TapeGuard guard(tape);
    tape.backward(budget_penalty(r, 0.4, 10.0));
  }
  const double expected = 2.0 * 10.0 * (0.6 - 0.4) / 3.0;
  for (const auto& v : r) EXPECT_NEAR(v.grad()[0], expected, 1e-12);
}

TEST(TargetRatio, SquareRootOfBudgetFraction) {
  EXPECT_NEAR(target_ratio_from_flops(25.0, 100.0), 0.5, 1e-15);
  EXPECT_NEAR(target_ratio_from_flops(9.0, 100.0), 0.3, 1e-15);
  EXPECT_EQ(target_ratio_from_flops(200.0, 100.0), 1.0);
  EXPECT_EQ(target_ratio_from_flops(1e-6, 100.0, 0.05), 0.05);
  EXPECT_THROW(target_ratio_from_flops(0.0, 100.0), std::invalid_argument);
  EXPECT_THROW(target_ratio_from_flops(1.0, -1.0), std::invalid_argument);
}
