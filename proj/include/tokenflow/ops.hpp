#pragma once

#include "tokenflow/autograd.hpp"

#include <span>
#include <string_view>
#include <vector>

namespace tokenflow {

// Differentiable primitives. Binary elementwise ops broadcast the smaller
// operand when it is a scalar, an [rows,1] column or a [cols] / [1,cols] row
// of the other operand's 2-D view. Every op rejects non-finite inputs.

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double factor);

/// [n,k] x [k,m] -> [n,m]
Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);
Var reshape(const Var& a, Shape shape);
/// axis 0 stacks rows, axis 1 stacks columns (2-D views).
Var concat(std::span<const Var> parts, int axis);
Var slice_cols(const Var& a, Index start, Index count);

/// Row gather/scatter. Differentiable in the values only.
Var gather_rows(const Var& a, std::span<const Index> rows);
/// out = base; out[rows[i]] += values[i]
Var scatter_rows_add(const Var& base, std::span<const Index> rows, const Var& values);
Var embedding(const Var& table, std::span<const Index> ids);

/// x: [N,C,H,W] or [C,H,W]; w: [F,C,k,k]; bias: [F] or undefined.
Var conv2d(const Var& x, const Var& w, const Var& bias, Index stride, Index pad);
/// Non-overlapping or strided max pooling without padding.
Var max_pool2d(const Var& x, Index kernel, Index stride);
/// x: [n,in], w: [in,out], bias: [out] or undefined.
Var linear(const Var& x, const Var& w, const Var& bias);
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);
/// Along the last axis, max-subtracted.
Var softmax(const Var& x);
/// tanh approximation.
Var gelu(const Var& x);
Var sigmoid(const Var& x);
/// Natural log; inputs are clamped to the smallest normal double.
Var log(const Var& x);
Var mean(const Var& x);
Var sum(const Var& x);

/// Mean over rows of logsumexp(logits) - logits[target].
Var cross_entropy(const Var& logits, std::span<const Index> targets);
/// Mean elementwise binary cross-entropy on logits.
Var bce_with_logits(const Var& logits, const Tensor& targets);
Var mse(const Var& a, const Var& b);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator*(const Var& a, double s) { return scale(a, s); }
inline Var operator*(double s, const Var& a) { return scale(a, s); }

/// Identifies a primitive for the generic evaluate() entry point.
enum class Primitive {
  kAdd,
  kSub,
  kMul,
  kScalarMul,
  kMatmul,
  kTranspose,
  kReshape,
  kConcat,
  kGatherRows,
  kScatterRowsAdd,
  kConv2d,
  kMaxPool,
  kLinear,
  kLayerNorm,
  kSoftmax,
  kGelu,
  kSigmoid,
  kLog,
  kMean,
  kSum,
  kEmbedding,
  kCrossEntropy,
  kBinaryCrossEntropy,
  kMse,
};

std::string_view primitive_name(Primitive p);
std::span<const Primitive> all_primitives();

struct OpAttrs {
  double scalar = 1.0;
  Index stride = 1;
  Index pad = 0;
  Index kernel = 2;
  int axis = 0;
  double eps = 1e-5;
  Shape shape;
  std::vector<Index> indices;
  Tensor targets;
};

/// Dispatches to the named primitive. Optional operands (biases) may be
/// passed as undefined Vars.
Var evaluate(Primitive p, std::span<const Var> inputs, const OpAttrs& attrs = {});

}  // namespace tokenflow
