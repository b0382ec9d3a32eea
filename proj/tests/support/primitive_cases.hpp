#pragma once

#include "tokenflow/ops.hpp"

#include <random>

namespace tokenflow::testing {

// One case per primitive: inputs plus the attributes the primitive needs.
struct PrimitiveCase {
  std::vector<Shape> shapes;
  OpAttrs attrs;
  double lo = -1.0, hi = 1.0;
};

inline PrimitiveCase case_for(Primitive p, std::mt19937_64& rng) {
  PrimitiveCase c;
  switch (p) {
    case Primitive::kAdd:
    case Primitive::kSub:
    case Primitive::kMul: c.shapes = {{3, 4}, {3, 1}}; break;
    case Primitive::kScalarMul: c.shapes = {{3, 4}}; c.attrs.scalar = -1.7; break;
    case Primitive::kMatmul: c.shapes = {{3, 4}, {4, 2}}; break;
    case Primitive::kTranspose: c.shapes = {{3, 4}}; break;
    case Primitive::kReshape: c.shapes = {{3, 4}}; c.attrs.shape = {2, 6}; break;
    case Primitive::kConcat: c.shapes = {{2, 3}, {3, 3}}; c.attrs.axis = 0; break;
    case Primitive::kGatherRows: c.shapes = {{5, 3}}; c.attrs.indices = {4, 0, 4}; break;
    case Primitive::kScatterRowsAdd: c.shapes = {{5, 3}, {2, 3}}; c.attrs.indices = {1, 3}; break;
    case Primitive::kConv2d:
      c.shapes = {{1, 2, 5, 5}, {3, 2, 3, 3}, {3}};
      c.attrs.stride = 2;
      c.attrs.pad = 1;
      break;
    case Primitive::kMaxPool: c.shapes = {{1, 2, 4, 4}}; c.attrs.kernel = 2; c.attrs.stride = 2; break;
    case Primitive::kLinear: c.shapes = {{4, 3}, {3, 5}, {5}}; break;
    case Primitive::kLayerNorm: c.shapes = {{3, 6}, {6}, {6}}; break;
    case Primitive::kSoftmax:
    case Primitive::kGelu:
    case Primitive::kSigmoid: c.shapes = {{3, 5}}; break;
    case Primitive::kLog: c.shapes = {{3, 4}}; c.lo = 0.5; c.hi = 2.0; break;
    case Primitive::kMean:
    case Primitive::kSum: c.shapes = {{3, 4}}; break;
    case Primitive::kEmbedding: c.shapes = {{6, 4}}; c.attrs.indices = {0, 5, 2, 2}; break;
    case Primitive::kCrossEntropy: c.shapes = {{3, 5}}; c.attrs.indices = {1, 4, 0}; break;
    case Primitive::kBinaryCrossEntropy: {
      c.shapes = {{2, 3}};
      c.attrs.targets = Tensor({2, 3});
      std::bernoulli_distribution coin(0.5);
      for (Index i = 0; i < 6; ++i) c.attrs.targets[i] = coin(rng) ? 1.0 : 0.0;
      break;
    }
    case Primitive::kMse: c.shapes = {{3, 4}, {3, 4}}; break;
  }
  return c;
}

}  // namespace tokenflow::testing
