#pragma once

#include "tokenflow/tensor.hpp"

#include <random>

namespace tokenflow {

/// Normal(0, sigma) redrawn until it falls inside +-2 sigma.
Tensor truncated_normal(Shape shape, double sigma, std::mt19937_64& rng);
/// He-normal for conv kernels [F, C, k, k].
Tensor he_normal(Shape shape, Index fan_in, std::mt19937_64& rng);

/// splitmix64 step; used to derive independent child seeds.
std::uint64_t splitmix64(std::uint64_t& state);

}  // namespace tokenflow
