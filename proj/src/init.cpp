#include "tokenflow/init.hpp"

#include <cmath>

namespace tokenflow {

Tensor truncated_normal(Shape shape, double sigma, std::mt19937_64& rng) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> dist(0.0, 1.0);
  for (Index i = 0; i < t.numel(); ++i) {
    double z = dist(rng);
    while (std::abs(z) > 2.0) z = dist(rng);
    t[i] = sigma * z;
  }
  return t;
}

Tensor he_normal(Shape shape, Index fan_in, std::mt19937_64& rng) {
  return truncated_normal(std::move(shape), std::sqrt(2.0 / double(fan_in)), rng);
}

std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace tokenflow
