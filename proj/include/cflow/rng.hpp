#pragma once

#include <cstdint>
#include <random>
#include <string>

#include "cflow/tensor.hpp"

namespace cflow {

// Seeded generator with platform-independent uniform and normal draws. The
// full state is the engine state, so save/restore reproduces every stream.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  // U[0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Box-Muller without caching the second variate.
  double normal();
  std::size_t index(std::size_t n) { return static_cast<std::size_t>(uniform() * n) % n; }
  std::uint64_t next_u64() { return engine_(); }

  Tensor normal_tensor(const Shape& shape, double stddev = 1.0);
  Tensor uniform_tensor(const Shape& shape, double lo, double hi);

  std::string state() const;
  void restore(const std::string& state);

 private:
  std::mt19937_64 engine_;
};

}  // namespace cflow
