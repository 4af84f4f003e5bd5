#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace stockformer {

// Deterministic random source. All draws are built from raw mt19937_64
// output (never std::*_distribution, whose sequences are
// implementation-defined), so the same seed yields the same stream on
// every platform.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  std::uint64_t next_u64() { return gen_(); }

  /// Uniform double in [0, 1).
  double uniform01() {
    return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
  }

  /// Standard normal via Box-Muller (cosine branch, no cached spare).
  double normal();

  /// Uniform integer in [0, n). n must be > 0.
  std::size_t uniform_index(std::size_t n);

  /// k distinct indices sampled uniformly from [0, n), ascending order.
  std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k);

  /// Fisher-Yates permutation of 0..n-1.
  std::vector<std::size_t> permutation(std::size_t n);

 private:
  std::mt19937_64 gen_;
};

/// Stable child seed for a named random stream hanging off a root seed.
std::uint64_t derive_seed(std::uint64_t root, std::string_view stream);

}  // namespace stockformer
