#pragma once

#include <cstdint>
#include <vector>

namespace promptlab {

// Deterministic generator built on splitmix64. The standard library
// distributions are implementation-defined, so gaussian sampling is done
// here by hand (Box-Muller) to keep every platform bit-identical.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64();

  // Uniform in [0, 1) with 53 bits of precision.
  double uniform();

  // Standard normal via Box-Muller; the spare value is cached.
  double gaussian();
  double gaussian(double mean, double stddev);

  // Unbiased draw from [0, n) by rejection.
  std::uint64_t below(std::uint64_t n);

  // Fisher-Yates using below(), so shuffles are portable too.
  template <typename T>
  void shuffle(std::vector<T>& items) {
    if (items.size() < 2) return;
    for (std::size_t i = items.size() - 1; i > 0; --i) {
      std::size_t j = static_cast<std::size_t>(below(i + 1));
      if (j != i) std::swap(items[i], items[j]);
    }
  }

  // Independent stream derived from this seed and a label. Forking does
  // not advance this generator.
  Rng fork(std::uint64_t label) const;

 private:
  std::uint64_t state_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// Stable combination of two seeds (iterated splitmix output mixing).
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);

}  // namespace promptlab
