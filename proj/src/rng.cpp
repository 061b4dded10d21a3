#include "promptlab/rng.hpp"

#include <cmath>

namespace promptlab {

namespace {
std::uint64_t splitmix_step(std::uint64_t& state) {
  state += 0x9e3779b97f4a7c15ULL;
  std::uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}
}  // namespace

std::uint64_t Rng::next_u64() { return splitmix_step(state_); }

double Rng::uniform() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::gaussian() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  // Box-Muller on (0,1] uniforms; 1-u keeps log() away from zero.
  double u1 = 1.0 - uniform();
  double u2 = uniform();
  double radius = std::sqrt(-2.0 * std::log(u1));
  double angle = 6.283185307179586476925286766559 * u2;
  spare_ = radius * std::sin(angle);
  has_spare_ = true;
  return radius * std::cos(angle);
}

double Rng::gaussian(double mean, double stddev) {
  return mean + stddev * gaussian();
}

std::uint64_t Rng::below(std::uint64_t n) {
  if (n == 0) return 0;
  std::uint64_t threshold = (0ULL - n) % n;
  for (;;) {
    std::uint64_t draw = next_u64();
    if (draw >= threshold) return draw % n;
  }
}

Rng Rng::fork(std::uint64_t label) const {
  return Rng(mix_seed(state_, label));
}

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t state = a;
  std::uint64_t first = splitmix_step(state);
  state = first ^ (b + 0x9e3779b97f4a7c15ULL);
  return splitmix_step(state);
}

}  // namespace promptlab
