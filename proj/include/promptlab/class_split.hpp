#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace promptlab {

// Disjoint halves of a class list. Training only ever sees base classes;
// the other half exists to measure generalization.
struct ClassSplit {
  std::vector<std::uint32_t> base_ids;
  std::vector<std::uint32_t> new_ids;
};

// Seeded shuffle, then the first ceil(K/2) classes become the base half.
// Both halves are returned sorted. Throws ConfigError for fewer than two
// classes, DataError for duplicate ids.
ClassSplit split_base_new(std::span<const std::uint32_t> class_ids, std::uint64_t seed);

}  // namespace promptlab
