#include "promptlab/class_split.hpp"

#include <algorithm>

#include "promptlab/errors.hpp"
#include "promptlab/rng.hpp"

namespace promptlab {

ClassSplit split_base_new(std::span<const std::uint32_t> class_ids, std::uint64_t seed) {
  if (class_ids.size() < 2) {
    throw ConfigError("split_base_new: need at least two classes, got " +
                      std::to_string(class_ids.size()));
  }
  std::vector<std::uint32_t> shuffled(class_ids.begin(), class_ids.end());
  std::vector<std::uint32_t> check = shuffled;
  std::sort(check.begin(), check.end());
  if (std::adjacent_find(check.begin(), check.end()) != check.end()) {
    throw DataError("split_base_new: duplicate class id");
  }
  Rng rng(mix_seed(seed, 0x73706c6974ULL));  // "split"
  rng.shuffle(shuffled);
  std::size_t base_count = (shuffled.size() + 1) / 2;
  ClassSplit split;
  split.base_ids.assign(shuffled.begin(), shuffled.begin() + static_cast<std::ptrdiff_t>(base_count));
  split.new_ids.assign(shuffled.begin() + static_cast<std::ptrdiff_t>(base_count), shuffled.end());
  std::sort(split.base_ids.begin(), split.base_ids.end());
  std::sort(split.new_ids.begin(), split.new_ids.end());
  return split;
}

}  // namespace promptlab
