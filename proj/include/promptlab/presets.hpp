#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

#include "promptlab/synthdata.hpp"

namespace promptlab {

// Shipped task recipes. Every function is deterministic in family_seed;
// the default family_seed of 0 is the configuration the golden values in
// the acceptance suite were frozen against. All bundles of one family
// share a single encoder and bias axis, so learned prompts transfer.

// Three related tasks with distinct class vocabularies, for the
// base-to-new and class-incremental protocols.
std::vector<TaskBundle> preset_base2new_family(std::uint64_t family_seed = 0);

struct TransferFamily {
  TaskBundle source;
  std::vector<TaskBundle> targets;
};

// One source plus three heterogeneous targets (different class counts
// and vocabularies) for cross-dataset transfer.
TransferFamily preset_transfer_family(std::uint64_t family_seed = 0);

// One task carrying a four-rung shift ladder (first rung unshifted) for
// domain generalization.
TaskBundle preset_shift_task(std::uint64_t family_seed = 0);

// A task whose encoder fits a 60-token context, for the long-context
// ablation.
TaskBundle preset_ablation_task(std::uint64_t family_seed = 0);

// Names understood by the task generator command.
std::vector<std::string> preset_names();

// All bundles for one preset name, in writing order. Throws ConfigError
// for an unknown name.
std::vector<TaskBundle> preset_bundles(std::string_view preset, std::uint64_t family_seed = 0);

}  // namespace promptlab
