#include "promptlab/presets.hpp"

#include <string>

#include "promptlab/errors.hpp"
#include "promptlab/rng.hpp"

namespace promptlab {

namespace {

// Every preset bundle shares these geometry knobs (and with them the
// encoder), so prompts learned on one bundle are meaningful on another.
TaskGenParams family_params() { return TaskGenParams{}; }

std::uint64_t task_seed(std::uint64_t family_seed, std::uint64_t index) {
  return mix_seed(family_seed, 0x70726573657430ULL + index);  // "preset" + slot
}

}  // namespace

std::vector<TaskBundle> preset_base2new_family(std::uint64_t family_seed) {
  std::vector<TaskBundle> family;
  const char* names[] = {"meadow", "harbor", "workshop"};
  for (std::uint64_t k = 0; k < 3; ++k) {
    TaskGenParams params = family_params();
    params.name_seed = k;
    family.push_back(generate_task(names[k], params, task_seed(family_seed, k)));
  }
  return family;
}

TransferFamily preset_transfer_family(std::uint64_t family_seed) {
  TransferFamily family;
  // The source plays the role of a large but domain-biased training set:
  // every class sits on the same side of the shared bias axis, so a static
  // context can absorb that offset wholesale. The targets were "collected"
  // under the opposite offset, which only an instance-conditional shift can
  // undo at test time.
  TaskGenParams source_params = family_params();
  source_params.name_seed = 10;
  source_params.new_bias = source_params.base_bias;
  family.source = generate_task("atlas", source_params, task_seed(family_seed, 10));

  struct TargetShape {
    const char* name;
    std::size_t classes;
    std::uint64_t name_seed;
  };
  struct TargetSlot {
    const char* name;
    std::size_t classes;
    std::uint64_t slot;
  };
  const TargetSlot slots[] = {{"islet", 6, 20}, {"quarry", 10, 21}, {"grove", 8, 19}};
  for (const TargetSlot& t : slots) {
    TaskGenParams params = family_params();
    params.num_classes = t.classes;
    params.name_seed = t.slot;
    params.base_bias = params.new_bias;
    family.targets.push_back(generate_task(t.name, params, task_seed(family_seed, t.slot)));
  }
  return family;
}

TaskBundle preset_shift_task(std::uint64_t family_seed) {
  TaskGenParams params = family_params();
  params.name_seed = 20;
  TaskBundle task = generate_task("lighthouse", params, task_seed(family_seed, 20));
  const std::vector<double> ladder{0.0, 1.0, 2.0, 3.0};
  add_shift_rungs(task, ladder, 0.5, task_seed(family_seed, 21));
  return task;
}

TaskBundle preset_ablation_task(std::uint64_t family_seed) {
  TaskGenParams params = family_params();
  params.name_seed = 30;
  params.encoder.max_len = 72;  // room for the 60-token context grid
  return generate_task("aviary", params, task_seed(family_seed, 30));
}

std::vector<std::string> preset_names() { return {"base2new", "xdataset", "dg", "ablate"}; }

std::vector<TaskBundle> preset_bundles(std::string_view preset, std::uint64_t family_seed) {
  if (preset == "base2new") return preset_base2new_family(family_seed);
  if (preset == "xdataset") {
    TransferFamily family = preset_transfer_family(family_seed);
    std::vector<TaskBundle> bundles;
    bundles.push_back(std::move(family.source));
    for (TaskBundle& target : family.targets) bundles.push_back(std::move(target));
    return bundles;
  }
  if (preset == "dg") return {preset_shift_task(family_seed)};
  if (preset == "ablate") return {preset_ablation_task(family_seed)};
  throw ConfigError("unknown preset '" + std::string(preset) +
                    "'; available: base2new, xdataset, dg, ablate");
}

}  // namespace promptlab
