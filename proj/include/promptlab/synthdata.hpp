#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "promptlab/class_split.hpp"
#include "promptlab/encoder.hpp"

namespace promptlab {

// Geometry and bookkeeping knobs for one generated task.
//
// Class directions live in joint space, around the mean text feature but
// separated along each class name's own feature differential, so the
// name genuinely predicts where the class's images sit. Prototypes are
// the encoder's image map inverted at those directions. Instances are
// the prototype plus seeded raw-space noise: a group offset along a
// dedicated bias axis (base classes at base_bias, new classes at
// new_bias), a per-instance nuisance offset on the same axis, and
// isotropic noise.
struct TaskGenParams {
  std::size_t num_classes = 8;
  std::size_t instances_per_class = 40;
  std::size_t train_pool_per_class = 20;  // remainder is the test split

  EncoderConfig encoder;
  std::uint64_t encoder_seed = 11;

  double feature_gain = 0.3;    // pre-feature magnitude before tanh inversion
  double cone_spread = 3.0;     // differential weight against the cone center
  double name_mismatch = 1.3;   // 0 = directions follow names exactly; larger = noisier
  double base_bias = 0.35;      // group offset of base classes along the bias axis
  double new_bias = -0.35;      // group offset of new classes
  double nuisance_std = 0.12;   // per-instance offset along the bias axis
  double within_noise = 0.06;   // isotropic raw-space noise, per coordinate
  std::uint64_t bias_axis_seed = 17;  // related tasks share one bias axis
  std::uint64_t name_seed = 0;        // extra stream for drawing class names

  double min_margin = 0.45;  // required min pairwise prototype distance (raw space)
  std::uint64_t split_seed = 1;

  void validate() const;  // throws ConfigError
};

struct TaskClass {
  std::uint32_t id = 0;
  std::string name;
  std::vector<double> prototype;  // raw-space class center
};

struct TaskInstance {
  std::uint32_t id = 0;
  std::uint32_t class_id = 0;
  bool is_test = false;
  std::vector<double> raw;
};

// One shifted copy of the test split, for out-of-distribution evaluation.
struct ShiftRung {
  double magnitude = 0.0;
  std::vector<TaskInstance> instances;
};

struct TaskBundle {
  std::string name;
  std::uint64_t seed = 0;
  TaskGenParams params;
  std::vector<TaskClass> classes;
  std::vector<TaskInstance> instances;
  ClassSplit split;
  std::vector<ShiftRung> shift_rungs;
  double realized_margin = 0.0;
  std::string encoder_digest;

  FrozenDualEncoder make_encoder() const;

  std::vector<std::string> class_names() const;
  std::vector<std::uint32_t> class_ids() const;
  const TaskClass& class_by_id(std::uint32_t id) const;
  std::vector<std::string> names_for(std::span<const std::uint32_t> ids) const;

  std::vector<const TaskInstance*> train_pool(std::span<const std::uint32_t> ids) const;
  std::vector<const TaskInstance*> test_instances(std::span<const std::uint32_t> ids) const;

  // Digest of the canonical serialization.
  std::string digest() const;
};

TaskBundle generate_task(std::string name, const TaskGenParams& params, std::uint64_t seed);

// Appends shifted copies of the test split. Each rung translates every
// raw vector along a fixed raw-space direction (the pulled-back bias
// axis) scaled by the magnitude, plus magnitude-scaled gaussian noise.
// A magnitude of zero reproduces the test split bit for bit.
void add_shift_rungs(TaskBundle& task, std::span<const double> magnitudes,
                     double noise_per_magnitude, std::uint64_t seed);

// Line-oriented text format with full-precision floats and a trailing
// content digest. load_task re-verifies the digest and every structural
// invariant, throwing DataError on any mismatch.
void save_task(const TaskBundle& task, const std::filesystem::path& path);
TaskBundle load_task(const std::filesystem::path& path);

// Word pools for class names; exposed so tests can check the shared-word
// property against the actual lexicon.
std::span<const char* const> name_adjectives();
std::span<const char* const> name_nouns();

}  // namespace promptlab
