#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "promptlab/prompting.hpp"
#include "promptlab/synthdata.hpp"

namespace promptlab {

enum class LrSchedule { cosine, constant };

std::string to_string(LrSchedule schedule);
LrSchedule lr_schedule_from_string(std::string_view name);  // throws ConfigError

// Few-shot training hyperparameters. The defaults are the standard
// recipe: 16 shots, batch 1 for 10 epochs, SGD with momentum 0.9,
// initial rate 0.002 under cosine decay, gradient norm clipped at 10.
struct TrainConfig {
  std::size_t shots = 16;
  std::size_t epochs = 10;
  std::size_t batch_size = 1;
  double learning_rate = 0.002;
  double momentum = 0.9;
  LrSchedule schedule = LrSchedule::cosine;
  double clip_norm = 10.0;
  std::uint64_t seed = 0;
  std::size_t max_steps = 0;  // 0 = run all epochs; otherwise stop early

  void validate() const;  // throws ConfigError
};

struct StepRecord {
  std::size_t step = 0;
  double learning_rate = 0.0;
  double loss = 0.0;
};

struct TrainLog {
  std::vector<StepRecord> steps;
  std::vector<double> epoch_accuracy;  // on the few-shot set, percent
  std::vector<std::uint32_t> sample_instance_ids;
  std::string encoder_digest_before;
  std::string encoder_digest_after;
};

// Draws `shots` instances per class from the task's training pool,
// deterministically for a given seed. Classes are visited in the order
// given; the result is class-major. Throws DataError when a class's
// pool is smaller than the request.
std::vector<const TaskInstance*> sample_few_shot(const TaskBundle& task,
                                                 std::span<const std::uint32_t> class_ids,
                                                 std::size_t shots, std::uint64_t seed);

// Minimizes cross-entropy of the head's predictions on a few-shot subset
// of the task, updating the head's parameters in place. The zero-shot
// head is rejected (nothing to train). A non-finite loss aborts with
// TrainAbort. The encoder is untouched; the log records its weight
// digest before and after as proof.
TrainLog train(PromptHead& head, const TaskBundle& task,
               std::span<const std::uint32_t> class_ids, const TrainConfig& cfg);

// Fraction of instances (in [0, 1]) whose argmax prediction under the
// head matches their class id. Deterministic: instances are scored in
// the order given. Throws DataError on an empty set or when an
// instance's class is missing from the label space.
double evaluate_accuracy(const PromptHead& head,
                         std::span<const TaskInstance* const> test_set,
                         const LabelSpace& labels);

}  // namespace promptlab
