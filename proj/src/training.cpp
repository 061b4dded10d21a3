#include "promptlab/training.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "promptlab/errors.hpp"
#include "promptlab/rng.hpp"

namespace promptlab {

std::string to_string(LrSchedule schedule) {
  switch (schedule) {
    case LrSchedule::cosine: return "cosine";
    case LrSchedule::constant: return "constant";
  }
  throw ConfigError("unknown learning rate schedule");
}

LrSchedule lr_schedule_from_string(std::string_view name) {
  if (name == "cosine") return LrSchedule::cosine;
  if (name == "constant") return LrSchedule::constant;
  throw ConfigError("unknown learning rate schedule '" + std::string(name) + "'");
}

void TrainConfig::validate() const {
  if (shots == 0) throw ConfigError("shots must be positive");
  if (epochs == 0) throw ConfigError("epochs must be positive");
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  // A rate of exactly zero is allowed and makes training a verifiable no-op.
  if (learning_rate < 0.0 || !std::isfinite(learning_rate)) {
    throw ConfigError("learning_rate must be non-negative and finite");
  }
  if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("momentum must lie in [0, 1)");
  if (!(clip_norm > 0.0)) throw ConfigError("clip_norm must be positive");
}

std::vector<const TaskInstance*> sample_few_shot(const TaskBundle& task,
                                                 std::span<const std::uint32_t> class_ids,
                                                 std::size_t shots, std::uint64_t seed) {
  if (class_ids.empty()) throw DataError("sample_few_shot: no classes given");
  Rng rng(mix_seed(seed, 0x73686f7473ULL));  // "shots"
  std::vector<const TaskInstance*> picked;
  picked.reserve(class_ids.size() * shots);
  for (std::uint32_t id : class_ids) {
    std::vector<const TaskInstance*> pool;
    for (const TaskInstance& inst : task.instances) {
      if (inst.class_id == id && !inst.is_test) pool.push_back(&inst);
    }
    if (pool.size() < shots) {
      throw DataError("class " + std::to_string(id) + " has only " +
                      std::to_string(pool.size()) + " training instances, need " +
                      std::to_string(shots));
    }
    rng.shuffle(pool);
    picked.insert(picked.end(), pool.begin(), pool.begin() + shots);
  }
  return picked;
}

namespace {

double schedule_rate(const TrainConfig& cfg, std::size_t step, std::size_t total) {
  if (cfg.schedule == LrSchedule::constant) return cfg.learning_rate;
  double progress = static_cast<double>(step) / static_cast<double>(total);
  return cfg.learning_rate * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

double few_shot_accuracy(const PromptHead& head, const LabelSpace& labels,
                         const std::vector<const TaskInstance*>& samples,
                         const std::vector<ImageFeature>& features,
                         const std::vector<std::size_t>& label_index) {
  std::size_t hits = 0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    Tensor probs = head.predict(features[i], labels);
    std::size_t best = 0;
    for (std::size_t j = 1; j < probs.size(); ++j) {
      if (probs.at(j) > probs.at(best)) best = j;
    }
    if (best == label_index[i]) ++hits;
  }
  return 100.0 * static_cast<double>(hits) / static_cast<double>(samples.size());
}

}  // namespace

TrainLog train(PromptHead& head, const TaskBundle& task,
               std::span<const std::uint32_t> class_ids, const TrainConfig& cfg) {
  cfg.validate();
  if (head.kind() == HeadKind::zero_shot) {
    throw ConfigError("the zero-shot head has no trainable parameters");
  }

  const FrozenDualEncoder& enc = head.encoder();
  TrainLog log;
  log.encoder_digest_before = enc.recompute_weight_digest();

  LabelSpace labels = head.prepare_labels(task.names_for(class_ids), class_ids);
  std::vector<const TaskInstance*> samples =
      sample_few_shot(task, class_ids, cfg.shots, cfg.seed);
  for (const TaskInstance* inst : samples) log.sample_instance_ids.push_back(inst->id);

  // Image features never change while the encoder is frozen; encode once.
  std::vector<ImageFeature> features;
  std::vector<std::size_t> label_index;
  features.reserve(samples.size());
  for (const TaskInstance* inst : samples) {
    features.push_back(enc.encode_image(inst->raw));
    auto idx = labels.index_of(inst->class_id);
    if (!idx) throw DataError("sampled instance's class is missing from the label space");
    label_index.push_back(*idx);
  }

  std::vector<Tensor> params = head.trainable_parameters();
  std::vector<std::vector<double>> velocity(params.size());
  for (std::size_t p = 0; p < params.size(); ++p) {
    velocity[p].assign(params[p].size(), 0.0);
  }

  std::size_t steps_per_epoch = (samples.size() + cfg.batch_size - 1) / cfg.batch_size;
  std::size_t total_steps = steps_per_epoch * cfg.epochs;
  if (cfg.max_steps > 0) total_steps = std::min(total_steps, cfg.max_steps);

  Rng order_rng(mix_seed(cfg.seed, 0x6f72646572ULL));  // "order"
  std::vector<std::size_t> order(samples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  std::size_t step = 0;
  bool done = false;
  std::vector<std::vector<double>> grads(params.size());
  for (std::size_t epoch = 0; epoch < cfg.epochs && !done; ++epoch) {
    order_rng.shuffle(order);
    for (std::size_t begin = 0; begin < order.size() && !done; begin += cfg.batch_size) {
      std::size_t end = std::min(begin + cfg.batch_size, order.size());
      double rate = schedule_rate(cfg, step, total_steps);
      double batch_loss = 0.0;
      for (std::size_t p = 0; p < params.size(); ++p) {
        grads[p].assign(params[p].size(), 0.0);
      }
      // A numeric failure mid-batch means the optimization escaped the
      // finite range; surface it with the step and rate it happened at.
      try {
        for (std::size_t s = begin; s < end; ++s) {
          std::size_t i = order[s];
          Tensor probs = head.predict(features[i], labels);
          Tensor loss = cross_entropy(probs, label_index[i]);
          batch_loss += loss.value();
          GradientMap grad_map = backward(loss);
          for (std::size_t p = 0; p < params.size(); ++p) {
            const Tensor* g = grad_map.find(params[p]);
            if (!g) continue;
            auto gv = g->values();
            for (std::size_t c = 0; c < gv.size(); ++c) grads[p][c] += gv[c];
          }
        }
      } catch (const NumericError&) {
        throw TrainAbort(step, rate);
      }
      double scale = 1.0 / static_cast<double>(end - begin);
      batch_loss *= scale;
      if (!std::isfinite(batch_loss)) throw TrainAbort(step, rate);

      double norm2 = 0.0;
      for (std::size_t p = 0; p < params.size(); ++p) {
        for (double g : grads[p]) norm2 += (g * scale) * (g * scale);
      }
      double clip_scale = scale;
      double norm = std::sqrt(norm2);
      if (norm > cfg.clip_norm) clip_scale *= cfg.clip_norm / norm;

      for (std::size_t p = 0; p < params.size(); ++p) {
        auto values = params[p].mutable_values();
        for (std::size_t c = 0; c < values.size(); ++c) {
          velocity[p][c] = cfg.momentum * velocity[p][c] + grads[p][c] * clip_scale;
          // Skip the arithmetic at rate zero so a no-op run leaves the
          // parameter bytes untouched (x - 0.0 can still flip -0.0 to +0.0).
          if (rate != 0.0) values[c] -= rate * velocity[p][c];
        }
      }

      log.steps.push_back({step, rate, batch_loss});
      ++step;
      if (cfg.max_steps > 0 && step >= cfg.max_steps) done = true;
    }
    log.epoch_accuracy.push_back(
        few_shot_accuracy(head, labels, samples, features, label_index));
  }

  log.encoder_digest_after = enc.recompute_weight_digest();
  if (log.encoder_digest_after != log.encoder_digest_before) {
    throw DataError("encoder weights changed during training; the base must stay frozen");
  }
  return log;
}

double evaluate_accuracy(const PromptHead& head,
                         std::span<const TaskInstance* const> test_set,
                         const LabelSpace& labels) {
  if (test_set.empty()) throw DataError("evaluate_accuracy: empty test set");
  const FrozenDualEncoder& enc = head.encoder();

  // The non-conditional heads use one weight per class for every image,
  // so compute the weights once. Ranking by plain dot product equals
  // ranking by predict()'s softmax: both features are unit-norm and the
  // softmax is monotone in the cosine.
  std::vector<Tensor> weights;
  if (head.kind() != HeadKind::conditional_prompt) {
    weights.reserve(labels.size());
    for (std::size_t j = 0; j < labels.size(); ++j) {
      weights.push_back(head.class_weight(labels, j, nullptr));
    }
  }

  std::size_t hits = 0;
  for (const TaskInstance* inst : test_set) {
    auto truth = labels.index_of(inst->class_id);
    if (!truth) {
      throw DataError("evaluate_accuracy: instance " + std::to_string(inst->id) +
                      " has class " + std::to_string(inst->class_id) +
                      " outside the label space");
    }
    ImageFeature image = enc.encode_image(inst->raw);
    std::size_t best = 0;
    if (head.kind() == HeadKind::conditional_prompt) {
      Tensor probs = head.predict(image, labels);
      for (std::size_t j = 1; j < probs.size(); ++j) {
        if (probs.at(j) > probs.at(best)) best = j;
      }
    } else {
      auto image_values = image.joint.values();
      double best_score = 0.0;
      for (std::size_t j = 0; j < weights.size(); ++j) {
        auto w = weights[j].values();
        double score = 0.0;
        for (std::size_t c = 0; c < w.size(); ++c) score += w[c] * image_values[c];
        if (j == 0 || score > best_score) {
          best_score = score;
          best = j;
        }
      }
    }
    if (best == *truth) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(test_set.size());
}

}  // namespace promptlab
