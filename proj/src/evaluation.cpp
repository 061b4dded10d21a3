#include "promptlab/evaluation.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <map>
#include <set>
#include <sstream>

#include <json.hpp>

#include "promptlab/digest.hpp"
#include "promptlab/errors.hpp"

namespace promptlab {

double harmonic_mean(double base_acc, double new_acc) {
  if (!std::isfinite(base_acc) || !std::isfinite(new_acc) || base_acc <= 0.0 || new_acc <= 0.0) {
    throw NumericError("harmonic_mean needs positive finite accuracies, got " +
                       format_double(base_acc) + " and " + format_double(new_acc));
  }
  return 2.0 * base_acc * new_acc / (base_acc + new_acc);
}

void ProtocolConfig::validate() const {
  train.validate();
  if (seeds.empty()) throw ConfigError("at least one evaluation seed is required");
  std::set<std::uint64_t> unique(seeds.begin(), seeds.end());
  if (unique.size() != seeds.size()) throw ConfigError("evaluation seeds must be unique");
  if (context_len == 0) throw ConfigError("context_len must be positive");
}

Averaged average_of(std::vector<double> per_seed) {
  if (per_seed.empty()) throw DataError("cannot average an empty run list");
  double sum = 0.0;
  for (double v : per_seed) sum += v;
  Averaged out;
  out.mean = sum / static_cast<double>(per_seed.size());
  out.per_seed = std::move(per_seed);
  return out;
}

namespace {

// A head that scores zero on either split has no trade-off to average; report
// the limit value instead of failing the whole report.
double safe_h(double base, double neu) {
  if (base <= 0.0 || neu <= 0.0) return 0.0;
  return harmonic_mean(base, neu);
}

}  // namespace

double BaseNewRow::h() const { return safe_h(base_acc.mean, new_acc.mean); }

double AblationCell::h() const { return safe_h(base_acc.mean, new_acc.mean); }

std::string to_string(AblationKind kind) {
  switch (kind) {
    case AblationKind::init: return "init";
    case AblationKind::context_length: return "context_length";
    case AblationKind::long_static: return "long_static";
  }
  throw ConfigError("unknown ablation kind");
}

AblationKind ablation_kind_from_string(std::string_view name) {
  if (name == "init") return AblationKind::init;
  if (name == "context_length") return AblationKind::context_length;
  if (name == "long_static") return AblationKind::long_static;
  throw ConfigError("unknown ablation kind '" + std::string(name) + "'");
}

namespace {

constexpr const char* kSchemaTag = "promptlab-report-1";

double percent(double fraction) { return 100.0 * fraction; }

std::string fixed2(double value) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.2f", value);
  return buf;
}

// What to build for one protocol column.
struct HeadSpec {
  HeadKind kind;
  std::size_t context_len;
  ContextInit init;
};

std::vector<HeadSpec> standard_specs(const ProtocolConfig& cfg) {
  return {{HeadKind::zero_shot, cfg.context_len, cfg.context_init},
          {HeadKind::static_prompt, cfg.context_len, cfg.context_init},
          {HeadKind::conditional_prompt, cfg.context_len, cfg.context_init}};
}

PromptHead build_head(const FrozenDualEncoder& enc, const HeadSpec& spec, std::uint64_t seed) {
  switch (spec.kind) {
    case HeadKind::zero_shot:
      return PromptHead::make_zero_shot(enc);
    case HeadKind::static_prompt: {
      ContextVectors ctx = init_context(enc, spec.init, spec.context_len, seed);
      return PromptHead::make_static(enc, std::move(ctx), seed);
    }
    case HeadKind::conditional_prompt: {
      ContextVectors ctx = init_context(enc, spec.init, spec.context_len, seed);
      MetaNet net = MetaNet::init(enc.config().joint_dim, enc.config().embed_dim, seed);
      return PromptHead::make_conditional(enc, std::move(ctx), std::move(net), seed);
    }
  }
  throw ConfigError("unknown head kind");
}

// Every sampled training instance must exist, come from the training
// pool, and belong to one of the classes that were trained on. In
// particular no test instance of any class may leak into training.
void audit_training_subset(const TaskBundle& task, std::span<const std::uint32_t> train_ids,
                           const TrainLog& log) {
  std::map<std::uint32_t, const TaskInstance*> by_id;
  for (const TaskInstance& inst : task.instances) by_id[inst.id] = &inst;
  std::set<std::uint32_t> allowed(train_ids.begin(), train_ids.end());
  for (std::uint32_t id : log.sample_instance_ids) {
    auto it = by_id.find(id);
    if (it == by_id.end()) {
      throw DataError("training sampled unknown instance id " + std::to_string(id));
    }
    if (it->second->is_test) {
      throw DataError("test instance " + std::to_string(id) + " leaked into the training subset");
    }
    if (allowed.count(it->second->class_id) == 0) {
      throw DataError("instance " + std::to_string(id) + " of class " +
                      std::to_string(it->second->class_id) +
                      " was sampled outside the training label set");
    }
  }
}

void hash_protocol_config(Digest& digest, std::string_view protocol, const ProtocolConfig& cfg) {
  digest.update_string(kSchemaTag);
  digest.update_string(protocol);
  for (std::uint64_t seed : cfg.seeds) digest.update_u64(seed);
  digest.update_u64(cfg.train.shots);
  digest.update_u64(cfg.train.epochs);
  digest.update_u64(cfg.train.batch_size);
  digest.update_double(cfg.train.learning_rate);
  digest.update_double(cfg.train.momentum);
  digest.update_string(to_string(cfg.train.schedule));
  digest.update_double(cfg.train.clip_norm);
  digest.update_u64(cfg.train.seed);
  digest.update_u64(cfg.train.max_steps);
  digest.update_u64(cfg.context_len);
  digest.update_string(to_string(cfg.context_init));
}

std::string config_digest_for(std::string_view protocol, const ProtocolConfig& cfg,
                              std::span<const std::string> task_digests) {
  Digest digest;
  hash_protocol_config(digest, protocol, cfg);
  for (const std::string& d : task_digests) digest.update_string(d);
  return digest.hex();
}

std::vector<const TaskInstance*> to_pointers(const std::vector<TaskInstance>& instances) {
  std::vector<const TaskInstance*> out;
  out.reserve(instances.size());
  for (const TaskInstance& inst : instances) out.push_back(&inst);
  return out;
}

double timed_seconds(std::chrono::steady_clock::time_point started) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
}

// Trains (when trainable) on the given classes and returns base/new
// percents for one seed; shared by base2new and the ablations.
struct BaseNewSample {
  double base_pct = 0.0;
  double new_pct = 0.0;
  std::size_t parameter_count = 0;
};

BaseNewSample measure_base_new(const TaskBundle& task, const FrozenDualEncoder& enc,
                               const HeadSpec& spec, const TrainConfig& train_cfg,
                               std::uint64_t seed) {
  PromptHead head = build_head(enc, spec, seed);
  if (spec.kind != HeadKind::zero_shot) {
    TrainConfig tc = train_cfg;
    tc.seed = seed;
    TrainLog log = train(head, task, task.split.base_ids, tc);
    audit_training_subset(task, task.split.base_ids, log);
  }
  auto base_names = task.names_for(task.split.base_ids);
  auto new_names = task.names_for(task.split.new_ids);
  LabelSpace base_labels = head.prepare_labels(base_names, task.split.base_ids);
  LabelSpace new_labels = head.prepare_labels(new_names, task.split.new_ids);
  BaseNewSample out;
  out.base_pct = percent(evaluate_accuracy(head, task.test_instances(task.split.base_ids), base_labels));
  out.new_pct = percent(evaluate_accuracy(head, task.test_instances(task.split.new_ids), new_labels));
  out.parameter_count = head.count_parameters();
  return out;
}

std::size_t longest_name_words(const TaskBundle& task) {
  std::size_t longest = 0;
  for (const TaskClass& cls : task.classes) {
    std::size_t words = 1;
    for (char c : cls.name) {
      if (c == ' ') ++words;
    }
    longest = std::max(longest, words);
  }
  return longest;
}

using ojson = nlohmann::ordered_json;

ojson averaged_json(const Averaged& a) {
  ojson out;
  out["per_seed"] = a.per_seed;
  out["mean"] = a.mean;
  return out;
}

}  // namespace

EvalReport protocol_base_to_new(std::span<const TaskBundle> tasks, const ProtocolConfig& cfg) {
  cfg.validate();
  if (tasks.empty()) throw ConfigError("base-to-new evaluation needs at least one task");
  auto started = std::chrono::steady_clock::now();

  EvalReport report;
  report.protocol = "base2new";
  report.seeds = cfg.seeds;
  std::vector<std::string> task_digests;
  for (const TaskBundle& task : tasks) task_digests.push_back(task.digest());
  report.config_digest = config_digest_for(report.protocol, cfg, task_digests);

  for (std::size_t t = 0; t < tasks.size(); ++t) {
    const TaskBundle& task = tasks[t];
    FrozenDualEncoder enc = task.make_encoder();
    std::vector<HeadSpec> specs = standard_specs(cfg);

    std::vector<std::vector<double>> base_runs(specs.size()), new_runs(specs.size());
    std::vector<std::size_t> counts(specs.size(), 0);
    for (std::uint64_t seed : cfg.seeds) {
      for (std::size_t i = 0; i < specs.size(); ++i) {
        BaseNewSample sample = measure_base_new(task, enc, specs[i], cfg.train, seed);
        base_runs[i].push_back(sample.base_pct);
        new_runs[i].push_back(sample.new_pct);
        counts[i] = sample.parameter_count;
      }
    }

    BaseNewDataset dataset;
    dataset.task_name = task.name;
    dataset.task_digest = task_digests[t];
    for (std::size_t i = 0; i < specs.size(); ++i) {
      BaseNewRow row;
      row.head = to_string(specs[i].kind);
      row.parameter_count = counts[i];
      row.base_acc = average_of(std::move(base_runs[i]));
      row.new_acc = average_of(std::move(new_runs[i]));
      dataset.rows.push_back(std::move(row));
    }
    report.datasets.push_back(std::move(dataset));
  }

  report.runtime_seconds = timed_seconds(started);
  return report;
}

EvalReport protocol_cross_dataset(const TaskBundle& source, std::span<const TaskBundle> targets,
                                  const ProtocolConfig& cfg) {
  cfg.validate();
  if (targets.empty()) throw ConfigError("cross-dataset transfer needs at least one target task");
  for (const TaskBundle& target : targets) {
    if (target.encoder_digest != source.encoder_digest) {
      throw DataError("target '" + target.name +
                      "' was generated against a different encoder; transfer needs a shared one");
    }
  }
  auto started = std::chrono::steady_clock::now();

  EvalReport report;
  report.protocol = "xdataset";
  report.seeds = cfg.seeds;
  report.source_name = source.name;
  std::vector<std::string> task_digests;
  task_digests.push_back(source.digest());
  for (const TaskBundle& target : targets) task_digests.push_back(target.digest());
  report.config_digest = config_digest_for(report.protocol, cfg, task_digests);

  FrozenDualEncoder enc = source.make_encoder();
  std::vector<std::uint32_t> source_ids = source.class_ids();
  std::vector<std::string> source_names = source.class_names();
  auto source_test = source.test_instances(source_ids);

  std::vector<HeadSpec> specs = standard_specs(cfg);
  std::vector<std::vector<double>> source_runs(specs.size());
  std::vector<std::vector<std::vector<double>>> target_runs(
      specs.size(), std::vector<std::vector<double>>(targets.size()));
  std::vector<std::size_t> counts(specs.size(), 0);

  for (std::uint64_t seed : cfg.seeds) {
    for (std::size_t i = 0; i < specs.size(); ++i) {
      PromptHead head = build_head(enc, specs[i], seed);
      counts[i] = head.count_parameters();
      if (specs[i].kind != HeadKind::zero_shot) {
        TrainConfig tc = cfg.train;
        tc.seed = seed;
        TrainLog log = train(head, source, source_ids, tc);
        audit_training_subset(source, source_ids, log);
      }
      LabelSpace source_labels = head.prepare_labels(source_names, source_ids);
      source_runs[i].push_back(percent(evaluate_accuracy(head, source_test, source_labels)));

      std::string digest_before = head.parameter_digest();
      for (std::size_t j = 0; j < targets.size(); ++j) {
        const TaskBundle& target = targets[j];
        std::vector<std::uint32_t> target_ids = target.class_ids();
        std::vector<std::string> target_names = target.class_names();
        LabelSpace target_labels = head.prepare_labels(target_names, target_ids);
        target_runs[i][j].push_back(
            percent(evaluate_accuracy(head, target.test_instances(target_ids), target_labels)));
      }
      if (head.parameter_digest() != digest_before) {
        throw DataError("target evaluation mutated the learned parameters of " +
                        to_string(specs[i].kind));
      }
    }
  }

  for (std::size_t i = 0; i < specs.size(); ++i) {
    TransferRow row;
    row.head = to_string(specs[i].kind);
    row.parameter_count = counts[i];
    row.source_acc = average_of(std::move(source_runs[i]));
    double target_sum = 0.0;
    for (std::size_t j = 0; j < targets.size(); ++j) {
      TransferTarget cell;
      cell.task_name = targets[j].name;
      cell.accuracy = average_of(std::move(target_runs[i][j]));
      target_sum += cell.accuracy.mean;
      row.targets.push_back(std::move(cell));
    }
    row.target_average = target_sum / static_cast<double>(targets.size());
    report.transfer.push_back(std::move(row));
  }

  report.runtime_seconds = timed_seconds(started);
  return report;
}

EvalReport protocol_domain_generalization(const TaskBundle& source, const ProtocolConfig& cfg) {
  cfg.validate();
  if (source.shift_rungs.empty()) {
    throw ConfigError("task '" + source.name + "' carries no shift ladder");
  }
  auto started = std::chrono::steady_clock::now();

  std::vector<std::uint32_t> source_ids = source.class_ids();
  std::vector<std::string> source_names = source.class_names();
  std::set<std::uint32_t> known(source_ids.begin(), source_ids.end());
  std::size_t test_total = source.test_instances(source_ids).size();
  for (const ShiftRung& rung : source.shift_rungs) {
    if (rung.instances.size() != test_total) {
      throw DataError("shift rung " + format_double(rung.magnitude) + " holds " +
                      std::to_string(rung.instances.size()) + " instances, want " +
                      std::to_string(test_total));
    }
    for (const TaskInstance& inst : rung.instances) {
      if (known.count(inst.class_id) == 0) {
        throw DataError("shift rung " + format_double(rung.magnitude) + " labels instance " +
                        std::to_string(inst.id) + " with class " +
                        std::to_string(inst.class_id) + " outside the source label set");
      }
    }
  }

  EvalReport report;
  report.protocol = "dg";
  report.seeds = cfg.seeds;
  report.source_name = source.name;
  std::vector<std::string> task_digests{source.digest()};
  report.config_digest = config_digest_for(report.protocol, cfg, task_digests);

  FrozenDualEncoder enc = source.make_encoder();
  std::vector<HeadSpec> specs = standard_specs(cfg);
  std::vector<std::vector<std::vector<double>>> rung_runs(
      specs.size(), std::vector<std::vector<double>>(source.shift_rungs.size()));
  std::vector<std::size_t> counts(specs.size(), 0);

  for (std::uint64_t seed : cfg.seeds) {
    for (std::size_t i = 0; i < specs.size(); ++i) {
      PromptHead head = build_head(enc, specs[i], seed);
      counts[i] = head.count_parameters();
      if (specs[i].kind != HeadKind::zero_shot) {
        TrainConfig tc = cfg.train;
        tc.seed = seed;
        TrainLog log = train(head, source, source_ids, tc);
        audit_training_subset(source, source_ids, log);
      }
      LabelSpace labels = head.prepare_labels(source_names, source_ids);
      std::string digest_before = head.parameter_digest();
      for (std::size_t r = 0; r < source.shift_rungs.size(); ++r) {
        auto rung_test = to_pointers(source.shift_rungs[r].instances);
        rung_runs[i][r].push_back(percent(evaluate_accuracy(head, rung_test, labels)));
      }
      if (head.parameter_digest() != digest_before) {
        throw DataError("shift evaluation mutated the learned parameters of " +
                        to_string(specs[i].kind));
      }
    }
  }

  for (std::size_t i = 0; i < specs.size(); ++i) {
    ShiftRow row;
    row.head = to_string(specs[i].kind);
    row.parameter_count = counts[i];
    for (std::size_t r = 0; r < source.shift_rungs.size(); ++r) {
      ShiftCell cell;
      cell.magnitude = source.shift_rungs[r].magnitude;
      cell.accuracy = average_of(std::move(rung_runs[i][r]));
      row.rungs.push_back(std::move(cell));
    }
    report.shifts.push_back(std::move(row));
  }

  report.runtime_seconds = timed_seconds(started);
  return report;
}

EvalReport protocol_class_incremental(const TaskBundle& task, const ProtocolConfig& cfg) {
  cfg.validate();
  auto started = std::chrono::steady_clock::now();

  EvalReport report;
  report.protocol = "incremental";
  report.seeds = cfg.seeds;
  report.source_name = task.name;
  std::vector<std::string> task_digests{task.digest()};
  report.config_digest = config_digest_for(report.protocol, cfg, task_digests);

  FrozenDualEncoder enc = task.make_encoder();
  std::vector<std::uint32_t> union_ids = task.class_ids();
  std::vector<std::string> union_names = task.class_names();
  auto union_test = task.test_instances(union_ids);

  std::vector<HeadSpec> specs = standard_specs(cfg);
  std::vector<std::vector<double>> runs(specs.size());
  std::vector<std::size_t> counts(specs.size(), 0);

  for (std::uint64_t seed : cfg.seeds) {
    for (std::size_t i = 0; i < specs.size(); ++i) {
      PromptHead head = build_head(enc, specs[i], seed);
      counts[i] = head.count_parameters();
      if (specs[i].kind != HeadKind::zero_shot) {
        TrainConfig tc = cfg.train;
        tc.seed = seed;
        TrainLog log = train(head, task, task.split.base_ids, tc);
        audit_training_subset(task, task.split.base_ids, log);
      }
      LabelSpace labels = head.prepare_labels(union_names, union_ids);
      runs[i].push_back(percent(evaluate_accuracy(head, union_test, labels)));
    }
  }

  for (std::size_t i = 0; i < specs.size(); ++i) {
    UnionRow row;
    row.head = to_string(specs[i].kind);
    row.parameter_count = counts[i];
    row.accuracy = average_of(std::move(runs[i]));
    report.incremental.push_back(std::move(row));
  }

  report.runtime_seconds = timed_seconds(started);
  return report;
}

EvalReport ablate(AblationKind kind, const TaskBundle& task, const ProtocolConfig& cfg) {
  cfg.validate();
  auto started = std::chrono::steady_clock::now();

  EvalReport report;
  report.protocol = "ablate_" + to_string(kind);
  report.seeds = cfg.seeds;
  report.source_name = task.name;
  std::vector<std::string> task_digests{task.digest()};
  report.config_digest = config_digest_for(report.protocol, cfg, task_digests);

  FrozenDualEncoder enc = task.make_encoder();

  struct GridPoint {
    std::string label;
    HeadSpec spec;
  };
  std::vector<GridPoint> grid;
  switch (kind) {
    case AblationKind::init:
      grid.push_back({"init=word_embedding",
                      {HeadKind::conditional_prompt, cfg.context_len, ContextInit::word_embedding}});
      grid.push_back({"init=random_gauss",
                      {HeadKind::conditional_prompt, cfg.context_len, ContextInit::random_gauss}});
      break;
    case AblationKind::context_length:
      for (std::size_t len : {4, 8, 16}) {
        std::string label = "context_len=" + std::to_string(len);
        grid.push_back({label, {HeadKind::static_prompt, len, ContextInit::random_gauss}});
        grid.push_back({label, {HeadKind::conditional_prompt, len, ContextInit::random_gauss}});
      }
      break;
    case AblationKind::long_static: {
      constexpr std::size_t kLongContext = 60;
      std::size_t needed = 2 + kLongContext + longest_name_words(task);
      if (enc.config().max_len < needed) {
        throw ConfigError("a " + std::to_string(kLongContext) +
                          "-token context needs encoder max_len of at least " +
                          std::to_string(needed) + ", the task's encoder allows " +
                          std::to_string(enc.config().max_len));
      }
      grid.push_back({"context_len=" + std::to_string(cfg.context_len),
                      {HeadKind::static_prompt, cfg.context_len, cfg.context_init}});
      grid.push_back({"context_len=" + std::to_string(kLongContext),
                      {HeadKind::static_prompt, kLongContext, ContextInit::random_gauss}});
      grid.push_back({"context_len=" + std::to_string(cfg.context_len),
                      {HeadKind::conditional_prompt, cfg.context_len, cfg.context_init}});
      break;
    }
  }

  for (const GridPoint& point : grid) {
    std::vector<double> base_runs, new_runs;
    std::size_t count = 0;
    for (std::uint64_t seed : cfg.seeds) {
      BaseNewSample sample = measure_base_new(task, enc, point.spec, cfg.train, seed);
      base_runs.push_back(sample.base_pct);
      new_runs.push_back(sample.new_pct);
      count = sample.parameter_count;
    }
    AblationCell cell;
    cell.grid = point.label;
    cell.head = to_string(point.spec.kind);
    cell.parameter_count = count;
    cell.base_acc = average_of(std::move(base_runs));
    cell.new_acc = average_of(std::move(new_runs));
    report.ablation.push_back(std::move(cell));
  }

  report.runtime_seconds = timed_seconds(started);
  return report;
}

std::vector<std::pair<std::string, double>> EvalReport::transfer_deltas() const {
  const TransferRow* static_row = nullptr;
  const TransferRow* cond_row = nullptr;
  for (const TransferRow& row : transfer) {
    if (row.head == to_string(HeadKind::static_prompt)) static_row = &row;
    if (row.head == to_string(HeadKind::conditional_prompt)) cond_row = &row;
  }
  if (!static_row || !cond_row) {
    throw DataError("transfer report lacks the static/conditional row pair");
  }
  if (static_row->targets.size() != cond_row->targets.size()) {
    throw DataError("transfer rows disagree on the target list");
  }
  std::vector<std::pair<std::string, double>> deltas;
  for (std::size_t j = 0; j < static_row->targets.size(); ++j) {
    if (static_row->targets[j].task_name != cond_row->targets[j].task_name) {
      throw DataError("transfer rows disagree on the target list");
    }
    deltas.emplace_back(static_row->targets[j].task_name,
                        cond_row->targets[j].accuracy.mean - static_row->targets[j].accuracy.mean);
  }
  deltas.emplace_back("average", cond_row->target_average - static_row->target_average);
  return deltas;
}

std::string EvalReport::to_json() const {
  ojson root;
  root["schema"] = kSchemaTag;
  root["protocol"] = protocol;
  root["seeds"] = seeds;
  root["config_digest"] = config_digest;

  if (!datasets.empty()) {
    ojson list = ojson::array();
    for (const BaseNewDataset& dataset : datasets) {
      ojson entry;
      entry["task"] = dataset.task_name;
      entry["digest"] = dataset.task_digest;
      ojson heads = ojson::array();
      for (const BaseNewRow& row : dataset.rows) {
        ojson cell;
        cell["head"] = row.head;
        cell["parameters"] = row.parameter_count;
        cell["base"] = averaged_json(row.base_acc);
        cell["new"] = averaged_json(row.new_acc);
        cell["h"] = row.h();
        heads.push_back(std::move(cell));
      }
      entry["heads"] = std::move(heads);
      list.push_back(std::move(entry));
    }
    root["datasets"] = std::move(list);
  }

  if (!transfer.empty()) {
    root["source"] = source_name;
    ojson heads = ojson::array();
    for (const TransferRow& row : transfer) {
      ojson cell;
      cell["head"] = row.head;
      cell["parameters"] = row.parameter_count;
      cell["source_acc"] = averaged_json(row.source_acc);
      ojson targets = ojson::array();
      for (const TransferTarget& target : row.targets) {
        ojson t;
        t["task"] = target.task_name;
        t["accuracy"] = averaged_json(target.accuracy);
        targets.push_back(std::move(t));
      }
      cell["targets"] = std::move(targets);
      cell["target_average"] = row.target_average;
      heads.push_back(std::move(cell));
    }
    root["heads"] = std::move(heads);
    ojson deltas = ojson::array();
    for (const auto& [name, gain] : transfer_deltas()) {
      ojson d;
      d["target"] = name;
      d["gain"] = gain;
      deltas.push_back(std::move(d));
    }
    root["delta"] = std::move(deltas);
  }

  if (!shifts.empty()) {
    root["source"] = source_name;
    ojson heads = ojson::array();
    for (const ShiftRow& row : shifts) {
      ojson cell;
      cell["head"] = row.head;
      cell["parameters"] = row.parameter_count;
      ojson rungs = ojson::array();
      for (const ShiftCell& rung : row.rungs) {
        ojson r;
        r["magnitude"] = rung.magnitude;
        r["accuracy"] = averaged_json(rung.accuracy);
        rungs.push_back(std::move(r));
      }
      cell["rungs"] = std::move(rungs);
      heads.push_back(std::move(cell));
    }
    root["heads"] = std::move(heads);
  }

  if (!incremental.empty()) {
    root["source"] = source_name;
    ojson heads = ojson::array();
    for (const UnionRow& row : incremental) {
      ojson cell;
      cell["head"] = row.head;
      cell["parameters"] = row.parameter_count;
      cell["union"] = averaged_json(row.accuracy);
      heads.push_back(std::move(cell));
    }
    root["heads"] = std::move(heads);
  }

  if (!ablation.empty()) {
    root["source"] = source_name;
    ojson cells = ojson::array();
    for (const AblationCell& cell : ablation) {
      ojson c;
      c["grid"] = cell.grid;
      c["head"] = cell.head;
      c["parameters"] = cell.parameter_count;
      c["base"] = averaged_json(cell.base_acc);
      c["new"] = averaged_json(cell.new_acc);
      c["h"] = cell.h();
      cells.push_back(std::move(c));
    }
    root["cells"] = std::move(cells);
  }

  return root.dump(2) + "\n";
}

std::string EvalReport::to_csv() const {
  std::ostringstream out;
  out << "protocol,dataset,cell,head,metric,seed,value\n";
  auto emit = [&](const std::string& dataset, const std::string& cell, const std::string& head,
                  const std::string& metric, const std::string& seed, double value) {
    out << protocol << ',' << dataset << ',' << cell << ',' << head << ',' << metric << ','
        << seed << ',' << fixed2(value) << '\n';
  };
  auto emit_averaged = [&](const std::string& dataset, const std::string& cell,
                           const std::string& head, const std::string& metric,
                           const Averaged& a) {
    for (std::size_t i = 0; i < a.per_seed.size(); ++i) {
      emit(dataset, cell, head, metric, std::to_string(seeds[i]), a.per_seed[i]);
    }
    emit(dataset, cell, head, metric, "mean", a.mean);
  };

  for (const BaseNewDataset& dataset : datasets) {
    for (const BaseNewRow& row : dataset.rows) {
      emit_averaged(dataset.task_name, "", row.head, "base", row.base_acc);
      emit_averaged(dataset.task_name, "", row.head, "new", row.new_acc);
      emit(dataset.task_name, "", row.head, "h", "mean", row.h());
    }
  }

  for (const TransferRow& row : transfer) {
    emit_averaged(source_name, "", row.head, "source", row.source_acc);
    for (const TransferTarget& target : row.targets) {
      emit_averaged(target.task_name, "", row.head, "target", target.accuracy);
    }
    emit(source_name, "", row.head, "target_average", "mean", row.target_average);
  }
  if (!transfer.empty()) {
    for (const auto& [name, gain] : transfer_deltas()) {
      emit(name, "", "conditional-static", "delta", "mean", gain);
    }
  }

  for (const ShiftRow& row : shifts) {
    for (const ShiftCell& rung : row.rungs) {
      emit_averaged(source_name, format_double(rung.magnitude), row.head, "shift", rung.accuracy);
    }
  }

  for (const UnionRow& row : incremental) {
    emit_averaged(source_name, "", row.head, "union", row.accuracy);
  }

  for (const AblationCell& cell : ablation) {
    emit_averaged(source_name, cell.grid, cell.head, "base", cell.base_acc);
    emit_averaged(source_name, cell.grid, cell.head, "new", cell.new_acc);
    emit(source_name, cell.grid, cell.head, "h", "mean", cell.h());
  }

  return out.str();
}

std::string EvalReport::summary() const {
  std::ostringstream out;
  out << "protocol " << protocol << " | seeds";
  for (std::uint64_t seed : seeds) out << ' ' << seed;
  out << " | config " << config_digest << '\n';

  char line[256];
  for (const BaseNewDataset& dataset : datasets) {
    out << "task " << dataset.task_name << '\n';
    std::snprintf(line, sizeof(line), "  %-22s %8s %8s %8s\n", "head", "base", "new", "H");
    out << line;
    for (const BaseNewRow& row : dataset.rows) {
      std::snprintf(line, sizeof(line), "  %-22s %8.2f %8.2f %8.2f\n", row.head.c_str(),
                    row.base_acc.mean, row.new_acc.mean, row.h());
      out << line;
    }
  }

  if (!transfer.empty()) {
    out << "source " << source_name << '\n';
    std::snprintf(line, sizeof(line), "  %-22s %8s", "head", "source");
    out << line;
    for (const TransferTarget& target : transfer.front().targets) {
      std::snprintf(line, sizeof(line), " %12s", target.task_name.c_str());
      out << line;
    }
    std::snprintf(line, sizeof(line), " %8s\n", "average");
    out << line;
    for (const TransferRow& row : transfer) {
      std::snprintf(line, sizeof(line), "  %-22s %8.2f", row.head.c_str(), row.source_acc.mean);
      out << line;
      for (const TransferTarget& target : row.targets) {
        std::snprintf(line, sizeof(line), " %12.2f", target.accuracy.mean);
        out << line;
      }
      std::snprintf(line, sizeof(line), " %8.2f\n", row.target_average);
      out << line;
    }
    out << "  delta (conditional - static):";
    for (const auto& [name, gain] : transfer_deltas()) {
      out << ' ' << name << ' ' << (gain >= 0 ? "+" : "") << fixed2(gain);
    }
    out << '\n';
  }

  if (!shifts.empty()) {
    out << "source " << source_name << '\n';
    std::snprintf(line, sizeof(line), "  %-22s", "head");
    out << line;
    for (const ShiftCell& rung : shifts.front().rungs) {
      std::snprintf(line, sizeof(line), " %12s", ("shift " + format_double(rung.magnitude)).c_str());
      out << line;
    }
    out << '\n';
    for (const ShiftRow& row : shifts) {
      std::snprintf(line, sizeof(line), "  %-22s", row.head.c_str());
      out << line;
      for (const ShiftCell& rung : row.rungs) {
        std::snprintf(line, sizeof(line), " %12.2f", rung.accuracy.mean);
        out << line;
      }
      out << '\n';
    }
  }

  if (!incremental.empty()) {
    out << "task " << source_name << '\n';
    std::snprintf(line, sizeof(line), "  %-22s %8s\n", "head", "union");
    out << line;
    for (const UnionRow& row : incremental) {
      std::snprintf(line, sizeof(line), "  %-22s %8.2f\n", row.head.c_str(), row.accuracy.mean);
      out << line;
    }
  }

  if (!ablation.empty()) {
    out << "task " << source_name << '\n';
    std::snprintf(line, sizeof(line), "  %-18s %-22s %10s %8s %8s %8s\n", "grid", "head", "params",
                  "base", "new", "H");
    out << line;
    for (const AblationCell& cell : ablation) {
      std::snprintf(line, sizeof(line), "  %-18s %-22s %10zu %8.2f %8.2f %8.2f\n",
                    cell.grid.c_str(), cell.head.c_str(), cell.parameter_count,
                    cell.base_acc.mean, cell.new_acc.mean, cell.h());
      out << line;
    }
  }

  return out.str();
}

}  // namespace promptlab
