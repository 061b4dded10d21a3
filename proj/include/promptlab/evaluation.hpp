#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "promptlab/class_split.hpp"
#include "promptlab/synthdata.hpp"
#include "promptlab/training.hpp"

namespace promptlab {

// 2bn/(b+n), the balance between base and new accuracy. Both arguments
// must be positive and on the same scale (fractions or percents).
// Throws NumericError otherwise.
double harmonic_mean(double base_acc, double new_acc);

// Shared settings for every protocol run: the training recipe, the seeds
// to average over, and how the learnable context starts out.
struct ProtocolConfig {
  TrainConfig train;
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::size_t context_len = 4;
  ContextInit context_init = ContextInit::word_embedding;

  void validate() const;  // throws ConfigError
};

// One metric measured once per seed, plus the exact arithmetic mean of
// those per-seed values. All accuracies are percents (0 to 100).
struct Averaged {
  std::vector<double> per_seed;
  double mean = 0.0;
};

Averaged average_of(std::vector<double> per_seed);

// One head's base/new cell on one task.
struct BaseNewRow {
  std::string head;
  std::size_t parameter_count = 0;
  Averaged base_acc;
  Averaged new_acc;

  double h() const;  // harmonic mean of the two means, recomputed on call
};

struct BaseNewDataset {
  std::string task_name;
  std::string task_digest;
  std::vector<BaseNewRow> rows;
};

struct TransferTarget {
  std::string task_name;
  Averaged accuracy;
};

// One head's transfer line: trained on the source, applied read-only to
// each target. target_average is the exact mean of the target means.
struct TransferRow {
  std::string head;
  std::size_t parameter_count = 0;
  Averaged source_acc;
  std::vector<TransferTarget> targets;
  double target_average = 0.0;
};

struct ShiftCell {
  double magnitude = 0.0;
  Averaged accuracy;
};

struct ShiftRow {
  std::string head;
  std::size_t parameter_count = 0;
  std::vector<ShiftCell> rungs;
};

struct UnionRow {
  std::string head;
  std::size_t parameter_count = 0;
  Averaged accuracy;
};

// One grid point of an ablation, measured like a base/new cell.
struct AblationCell {
  std::string grid;  // e.g. "init=word_embedding" or "context_len=8"
  std::string head;
  std::size_t parameter_count = 0;
  Averaged base_acc;
  Averaged new_acc;

  double h() const;
};

enum class AblationKind { init, context_length, long_static };

std::string to_string(AblationKind kind);
AblationKind ablation_kind_from_string(std::string_view name);  // throws ConfigError

// The result of one protocol run. Only the section belonging to the
// protocol is populated. runtime_seconds is measured but intentionally
// kept out of both serializations so identical runs produce identical
// bytes.
struct EvalReport {
  std::string protocol;
  std::vector<std::uint64_t> seeds;
  std::string config_digest;

  std::vector<BaseNewDataset> datasets;  // base2new
  std::string source_name;               // xdataset, dg
  std::vector<TransferRow> transfer;     // xdataset
  std::vector<ShiftRow> shifts;          // dg
  std::vector<UnionRow> incremental;     // incremental
  std::vector<AblationCell> ablation;    // ablate_*

  double runtime_seconds = 0.0;

  // Per-target conditional-minus-static gaps, ending with the pair for
  // the target averages. Computed from the stored rows, never stored.
  std::vector<std::pair<std::string, double>> transfer_deltas() const;

  std::string to_json() const;  // structured document, deterministic bytes
  std::string to_csv() const;   // flat cell table, two-decimal percents
  std::string summary() const;  // aligned text block for terminals
};

// Trains the static and conditional heads on each task's base classes
// (three heads, |seeds| runs each) and measures base and new accuracy
// separately, each over its own label group. Audits that no new-class
// test instance was trained on and that the encoder stayed frozen.
EvalReport protocol_base_to_new(std::span<const TaskBundle> tasks, const ProtocolConfig& cfg);

// Trains on every source class, then applies the learned parameters
// unchanged to each target task's own label set. All bundles must share
// one encoder. Audits that transfer mutated nothing.
EvalReport protocol_cross_dataset(const TaskBundle& source, std::span<const TaskBundle> targets,
                                  const ProtocolConfig& cfg);

// Trains on every source class and walks the task's shift ladder with
// the label space unchanged. Throws DataError when a rung disagrees
// with the source's class list.
EvalReport protocol_domain_generalization(const TaskBundle& source, const ProtocolConfig& cfg);

// Trains on base classes, then evaluates every test instance once over
// the union label space (base and new together).
EvalReport protocol_class_incremental(const TaskBundle& task, const ProtocolConfig& cfg);

// Grid studies: context initialization (word embedding vs random),
// context length (4/8/16, random init), and a long-context static head
// against the standard conditional head, with parameter counts.
EvalReport ablate(AblationKind kind, const TaskBundle& task, const ProtocolConfig& cfg);

}  // namespace promptlab
