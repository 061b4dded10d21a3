#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "promptlab/errors.hpp"
#include "promptlab/evaluation.hpp"
#include "promptlab/prompting.hpp"
#include "promptlab/synthdata.hpp"
#include "promptlab/training.hpp"

using namespace promptlab;

namespace {

TaskGenParams small_task_params() {
  TaskGenParams params;
  params.num_classes = 4;
  params.instances_per_class = 12;
  params.train_pool_per_class = 8;
  return params;
}

// Protocol runs train every head for every seed, so the test config keeps
// the optimization loop tiny without disabling it.
ProtocolConfig fast_config() {
  ProtocolConfig cfg;
  cfg.seeds = {0, 1};
  cfg.train.shots = 4;
  cfg.train.epochs = 2;
  return cfg;
}

const BaseNewRow& row_named(const BaseNewDataset& dataset, const std::string& head) {
  for (const BaseNewRow& row : dataset.rows) {
    if (row.head == head) return row;
  }
  throw std::runtime_error("no row for head " + head);
}

const TransferRow& transfer_row_named(const EvalReport& report, const std::string& head) {
  for (const TransferRow& row : report.transfer) {
    if (row.head == head) return row;
  }
  throw std::runtime_error("no transfer row for head " + head);
}

std::size_t count_lines(const std::string& text) {
  return static_cast<std::size_t>(std::count(text.begin(), text.end(), '\n'));
}

}  // namespace

TEST_CASE("harmonic mean summarizes a base/new trade-off") {
  CHECK(harmonic_mean(69.34, 74.22) == doctest::Approx(71.70).epsilon(0.0002));
  CHECK(harmonic_mean(82.69, 63.22) == doctest::Approx(71.66).epsilon(0.0002));
  CHECK(harmonic_mean(50.0, 50.0) == doctest::Approx(50.0));
  CHECK(harmonic_mean(30.0, 70.0) == harmonic_mean(70.0, 30.0));

  // Always between the two inputs, and below their arithmetic mean.
  const double pairs[][2] = {{1.0, 99.0}, {40.0, 60.0}, {12.5, 80.25}};
  for (const auto& p : pairs) {
    double h = harmonic_mean(p[0], p[1]);
    CHECK(h >= std::min(p[0], p[1]));
    CHECK(h <= std::max(p[0], p[1]));
    CHECK(h <= 0.5 * (p[0] + p[1]));
  }

  CHECK_THROWS_AS(harmonic_mean(0.0, 50.0), NumericError);
  CHECK_THROWS_AS(harmonic_mean(50.0, 0.0), NumericError);
  CHECK_THROWS_AS(harmonic_mean(-1.0, 50.0), NumericError);
}

TEST_CASE("seed averaging keeps the raw runs alongside the mean") {
  Averaged a = average_of({10.0, 20.0, 40.0});
  CHECK(a.mean == doctest::Approx(70.0 / 3.0));
  REQUIRE(a.per_seed.size() == 3);
  CHECK(a.per_seed[1] == 20.0);
  CHECK_THROWS_AS(average_of({}), DataError);
}

TEST_CASE("protocol config validation rejects broken setups") {
  ProtocolConfig cfg = fast_config();
  CHECK_NOTHROW(cfg.validate());

  ProtocolConfig no_seeds = cfg;
  no_seeds.seeds.clear();
  CHECK_THROWS_AS(no_seeds.validate(), ConfigError);

  ProtocolConfig dup_seeds = cfg;
  dup_seeds.seeds = {3, 3};
  CHECK_THROWS_AS(dup_seeds.validate(), ConfigError);

  ProtocolConfig no_ctx = cfg;
  no_ctx.context_len = 0;
  CHECK_THROWS_AS(no_ctx.validate(), ConfigError);

  ProtocolConfig bad_train = cfg;
  bad_train.train.epochs = 0;
  CHECK_THROWS_AS(bad_train.validate(), ConfigError);
}

TEST_CASE("base-to-new protocol reports three heads with seedwise accuracies") {
  TaskBundle task = generate_task("proto", small_task_params(), 7);
  ProtocolConfig cfg = fast_config();
  std::vector<TaskBundle> tasks;
  tasks.push_back(task);
  EvalReport report = protocol_base_to_new(tasks, cfg);

  CHECK(report.protocol == "base2new");
  CHECK(report.seeds == cfg.seeds);
  CHECK(report.config_digest.size() == 16);
  CHECK(report.runtime_seconds > 0.0);
  REQUIRE(report.datasets.size() == 1);

  const BaseNewDataset& dataset = report.datasets.front();
  CHECK(dataset.task_name == "proto");
  CHECK(dataset.task_digest == task.digest());
  REQUIRE(dataset.rows.size() == 3);

  const BaseNewRow& zs = row_named(dataset, "zero_shot");
  const BaseNewRow& static_row = row_named(dataset, "static_prompt");
  const BaseNewRow& cond_row = row_named(dataset, "conditional_prompt");

  CHECK(zs.parameter_count == 0);
  std::size_t embed = task.params.encoder.embed_dim;
  CHECK(static_row.parameter_count == cfg.context_len * embed);
  CHECK(cond_row.parameter_count > static_row.parameter_count);

  for (const BaseNewRow* row : {&zs, &static_row, &cond_row}) {
    REQUIRE(row->base_acc.per_seed.size() == cfg.seeds.size());
    REQUIRE(row->new_acc.per_seed.size() == cfg.seeds.size());
    for (double v : row->base_acc.per_seed) {
      CHECK(v >= 0.0);
      CHECK(v <= 100.0);
    }
    if (row->base_acc.mean > 0.0 && row->new_acc.mean > 0.0) {
      CHECK(row->h() == harmonic_mean(row->base_acc.mean, row->new_acc.mean));
    }
  }

  // The zero-shot head has no learned state, so every seed scores the same.
  CHECK(zs.base_acc.per_seed.front() == zs.base_acc.per_seed.back());
  CHECK(zs.new_acc.per_seed.front() == zs.new_acc.per_seed.back());
}

TEST_CASE("reports serialize byte for byte identically across repeated runs") {
  TaskBundle task = generate_task("proto", small_task_params(), 7);
  ProtocolConfig cfg = fast_config();
  std::vector<TaskBundle> tasks;
  tasks.push_back(task);

  EvalReport first = protocol_base_to_new(tasks, cfg);
  EvalReport second = protocol_base_to_new(tasks, cfg);
  CHECK(first.to_json() == second.to_json());
  CHECK(first.to_csv() == second.to_csv());
  CHECK(first.summary() == second.summary());
  CHECK(first.config_digest == second.config_digest);

  // A different training budget is a different experiment.
  ProtocolConfig longer = cfg;
  longer.train.epochs = 3;
  EvalReport third = protocol_base_to_new(tasks, longer);
  CHECK(third.config_digest != first.config_digest);
}

TEST_CASE("json and csv reports carry the documented structure") {
  TaskBundle task = generate_task("proto", small_task_params(), 7);
  ProtocolConfig cfg = fast_config();
  std::vector<TaskBundle> tasks;
  tasks.push_back(task);
  EvalReport report = protocol_base_to_new(tasks, cfg);

  nlohmann::json doc = nlohmann::json::parse(report.to_json());
  CHECK(doc.at("schema").get<std::string>() == "promptlab-report-1");
  CHECK(doc.at("protocol").get<std::string>() == "base2new");
  CHECK(doc.at("config_digest").get<std::string>() == report.config_digest);
  REQUIRE(doc.at("datasets").size() == 1);
  const auto& heads = doc.at("datasets").at(0).at("heads");
  REQUIRE(heads.size() == 3);
  for (const auto& head : heads) {
    CHECK(head.contains("parameters"));
    CHECK(head.at("base").at("per_seed").size() == cfg.seeds.size());
    CHECK(head.at("new").at("per_seed").size() == cfg.seeds.size());
    CHECK(head.contains("h"));
  }

  std::string csv = report.to_csv();
  std::istringstream lines(csv);
  std::string line;
  REQUIRE(std::getline(lines, line));
  CHECK(line == "protocol,dataset,cell,head,metric,seed,value");

  // Per head: base and new come per seed plus a mean row, H as mean only.
  std::size_t expected = 1 + 3 * (2 * (cfg.seeds.size() + 1) + 1);
  CHECK(count_lines(csv) == expected);

  std::size_t mean_rows = 0;
  while (std::getline(lines, line)) {
    CHECK(line.rfind("base2new,proto,,", 0) == 0);
    std::string value = line.substr(line.rfind(',') + 1);
    auto dot = value.find('.');
    REQUIRE(dot != std::string::npos);
    CHECK(value.size() - dot - 1 == 2);
    if (line.find(",mean,") != std::string::npos) ++mean_rows;
  }
  CHECK(mean_rows == 9);
}

TEST_CASE("cross-dataset transfer against the source itself reproduces in-domain accuracy") {
  TaskBundle task = generate_task("proto", small_task_params(), 7);
  ProtocolConfig cfg = fast_config();
  std::vector<TaskBundle> targets;
  targets.push_back(task);
  EvalReport report = protocol_cross_dataset(task, targets, cfg);

  CHECK(report.protocol == "xdataset");
  CHECK(report.source_name == "proto");
  REQUIRE(report.transfer.size() == 3);
  for (const TransferRow& row : report.transfer) {
    REQUIRE(row.targets.size() == 1);
    CHECK(row.targets.front().task_name == "proto");
    // Same task, same label space: the target pass must reproduce the
    // source accuracy exactly, seed by seed.
    CHECK(row.targets.front().accuracy.per_seed == row.source_acc.per_seed);
    CHECK(row.target_average == row.targets.front().accuracy.mean);
  }

  auto deltas = report.transfer_deltas();
  REQUIRE(deltas.size() == 2);
  CHECK(deltas.front().first == "proto");
  CHECK(deltas.back().first == "average");
  const TransferRow& static_row = transfer_row_named(report, "static_prompt");
  const TransferRow& cond_row = transfer_row_named(report, "conditional_prompt");
  CHECK(deltas.front().second ==
        cond_row.targets.front().accuracy.mean - static_row.targets.front().accuracy.mean);
  CHECK(deltas.back().second == cond_row.target_average - static_row.target_average);

  nlohmann::json doc = nlohmann::json::parse(report.to_json());
  CHECK(doc.at("source").get<std::string>() == "proto");
  CHECK(doc.at("heads").size() == 3);
  CHECK(doc.at("delta").size() == 2);
}

TEST_CASE("cross-dataset transfer refuses mismatched inputs") {
  TaskBundle task = generate_task("proto", small_task_params(), 7);
  ProtocolConfig cfg = fast_config();

  std::vector<TaskBundle> none;
  CHECK_THROWS_AS(protocol_cross_dataset(task, none, cfg), ConfigError);

  TaskGenParams foreign = small_task_params();
  foreign.encoder_seed = task.params.encoder_seed + 1;
  std::vector<TaskBundle> wrong;
  wrong.push_back(generate_task("other", foreign, 8));
  CHECK_THROWS_AS(protocol_cross_dataset(task, wrong, cfg), DataError);
}

TEST_CASE("domain generalization ladder starts at the in-domain score") {
  TaskBundle task = generate_task("proto", small_task_params(), 7);
  add_shift_rungs(task, std::vector<double>{0.0, 1.0}, 0.5, 99);
  ProtocolConfig cfg = fast_config();
  EvalReport report = protocol_domain_generalization(task, cfg);

  CHECK(report.protocol == "dg");
  REQUIRE(report.shifts.size() == 3);
  for (const ShiftRow& row : report.shifts) {
    REQUIRE(row.rungs.size() == 2);
    CHECK(row.rungs[0].magnitude == 0.0);
    CHECK(row.rungs[1].magnitude == 1.0);
    for (const ShiftCell& rung : row.rungs) {
      CHECK(rung.accuracy.mean >= 0.0);
      CHECK(rung.accuracy.mean <= 100.0);
    }
  }

  // The zero-magnitude rung is a bit-exact copy of the test split, so the
  // zero-shot head must score exactly its in-domain accuracy there.
  FrozenDualEncoder enc = task.make_encoder();
  PromptHead zs = PromptHead::make_zero_shot(enc);
  LabelSpace labels = zs.prepare_labels(task.class_names(), task.class_ids());
  double in_domain = 100.0 * evaluate_accuracy(zs, task.test_instances(task.class_ids()), labels);
  for (const ShiftRow& row : report.shifts) {
    if (row.head == "zero_shot") {
      CHECK(row.rungs[0].accuracy.mean == in_domain);
    }
  }
}

TEST_CASE("domain generalization validates the shift ladder") {
  TaskBundle task = generate_task("proto", small_task_params(), 7);
  ProtocolConfig cfg = fast_config();
  CHECK_THROWS_AS(protocol_domain_generalization(task, cfg), ConfigError);

  add_shift_rungs(task, std::vector<double>{0.0, 1.0}, 0.5, 99);

  TaskBundle bad_label = task;
  bad_label.shift_rungs[1].instances[0].class_id = 9999;
  CHECK_THROWS_AS(protocol_domain_generalization(bad_label, cfg), DataError);

  TaskBundle short_rung = task;
  short_rung.shift_rungs[0].instances.pop_back();
  CHECK_THROWS_AS(protocol_domain_generalization(short_rung, cfg), DataError);
}

TEST_CASE("class-incremental union scores stay in the chance-to-perfect band") {
  TaskBundle task = generate_task("proto", small_task_params(), 7);
  ProtocolConfig cfg = fast_config();
  EvalReport report = protocol_class_incremental(task, cfg);

  CHECK(report.protocol == "incremental");
  REQUIRE(report.incremental.size() == 3);
  for (const UnionRow& row : report.incremental) {
    REQUIRE(row.accuracy.per_seed.size() == cfg.seeds.size());
    CHECK(row.accuracy.mean > 0.0);
    CHECK(row.accuracy.mean <= 100.0);
  }

  EvalReport again = protocol_class_incremental(task, cfg);
  CHECK(report.to_json() == again.to_json());
}

TEST_CASE("ablation grids enumerate the documented cells") {
  TaskBundle task = generate_task("proto", small_task_params(), 7);
  ProtocolConfig cfg = fast_config();

  EvalReport init = ablate(AblationKind::init, task, cfg);
  CHECK(init.protocol == "ablate_init");
  REQUIRE(init.ablation.size() == 2);
  CHECK(init.ablation[0].grid == "init=word_embedding");
  CHECK(init.ablation[1].grid == "init=random_gauss");
  for (const AblationCell& cell : init.ablation) {
    CHECK(cell.head == "conditional_prompt");
    CHECK(cell.base_acc.per_seed.size() == cfg.seeds.size());
  }

  EvalReport lengths = ablate(AblationKind::context_length, task, cfg);
  REQUIRE(lengths.ablation.size() == 6);
  std::set<std::string> grids;
  for (const AblationCell& cell : lengths.ablation) grids.insert(cell.grid);
  CHECK(grids == std::set<std::string>{"context_len=4", "context_len=8", "context_len=16"});
  std::size_t conditional_cells = 0;
  for (const AblationCell& cell : lengths.ablation) {
    if (cell.head == "conditional_prompt") ++conditional_cells;
  }
  CHECK(conditional_cells == 3);
}

TEST_CASE("the long-context ablation needs room for sixty context vectors") {
  // Prompts are [start] + context + name words + [end]; sixty vectors past
  // the default 24-token budget must be rejected up front.
  TaskBundle cramped = generate_task("proto", small_task_params(), 7);
  ProtocolConfig cfg = fast_config();
  CHECK_THROWS_AS(ablate(AblationKind::long_static, cramped, cfg), ConfigError);

  TaskGenParams roomy = small_task_params();
  roomy.encoder.max_len = 72;
  TaskBundle task = generate_task("roomy", roomy, 7);
  EvalReport report = ablate(AblationKind::long_static, task, cfg);
  REQUIRE(report.ablation.size() == 3);

  std::size_t embed = roomy.encoder.embed_dim;
  bool saw_long_static = false;
  for (const AblationCell& cell : report.ablation) {
    if (cell.head == "static_prompt" && cell.grid.find("60") != std::string::npos) {
      CHECK(cell.parameter_count == 60 * embed);
      saw_long_static = true;
    }
  }
  CHECK(saw_long_static);
}
