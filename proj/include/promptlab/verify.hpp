#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace promptlab {

// Outcome of one self-check suite. `detail` is a single line describing
// the measured quantity (worst error, counts) or the failure reason.
struct SuiteResult {
  std::string name;
  bool passed = false;
  double seconds = 0.0;
  std::string detail;
};

struct VerifyOptions {
  // Empty runs every built-in suite; otherwise only the named ones.
  std::vector<std::string> suites;
  // When set, adds a "checkpoint" suite that loads this file against the
  // encoder of `checkpoint_task` and reports any digest or shape refusal.
  std::optional<std::filesystem::path> checkpoint;
  std::optional<std::filesystem::path> checkpoint_task;
};

// Built-in suite names, in execution order: fixtures, params, gradcheck,
// zerometa, zeroshot.
std::vector<std::string> verify_suite_names();

// Runs the selected suites and returns one result per suite. Unknown
// suite names throw ConfigError. Never throws on suite failure; failures
// are reported through SuiteResult so callers can print all of them.
std::vector<SuiteResult> run_verify(const VerifyOptions& opts = {});

}  // namespace promptlab
