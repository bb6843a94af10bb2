#pragma once

// End-to-end evaluation runs and the offline follow-up steps.

#include <chrono>
#include <cstddef>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>

#include <nlohmann/json.hpp>

#include "flex/analysis.hpp"
#include "flex/execution.hpp"
#include "flex/judge.hpp"

namespace flex {

struct RunConfig {
  std::filesystem::path dataset_path;
  std::filesystem::path predictions_path;
  std::filesystem::path db_root;
  std::string judge = "ex-echo";
  BackendOptions backend_options;
  JudgeParams params;
  std::filesystem::path template_dir = PromptTemplates::default_dir();
  std::optional<std::filesystem::path> cache_dir;
  std::filesystem::path output_dir = "runs";
  std::string run_name = "run";
  ComparisonMode mode = ComparisonMode::kSet;
  std::size_t concurrency = 8;
  std::optional<ModelType> model_type;
  std::chrono::milliseconds exec_timeout{30'000};
  RenderConfig render;
  /// Stop with Interrupted after this many new judgments were written.
  std::optional<std::size_t> stop_after;

  std::filesystem::path run_dir() const { return output_dir / run_name; }
};

/// Throws ConfigError for missing paths, a bad run name or zero concurrency.
void validate(const RunConfig& cfg);

/// Raised when a run stops early on request; the judgments written so far
/// stay on disk and a later run resumes from them.
class Interrupted : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RunResult {
  RunSummary summary;
  std::size_t resumed = 0;
  std::size_t judged = 0;
  std::size_t cache_hits = 0;
  std::size_t backend_calls = 0;
  std::filesystem::path run_dir;
};

/// Executes, judges and categorizes every instance, writing judgments.jsonl
/// (dataset order), summary.json, report.md and run_meta.json under
/// run_dir(). Instances already present in judgments.jsonl are skipped.
/// `backend` overrides cfg.judge when given.
RunResult evaluate(const RunConfig& cfg, JudgeBackend* backend = nullptr,
                   const Sleeper& sleeper = {});

/// Re-runs categorization over an existing run and rewrites its outputs.
RunResult recategorize(const RunConfig& cfg, JudgeBackend* backend = nullptr,
                       const Sleeper& sleeper = {});

/// Rebuilds the summary from judgments.jsonl and run_meta.json.
RunSummary reaggregate(const std::filesystem::path& run_dir);

/// Serialized summary.json content for a summary.
std::string summary_file_text(const RunSummary& summary);

}  // namespace flex
