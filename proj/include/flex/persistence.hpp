#pragma once

// File formats: datasets, predictions, judgments, summaries, labels.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "flex/analysis.hpp"
#include "flex/model.hpp"

namespace flex {

/// JSON array of benchmark items. question_id (else the array index),
/// db_id, question, evidence, SQL (else query), difficulty. Throws
/// DatasetError naming the offending index.
std::vector<EvalInstance> load_dataset(const std::filesystem::path& path);

enum class PredictionFormat { kJsonArray, kBirdObject, kPlainText };

struct PredictionSet {
  PredictionFormat format = PredictionFormat::kJsonArray;
  /// Ids are question ids for the JSON array format and dataset positions
  /// for the other two.
  std::vector<Prediction> predictions;
};

/// Detection order: JSON array of {question_id, sql}; BIRD object
/// {"<index>": "SQL\t----- bird -----\t<db_id>"}; plain text, one per line.
PredictionSet load_predictions(const std::filesystem::path& path);

/// Maps every dataset instance to its prediction. Throws DatasetError on a
/// cardinality or id mismatch.
std::map<std::int64_t, Prediction> align_predictions(const std::vector<EvalInstance>& instances,
                                                     const PredictionSet& set);

nlohmann::json record_to_json(const JudgmentRecord& record);
/// Throws DatasetError on malformed input.
JudgmentRecord record_from_json(const nlohmann::json& doc);

struct JudgmentsFile {
  std::vector<JudgmentRecord> records;
  /// A partial final line was found (an interrupted write).
  bool truncated_tail = false;
  /// Byte length of the intact prefix.
  std::uintmax_t intact_bytes = 0;
};

/// Reads a JSONL judgments file. A missing file yields no records; a partial
/// last line is skipped; any other malformed line throws DatasetError.
JudgmentsFile load_judgments(const std::filesystem::path& path);

/// Rounded scores (two decimals) plus raw counts.
nlohmann::json summary_to_json(const RunSummary& summary);

std::string report_markdown(const RunSummary& summary);

struct HumanLabel {
  std::int64_t instance_id = 0;
  bool correct = false;
  Branch subset = Branch::kEq;
  std::vector<bool> raters;
};

/// JSON array of {instance_id, label: correct|incorrect, subset: EQ|NEQ,
/// raters?: [bool]}.
std::vector<HumanLabel> load_human_labels(const std::filesystem::path& path);

/// Per-item counts [correct, incorrect] for items with rater lists; empty
/// when no item has raters. Throws DatasetError when only some items have
/// them.
std::vector<std::vector<std::uint64_t>> rater_matrix(const std::vector<HumanLabel>& labels);

/// Leaderboard input: CSV of name,flex,ex (header optional) or a
/// summary.json (run_name, flex, ex).
std::vector<RunScore> load_run_scores(const std::filesystem::path& path);

nlohmann::json leaderboard_to_json(const std::vector<LeaderboardRow>& rows);

std::string read_text(const std::filesystem::path& path);
/// Writes via a temporary file and rename.
void write_text_atomic(const std::filesystem::path& path, const std::string& text);

}  // namespace flex
