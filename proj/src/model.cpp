#include "flex/model.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <utility>

namespace flex {
namespace {

std::string lower(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

bool blank(std::string_view s) {
  return std::all_of(s.begin(), s.end(),
                     [](unsigned char c) { return std::isspace(c) != 0; });
}

constexpr std::array<std::pair<Difficulty, std::string_view>, 8> kDifficultyNames{{
    {Difficulty::kSimple, "simple"},
    {Difficulty::kModerate, "moderate"},
    {Difficulty::kChallenging, "challenging"},
    {Difficulty::kEasy, "easy"},
    {Difficulty::kMedium, "medium"},
    {Difficulty::kHard, "hard"},
    {Difficulty::kExtra, "extra"},
    {Difficulty::kUnknown, "unknown"},
}};

constexpr std::array<std::pair<ErrorCategory, std::string_view>, 10> kCategoryNames{{
    {ErrorCategory::kSchemaAlignment, "schema_alignment"},
    {ErrorCategory::kFilteringConditions, "filtering_conditions"},
    {ErrorCategory::kNullableColumns, "nullable_columns"},
    {ErrorCategory::kMultipleRows, "multiple_rows"},
    {ErrorCategory::kAbusedClauses, "abused_clauses"},
    {ErrorCategory::kMultipleAnswers, "multiple_answers"},
    {ErrorCategory::kExecError, "exec_error"},
    {ErrorCategory::kOutputStructure, "output_structure"},
    {ErrorCategory::kValueRepresentation, "value_representation"},
    {ErrorCategory::kIncorrectGroundTruth, "incorrect_ground_truth"},
}};

}  // namespace

std::string_view to_string(Difficulty d) {
  for (const auto& [value, name] : kDifficultyNames) {
    if (value == d) return name;
  }
  return "unknown";
}

Difficulty parse_difficulty(std::string_view s) {
  const std::string key = lower(s);
  for (const auto& [value, name] : kDifficultyNames) {
    if (name == key) return value;
  }
  return Difficulty::kUnknown;
}

void validate(const EvalInstance& instance) {
  if (blank(instance.question)) {
    throw DatasetError("instance " + std::to_string(instance.instance_id) +
                       ": question is empty");
  }
  if (blank(instance.gt_sql)) {
    throw DatasetError("instance " + std::to_string(instance.instance_id) +
                       ": ground-truth SQL is empty");
  }
}

ResultTable::ResultTable(std::vector<std::string> columns, std::vector<Row> rows)
    : columns_(std::move(columns)), rows_(std::move(rows)) {
  for (std::size_t i = 0; i < rows_.size(); ++i) {
    if (rows_[i].size() != columns_.size()) {
      throw ContractViolation("row " + std::to_string(i) + " has " +
                              std::to_string(rows_[i].size()) + " cells, expected " +
                              std::to_string(columns_.size()));
    }
  }
}

std::string_view to_string(ExecErrorKind kind) {
  switch (kind) {
    case ExecErrorKind::kSyntax: return "syntax";
    case ExecErrorKind::kRuntime: return "runtime";
    case ExecErrorKind::kTimeout: return "timeout";
    case ExecErrorKind::kMissingDb: return "missing_db";
  }
  return "runtime";
}

const ResultTable& ExecutionOutcome::table() const {
  if (!ok()) throw ContractViolation("execution outcome is an error");
  return std::get<ResultTable>(value_);
}

const ExecError& ExecutionOutcome::error() const {
  if (ok()) throw ContractViolation("execution outcome is a table");
  return std::get<ExecError>(value_);
}

std::string_view to_string(Branch b) { return b == Branch::kEq ? "EQ" : "NEQ"; }

bool ContextBundle::valid() const {
  if (branch == Branch::kEq) {
    return criteria == CriteriaVariant::kTEq && !gt_result_rendered && !gen_result_rendered;
  }
  return criteria == CriteriaVariant::kTNeq && gt_result_rendered && gen_result_rendered;
}

std::string_view to_string(Verdict v) {
  switch (v) {
    case Verdict::kCorrect: return "correct";
    case Verdict::kIncorrect: return "incorrect";
    case Verdict::kExecError: return "exec_error";
    case Verdict::kJudgeFailedFallback: return "judge_failed_fallback";
  }
  return "incorrect";
}

Verdict parse_verdict_name(std::string_view s) {
  if (s == "correct") return Verdict::kCorrect;
  if (s == "incorrect") return Verdict::kIncorrect;
  if (s == "exec_error") return Verdict::kExecError;
  if (s == "judge_failed_fallback") return Verdict::kJudgeFailedFallback;
  throw DatasetError("unknown verdict '" + std::string(s) + "'");
}

std::string_view to_string(ConfusionCell c) {
  switch (c) {
    case ConfusionCell::kTP: return "TP";
    case ConfusionCell::kFP: return "FP";
    case ConfusionCell::kFN: return "FN";
    case ConfusionCell::kTN: return "TN";
  }
  return "TN";
}

ConfusionCell parse_confusion_name(std::string_view s) {
  if (s == "TP") return ConfusionCell::kTP;
  if (s == "FP") return ConfusionCell::kFP;
  if (s == "FN") return ConfusionCell::kFN;
  if (s == "TN") return ConfusionCell::kTN;
  throw DatasetError("unknown confusion cell '" + std::string(s) + "'");
}

std::string_view to_string(ErrorCategory c) {
  for (const auto& [value, name] : kCategoryNames) {
    if (value == c) return name;
  }
  return "exec_error";
}

std::optional<ErrorCategory> parse_category(std::string_view s) {
  for (const auto& [value, name] : kCategoryNames) {
    if (name == s) return value;
  }
  return std::nullopt;
}

const std::vector<ErrorCategory>& incorrect_categories() {
  static const std::vector<ErrorCategory> kSet{
      ErrorCategory::kSchemaAlignment, ErrorCategory::kFilteringConditions,
      ErrorCategory::kNullableColumns, ErrorCategory::kMultipleRows,
      ErrorCategory::kAbusedClauses,   ErrorCategory::kMultipleAnswers,
      ErrorCategory::kExecError,
  };
  return kSet;
}

const std::vector<ErrorCategory>& correct_despite_mismatch_categories() {
  static const std::vector<ErrorCategory> kSet{
      ErrorCategory::kOutputStructure,
      ErrorCategory::kValueRepresentation,
      ErrorCategory::kMultipleAnswers,
      ErrorCategory::kIncorrectGroundTruth,
  };
  return kSet;
}

bool JudgmentRecord::verdict_bool() const {
  switch (verdict) {
    case Verdict::kCorrect: return true;
    case Verdict::kIncorrect:
    case Verdict::kExecError: return false;
    case Verdict::kJudgeFailedFallback: return ex_equal;
  }
  return false;
}

bool consistent(const JudgmentRecord& record) {
  if (record.confusion != classify_confusion(record.ex_equal, record.verdict_bool())) {
    return false;
  }
  if (record.verdict == Verdict::kExecError) {
    return !record.ex_equal &&
           record.categories == std::set<ErrorCategory>{ErrorCategory::kExecError};
  }
  if (!record.categories.empty()) {
    return record.confusion != ConfusionCell::kTP;
  }
  return true;
}

std::string_view to_string(ModelType t) {
  switch (t) {
    case ModelType::kProprietary: return "proprietary";
    case ModelType::kOpenPlm: return "open_plm";
    case ModelType::kOpenSft: return "open_sft";
    case ModelType::kUnknown: return "unknown";
  }
  return "unknown";
}

ModelType parse_model_type(std::string_view s) {
  const std::string key = lower(s);
  if (key == "proprietary") return ModelType::kProprietary;
  if (key == "open_plm") return ModelType::kOpenPlm;
  if (key == "open_sft") return ModelType::kOpenSft;
  if (key.empty() || key == "unknown") return ModelType::kUnknown;
  throw ConfigError("unknown model type '" + std::string(s) + "'");
}

}  // namespace flex
