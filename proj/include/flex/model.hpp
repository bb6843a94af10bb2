#pragma once

// Domain types shared by every stage of the evaluation pipeline.

#include <compare>
#include <cstdint>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

namespace flex {

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

/// Malformed or inconsistent benchmark data (a failing ground truth, a
/// duplicate id, ...). Aborts a run with exit code 1.
class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid configuration detected before any work starts. Exit code 2.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A caller broke an operation's precondition.
class ContractViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// ---------------------------------------------------------------------------
// Benchmark items
// ---------------------------------------------------------------------------

enum class Difficulty {
  kSimple,
  kModerate,
  kChallenging,
  kEasy,
  kMedium,
  kHard,
  kExtra,
  kUnknown,
};

std::string_view to_string(Difficulty d);
/// Accepts both benchmark vocabularies verbatim (case-insensitive); anything
/// else maps to kUnknown.
Difficulty parse_difficulty(std::string_view s);

struct EvalInstance {
  std::int64_t instance_id = 0;
  std::string db_id;
  std::string question;
  std::string knowledge;
  std::string gt_sql;
  Difficulty difficulty = Difficulty::kUnknown;
};

/// Throws DatasetError when question or gt_sql is blank.
void validate(const EvalInstance& instance);

struct Prediction {
  std::int64_t instance_id = 0;
  std::string gen_sql;
};

// ---------------------------------------------------------------------------
// Query results
// ---------------------------------------------------------------------------

/// Content digest standing in for a blob value.
struct BlobDigest {
  std::string hex;
  auto operator<=>(const BlobDigest&) const = default;
};

struct Null {
  auto operator<=>(const Null&) const = default;
};

/// A normalized result cell. Alternative order is part of the total order
/// used for set and bag comparison.
using Cell = std::variant<Null, std::int64_t, double, std::string, BlobDigest>;

using Row = std::vector<Cell>;

/// Columns plus rows; every row carries exactly one cell per column.
class ResultTable {
 public:
  ResultTable() = default;
  /// Throws ContractViolation when a row width differs from the column count.
  ResultTable(std::vector<std::string> columns, std::vector<Row> rows);

  const std::vector<std::string>& columns() const { return columns_; }
  const std::vector<Row>& rows() const { return rows_; }
  std::size_t row_count() const { return rows_.size(); }
  std::size_t column_count() const { return columns_.size(); }

  bool operator==(const ResultTable&) const = default;

 private:
  std::vector<std::string> columns_;
  std::vector<Row> rows_;
};

enum class ExecErrorKind { kSyntax, kRuntime, kTimeout, kMissingDb };

std::string_view to_string(ExecErrorKind kind);

struct ExecError {
  ExecErrorKind kind = ExecErrorKind::kRuntime;
  std::string message;
  bool operator==(const ExecError&) const = default;
};

/// Exactly one of a table or an error.
class ExecutionOutcome {
 public:
  ExecutionOutcome(ResultTable table) : value_(std::move(table)) {}
  ExecutionOutcome(ExecError error) : value_(std::move(error)) {}

  bool ok() const { return std::holds_alternative<ResultTable>(value_); }
  const ResultTable& table() const;
  const ExecError& error() const;

  bool operator==(const ExecutionOutcome&) const = default;

 private:
  std::variant<ResultTable, ExecError> value_;
};

// ---------------------------------------------------------------------------
// Judge context
// ---------------------------------------------------------------------------

enum class Branch { kEq, kNeq };
enum class CriteriaVariant { kTEq, kTNeq };

std::string_view to_string(Branch b);

/// Information handed to the judge. The EQ branch never carries rendered
/// results; the NEQ branch always carries both.
struct ContextBundle {
  Branch branch = Branch::kEq;
  std::int64_t instance_id = 0;
  std::string question;
  std::string schema_doc;
  std::string knowledge;
  std::string gt_sql;
  std::string gen_sql;
  std::optional<std::string> gt_result_rendered;
  std::optional<std::string> gen_result_rendered;
  CriteriaVariant criteria = CriteriaVariant::kTEq;

  /// True when the branch, criteria and rendered results agree.
  bool valid() const;
};

// ---------------------------------------------------------------------------
// Judgments
// ---------------------------------------------------------------------------

enum class Verdict { kCorrect, kIncorrect, kExecError, kJudgeFailedFallback };
enum class ConfusionCell { kTP, kFP, kFN, kTN };

std::string_view to_string(Verdict v);
std::string_view to_string(ConfusionCell c);
Verdict parse_verdict_name(std::string_view s);
ConfusionCell parse_confusion_name(std::string_view s);

/// (ex_equal, judged_correct) -> confusion cell relative to EX.
constexpr ConfusionCell classify_confusion(bool ex_equal, bool judged_correct) {
  if (ex_equal) return judged_correct ? ConfusionCell::kTP : ConfusionCell::kFP;
  return judged_correct ? ConfusionCell::kFN : ConfusionCell::kTN;
}

enum class ErrorCategory {
  kSchemaAlignment,
  kFilteringConditions,
  kNullableColumns,
  kMultipleRows,
  kAbusedClauses,
  kMultipleAnswers,
  kExecError,
  kOutputStructure,
  kValueRepresentation,
  kIncorrectGroundTruth,
};

/// Stable wire identifier, e.g. "schema_alignment".
std::string_view to_string(ErrorCategory c);
std::optional<ErrorCategory> parse_category(std::string_view s);

/// Categories a false positive / true negative may carry.
const std::vector<ErrorCategory>& incorrect_categories();
/// Categories a false negative may carry.
const std::vector<ErrorCategory>& correct_despite_mismatch_categories();

struct JudgmentRecord {
  std::int64_t instance_id = 0;
  bool ex_equal = false;
  Verdict verdict = Verdict::kIncorrect;
  ConfusionCell confusion = ConfusionCell::kTN;
  std::string rationale;
  std::set<ErrorCategory> categories;
  std::string raw_response;
  std::string judge_name;

  // Per-instance facts kept so a summary can be rebuilt from the judgments
  // file alone.
  Difficulty difficulty = Difficulty::kUnknown;
  bool em_match = false;
  bool bag_equal = false;
  bool uncategorized = false;

  /// correct -> true, incorrect/exec_error -> false, fallback -> ex_equal.
  bool verdict_bool() const;

  bool operator==(const JudgmentRecord&) const = default;
};

/// Checks the confusion and category invariants of a record.
bool consistent(const JudgmentRecord& record);

enum class ModelType { kProprietary, kOpenPlm, kOpenSft, kUnknown };

std::string_view to_string(ModelType t);
ModelType parse_model_type(std::string_view s);

}  // namespace flex
