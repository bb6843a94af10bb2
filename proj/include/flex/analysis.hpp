#pragma once

// FLEX and agreement statistics, error categorization and leaderboards.

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "flex/context.hpp"
#include "flex/judge.hpp"
#include "flex/model.hpp"

namespace flex {

/// Rounds half away from zero to two decimals.
double round2(double value);

// ---------------------------------------------------------------------------
// Scores
// ---------------------------------------------------------------------------

/// 100 * (records whose verdict boolean is true) / n. Throws
/// ContractViolation on an empty list.
double flex_score(std::span<const JudgmentRecord> records);

/// 100 * (records with matching execution results) / n.
double ex_from_records(std::span<const JudgmentRecord> records);

struct ConfusionSummary {
  std::size_t n = 0;
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t fn = 0;
  /// True negatives from the judge; exec errors are counted separately.
  std::size_t tn = 0;
  std::size_t exec_errors = 0;
  std::size_t fallbacks = 0;

  double fp_ratio() const { return n == 0 ? 0.0 : 100.0 * fp / n; }
  double fn_ratio() const { return n == 0 ? 0.0 : 100.0 * fn / n; }
  bool operator==(const ConfusionSummary&) const = default;
};

ConfusionSummary confusion_summary(std::span<const JudgmentRecord> records);

/// flex = ex - fp_ratio + fn_ratio, checked on integer counts.
bool identity_holds(std::span<const JudgmentRecord> records);

struct GroupStats {
  std::size_t n = 0;
  double flex = 0.0;
  double ex = 0.0;
  double fp_ratio = 0.0;
  double fn_ratio = 0.0;
  ConfusionSummary counts;
};

GroupStats group_stats(std::span<const JudgmentRecord> records);

/// Keyed by difficulty name; only non-empty groups appear. Uses the
/// difficulty carried by each record.
std::map<std::string, GroupStats> difficulty_breakdown(std::span<const JudgmentRecord> records);

/// Same, with difficulties taken from the dataset by instance id.
std::map<std::string, GroupStats> difficulty_breakdown(
    std::span<const JudgmentRecord> records, std::span<const EvalInstance> instances);

// ---------------------------------------------------------------------------
// Run summary
// ---------------------------------------------------------------------------

struct InstanceLabel {
  bool correct = false;
  Branch subset = Branch::kEq;
  bool operator==(const InstanceLabel&) const = default;
};

struct RunSummary {
  std::string run_name;
  std::optional<ModelType> model_type;
  std::size_t n = 0;
  double flex = 0.0;
  double ex = 0.0;
  std::optional<double> em;
  double delta = 0.0;
  ConfusionSummary counts;
  std::size_t uncategorized = 0;
  /// Instances whose set and bag comparisons disagree.
  std::size_t set_bag_disagreements = 0;
  std::map<std::string, GroupStats> per_difficulty;
  /// Category name -> count, per confusion cell ("FP", "FN", "TN").
  std::map<std::string, std::map<std::string, std::size_t>> categories;
  /// Judge verdict and EX subset per instance, ready for agreement studies.
  std::map<std::int64_t, InstanceLabel> labels;
};

/// Throws ContractViolation on an empty list.
RunSummary summarize(std::string run_name, std::optional<ModelType> model_type,
                     std::span<const JudgmentRecord> records, bool include_em);

// ---------------------------------------------------------------------------
// Leaderboards
// ---------------------------------------------------------------------------

struct RunScore {
  std::string name;
  double flex = 0.0;
  double ex = 0.0;
};

struct LeaderboardRow {
  std::string run_name;
  double flex = 0.0;
  double ex = 0.0;
  double delta = 0.0;
  int flex_rank = 0;
  int ex_rank = 0;
  /// ex_rank - flex_rank; positive means the run climbed.
  int movement = 0;
};

/// Competition ranks computed separately for FLEX and EX (scores compared at
/// two decimals), sorted by FLEX descending with ties ordered by name.
/// Throws ContractViolation on duplicate names.
std::vector<LeaderboardRow> rerank(std::span<const RunScore> runs);

/// Competition ranks for a score list, in input order.
std::vector<int> competition_ranks(std::span<const double> scores);

/// "↑k", "↓k" or "-".
std::string movement_arrow(int movement);
/// "1 (↑2)"
std::string rank_cell(const LeaderboardRow& row);

double mean_delta(std::span<const LeaderboardRow> rows);
double mean_abs_movement(std::span<const LeaderboardRow> rows);

std::string leaderboard_markdown(std::span<const LeaderboardRow> rows);

// ---------------------------------------------------------------------------
// Agreement
// ---------------------------------------------------------------------------

/// Rater 1 (judge) by rater 2 (human): a both correct, b judge-only correct,
/// c human-only correct, d both incorrect.
struct Confusion2x2 {
  std::uint64_t a = 0;
  std::uint64_t b = 0;
  std::uint64_t c = 0;
  std::uint64_t d = 0;
};

/// Throws ContractViolation when all counts are zero.
double cohen_kappa(const Confusion2x2& c);

/// Items by categories matrix of rater counts; every row must sum to the
/// same r >= 2. Throws ContractViolation otherwise.
double fleiss_kappa(const std::vector<std::vector<std::uint64_t>>& ratings);

struct AgreementReport {
  double kappa = 0.0;  // x100
  double acc = 0.0;
  double eq_acc = 0.0;
  double neq_acc = 0.0;
  std::size_t n = 0;
  std::size_t eq_n = 0;
  std::size_t neq_n = 0;
  Confusion2x2 table;
  std::optional<double> fleiss;  // x100
};

/// Throws DatasetError when the key sets differ, are empty, or a subset is
/// empty.
AgreementReport agreement_report(const std::map<std::int64_t, bool>& judgments,
                                 const std::map<std::int64_t, bool>& human,
                                 const std::map<std::int64_t, Branch>& subset);

// ---------------------------------------------------------------------------
// Categorization
// ---------------------------------------------------------------------------

/// Parses a fenced JSON array of category names (the last such block, or the
/// whole response when it is a bare array). Names outside the allowed set for
/// the prompt are dropped with a warning. nullopt when nothing parses.
std::optional<std::set<ErrorCategory>> parse_categories(std::string_view response,
                                                        bool false_negative);

/// FP, FN and judge-made TN records; exec errors get their category without
/// a call; fallbacks and TP are left alone.
bool needs_categorization(const JudgmentRecord& record);

/// Fills record.categories. Backend failures and unparseable answers leave
/// the categories empty and set record.uncategorized.
void categorize_record(Judge& judge, JudgmentRecord& record, const EvalInstance& instance,
                       const Prediction& pred, const SchemaDoc& schema);

/// Batch form over records; instances, predictions and schemas are looked up
/// by id. Missing lookups throw DatasetError.
void categorize_errors(Judge& judge, std::span<JudgmentRecord> records,
                       const std::map<std::int64_t, EvalInstance>& instances,
                       const std::map<std::int64_t, Prediction>& predictions,
                       SchemaCache& schemas);

}  // namespace flex
