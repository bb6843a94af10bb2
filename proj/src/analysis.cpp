#include "flex/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <fmt/format.h>
#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

namespace flex {
using nlohmann::json;

double round2(double value) { return std::round(value * 100.0) / 100.0; }

namespace {

void require_non_empty(std::span<const JudgmentRecord> records) {
  if (records.empty()) throw ContractViolation("no judgment records");
}

double percent(std::size_t part, std::size_t whole) {
  return whole == 0 ? 0.0 : 100.0 * static_cast<double>(part) / static_cast<double>(whole);
}

/// Degenerate chance agreement: perfect observed agreement is 1, else 0.
double kappa_from(double p_o, double p_e) {
  if (p_e >= 1.0) return p_o >= 1.0 ? 1.0 : 0.0;
  return (p_o - p_e) / (1.0 - p_e);
}

}  // namespace

// ---------------------------------------------------------------------------
// Scores
// ---------------------------------------------------------------------------

double flex_score(std::span<const JudgmentRecord> records) {
  require_non_empty(records);
  const auto correct = std::count_if(records.begin(), records.end(),
                                     [](const auto& r) { return r.verdict_bool(); });
  return percent(static_cast<std::size_t>(correct), records.size());
}

double ex_from_records(std::span<const JudgmentRecord> records) {
  require_non_empty(records);
  const auto equal =
      std::count_if(records.begin(), records.end(), [](const auto& r) { return r.ex_equal; });
  return percent(static_cast<std::size_t>(equal), records.size());
}

ConfusionSummary confusion_summary(std::span<const JudgmentRecord> records) {
  ConfusionSummary s;
  s.n = records.size();
  for (const auto& r : records) {
    if (r.verdict == Verdict::kJudgeFailedFallback) ++s.fallbacks;
    if (r.verdict == Verdict::kExecError) {
      ++s.exec_errors;
      continue;
    }
    switch (r.confusion) {
      case ConfusionCell::kTP: ++s.tp; break;
      case ConfusionCell::kFP: ++s.fp; break;
      case ConfusionCell::kFN: ++s.fn; break;
      case ConfusionCell::kTN: ++s.tn; break;
    }
  }
  return s;
}

bool identity_holds(std::span<const JudgmentRecord> records) {
  const ConfusionSummary s = confusion_summary(records);
  std::int64_t flex_count = 0;
  std::int64_t ex_count = 0;
  for (const auto& r : records) {
    flex_count += r.verdict_bool() ? 1 : 0;
    ex_count += r.ex_equal ? 1 : 0;
  }
  return flex_count == ex_count - static_cast<std::int64_t>(s.fp) + static_cast<std::int64_t>(s.fn);
}

GroupStats group_stats(std::span<const JudgmentRecord> records) {
  GroupStats g;
  g.n = records.size();
  g.counts = confusion_summary(records);
  if (!records.empty()) {
    g.flex = flex_score(records);
    g.ex = ex_from_records(records);
  }
  g.fp_ratio = g.counts.fp_ratio();
  g.fn_ratio = g.counts.fn_ratio();
  return g;
}

std::map<std::string, GroupStats> difficulty_breakdown(std::span<const JudgmentRecord> records) {
  std::map<std::string, std::vector<JudgmentRecord>> groups;
  for (const auto& r : records) groups[std::string(to_string(r.difficulty))].push_back(r);
  std::map<std::string, GroupStats> out;
  for (const auto& [name, members] : groups) out.emplace(name, group_stats(members));
  return out;
}

std::map<std::string, GroupStats> difficulty_breakdown(std::span<const JudgmentRecord> records,
                                                       std::span<const EvalInstance> instances) {
  std::map<std::int64_t, Difficulty> by_id;
  for (const auto& inst : instances) by_id[inst.instance_id] = inst.difficulty;
  std::vector<JudgmentRecord> tagged(records.begin(), records.end());
  for (auto& r : tagged) {
    const auto it = by_id.find(r.instance_id);
    r.difficulty = it == by_id.end() ? Difficulty::kUnknown : it->second;
  }
  return difficulty_breakdown(tagged);
}

// ---------------------------------------------------------------------------
// Run summary
// ---------------------------------------------------------------------------

RunSummary summarize(std::string run_name, std::optional<ModelType> model_type,
                     std::span<const JudgmentRecord> records, bool include_em) {
  require_non_empty(records);
  RunSummary s;
  s.run_name = std::move(run_name);
  s.model_type = model_type;
  s.n = records.size();
  s.flex = flex_score(records);
  s.ex = ex_from_records(records);
  s.delta = s.flex - s.ex;
  s.counts = confusion_summary(records);
  s.per_difficulty = difficulty_breakdown(records);
  if (include_em) {
    const auto matches =
        std::count_if(records.begin(), records.end(), [](const auto& r) { return r.em_match; });
    s.em = percent(static_cast<std::size_t>(matches), records.size());
  }
  for (const auto& r : records) {
    if (r.uncategorized) ++s.uncategorized;
    if (r.verdict != Verdict::kExecError && r.ex_equal != r.bag_equal) ++s.set_bag_disagreements;
    for (const auto c : r.categories) {
      ++s.categories[std::string(to_string(r.confusion))][std::string(to_string(c))];
    }
    s.labels[r.instance_id] = {r.verdict_bool(), r.ex_equal ? Branch::kEq : Branch::kNeq};
  }
  return s;
}

// ---------------------------------------------------------------------------
// Leaderboards
// ---------------------------------------------------------------------------

std::vector<int> competition_ranks(std::span<const double> scores) {
  std::vector<int> ranks;
  ranks.reserve(scores.size());
  for (const double s : scores) {
    const auto better = std::count_if(scores.begin(), scores.end(),
                                      [&](double other) { return round2(other) > round2(s); });
    ranks.push_back(1 + static_cast<int>(better));
  }
  return ranks;
}

std::vector<LeaderboardRow> rerank(std::span<const RunScore> runs) {
  std::set<std::string> names;
  for (const auto& run : runs) {
    if (!names.insert(run.name).second) {
      throw ContractViolation("duplicate run name: " + run.name);
    }
  }
  std::vector<double> flex;
  std::vector<double> ex;
  for (const auto& run : runs) {
    flex.push_back(run.flex);
    ex.push_back(run.ex);
  }
  const auto flex_ranks = competition_ranks(flex);
  const auto ex_ranks = competition_ranks(ex);

  std::vector<LeaderboardRow> rows;
  rows.reserve(runs.size());
  for (std::size_t i = 0; i < runs.size(); ++i) {
    rows.push_back({runs[i].name, runs[i].flex, runs[i].ex, runs[i].flex - runs[i].ex,
                    flex_ranks[i], ex_ranks[i], ex_ranks[i] - flex_ranks[i]});
  }
  std::stable_sort(rows.begin(), rows.end(), [](const auto& l, const auto& r) {
    if (l.flex_rank != r.flex_rank) return l.flex_rank < r.flex_rank;
    return l.run_name < r.run_name;
  });
  return rows;
}

std::string movement_arrow(int movement) {
  if (movement > 0) return "↑" + std::to_string(movement);
  if (movement < 0) return "↓" + std::to_string(-movement);
  return "-";
}

std::string rank_cell(const LeaderboardRow& row) {
  return std::to_string(row.flex_rank) + " (" + movement_arrow(row.movement) + ")";
}

double mean_delta(std::span<const LeaderboardRow> rows) {
  if (rows.empty()) return 0.0;
  double sum = 0.0;
  for (const auto& r : rows) sum += r.delta;
  return sum / static_cast<double>(rows.size());
}

double mean_abs_movement(std::span<const LeaderboardRow> rows) {
  if (rows.empty()) return 0.0;
  double sum = 0.0;
  for (const auto& r : rows) sum += std::abs(r.movement);
  return sum / static_cast<double>(rows.size());
}

std::string leaderboard_markdown(std::span<const LeaderboardRow> rows) {
  std::string out = "| Rank | Model | FLEX | EX | Δ |\n| --- | --- | --- | --- | --- |\n";
  for (const auto& r : rows) {
    out += fmt::format("| {} | {} | {:.2f} | {:.2f} | {:+.2f} |\n", rank_cell(r), r.run_name,
                       r.flex, r.ex, round2(r.delta));
  }
  out += fmt::format("\nMean Δ: {:+.2f}\nMean |rank change|: {:.2f}\n", round2(mean_delta(rows)),
                     round2(mean_abs_movement(rows)));
  return out;
}

// ---------------------------------------------------------------------------
// Agreement
// ---------------------------------------------------------------------------

double cohen_kappa(const Confusion2x2& c) {
  const double n = static_cast<double>(c.a + c.b + c.c + c.d);
  if (n == 0.0) throw ContractViolation("empty contingency table");
  const double a = static_cast<double>(c.a);
  const double b = static_cast<double>(c.b);
  const double cc = static_cast<double>(c.c);
  const double d = static_cast<double>(c.d);
  const double p_o = (a + d) / n;
  const double p_e = ((a + b) * (a + cc) + (cc + d) * (b + d)) / (n * n);
  return kappa_from(p_o, p_e);
}

double fleiss_kappa(const std::vector<std::vector<std::uint64_t>>& ratings) {
  if (ratings.empty() || ratings.front().empty()) {
    throw ContractViolation("empty rating matrix");
  }
  const std::size_t k = ratings.front().size();
  const std::uint64_t r = std::accumulate(ratings.front().begin(), ratings.front().end(),
                                          std::uint64_t{0});
  if (r < 2) throw ContractViolation("fleiss kappa needs at least two raters per item");

  std::vector<double> category_totals(k, 0.0);
  double p_bar = 0.0;
  for (const auto& row : ratings) {
    if (row.size() != k) throw ContractViolation("ragged rating matrix");
    if (std::accumulate(row.begin(), row.end(), std::uint64_t{0}) != r) {
      throw ContractViolation("every item needs the same number of ratings");
    }
    double squares = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      const double n_ij = static_cast<double>(row[j]);
      squares += n_ij * n_ij;
      category_totals[j] += n_ij;
    }
    const double rd = static_cast<double>(r);
    p_bar += (squares - rd) / (rd * (rd - 1.0));
  }
  const double items = static_cast<double>(ratings.size());
  p_bar /= items;
  double p_e = 0.0;
  for (const double total : category_totals) {
    const double p_j = total / (items * static_cast<double>(r));
    p_e += p_j * p_j;
  }
  return kappa_from(p_bar, p_e);
}

AgreementReport agreement_report(const std::map<std::int64_t, bool>& judgments,
                                  const std::map<std::int64_t, bool>& human,
                                  const std::map<std::int64_t, Branch>& subset) {
  if (judgments.empty()) throw DatasetError("no judgments to compare");
  const auto same_keys = [&](const auto& other) {
    return other.size() == judgments.size() &&
           std::equal(judgments.begin(), judgments.end(), other.begin(),
                      [](const auto& l, const auto& r) { return l.first == r.first; });
  };
  if (!same_keys(human) || !same_keys(subset)) {
    throw DatasetError("judgment and human label instance ids differ");
  }

  AgreementReport report;
  std::size_t agree = 0;
  std::size_t eq_agree = 0;
  std::size_t neq_agree = 0;
  for (const auto& [id, judged] : judgments) {
    const bool label = human.at(id);
    const bool match = judged == label;
    if (judged && label) ++report.table.a;
    if (judged && !label) ++report.table.b;
    if (!judged && label) ++report.table.c;
    if (!judged && !label) ++report.table.d;
    agree += match ? 1 : 0;
    if (subset.at(id) == Branch::kEq) {
      ++report.eq_n;
      eq_agree += match ? 1 : 0;
    } else {
      ++report.neq_n;
      neq_agree += match ? 1 : 0;
    }
  }
  if (report.eq_n == 0 || report.neq_n == 0) {
    throw DatasetError("agreement needs both EQ and NEQ instances");
  }
  report.n = judgments.size();
  report.acc = percent(agree, report.n);
  report.eq_acc = percent(eq_agree, report.eq_n);
  report.neq_acc = percent(neq_agree, report.neq_n);
  report.kappa = 100.0 * cohen_kappa(report.table);
  return report;
}

// ---------------------------------------------------------------------------
// Categorization
// ---------------------------------------------------------------------------

std::optional<std::set<ErrorCategory>> parse_categories(std::string_view response,
                                                        bool false_negative) {
  std::optional<json> array;
  const auto blocks = find_fenced_blocks(response);
  for (auto it = blocks.rbegin(); it != blocks.rend() && !array; ++it) {
    json doc = json::parse(it->body, nullptr, false);
    if (doc.is_array()) array = std::move(doc);
  }
  if (!array) {
    json doc = json::parse(response, nullptr, false);
    if (doc.is_array()) array = std::move(doc);
  }
  if (!array) return std::nullopt;

  const auto& allowed =
      false_negative ? correct_despite_mismatch_categories() : incorrect_categories();
  std::set<ErrorCategory> out;
  for (const auto& item : *array) {
    const std::string name = item.is_string() ? item.get<std::string>() : item.dump();
    const auto category = parse_category(name);
    if (!category || std::find(allowed.begin(), allowed.end(), *category) == allowed.end() ||
        *category == ErrorCategory::kExecError) {
      spdlog::warn("dropping unknown error category '{}'", name);
      continue;
    }
    out.insert(*category);
  }
  return out;
}

bool needs_categorization(const JudgmentRecord& record) {
  if (record.verdict == Verdict::kJudgeFailedFallback) return false;
  if (record.verdict == Verdict::kExecError) return true;
  return record.confusion != ConfusionCell::kTP;
}

void categorize_record(Judge& judge, JudgmentRecord& record, const EvalInstance& instance,
                       const Prediction& pred, const SchemaDoc& schema) {
  record.uncategorized = false;
  if (!needs_categorization(record)) {
    record.categories.clear();
    return;
  }
  if (record.verdict == Verdict::kExecError) {
    record.categories = {ErrorCategory::kExecError};
    return;
  }
  const bool false_negative = record.confusion == ConfusionCell::kFN;
  const CategorizationInput input{false_negative, instance.question, instance.knowledge,
                                  schema.to_prompt_text(), instance.gt_sql, pred.gen_sql,
                                  record.rationale};
  const ChatMessages messages = build_categorization_prompt(input, judge.templates());
  const RequestContext ctx{record.instance_id, record.ex_equal,
                           false_negative ? RequestPurpose::kCategorizeCorrect
                                          : RequestPurpose::kCategorizeIncorrect};
  std::optional<std::set<ErrorCategory>> parsed;
  try {
    const std::string response = judge.cached_complete(
        messages, ctx, "categorize",
        [&](const std::string& r) { return parse_categories(r, false_negative).has_value(); });
    parsed = parse_categories(response, false_negative);
  } catch (const JudgeError& e) {
    spdlog::warn("instance {}: categorization failed ({})", record.instance_id, e.what());
  }
  if (parsed) {
    record.categories = std::move(*parsed);
  } else {
    record.categories.clear();
    record.uncategorized = true;
  }
}

void categorize_errors(Judge& judge, std::span<JudgmentRecord> records,
                       const std::map<std::int64_t, EvalInstance>& instances,
                       const std::map<std::int64_t, Prediction>& predictions,
                       SchemaCache& schemas) {
  for (auto& record : records) {
    const auto inst = instances.find(record.instance_id);
    const auto pred = predictions.find(record.instance_id);
    if (inst == instances.end() || pred == predictions.end()) {
      throw DatasetError("no instance or prediction for judgment " +
                         std::to_string(record.instance_id));
    }
    const auto schema = schemas.get(inst->second.db_id);
    categorize_record(judge, record, inst->second, pred->second, *schema);
  }
}

}  // namespace flex
