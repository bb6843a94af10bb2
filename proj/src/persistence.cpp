#include "flex/persistence.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include <fmt/format.h>

namespace flex {
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::string_view kBirdMarker = "\t----- bird -----\t";

json parse_json_file(const fs::path& path) {
  try {
    return json::parse(read_text(path));
  } catch (const json::parse_error& e) {
    throw DatasetError(path.string() + ": " + e.what());
  }
}

std::string item_error(std::size_t index, std::string_view field, std::string_view problem) {
  return fmt::format("item {}: field '{}' {}", index, field, problem);
}

std::string string_field(const json& item, std::size_t index, const char* key, bool required) {
  const auto it = item.find(key);
  if (it == item.end() || it->is_null()) {
    if (required) throw DatasetError(item_error(index, key, "is missing"));
    return {};
  }
  if (!it->is_string()) throw DatasetError(item_error(index, key, "must be a string"));
  return it->get<std::string>();
}

std::int64_t id_value(const json& value, std::size_t index, const char* key) {
  if (value.is_number_integer()) return value.get<std::int64_t>();
  if (value.is_string()) {
    try {
      std::size_t used = 0;
      const std::string s = value.get<std::string>();
      const std::int64_t id = std::stoll(s, &used);
      if (used == s.size()) return id;
    } catch (const std::exception&) {
    }
  }
  throw DatasetError(item_error(index, key, "must be an integer"));
}

/// Scores are stored with two decimals.
json score(double value) { return round2(value); }

json group_to_json(const GroupStats& g) {
  return {{"n", g.n},
          {"flex", score(g.flex)},
          {"ex", score(g.ex)},
          {"fp_ratio", score(g.fp_ratio)},
          {"fn_ratio", score(g.fn_ratio)},
          {"tp", g.counts.tp},
          {"fp", g.counts.fp},
          {"fn", g.counts.fn},
          {"tn", g.counts.tn},
          {"exec_errors", g.counts.exec_errors}};
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char ch = line[i];
    if (quoted) {
      if (ch == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        field.push_back('"');
        ++i;
      } else if (ch == '"') {
        quoted = false;
      } else {
        field.push_back(ch);
      }
    } else if (ch == '"') {
      quoted = true;
    } else if (ch == ',') {
      out.push_back(std::move(field));
      field.clear();
    } else if (ch != '\r') {
      field.push_back(ch);
    }
  }
  out.push_back(std::move(field));
  return out;
}

}  // namespace

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DatasetError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text_atomic(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    out << text;
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
  }
  fs::rename(tmp, path);
}

// ---------------------------------------------------------------------------
// Datasets and predictions
// ---------------------------------------------------------------------------

std::vector<EvalInstance> load_dataset(const fs::path& path) {
  if (!fs::is_regular_file(path)) throw DatasetError("dataset not found: " + path.string());
  const json doc = parse_json_file(path);
  if (!doc.is_array()) throw DatasetError(path.string() + ": expected a JSON array");

  std::vector<EvalInstance> out;
  std::set<std::int64_t> seen;
  for (std::size_t i = 0; i < doc.size(); ++i) {
    const json& item = doc[i];
    if (!item.is_object()) throw DatasetError(fmt::format("item {}: expected an object", i));
    EvalInstance inst;
    const auto id = item.find("question_id");
    inst.instance_id = id == item.end() ? static_cast<std::int64_t>(i)
                                        : id_value(*id, i, "question_id");
    inst.db_id = string_field(item, i, "db_id", true);
    inst.question = string_field(item, i, "question", true);
    inst.knowledge = string_field(item, i, "evidence", false);
    inst.gt_sql = item.contains("SQL") ? string_field(item, i, "SQL", true)
                                       : string_field(item, i, "query", true);
    inst.difficulty = parse_difficulty(string_field(item, i, "difficulty", false));
    try {
      validate(inst);
    } catch (const DatasetError& e) {
      throw DatasetError(fmt::format("item {}: {}", i, e.what()));
    }
    if (inst.db_id.empty()) throw DatasetError(item_error(i, "db_id", "is empty"));
    if (!seen.insert(inst.instance_id).second) {
      throw DatasetError(item_error(i, "question_id", "duplicates an earlier item"));
    }
    out.push_back(std::move(inst));
  }
  return out;
}

PredictionSet load_predictions(const fs::path& path) {
  if (!fs::is_regular_file(path)) throw DatasetError("predictions not found: " + path.string());
  const std::string text = read_text(path);
  const json doc = json::parse(text, nullptr, false);
  PredictionSet set;

  if (doc.is_array()) {
    set.format = PredictionFormat::kJsonArray;
    for (std::size_t i = 0; i < doc.size(); ++i) {
      const json& item = doc[i];
      if (!item.is_object() || !item.contains("question_id")) {
        throw DatasetError(item_error(i, "question_id", "is missing"));
      }
      set.predictions.push_back(
          {id_value(item["question_id"], i, "question_id"), string_field(item, i, "sql", true)});
    }
    return set;
  }

  if (doc.is_object()) {
    set.format = PredictionFormat::kBirdObject;
    for (const auto& [key, value] : doc.items()) {
      if (!value.is_string()) throw DatasetError("prediction '" + key + "' must be a string");
      std::string sql = value.get<std::string>();
      if (const auto marker = sql.find(kBirdMarker); marker != std::string::npos) {
        sql.resize(marker);
      }
      set.predictions.push_back({id_value(json(key), 0, "index"), std::move(sql)});
    }
    std::sort(set.predictions.begin(), set.predictions.end(),
              [](const auto& l, const auto& r) { return l.instance_id < r.instance_id; });
    return set;
  }

  const auto first = text.find_first_not_of(" \t\r\n");
  if (first != std::string::npos && (text[first] == '[' || text[first] == '{')) {
    try {
      const json probe = json::parse(text);
      static_cast<void>(probe);
    } catch (const json::parse_error& e) {
      throw DatasetError(path.string() + ": " + e.what());
    }
  }
  set.format = PredictionFormat::kPlainText;
  std::istringstream lines(text);
  std::string line;
  std::int64_t index = 0;
  while (std::getline(lines, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    set.predictions.push_back({index++, line});
  }
  return set;
}

std::map<std::int64_t, Prediction> align_predictions(const std::vector<EvalInstance>& instances,
                                                     const PredictionSet& set) {
  if (set.predictions.size() != instances.size()) {
    throw DatasetError(fmt::format("{} predictions for {} dataset items",
                                   set.predictions.size(), instances.size()));
  }
  std::map<std::int64_t, Prediction> out;
  if (set.format == PredictionFormat::kJsonArray) {
    for (const auto& p : set.predictions) {
      if (!out.emplace(p.instance_id, p).second) {
        throw DatasetError(fmt::format("duplicate prediction for question {}", p.instance_id));
      }
    }
    for (const auto& inst : instances) {
      if (!out.contains(inst.instance_id)) {
        throw DatasetError(fmt::format("no prediction for question {}", inst.instance_id));
      }
    }
    return out;
  }
  for (std::size_t i = 0; i < instances.size(); ++i) {
    const auto& p = set.predictions[i];
    if (p.instance_id != static_cast<std::int64_t>(i)) {
      throw DatasetError(fmt::format("prediction index {} is missing", i));
    }
    out[instances[i].instance_id] = {instances[i].instance_id, p.gen_sql};
  }
  return out;
}

// ---------------------------------------------------------------------------
// Judgments
// ---------------------------------------------------------------------------

json record_to_json(const JudgmentRecord& r) {
  json categories = json::array();
  for (const auto c : r.categories) categories.push_back(std::string(to_string(c)));
  return {{"instance_id", r.instance_id},
          {"ex_equal", r.ex_equal},
          {"verdict", std::string(to_string(r.verdict))},
          {"confusion", std::string(to_string(r.confusion))},
          {"categories", std::move(categories)},
          {"uncategorized", r.uncategorized},
          {"difficulty", std::string(to_string(r.difficulty))},
          {"em_match", r.em_match},
          {"bag_equal", r.bag_equal},
          {"judge", r.judge_name},
          {"rationale", r.rationale},
          {"raw_response", r.raw_response}};
}

JudgmentRecord record_from_json(const json& doc) {
  try {
    JudgmentRecord r;
    r.instance_id = doc.at("instance_id").get<std::int64_t>();
    r.ex_equal = doc.at("ex_equal").get<bool>();
    r.verdict = parse_verdict_name(doc.at("verdict").get<std::string>());
    r.confusion = parse_confusion_name(doc.at("confusion").get<std::string>());
    for (const auto& c : doc.at("categories")) {
      const auto category = parse_category(c.get<std::string>());
      if (!category) throw DatasetError("unknown category " + c.dump());
      r.categories.insert(*category);
    }
    r.uncategorized = doc.value("uncategorized", false);
    r.difficulty = parse_difficulty(doc.value("difficulty", "unknown"));
    r.em_match = doc.value("em_match", false);
    r.bag_equal = doc.value("bag_equal", r.ex_equal);
    r.judge_name = doc.value("judge", "");
    r.rationale = doc.value("rationale", "");
    r.raw_response = doc.value("raw_response", "");
    return r;
  } catch (const json::exception& e) {
    throw DatasetError(std::string("malformed judgment record: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw DatasetError(std::string("malformed judgment record: ") + e.what());
  }
}

JudgmentsFile load_judgments(const fs::path& path) {
  JudgmentsFile out;
  if (!fs::exists(path)) return out;
  const std::string text = read_text(path);
  std::size_t pos = 0;
  std::size_t line_no = 0;
  while (pos < text.size()) {
    ++line_no;
    const std::size_t nl = text.find('\n', pos);
    if (nl == std::string::npos) {
      out.truncated_tail = true;
      break;
    }
    const std::string_view line(text.data() + pos, nl - pos);
    if (!line.empty()) {
      const json doc = json::parse(line, nullptr, false);
      if (doc.is_discarded()) {
        throw DatasetError(fmt::format("{}: line {} is not valid JSON", path.string(), line_no));
      }
      out.records.push_back(record_from_json(doc));
    }
    pos = nl + 1;
  }
  out.intact_bytes = pos;
  return out;
}

// ---------------------------------------------------------------------------
// Summaries and reports
// ---------------------------------------------------------------------------

json summary_to_json(const RunSummary& s) {
  json per_difficulty = json::object();
  for (const auto& [name, g] : s.per_difficulty) per_difficulty[name] = group_to_json(g);
  json labels = json::object();
  for (const auto& [id, label] : s.labels) {
    labels[std::to_string(id)] = {{"correct", label.correct},
                                  {"subset", std::string(to_string(label.subset))}};
  }
  return {
      {"run_name", s.run_name},
      {"model_type", s.model_type ? json(std::string(to_string(*s.model_type))) : json(nullptr)},
      {"n", s.n},
      {"flex", score(s.flex)},
      {"ex", score(s.ex)},
      {"em", s.em ? score(*s.em) : json(nullptr)},
      {"delta", score(s.delta)},
      {"fp_ratio", score(s.counts.fp_ratio())},
      {"fn_ratio", score(s.counts.fn_ratio())},
      {"counts",
       {{"tp", s.counts.tp},
        {"fp", s.counts.fp},
        {"fn", s.counts.fn},
        {"tn", s.counts.tn},
        {"exec_errors", s.counts.exec_errors},
        {"judge_failed_fallback", s.counts.fallbacks},
        {"uncategorized", s.uncategorized},
        {"set_bag_disagreements", s.set_bag_disagreements}}},
      {"per_difficulty", std::move(per_difficulty)},
      {"categories", s.categories},
      {"labels", std::move(labels)},
  };
}

std::string report_markdown(const RunSummary& s) {
  std::string out = fmt::format("# Evaluation report: {}\n\n", s.run_name);
  out += "| Metric | Value |\n| --- | --- |\n";
  out += fmt::format("| Instances | {} |\n", s.n);
  out += fmt::format("| FLEX | {:.2f} |\n", round2(s.flex));
  out += fmt::format("| EX | {:.2f} |\n", round2(s.ex));
  if (s.em) out += fmt::format("| EM | {:.2f} |\n", round2(*s.em));
  out += fmt::format("| Δ (FLEX − EX) | {:+.2f} |\n", round2(s.delta));
  out += fmt::format("| FP ratio | {:.2f} |\n", round2(s.counts.fp_ratio()));
  out += fmt::format("| FN ratio | {:.2f} |\n\n", round2(s.counts.fn_ratio()));

  out += "## Confusion against EX\n\n| TP | FP | FN | TN | Exec errors |\n";
  out += "| --- | --- | --- | --- | --- |\n";
  out += fmt::format("| {} | {} | {} | {} | {} |\n\n", s.counts.tp, s.counts.fp, s.counts.fn,
                     s.counts.tn, s.counts.exec_errors);

  out += "## By difficulty\n\n| Difficulty | n | FLEX | EX | FP ratio | FN ratio |\n";
  out += "| --- | --- | --- | --- | --- | --- |\n";
  for (const auto& [name, g] : s.per_difficulty) {
    out += fmt::format("| {} | {} | {:.2f} | {:.2f} | {:.2f} | {:.2f} |\n", name, g.n,
                       round2(g.flex), round2(g.ex), round2(g.fp_ratio), round2(g.fn_ratio));
  }

  if (!s.categories.empty()) {
    out += "\n## Error categories\n\n| Cell | Category | Count |\n| --- | --- | --- |\n";
    for (const auto& [cell, counts] : s.categories) {
      for (const auto& [name, count] : counts) {
        out += fmt::format("| {} | {} | {} |\n", cell, name, count);
      }
    }
  }

  out += "\n## Notes\n\n";
  out += fmt::format("- Judge fallbacks to EX: {}\n", s.counts.fallbacks);
  out += fmt::format("- Uncategorized errors: {}\n", s.uncategorized);
  out += fmt::format("- Set/bag comparison disagreements: {}\n", s.set_bag_disagreements);
  return out;
}

// ---------------------------------------------------------------------------
// Human labels and leaderboards
// ---------------------------------------------------------------------------

std::vector<HumanLabel> load_human_labels(const fs::path& path) {
  if (!fs::is_regular_file(path)) throw DatasetError("labels not found: " + path.string());
  const json doc = parse_json_file(path);
  if (!doc.is_array()) throw DatasetError(path.string() + ": expected a JSON array");
  std::vector<HumanLabel> out;
  std::set<std::int64_t> seen;
  for (std::size_t i = 0; i < doc.size(); ++i) {
    const json& item = doc[i];
    if (!item.is_object() || !item.contains("instance_id")) {
      throw DatasetError(item_error(i, "instance_id", "is missing"));
    }
    HumanLabel label;
    label.instance_id = id_value(item["instance_id"], i, "instance_id");
    const std::string verdict = string_field(item, i, "label", true);
    if (verdict != "correct" && verdict != "incorrect") {
      throw DatasetError(item_error(i, "label", "must be correct or incorrect"));
    }
    label.correct = verdict == "correct";
    const std::string subset = string_field(item, i, "subset", true);
    if (subset != "EQ" && subset != "NEQ") {
      throw DatasetError(item_error(i, "subset", "must be EQ or NEQ"));
    }
    label.subset = subset == "EQ" ? Branch::kEq : Branch::kNeq;
    if (const auto raters = item.find("raters"); raters != item.end()) {
      if (!raters->is_array()) throw DatasetError(item_error(i, "raters", "must be an array"));
      for (const auto& r : *raters) {
        if (!r.is_boolean()) throw DatasetError(item_error(i, "raters", "must hold booleans"));
        label.raters.push_back(r.get<bool>());
      }
    }
    if (!seen.insert(label.instance_id).second) {
      throw DatasetError(item_error(i, "instance_id", "duplicates an earlier item"));
    }
    out.push_back(std::move(label));
  }
  return out;
}

std::vector<std::vector<std::uint64_t>> rater_matrix(const std::vector<HumanLabel>& labels) {
  const auto with = std::count_if(labels.begin(), labels.end(),
                                  [](const auto& l) { return !l.raters.empty(); });
  if (with == 0) return {};
  if (static_cast<std::size_t>(with) != labels.size()) {
    throw DatasetError("rater lists must be given for every item or none");
  }
  std::vector<std::vector<std::uint64_t>> matrix;
  for (const auto& l : labels) {
    const auto yes = static_cast<std::uint64_t>(std::count(l.raters.begin(), l.raters.end(), true));
    matrix.push_back({yes, l.raters.size() - yes});
  }
  return matrix;
}

std::vector<RunScore> load_run_scores(const fs::path& path) {
  if (!fs::is_regular_file(path)) throw DatasetError("run file not found: " + path.string());
  if (path.extension() == ".json") {
    const json doc = parse_json_file(path);
    try {
      return {{doc.at("run_name").get<std::string>(), doc.at("flex").get<double>(),
               doc.at("ex").get<double>()}};
    } catch (const json::exception& e) {
      throw DatasetError(path.string() + ": " + e.what());
    }
  }
  std::vector<RunScore> out;
  std::istringstream lines(read_text(path));
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(lines, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto fields = split_csv_line(line);
    if (fields.size() != 3) {
      throw DatasetError(fmt::format("{}:{}: expected name,flex,ex", path.string(), line_no));
    }
    try {
      std::size_t used_flex = 0;
      std::size_t used_ex = 0;
      const double flex = std::stod(fields[1], &used_flex);
      const double ex = std::stod(fields[2], &used_ex);
      out.push_back({fields[0], flex, ex});
    } catch (const std::exception&) {
      if (line_no == 1) continue;  // header
      throw DatasetError(fmt::format("{}:{}: scores must be numbers", path.string(), line_no));
    }
  }
  return out;
}

json leaderboard_to_json(const std::vector<LeaderboardRow>& rows) {
  json runs = json::array();
  for (const auto& r : rows) {
    runs.push_back({{"model", r.run_name},
                    {"flex", score(r.flex)},
                    {"ex", score(r.ex)},
                    {"delta", score(r.delta)},
                    {"flex_rank", r.flex_rank},
                    {"ex_rank", r.ex_rank},
                    {"movement", r.movement},
                    {"rank", rank_cell(r)}});
  }
  return {{"runs", std::move(runs)},
          {"mean_delta", score(mean_delta(rows))},
          {"mean_abs_movement", score(mean_abs_movement(rows))}};
}

}  // namespace flex
