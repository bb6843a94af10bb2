#include "flex/context.hpp"

#include <sqlite3.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <cctype>
#include <fstream>
#include <mutex>
#include <sstream>

#include "flex/digest.hpp"
#include "flex/execution.hpp"

namespace flex {
namespace {

std::string lower(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

std::string trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return std::string(s);
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// RFC 4180 records: quoted fields may contain commas, quotes ("") and
// newlines.
std::vector<std::vector<std::string>> parse_csv(std::string_view text) {
  if (text.starts_with("\xEF\xBB\xBF")) text.remove_prefix(3);
  std::vector<std::vector<std::string>> records;
  std::vector<std::string> record;
  std::string field;
  bool quoted = false;
  bool field_started = false;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char ch = text[i];
    if (quoted) {
      if (ch == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          field.push_back('"');
          ++i;
        } else {
          quoted = false;
        }
      } else {
        field.push_back(ch);
      }
      continue;
    }
    switch (ch) {
      case '"':
        quoted = true;
        field_started = true;
        break;
      case ',':
        record.push_back(std::move(field));
        field.clear();
        field_started = true;
        break;
      case '\r':
        break;
      case '\n':
        if (field_started || !field.empty() || !record.empty()) {
          record.push_back(std::move(field));
          records.push_back(std::move(record));
        }
        field.clear();
        record.clear();
        field_started = false;
        break;
      default:
        field.push_back(ch);
        field_started = true;
    }
  }
  if (field_started || !field.empty() || !record.empty()) {
    record.push_back(std::move(field));
    records.push_back(std::move(record));
  }
  return records;
}

std::vector<TableSchema> read_tables(const ReadOnlyDatabase& db) {
  std::vector<TableSchema> tables;
  sqlite3_stmt* stmt = nullptr;
  const char* kTables =
      "SELECT name, sql FROM sqlite_master WHERE type = 'table' "
      "AND name NOT LIKE 'sqlite\\_%' ESCAPE '\\' ORDER BY name";
  if (sqlite3_prepare_v2(db.handle(), kTables, -1, &stmt, nullptr) != SQLITE_OK) {
    throw DatasetError("cannot read catalog of " + db.path().string() + ": " +
                       sqlite3_errmsg(db.handle()));
  }
  while (sqlite3_step(stmt) == SQLITE_ROW) {
    TableSchema t;
    t.name = reinterpret_cast<const char*>(sqlite3_column_text(stmt, 0));
    const auto* sql = sqlite3_column_text(stmt, 1);
    t.create_sql = sql ? reinterpret_cast<const char*>(sql) : "";
    tables.push_back(std::move(t));
  }
  sqlite3_finalize(stmt);

  for (auto& t : tables) {
    if (sqlite3_prepare_v2(db.handle(), "SELECT name FROM pragma_table_info(?1) ORDER BY cid",
                           -1, &stmt, nullptr) != SQLITE_OK) {
      throw DatasetError("cannot read columns of " + t.name);
    }
    sqlite3_bind_text(stmt, 1, t.name.c_str(), -1, SQLITE_TRANSIENT);
    while (sqlite3_step(stmt) == SQLITE_ROW) {
      t.columns.emplace_back(reinterpret_cast<const char*>(sqlite3_column_text(stmt, 0)));
    }
    sqlite3_finalize(stmt);
  }
  return tables;
}

std::vector<ColumnDescription> read_descriptions(const std::vector<TableSchema>& tables,
                                                 const std::filesystem::path& dir) {
  std::vector<ColumnDescription> out;
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (entry.is_regular_file() && lower(entry.path().extension().string()) == ".csv") {
      files.push_back(entry.path());
    }
  }
  std::sort(files.begin(), files.end());

  for (const auto& table : tables) {
    const auto file = std::find_if(files.begin(), files.end(), [&](const auto& p) {
      return lower(trim(p.stem().string())) == lower(table.name);
    });
    if (file == files.end()) continue;

    const auto records = parse_csv(read_file(*file));
    if (records.empty()) continue;
    std::optional<std::size_t> name_col, desc_col;
    for (std::size_t i = 0; i < records[0].size(); ++i) {
      const std::string header = lower(trim(records[0][i]));
      if (header == "original_column_name") name_col = i;
      if (header == "column_description") desc_col = i;
    }
    if (!name_col || !desc_col) {
      spdlog::warn("{}: missing original_column_name/column_description header, skipped",
                   file->string());
      continue;
    }

    std::map<std::string, std::string> by_column;
    for (std::size_t r = 1; r < records.size(); ++r) {
      const auto& rec = records[r];
      if (rec.size() <= std::max(*name_col, *desc_col)) continue;
      const std::string column = trim(rec[*name_col]);
      const std::string description = trim(rec[*desc_col]);
      if (column.empty() || description.empty()) continue;
      const auto known = std::find_if(table.columns.begin(), table.columns.end(),
                                      [&](const auto& c) { return lower(c) == lower(column); });
      if (known == table.columns.end()) {
        spdlog::warn("{}: unknown column '{}' in table '{}', description dropped",
                     file->string(), column, table.name);
        continue;
      }
      by_column.emplace(*known, description);
    }
    for (const auto& column : table.columns) {
      if (auto it = by_column.find(column); it != by_column.end()) {
        out.push_back({table.name, column, it->second});
      }
    }
  }

  for (const auto& file : files) {
    const bool matched = std::any_of(tables.begin(), tables.end(), [&](const auto& t) {
      return lower(trim(file.stem().string())) == lower(t.name);
    });
    if (!matched) spdlog::warn("{}: no table of that name, descriptions dropped", file.string());
  }
  return out;
}

void require(bool condition, const char* what) {
  if (!condition) throw ContractViolation(what);
}

}  // namespace

std::vector<std::string> SchemaDoc::create_statements() const {
  std::vector<std::string> out;
  out.reserve(tables.size());
  for (const auto& t : tables) out.push_back(t.create_sql);
  return out;
}

std::string SchemaDoc::to_prompt_text() const {
  std::string out;
  for (const auto& t : tables) {
    if (!out.empty()) out += "\n\n";
    out += t.create_sql;
    for (const auto& d : column_descriptions) {
      if (d.table == t.name) out += "\n-- " + d.column + ": " + d.description;
    }
  }
  return out;
}

SchemaDoc extract_schema(const std::filesystem::path& db_path,
                         const std::optional<std::filesystem::path>& description_dir) {
  const ReadOnlyDatabase db(db_path);
  SchemaDoc doc;
  doc.db_id = db_path.stem().string();
  doc.tables = read_tables(db);
  std::error_code ec;
  if (description_dir && std::filesystem::is_directory(*description_dir, ec)) {
    doc.column_descriptions = read_descriptions(doc.tables, *description_dir);
  }
  return doc;
}

std::shared_ptr<const SchemaDoc> SchemaCache::get(const std::string& db_id) {
  {
    std::shared_lock lock(mutex_);
    if (auto it = cache_.find(db_id); it != cache_.end()) return it->second;
  }
  std::unique_lock lock(mutex_);
  if (auto it = cache_.find(db_id); it != cache_.end()) return it->second;
  auto doc = std::make_shared<SchemaDoc>(
      extract_schema(database_path(db_root_, db_id), db_root_ / db_id / "database_description"));
  doc->db_id = db_id;
  cache_.emplace(db_id, doc);
  return doc;
}

const std::vector<std::string>& required_titles(CriteriaVariant variant) {
  static const std::vector<std::string> kEq{
      "Schema Alignment",
      "Correct Filtering Conditions",
      "Handling of Nullable Columns",
      "Accounting for Multiple Rows",
      "Abusing of Clauses",
  };
  static const std::vector<std::string> kNeq{
      "Acceptable Output Structure Variations",
      "Representation of Values",
      "Multiple Answers Available",
      "Incorrect Ground Truth",
  };
  return variant == CriteriaVariant::kTEq ? kEq : kNeq;
}

CriteriaText CriteriaText::parse(CriteriaVariant variant, std::string_view text) {
  CriteriaText criteria;
  criteria.variant = variant;
  std::istringstream in{std::string(text)};
  std::string line;
  std::string body;
  auto flush = [&] {
    if (!criteria.sections.empty()) criteria.sections.back().body = trim(body);
    body.clear();
  };
  while (std::getline(in, line)) {
    if (line.starts_with("### ")) {
      flush();
      criteria.sections.push_back({trim(std::string_view(line).substr(4)), {}});
    } else if (!criteria.sections.empty()) {
      body += line;
      body += '\n';
    }
  }
  flush();

  std::vector<std::string> titles;
  for (const auto& s : criteria.sections) titles.push_back(s.title);
  if (titles != required_titles(variant)) {
    throw ConfigError(std::string("criteria titles do not match the ") +
                      (variant == CriteriaVariant::kTEq ? "EQ" : "NEQ") + " list");
  }
  for (const auto& s : criteria.sections) {
    if (s.body.empty()) throw ConfigError("criteria section '" + s.title + "' has no body");
  }
  return criteria;
}

std::string CriteriaText::render() const {
  std::string out;
  for (std::size_t i = 0; i < sections.size(); ++i) {
    if (i) out += '\n';
    out += std::to_string(i + 1) + ". **" + sections[i].title + "**: " + sections[i].body;
  }
  return out;
}

std::filesystem::path PromptTemplates::default_dir() { return FLEX_DEFAULT_TEMPLATE_DIR; }

PromptTemplates PromptTemplates::load(const std::filesystem::path& dir) {
  static constexpr std::string_view kFiles[] = {
      "system_eq.txt",     "system_neq.txt",     "user.txt",
      "criteria_eq.md",    "criteria_neq.md",    "categorize_fp.txt",
      "categorize_fn.txt", "categorize_user.txt",
  };
  std::map<std::string_view, std::string> content;
  std::string hashed;
  for (const auto name : kFiles) {
    const auto path = dir / name;
    std::error_code ec;
    if (!std::filesystem::is_regular_file(path, ec)) {
      throw ConfigError("template file missing: " + path.string());
    }
    auto text = read_file(path);
    hashed.append(name);
    hashed.push_back('\0');
    hashed.append(text);
    hashed.push_back('\0');
    content.emplace(name, std::move(text));
  }

  PromptTemplates t;
  t.system_eq = content["system_eq.txt"];
  t.system_neq = content["system_neq.txt"];
  t.user = content["user.txt"];
  t.categorize_fp = content["categorize_fp.txt"];
  t.categorize_fn = content["categorize_fn.txt"];
  t.categorize_user = content["categorize_user.txt"];
  t.criteria_eq = CriteriaText::parse(CriteriaVariant::kTEq, content["criteria_eq.md"]);
  t.criteria_neq = CriteriaText::parse(CriteriaVariant::kTNeq, content["criteria_neq.md"]);
  t.hash = sha256_hex(hashed);
  return t;
}

std::string fill_template(std::string_view text,
                          const std::map<std::string, std::string>& values) {
  auto is_ident = [](std::string_view s) {
    return !s.empty() && std::all_of(s.begin(), s.end(), [](unsigned char c) {
      return std::isalnum(c) || c == '_';
    });
  };
  std::string out;
  out.reserve(text.size());
  std::size_t i = 0;
  while (i < text.size()) {
    if (text[i] != '{') {
      out.push_back(text[i++]);
      continue;
    }
    const auto close = text.find('}', i);
    if (close == std::string_view::npos) {
      out.append(text.substr(i));
      break;
    }
    const std::string_view inner = text.substr(i + 1, close - i - 1);
    if (inner.starts_with('?') && is_ident(inner.substr(1))) {
      const std::string key(inner.substr(1));
      const std::string end_tag = "{/" + key + "}";
      const auto end = text.find(end_tag, close + 1);
      if (end == std::string_view::npos) {
        throw ConfigError("template block {?" + key + "} is not closed");
      }
      const auto it = values.find(key);
      if (it != values.end() && !it->second.empty()) {
        out += fill_template(text.substr(close + 1, end - close - 1), values);
      }
      i = end + end_tag.size();
      continue;
    }
    if (is_ident(inner)) {
      if (const auto it = values.find(std::string(inner)); it != values.end()) {
        out += it->second;
        i = close + 1;
        continue;
      }
    }
    out.push_back(text[i++]);
  }
  return out;
}

ContextBundle assemble_context(const EvalInstance& instance, const Prediction& pred,
                               const SchemaDoc& schema, const ExecutionOutcome& gt_out,
                               const ExecutionOutcome& gen_out, bool ex_equal,
                               const RenderConfig& render_cfg) {
  if (!gt_out.ok()) throw ContractViolation("assemble_context: ground truth failed to execute");
  if (!gen_out.ok()) {
    throw ContractViolation("assemble_context: generated query failed to execute");
  }
  ContextBundle bundle;
  bundle.instance_id = instance.instance_id;
  bundle.question = instance.question;
  bundle.schema_doc = schema.to_prompt_text();
  bundle.knowledge = instance.knowledge;
  bundle.gt_sql = instance.gt_sql;
  bundle.gen_sql = pred.gen_sql;
  if (ex_equal) {
    bundle.branch = Branch::kEq;
    bundle.criteria = CriteriaVariant::kTEq;
  } else {
    bundle.branch = Branch::kNeq;
    bundle.criteria = CriteriaVariant::kTNeq;
    bundle.gt_result_rendered = render_markdown(gt_out, render_cfg);
    bundle.gen_result_rendered = render_markdown(gen_out, render_cfg);
  }
  return bundle;
}

ChatMessages build_prompt(const ContextBundle& bundle, const PromptTemplates& templates) {
  require(bundle.valid(), "build_prompt: inconsistent context bundle");
  const bool eq = bundle.branch == Branch::kEq;
  const CriteriaText& criteria = eq ? templates.criteria_eq : templates.criteria_neq;

  ChatMessages messages;
  messages.system =
      fill_template(eq ? templates.system_eq : templates.system_neq, {{"criteria", criteria.render()}});
  messages.user = fill_template(templates.user, {
                                                    {"question", bundle.question},
                                                    {"knowledge", bundle.knowledge},
                                                    {"schema", bundle.schema_doc},
                                                    {"gt_sql", bundle.gt_sql},
                                                    {"gen_sql", bundle.gen_sql},
                                                    {"gt_result", bundle.gt_result_rendered.value_or("")},
                                                    {"gen_result", bundle.gen_result_rendered.value_or("")},
                                                });
  return messages;
}

ChatMessages build_categorization_prompt(const CategorizationInput& input,
                                         const PromptTemplates& templates) {
  ChatMessages messages;
  messages.system = input.false_negative ? templates.categorize_fn : templates.categorize_fp;
  messages.user = fill_template(templates.categorize_user, {
                                                               {"question", input.question},
                                                               {"knowledge", input.knowledge},
                                                               {"schema", input.schema_doc},
                                                               {"gt_sql", input.gt_sql},
                                                               {"gen_sql", input.gen_sql},
                                                               {"rationale", input.rationale},
                                                           });
  return messages;
}

}  // namespace flex
