#pragma once

// Schema documentation, prompt templates and judge-context assembly.

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <shared_mutex>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "flex/model.hpp"
#include "flex/rendering.hpp"

namespace flex {

struct TableSchema {
  std::string name;
  std::string create_sql;
  std::vector<std::string> columns;
};

struct ColumnDescription {
  std::string table;
  std::string column;
  std::string description;
};

struct SchemaDoc {
  std::string db_id;
  /// Tables in catalog name order.
  std::vector<TableSchema> tables;
  /// Ordered by table, then column position. Empty when no descriptions.
  std::vector<ColumnDescription> column_descriptions;

  std::vector<std::string> create_statements() const;
  /// CREATE statements, each followed by "-- <column>: <description>" lines.
  std::string to_prompt_text() const;
};

/// Reads the catalog of db_path. When description_dir exists, every
/// <table>.csv inside it (columns original_column_name, column_description)
/// is joined leniently: unknown tables or columns are dropped with a warning.
/// Throws DatasetError when the database is missing or unreadable.
SchemaDoc extract_schema(const std::filesystem::path& db_path,
                         const std::optional<std::filesystem::path>& description_dir = {});

/// Per-db_id schema cache. Lookups take a shared lock; population is
/// serialized.
class SchemaCache {
 public:
  explicit SchemaCache(std::filesystem::path db_root) : db_root_(std::move(db_root)) {}

  /// Uses <db_root>/<db_id>/database_description as the description
  /// directory when present.
  std::shared_ptr<const SchemaDoc> get(const std::string& db_id);

 private:
  std::filesystem::path db_root_;
  std::shared_mutex mutex_;
  std::map<std::string, std::shared_ptr<const SchemaDoc>> cache_;
};

struct CriteriaSection {
  std::string title;
  std::string body;
};

struct CriteriaText {
  CriteriaVariant variant = CriteriaVariant::kTEq;
  std::vector<CriteriaSection> sections;

  /// Parses "### Title" headed sections. Throws ConfigError unless the
  /// titles are exactly the ones required for the variant.
  static CriteriaText parse(CriteriaVariant variant, std::string_view text);
  /// Numbered "N. **Title**: body" list used inside system prompts.
  std::string render() const;
};

const std::vector<std::string>& required_titles(CriteriaVariant variant);

/// Versioned prompt files. `hash` is a SHA-256 over every file, recorded
/// with each run and used as a cache key.
struct PromptTemplates {
  std::string system_eq;
  std::string system_neq;
  std::string user;
  std::string categorize_fp;
  std::string categorize_fn;
  std::string categorize_user;
  CriteriaText criteria_eq;
  CriteriaText criteria_neq;
  std::string hash;

  /// Throws ConfigError when a file is missing or malformed.
  static PromptTemplates load(const std::filesystem::path& dir);
  /// Directory shipped with the sources.
  static std::filesystem::path default_dir();

  /// First 16 hex digits of `hash`.
  std::string short_hash() const { return hash.substr(0, 16); }
};

/// Substitutes {name} placeholders and keeps {?name}...{/name} blocks only
/// when the value is non-empty. Unknown braces are copied verbatim; values
/// are never re-scanned.
std::string fill_template(std::string_view text,
                          const std::map<std::string, std::string>& values);

struct ChatMessages {
  std::string system;
  std::string user;
  bool operator==(const ChatMessages&) const = default;
};

/// EQ when ex_equal (no results), NEQ otherwise (both results rendered).
/// Throws ContractViolation when either outcome is an error.
ContextBundle assemble_context(const EvalInstance& instance, const Prediction& pred,
                               const SchemaDoc& schema, const ExecutionOutcome& gt_out,
                               const ExecutionOutcome& gen_out, bool ex_equal,
                               const RenderConfig& render_cfg = {});

/// Throws ContractViolation for an invalid bundle.
ChatMessages build_prompt(const ContextBundle& bundle, const PromptTemplates& templates);

struct CategorizationInput {
  bool false_negative = false;
  std::string question;
  std::string knowledge;
  std::string schema_doc;
  std::string gt_sql;
  std::string gen_sql;
  std::string rationale;
};

ChatMessages build_categorization_prompt(const CategorizationInput& input,
                                         const PromptTemplates& templates);

}  // namespace flex
