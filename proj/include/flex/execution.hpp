#pragma once

// Read-only SQLite execution and the execution-based metrics (EX, EM).

#include <chrono>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "flex/model.hpp"

struct sqlite3;
struct sqlite3_value;

namespace flex {

enum class ComparisonMode { kSet, kBag, kOrdered };

std::string_view to_string(ComparisonMode mode);
/// Throws ConfigError for anything other than set|bag|ordered.
ComparisonMode parse_comparison_mode(std::string_view s);

struct ExecConfig {
  std::chrono::milliseconds timeout{30'000};
  std::optional<std::size_t> row_cap;
  ComparisonMode comparison_mode = ComparisonMode::kSet;
};

/// An owned read-only connection. One per worker; never shared.
class ReadOnlyDatabase {
 public:
  /// Throws DatasetError when the file is absent or cannot be opened.
  explicit ReadOnlyDatabase(const std::filesystem::path& path);
  ~ReadOnlyDatabase();
  ReadOnlyDatabase(const ReadOnlyDatabase&) = delete;
  ReadOnlyDatabase& operator=(const ReadOnlyDatabase&) = delete;
  ReadOnlyDatabase(ReadOnlyDatabase&& other) noexcept;
  ReadOnlyDatabase& operator=(ReadOnlyDatabase&& other) noexcept;

  const std::filesystem::path& path() const { return path_; }
  sqlite3* handle() const { return db_; }

  ExecutionOutcome execute(std::string_view sql, const ExecConfig& cfg) const;

 private:
  std::filesystem::path path_;
  sqlite3* db_ = nullptr;
};

/// Opens db_path read-only, runs a single SELECT/WITH statement and returns
/// its rows in engine order. Never throws for query problems; every failure
/// becomes an error outcome.
ExecutionOutcome execute_query(const std::filesystem::path& db_path, std::string_view sql,
                               const ExecConfig& cfg);

/// <db_root>/<db_id>/<db_id>.sqlite
std::filesystem::path database_path(const std::filesystem::path& db_root,
                                    std::string_view db_id);

/// Maps an engine value to a comparison cell: integral reals below 2^53
/// become integers, blobs become digests, text is kept verbatim.
Cell normalize_cell(sqlite3_value* value);
/// Same rule for an already-extracted real.
Cell normalize_real(double value);

/// Row comparison ignoring column names but honouring column order.
bool results_equal(const ResultTable& a, const ResultTable& b, ComparisonMode mode);

/// 100 * matches / n. A failing ground truth throws DatasetError; a failing
/// generated query counts as a mismatch.
double ex_score(std::span<const std::pair<ExecutionOutcome, ExecutionOutcome>> outcomes,
                ComparisonMode mode);

/// Lowercases everything outside single-quoted literals, collapses
/// whitespace and drops trailing semicolons.
std::string normalize_sql(std::string_view sql);

double em_score(std::span<const std::pair<std::string, std::string>> pairs);

/// Strips leading whitespace and SQL comments.
std::string_view strip_leading_comments(std::string_view sql);

/// Runs a multi-statement script against a writable database, creating the
/// file if needed. Used to materialize fixture databases.
void build_database(const std::filesystem::path& db_path, std::string_view script);

}  // namespace flex
