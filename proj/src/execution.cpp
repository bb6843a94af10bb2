#include "flex/execution.hpp"

#include <sqlite3.h>

#include <algorithm>
#include <cctype>
#include <cmath>

#include "flex/digest.hpp"

namespace flex {
namespace {

using Clock = std::chrono::steady_clock;

struct Deadline {
  Clock::time_point at;
  bool expired = false;
};

int progress_check(void* data) {
  auto* deadline = static_cast<Deadline*>(data);
  if (Clock::now() >= deadline->at) {
    deadline->expired = true;
    return 1;
  }
  return 0;
}

bool starts_with_keyword(std::string_view sql, std::string_view keyword) {
  if (sql.size() < keyword.size()) return false;
  for (std::size_t i = 0; i < keyword.size(); ++i) {
    if (std::toupper(static_cast<unsigned char>(sql[i])) != keyword[i]) return false;
  }
  return sql.size() == keyword.size() ||
         !(std::isalnum(static_cast<unsigned char>(sql[keyword.size()])) ||
           sql[keyword.size()] == '_');
}

bool only_trailing_noise(std::string_view tail) {
  for (;;) {
    tail = strip_leading_comments(tail);
    if (tail.empty()) return true;
    if (tail.front() != ';') return false;
    tail.remove_prefix(1);
  }
}

struct StatementDeleter {
  void operator()(sqlite3_stmt* stmt) const { sqlite3_finalize(stmt); }
};
using Statement = std::unique_ptr<sqlite3_stmt, StatementDeleter>;

constexpr double kTwoPow53 = 9007199254740992.0;

}  // namespace

std::string_view to_string(ComparisonMode mode) {
  switch (mode) {
    case ComparisonMode::kSet: return "set";
    case ComparisonMode::kBag: return "bag";
    case ComparisonMode::kOrdered: return "ordered";
  }
  return "set";
}

ComparisonMode parse_comparison_mode(std::string_view s) {
  if (s == "set") return ComparisonMode::kSet;
  if (s == "bag") return ComparisonMode::kBag;
  if (s == "ordered") return ComparisonMode::kOrdered;
  throw ConfigError("unknown comparison mode '" + std::string(s) + "' (set|bag|ordered)");
}

ReadOnlyDatabase::ReadOnlyDatabase(const std::filesystem::path& path) : path_(path) {
  std::error_code ec;
  if (!std::filesystem::is_regular_file(path, ec)) {
    throw DatasetError("database not found: " + path.string());
  }
  if (sqlite3_open_v2(path.c_str(), &db_, SQLITE_OPEN_READONLY | SQLITE_OPEN_NOMUTEX,
                      nullptr) != SQLITE_OK) {
    std::string msg = db_ ? sqlite3_errmsg(db_) : "out of memory";
    sqlite3_close(db_);
    db_ = nullptr;
    throw DatasetError("cannot open database " + path.string() + ": " + msg);
  }
  char* err = nullptr;
  if (sqlite3_exec(db_, "PRAGMA query_only = ON; SELECT count(*) FROM sqlite_master;",
                   nullptr, nullptr, &err) != SQLITE_OK) {
    std::string msg = err ? err : "unknown error";
    sqlite3_free(err);
    sqlite3_close(db_);
    db_ = nullptr;
    throw DatasetError("cannot read database " + path.string() + ": " + msg);
  }
}

ReadOnlyDatabase::~ReadOnlyDatabase() {
  if (db_) sqlite3_close(db_);
}

ReadOnlyDatabase::ReadOnlyDatabase(ReadOnlyDatabase&& other) noexcept
    : path_(std::move(other.path_)), db_(std::exchange(other.db_, nullptr)) {}

ReadOnlyDatabase& ReadOnlyDatabase::operator=(ReadOnlyDatabase&& other) noexcept {
  if (this != &other) {
    if (db_) sqlite3_close(db_);
    path_ = std::move(other.path_);
    db_ = std::exchange(other.db_, nullptr);
  }
  return *this;
}

ExecutionOutcome ReadOnlyDatabase::execute(std::string_view sql, const ExecConfig& cfg) const {
  const std::string_view body = strip_leading_comments(sql);
  if (body.empty()) return ExecError{ExecErrorKind::kSyntax, "empty statement"};

  sqlite3_stmt* raw = nullptr;
  const char* tail = nullptr;
  if (sqlite3_prepare_v2(db_, body.data(), static_cast<int>(body.size()), &raw, &tail) !=
      SQLITE_OK) {
    sqlite3_finalize(raw);
    return ExecError{ExecErrorKind::kSyntax, sqlite3_errmsg(db_)};
  }
  Statement stmt(raw);
  if (!stmt) return ExecError{ExecErrorKind::kSyntax, "empty statement"};

  const std::string_view rest(tail, static_cast<std::size_t>(body.data() + body.size() - tail));
  if (!only_trailing_noise(rest)) {
    return ExecError{ExecErrorKind::kRuntime, "multiple statements are not allowed"};
  }
  if (!(starts_with_keyword(body, "SELECT") || starts_with_keyword(body, "WITH")) ||
      !sqlite3_stmt_readonly(stmt.get())) {
    return ExecError{ExecErrorKind::kRuntime,
                     "rejected: only read-only SELECT/WITH statements are executed"};
  }

  const int ncols = sqlite3_column_count(stmt.get());
  std::vector<std::string> columns;
  columns.reserve(static_cast<std::size_t>(ncols));
  for (int i = 0; i < ncols; ++i) {
    const char* name = sqlite3_column_name(stmt.get(), i);
    columns.emplace_back(name ? name : "");
  }

  Deadline deadline{Clock::now() + cfg.timeout};
  sqlite3_progress_handler(db_, 1000, &progress_check, &deadline);
  struct ClearHandler {
    sqlite3* db;
    ~ClearHandler() { sqlite3_progress_handler(db, 0, nullptr, nullptr); }
  } clear{db_};

  std::vector<Row> rows;
  for (;;) {
    if (cfg.row_cap && rows.size() >= *cfg.row_cap) break;
    const int rc = sqlite3_step(stmt.get());
    if (rc == SQLITE_DONE) break;
    if (rc != SQLITE_ROW) {
      if (deadline.expired || rc == SQLITE_INTERRUPT) {
        return ExecError{ExecErrorKind::kTimeout,
                         "query exceeded " + std::to_string(cfg.timeout.count()) + " ms"};
      }
      return ExecError{ExecErrorKind::kRuntime, sqlite3_errmsg(db_)};
    }
    Row row;
    row.reserve(static_cast<std::size_t>(ncols));
    for (int i = 0; i < ncols; ++i) row.push_back(normalize_cell(sqlite3_column_value(stmt.get(), i)));
    rows.push_back(std::move(row));
  }
  return ResultTable(std::move(columns), std::move(rows));
}

ExecutionOutcome execute_query(const std::filesystem::path& db_path, std::string_view sql,
                               const ExecConfig& cfg) {
  std::error_code ec;
  if (!std::filesystem::is_regular_file(db_path, ec)) {
    return ExecError{ExecErrorKind::kMissingDb, "database not found: " + db_path.string()};
  }
  try {
    const ReadOnlyDatabase db(db_path);
    return db.execute(sql, cfg);
  } catch (const DatasetError& e) {
    return ExecError{ExecErrorKind::kMissingDb, e.what()};
  }
}

std::filesystem::path database_path(const std::filesystem::path& db_root,
                                    std::string_view db_id) {
  const std::string id(db_id);
  return db_root / id / (id + ".sqlite");
}

Cell normalize_real(double value) {
  if (std::isfinite(value) && value == std::trunc(value) && std::fabs(value) < kTwoPow53) {
    return static_cast<std::int64_t>(value);
  }
  return value;
}

Cell normalize_cell(sqlite3_value* value) {
  switch (sqlite3_value_type(value)) {
    case SQLITE_NULL: return Null{};
    case SQLITE_INTEGER: return static_cast<std::int64_t>(sqlite3_value_int64(value));
    case SQLITE_FLOAT: return normalize_real(sqlite3_value_double(value));
    case SQLITE_TEXT: {
      const auto* text = sqlite3_value_text(value);
      const int n = sqlite3_value_bytes(value);
      return std::string(reinterpret_cast<const char*>(text), static_cast<std::size_t>(n));
    }
    case SQLITE_BLOB: {
      const auto* data = static_cast<const unsigned char*>(sqlite3_value_blob(value));
      const int n = sqlite3_value_bytes(value);
      return BlobDigest{sha256_hex(std::span<const unsigned char>(data, static_cast<std::size_t>(n)))};
    }
  }
  return Null{};
}

bool results_equal(const ResultTable& a, const ResultTable& b, ComparisonMode mode) {
  if (a.column_count() != b.column_count()) return false;
  if (mode == ComparisonMode::kOrdered) return a.rows() == b.rows();

  std::vector<Row> left = a.rows();
  std::vector<Row> right = b.rows();
  std::sort(left.begin(), left.end());
  std::sort(right.begin(), right.end());
  if (mode == ComparisonMode::kSet) {
    left.erase(std::unique(left.begin(), left.end()), left.end());
    right.erase(std::unique(right.begin(), right.end()), right.end());
  }
  return left == right;
}

double ex_score(std::span<const std::pair<ExecutionOutcome, ExecutionOutcome>> outcomes,
                ComparisonMode mode) {
  if (outcomes.empty()) throw ContractViolation("ex_score needs at least one pair");
  std::size_t matches = 0;
  for (std::size_t i = 0; i < outcomes.size(); ++i) {
    const auto& [gt, gen] = outcomes[i];
    if (!gt.ok()) {
      throw DatasetError("ground truth #" + std::to_string(i) + " failed to execute (" +
                         std::string(to_string(gt.error().kind)) + "): " + gt.error().message);
    }
    if (gen.ok() && results_equal(gt.table(), gen.table(), mode)) ++matches;
  }
  return 100.0 * static_cast<double>(matches) / static_cast<double>(outcomes.size());
}

std::string normalize_sql(std::string_view sql) {
  std::string out;
  out.reserve(sql.size());
  bool in_literal = false;
  bool pending_space = false;
  for (const char ch : sql) {
    if (in_literal) {
      out.push_back(ch);
      if (ch == '\'') in_literal = false;
      continue;
    }
    if (std::isspace(static_cast<unsigned char>(ch))) {
      pending_space = true;
      continue;
    }
    if (pending_space && !out.empty()) out.push_back(' ');
    pending_space = false;
    if (ch == '\'') in_literal = true;
    out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
  }
  while (!out.empty() && (out.back() == ';' || out.back() == ' ')) out.pop_back();
  return out;
}

double em_score(std::span<const std::pair<std::string, std::string>> pairs) {
  if (pairs.empty()) throw ContractViolation("em_score needs at least one pair");
  const auto matches = std::count_if(pairs.begin(), pairs.end(), [](const auto& p) {
    return normalize_sql(p.first) == normalize_sql(p.second);
  });
  return 100.0 * static_cast<double>(matches) / static_cast<double>(pairs.size());
}

std::string_view strip_leading_comments(std::string_view sql) {
  for (;;) {
    while (!sql.empty() && std::isspace(static_cast<unsigned char>(sql.front()))) {
      sql.remove_prefix(1);
    }
    if (sql.starts_with("--")) {
      const auto nl = sql.find('\n');
      sql = nl == std::string_view::npos ? std::string_view{} : sql.substr(nl + 1);
    } else if (sql.starts_with("/*")) {
      const auto end = sql.find("*/", 2);
      sql = end == std::string_view::npos ? std::string_view{} : sql.substr(end + 2);
    } else {
      return sql;
    }
  }
}

void build_database(const std::filesystem::path& db_path, std::string_view script) {
  if (db_path.has_parent_path()) std::filesystem::create_directories(db_path.parent_path());
  sqlite3* db = nullptr;
  if (sqlite3_open_v2(db_path.c_str(), &db, SQLITE_OPEN_READWRITE | SQLITE_OPEN_CREATE,
                      nullptr) != SQLITE_OK) {
    std::string msg = db ? sqlite3_errmsg(db) : "out of memory";
    sqlite3_close(db);
    throw DatasetError("cannot create database " + db_path.string() + ": " + msg);
  }
  const std::string sql(script);
  char* err = nullptr;
  const int rc = sqlite3_exec(db, sql.c_str(), nullptr, nullptr, &err);
  std::string msg = err ? err : "";
  sqlite3_free(err);
  sqlite3_close(db);
  if (rc != SQLITE_OK) {
    throw DatasetError("fixture script failed for " + db_path.string() + ": " + msg);
  }
}

}  // namespace flex
