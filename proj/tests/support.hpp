#pragma once

// Shared helpers for the test suites: fixture paths, scratch directories
// and fixture databases.

#include <atomic>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>

#include "flex/execution.hpp"

namespace flex::testing {

namespace fs = std::filesystem;

inline fs::path fixture_dir() { return FLEX_FIXTURE_DIR; }

inline std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void spit(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << text;
}

/// Unique scratch directory removed on destruction.
class TempDir {
 public:
  TempDir() {
    static std::atomic<unsigned> counter{0};
    std::random_device rd;
    path_ = fs::temp_directory_path() /
            ("flex-test-" + std::to_string(rd()) + "-" + std::to_string(counter++));
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& name) const { return path_ / name; }

 private:
  fs::path path_;
};

/// Materializes a fixture database script as <root>/<id>/<id>.sqlite.
inline fs::path install_fixture_db(const fs::path& root, const std::string& db_id) {
  const fs::path db = database_path(root, db_id);
  if (!fs::exists(db)) build_database(db, slurp(fixture_dir() / (db_id + ".sql")));
  const fs::path descriptions = fixture_dir() / "descriptions" / db_id;
  if (fs::is_directory(descriptions)) {
    fs::copy(descriptions, db.parent_path() / "database_description",
             fs::copy_options::recursive | fs::copy_options::skip_existing);
  }
  return db;
}

/// Database root holding both fixture databases.
inline fs::path install_fixture_dbs(const fs::path& root) {
  install_fixture_db(root, "student");
  install_fixture_db(root, "california_schools");
  return root;
}

}  // namespace flex::testing
