#pragma once

// Markdown serialization of execution results for judge prompts.

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "flex/model.hpp"

namespace flex {

struct RenderConfig {
  std::size_t max_rows = 100;
  std::size_t keep_head = 50;
  std::size_t keep_tail = 50;
  std::size_t cell_char_limit = 50;
  std::string truncation_marker = "...";

  /// Throws ConfigError on non-positive limits or head + tail > max_rows.
  void validate() const;
};

/// Number of Unicode scalar values in a UTF-8 string. Invalid lead bytes
/// count as one character each.
std::size_t utf8_length(std::string_view text);

/// Keeps the first cell_char_limit characters and appends " ... k chars",
/// k being the original length, when the text is longer than the limit.
std::string truncate_text_cell(std::string_view text, const RenderConfig& cfg);

struct TruncatedRows {
  /// Rows to render in order; nullptr stands for the marker row.
  std::vector<const Row*> rows;
  bool marker_inserted = false;
  /// Position of the marker row inside `rows` when inserted.
  std::size_t marker_index = 0;
};

/// Head/tail selection for tables above max_rows. Rows are referenced, not
/// copied; `table` must outlive the result. The marker position holds a
/// nullptr entry.
TruncatedRows truncate_rows(const ResultTable& table, const RenderConfig& cfg);

/// Display form of one cell before escaping: None, decimal integers,
/// shortest round-trip reals, truncated text, blob digests.
std::string format_cell(const Cell& cell, const RenderConfig& cfg);

/// Markdown table followed by a blank line and "(N rows, M columns)", or
/// "Execution error (<kind>): <message>".
std::string render_markdown(const ExecutionOutcome& outcome, const RenderConfig& cfg = {});

}  // namespace flex
