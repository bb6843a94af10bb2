#include "flex/rendering.hpp"

#include <charconv>
#include <system_error>

namespace flex {
namespace {

bool is_continuation(unsigned char c) { return (c & 0xC0) == 0x80; }

/// Byte offset just past the first `n` characters.
std::size_t utf8_prefix_bytes(std::string_view text, std::size_t n) {
  std::size_t i = 0;
  for (std::size_t chars = 0; i < text.size() && chars < n; ++chars) {
    ++i;
    while (i < text.size() && is_continuation(static_cast<unsigned char>(text[i]))) ++i;
  }
  return i;
}

std::string escape_markdown(std::string_view text) {
  std::string out;
  out.reserve(text.size());
  for (const char ch : text) {
    switch (ch) {
      case '|': out += "\\|"; break;
      case '\n': out += "\\n"; break;
      case '\r': out += "\\r"; break;
      default: out.push_back(ch);
    }
  }
  return out;
}

std::string format_real(double value) {
  char buf[64];
  const auto [end, ec] = std::to_chars(buf, buf + sizeof buf, value);
  if (ec != std::errc{}) return std::to_string(value);
  return std::string(buf, end);
}

void append_row(std::string& out, const std::vector<std::string>& cells) {
  out += '|';
  for (const auto& cell : cells) {
    out += ' ';
    out += cell;
    out += " |";
  }
  out += '\n';
}

}  // namespace

void RenderConfig::validate() const {
  if (max_rows == 0 || keep_head == 0 || keep_tail == 0 || cell_char_limit == 0) {
    throw ConfigError("render limits must be positive");
  }
  if (keep_head + keep_tail > max_rows) {
    throw ConfigError("keep_head + keep_tail must not exceed max_rows");
  }
}

std::size_t utf8_length(std::string_view text) {
  std::size_t n = 0;
  for (const char ch : text) {
    if (!is_continuation(static_cast<unsigned char>(ch))) ++n;
  }
  return n;
}

std::string truncate_text_cell(std::string_view text, const RenderConfig& cfg) {
  const std::size_t length = utf8_length(text);
  if (length <= cfg.cell_char_limit) return std::string(text);
  std::string out(text.substr(0, utf8_prefix_bytes(text, cfg.cell_char_limit)));
  out += " ... ";
  out += std::to_string(length);
  out += " chars";
  return out;
}

TruncatedRows truncate_rows(const ResultTable& table, const RenderConfig& cfg) {
  TruncatedRows out;
  const auto& rows = table.rows();
  if (rows.size() <= cfg.max_rows) {
    out.rows.reserve(rows.size());
    for (const auto& row : rows) out.rows.push_back(&row);
    return out;
  }
  out.rows.reserve(cfg.keep_head + cfg.keep_tail + 1);
  for (std::size_t i = 0; i < cfg.keep_head; ++i) out.rows.push_back(&rows[i]);
  out.marker_index = out.rows.size();
  out.rows.push_back(nullptr);
  for (std::size_t i = rows.size() - cfg.keep_tail; i < rows.size(); ++i) {
    out.rows.push_back(&rows[i]);
  }
  out.marker_inserted = true;
  return out;
}

std::string format_cell(const Cell& cell, const RenderConfig& cfg) {
  struct Visitor {
    const RenderConfig& cfg;
    std::string operator()(const Null&) const { return "None"; }
    std::string operator()(std::int64_t v) const { return std::to_string(v); }
    std::string operator()(double v) const { return format_real(v); }
    std::string operator()(const std::string& v) const { return truncate_text_cell(v, cfg); }
    std::string operator()(const BlobDigest& v) const { return "<blob sha256:" + v.hex + ">"; }
  };
  return std::visit(Visitor{cfg}, cell);
}

std::string render_markdown(const ExecutionOutcome& outcome, const RenderConfig& cfg) {
  if (!outcome.ok()) {
    const auto& err = outcome.error();
    return "Execution error (" + std::string(to_string(err.kind)) + "): " + err.message;
  }
  const ResultTable& table = outcome.table();
  std::string out;

  std::vector<std::string> cells;
  cells.reserve(table.column_count());
  for (const auto& name : table.columns()) cells.push_back(escape_markdown(name));
  append_row(out, cells);
  append_row(out, std::vector<std::string>(table.column_count(), "---"));

  for (const Row* row : truncate_rows(table, cfg).rows) {
    cells.clear();
    if (row == nullptr) {
      cells.assign(table.column_count(), escape_markdown(cfg.truncation_marker));
    } else {
      for (const auto& cell : *row) cells.push_back(escape_markdown(format_cell(cell, cfg)));
    }
    append_row(out, cells);
  }

  out += "\n(" + std::to_string(table.row_count()) + " rows, " +
         std::to_string(table.column_count()) + " columns)";
  return out;
}

}  // namespace flex
