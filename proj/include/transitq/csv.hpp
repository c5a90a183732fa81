#pragma once

#include <cstddef>
#include <istream>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace transitq::csv {

// One logical CSV record plus the physical line where it started.
struct Row {
  std::vector<std::string> fields;
  std::size_t line = 0;
};

// RFC 4180 reader: quoted fields, doubled quotes, embedded newlines, CRLF.
// A leading UTF-8 byte order mark on the first line is dropped.
class Reader {
 public:
  explicit Reader(std::istream& in) : in_(in) {}

  // Returns false at end of input. `error` is set when a quoted field is not
  // terminated before EOF.
  bool next(Row& row, std::string* error = nullptr) {
    row.fields.clear();
    if (!in_.good() || in_.peek() == std::char_traits<char>::eof()) return false;
    row.line = line_ + 1;

    std::string field;
    bool in_quotes = false;
    bool field_was_quoted = false;
    for (;;) {
      int c = in_.get();
      if (c == std::char_traits<char>::eof()) {
        if (in_quotes && error) *error = "unterminated quoted field";
        row.fields.push_back(std::move(field));
        ++line_;
        break;
      }
      char ch = static_cast<char>(c);
      if (in_quotes) {
        if (ch == '"') {
          if (in_.peek() == '"') {
            in_.get();
            field.push_back('"');
          } else {
            in_quotes = false;
          }
        } else {
          if (ch == '\n') ++line_;
          field.push_back(ch);
        }
        continue;
      }
      if (ch == '"' && field.empty() && !field_was_quoted) {
        in_quotes = true;
        field_was_quoted = true;
      } else if (ch == ',') {
        row.fields.push_back(std::move(field));
        field.clear();
        field_was_quoted = false;
      } else if (ch == '\r') {
        if (in_.peek() == '\n') continue;
        row.fields.push_back(std::move(field));
        ++line_;
        break;
      } else if (ch == '\n') {
        row.fields.push_back(std::move(field));
        ++line_;
        break;
      } else {
        field.push_back(ch);
      }
    }
    if (first_) {
      first_ = false;
      if (!row.fields.empty() && row.fields[0].rfind("\xEF\xBB\xBF", 0) == 0)
        row.fields[0].erase(0, 3);
    }
    return true;
  }

 private:
  std::istream& in_;
  std::size_t line_ = 0;
  bool first_ = true;
};

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t')) s.remove_suffix(1);
  return s;
}

// Maps header names to column positions.
class Header {
 public:
  Header() = default;
  explicit Header(const std::vector<std::string>& names) {
    for (std::size_t i = 0; i < names.size(); ++i)
      index_.emplace(std::string(trim(names[i])), i);
  }

  std::optional<std::size_t> find(std::string_view name) const {
    auto it = index_.find(std::string(name));
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  bool has(std::string_view name) const { return find(name).has_value(); }

  // Empty string when the column is absent or the row is short.
  std::string_view get(const Row& row, std::string_view name) const {
    auto pos = find(name);
    if (!pos || *pos >= row.fields.size()) return {};
    return trim(row.fields[*pos]);
  }

 private:
  std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace transitq::csv
