#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "transitq/error.hpp"
#include "transitq/gtfs/types.hpp"
#include "transitq/log.hpp"
#include "transitq/sql/schema.hpp"
#include "transitq/sqlite.hpp"

namespace transitq::catalog {

struct TableDescriptor {
  std::string name;
  std::string description;
  std::string ddl;
  bool is_view = false;
  std::vector<std::pair<std::string, std::string>> column_comments;  // in column order
};

struct ForeignKeyDescriptor {
  std::string child_table;
  std::vector<std::string> child_columns;
  std::string parent_table;
  std::vector<std::string> parent_columns;

  std::string constraint_name() const { return child_table + "_references_" + parent_table; }
};

struct CatalogWarning {
  std::string code;  // MISSING_ANNOTATION or UNKNOWN_ANNOTATION
  std::string message;
};

inline constexpr std::string_view kNoDescription = "no description available";

// Sidecar descriptions:
//   table = description
//   table.column = comment
// Blank lines and lines starting with '#' are ignored.
class Annotations {
 public:
  static Annotations parse(std::string_view text, const std::string& origin = "annotations") {
    Annotations a;
    std::istringstream in{std::string(text)};
    std::string line;
    int lineno = 0;
    auto trim = [](std::string s) {
      auto b = s.find_first_not_of(" \t\r");
      auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    while (std::getline(in, line)) {
      ++lineno;
      line = trim(line);
      if (line.empty() || line[0] == '#') continue;
      auto eq = line.find('=');
      if (eq == std::string::npos) throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected 'name = text'");
      std::string key = sql::to_lower(trim(line.substr(0, eq)));
      std::string value = trim(line.substr(eq + 1));
      if (key.empty() || value.empty())
        throw ConfigError(origin + ":" + std::to_string(lineno) + ": empty name or description");
      auto dot = key.find('.');
      if (dot == std::string::npos) a.tables_[key] = value;
      else a.columns_[key] = value;
    }
    return a;
  }

  static Annotations load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw MissingFile("annotations file not found: " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse(ss.str(), path.string());
  }

  const std::string* table(std::string_view t) const {
    auto it = tables_.find(sql::to_lower(t));
    return it == tables_.end() ? nullptr : &it->second;
  }
  const std::string* column(std::string_view t, std::string_view c) const {
    auto it = columns_.find(sql::to_lower(t) + "." + sql::to_lower(c));
    return it == columns_.end() ? nullptr : &it->second;
  }
  const std::map<std::string, std::string>& tables() const { return tables_; }
  const std::map<std::string, std::string>& columns() const { return columns_; }

 private:
  std::map<std::string, std::string> tables_;
  std::map<std::string, std::string> columns_;
};

class Catalog {
 public:
  // One descriptor per table and view, in creation order, with comments
  // merged from the annotations. Missing or stray annotations are warnings.
  static Catalog describe(const db::Connection& conn, const Annotations& notes) {
    Catalog c;
    auto schema = sql::SchemaInfo::introspect(conn);
    std::map<std::string, bool> seen_columns;
    for (const sql::RelationInfo* rel : schema.relations()) {
      TableDescriptor t;
      t.name = rel->name;
      t.ddl = rel->ddl;
      t.is_view = rel->is_view;
      if (const auto* d = notes.table(rel->name)) {
        t.description = *d;
      } else {
        t.description = std::string(kNoDescription);
        c.warn("MISSING_ANNOTATION", "table " + rel->name + " has no description");
      }
      for (const auto& col : rel->columns) {
        seen_columns[sql::to_lower(rel->name + "." + col.name)] = true;
        if (const auto* d = notes.column(rel->name, col.name)) {
          t.column_comments.emplace_back(col.name, *d);
        } else {
          t.column_comments.emplace_back(col.name, std::string(kNoDescription));
          c.warn("MISSING_ANNOTATION", "column " + rel->name + "." + col.name + " has no comment");
        }
      }
      if (!rel->is_view) {
        auto fk = conn.prepare("SELECT id, seq, \"table\", \"from\", \"to\" FROM pragma_foreign_key_list(?) ORDER BY id DESC, seq");
        fk.bind_all(rel->name);
        std::int64_t current = -1;
        while (fk.step()) {
          if (fk.integer(0) != current) {
            current = fk.integer(0);
            c.foreign_keys_.push_back({rel->name, {}, fk.text(2), {}});
          }
          c.foreign_keys_.back().child_columns.push_back(fk.text(3));
          c.foreign_keys_.back().parent_columns.push_back(fk.text(4));
        }
      }
      c.tables_.push_back(std::move(t));
    }
    for (const auto& [key, _] : notes.columns())
      if (!seen_columns.count(key)) c.warn("UNKNOWN_ANNOTATION", "annotation for nonexistent column " + key);
    for (const auto& [key, _] : notes.tables())
      if (!schema.find(key)) c.warn("UNKNOWN_ANNOTATION", "annotation for nonexistent table " + key);
    return c;
  }

  const std::vector<TableDescriptor>& tables() const { return tables_; }
  const std::vector<ForeignKeyDescriptor>& foreign_keys() const { return foreign_keys_; }
  const std::vector<CatalogWarning>& warnings() const { return warnings_; }

  const TableDescriptor* find(std::string_view name) const {
    for (const auto& t : tables_)
      if (sql::to_lower(t.name) == sql::to_lower(name)) return &t;
    return nullptr;
  }

 private:
  void warn(std::string code, std::string message) {
    log::warn("catalog: " + message);
    warnings_.push_back({std::move(code), std::move(message)});
  }

  std::vector<TableDescriptor> tables_;
  std::vector<ForeignKeyDescriptor> foreign_keys_;
  std::vector<CatalogWarning> warnings_;
};

inline const std::vector<std::string>& baseline_rules() {
  static const std::vector<std::string> rules = {
      "Query only relevant columns.",
      "If a query returns nothing, report the empty result.",
      "Always double check your query.",
  };
  return rules;
}

// Baseline rules plus the interpretation rules for this database.
inline std::vector<std::string> default_rules(const gtfs::Date& current_date) {
  std::vector<std::string> r = baseline_rules();
  r.push_back("Write a single SQLite SELECT statement; never modify the database.");
  r.push_back("Declare every table alias in the FROM or JOIN clause before using it as a qualifier.");
  r.push_back("trips.direction holds the strings 'andata' (outbound) and 'ritorno' (inbound), never 0 or 1.");
  r.push_back("When the question gives no date or date range, only consider services that are active on the current date, " +
              current_date.iso() + " (a " + current_date.weekday_name() + "): calendar.start_date <= '" + current_date.iso() +
              "' <= calendar.end_date and calendar." + current_date.weekday_name() + " = 1.");
  r.push_back("Dates are stored as 'YYYY-MM-DD' text; compare times of day with stop_times.arrival_seconds and "
              "departure_seconds (seconds after midnight, may exceed 86400 for trips after midnight).");
  r.push_back("Route and agency identifiers are text: quote them, for example route_id = '18'.");
  r.push_back("An agency 'of' a city is found with agency.agency_hq_city; a municipality served by a route is found "
              "through stops.municipality_code.");
  r.push_back("To draw a route on a map, select agency_id and route_id of that route; coordinates come from the "
              "route_geometry view.");
  return r;
}

struct PromptExemplar {
  std::string question;
  std::string sql;
  double similarity = 0;
};

struct PromptDocument {
  std::string task_text;
  std::vector<TableDescriptor> tables;
  std::vector<ForeignKeyDescriptor> foreign_keys;
  std::vector<std::string> rules;
  std::vector<PromptExemplar> exemplars;  // most similar first
};

inline std::string default_task_text() {
  return "You are an AI assistant designed to answer questions about public transport services by writing SQLite "
         "queries over the database described below. Answer with the SQL query only.";
}

inline PromptDocument make_document(const Catalog& c, std::vector<std::string> rules, std::vector<PromptExemplar> ex = {}) {
  return {default_task_text(), c.tables(), c.foreign_keys(), std::move(rules), std::move(ex)};
}

inline std::string xml_escape(std::string_view s) {
  std::string out;
  out.reserve(s.size());
  for (char ch : s) {
    switch (ch) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      default: out += ch;
    }
  }
  return out;
}

namespace detail {

inline std::string sql_quote(std::string_view s) {
  std::string out = "'";
  for (char ch : s) {
    out += ch;
    if (ch == '\'') out += '\'';
  }
  return out + "'";
}

inline std::string join(const std::vector<std::string>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? ", " : "") + v[i];
  return out;
}

inline std::string indent_block(const std::string& text, const std::string& pad) {
  std::string out;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) out += pad + line + "\n";
  return out;
}

inline std::string render_examples(const std::vector<PromptExemplar>& ex) {
  if (ex.empty()) return {};
  std::string out = "  <examples>\n";
  for (const auto& e : ex) {
    out += "    <example>\n";
    out += "      <question>" + xml_escape(e.question) + "</question>\n";
    out += "      <sql>" + xml_escape(e.sql) + "</sql>\n";
    out += "    </example>\n";
  }
  return out + "  </examples>\n";
}

}  // namespace detail

// Deterministic rendering of the tagged prompt. With char_limit > 0 the
// least similar exemplars are dropped until the prompt fits; `dropped`
// receives their count.
inline std::string render_prompt(const PromptDocument& doc, std::size_t char_limit = 0, std::size_t* dropped = nullptr) {
  std::string head = "<prompt>\n";
  head += "  <task>" + xml_escape(doc.task_text) + "</task>\n";
  head += "  <database>\n";
  for (const auto& t : doc.tables) {
    head += "    <table>\n";
    head += "      <name>" + xml_escape(t.name) + "</name>\n";
    head += "      <description>" + xml_escape(t.description) + "</description>\n";
    head += "      <definition>\n" + detail::indent_block(xml_escape(t.ddl) + ";", "        ") + "      </definition>\n";
    head += "      <comments>\n";
    for (const auto& [col, comment] : t.column_comments)
      head += "        COMMENT ON column " + xml_escape(t.name + "." + col) + " IS " + xml_escape(detail::sql_quote(comment)) + ";\n";
    head += "      </comments>\n";
    head += "    </table>\n";
  }
  head += "    <foreign_keys>\n";
  for (const auto& fk : doc.foreign_keys)
    head += "      ALTER TABLE " + fk.child_table + " ADD CONSTRAINT " + fk.constraint_name() + " FOREIGN KEY (" +
            detail::join(fk.child_columns) + ") REFERENCES " + fk.parent_table + "(" + detail::join(fk.parent_columns) +
            ");\n";
  head += "    </foreign_keys>\n";
  head += "  </database>\n";
  head += "  <rules>\n";
  for (const auto& r : doc.rules) head += "    <rule>" + xml_escape(r) + "</rule>\n";
  head += "  </rules>\n";
  const std::string tail = "</prompt>\n";

  std::vector<PromptExemplar> kept = doc.exemplars;
  std::size_t n_dropped = 0;
  if (char_limit > 0) {
    while (!kept.empty() && head.size() + detail::render_examples(kept).size() + tail.size() > char_limit) {
      // lowest similarity; among equals the later one
      auto victim = kept.begin();
      for (auto it = kept.begin(); it != kept.end(); ++it)
        if (it->similarity <= victim->similarity) victim = it;
      kept.erase(victim);
      ++n_dropped;
    }
  }
  if (dropped) *dropped = n_dropped;
  return head + detail::render_examples(kept) + tail;
}

}  // namespace transitq::catalog
