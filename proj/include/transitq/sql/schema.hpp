#pragma once

#include <map>
#include <optional>
#include <regex>
#include <string>
#include <vector>

#include "transitq/sql/lexer.hpp"
#include "transitq/sqlite.hpp"

namespace transitq::sql {

enum class Affinity { integer, real, numeric, text, none };

// SQLite's column affinity rules applied to a declared type.
inline Affinity affinity_of(std::string_view declared) {
  std::string t = to_upper(declared);
  if (t.find("INT") != std::string::npos) return Affinity::integer;
  if (t.find("CHAR") != std::string::npos || t.find("CLOB") != std::string::npos || t.find("TEXT") != std::string::npos)
    return Affinity::text;
  if (t.empty() || t.find("BLOB") != std::string::npos) return Affinity::none;
  if (t.find("REAL") != std::string::npos || t.find("FLOA") != std::string::npos || t.find("DOUB") != std::string::npos)
    return Affinity::real;
  return Affinity::numeric;
}

struct ColumnInfo {
  std::string name;
  std::string declared_type;
  Affinity affinity = Affinity::none;
  // Non-empty when a CHECK (col IN ('a', 'b')) constraint restricts values.
  std::vector<std::string> allowed_values;
};

struct RelationInfo {
  std::string name;
  bool is_view = false;
  std::string ddl;
  std::vector<ColumnInfo> columns;

  const ColumnInfo* find(std::string_view column) const {
    std::string c = to_lower(column);
    for (const auto& col : columns)
      if (to_lower(col.name) == c) return &col;
    return nullptr;
  }
};

// Tables and views of one database, keyed by lower-cased name, in creation order.
class SchemaInfo {
 public:
  static SchemaInfo introspect(const db::Connection& conn) {
    SchemaInfo s;
    auto list = conn.prepare(
        "SELECT name, type, sql FROM sqlite_master WHERE type IN ('table', 'view') AND name NOT LIKE 'sqlite_%' "
        "ORDER BY rowid");
    static const std::regex check_in(R"(CHECK\s*\(\s*["`\[]?(\w+)["`\]]?\s+IN\s*\(([^)]*)\)\s*\))", std::regex::icase);
    while (list.step()) {
      RelationInfo r;
      r.name = list.text(0);
      r.is_view = list.text(1) == "view";
      r.ddl = list.text(2);
      auto cols = conn.prepare("SELECT name, type FROM pragma_table_info(?)");
      cols.bind_all(r.name);
      while (cols.step()) {
        ColumnInfo c;
        c.name = cols.text(0);
        c.declared_type = cols.text(1);
        c.affinity = affinity_of(c.declared_type);
        r.columns.push_back(std::move(c));
      }
      for (std::sregex_iterator it(r.ddl.begin(), r.ddl.end(), check_in), end; it != end; ++it) {
        std::vector<std::string> values;
        bool all_strings = true;
        for (const auto& t : lex_code((*it)[2].str())) {
          if (t.kind == TokenKind::string) values.push_back(t.value);
          else if (!t.is_op(",")) all_strings = false;
        }
        if (!all_strings || values.empty()) continue;
        for (auto& c : r.columns)
          if (to_lower(c.name) == to_lower((*it)[1].str())) c.allowed_values = values;
      }
      s.order_.push_back(to_lower(r.name));
      s.relations_.emplace(to_lower(r.name), std::move(r));
    }
    return s;
  }

  const RelationInfo* find(std::string_view name) const {
    auto it = relations_.find(to_lower(name));
    return it == relations_.end() ? nullptr : &it->second;
  }

  std::vector<const RelationInfo*> relations() const {
    std::vector<const RelationInfo*> out;
    for (const auto& n : order_) out.push_back(&relations_.at(n));
    return out;
  }

  bool empty() const { return relations_.empty(); }

 private:
  std::map<std::string, RelationInfo> relations_;
  std::vector<std::string> order_;
};

}  // namespace transitq::sql
