#pragma once

#include <map>
#include <memory>
#include <set>
#include <string>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "transitq/provider.hpp"
#include "transitq/sql/lexer.hpp"
#include "transitq/sql/schema.hpp"
#include "transitq/sqlite.hpp"

namespace transitq::sql {

enum class Verdict { accepted, repaired, rejected };
enum class Severity { error, warning };
enum class Origin { generated, repaired, gold };

inline std::string_view to_string(Verdict v) {
  switch (v) {
    case Verdict::accepted: return "accepted";
    case Verdict::repaired: return "repaired";
    case Verdict::rejected: return "rejected";
  }
  return "rejected";
}

inline std::string_view to_string(Origin o) {
  switch (o) {
    case Origin::generated: return "generated";
    case Origin::repaired: return "repaired";
    case Origin::gold: return "gold";
  }
  return "generated";
}

struct Diagnostic {
  std::string code;
  std::string message;
  Span span;
  Severity severity = Severity::error;
};

struct ValidationReport {
  Verdict verdict = Verdict::accepted;
  std::vector<std::string> applied_rules;
  std::vector<Diagnostic> diagnostics;

  bool has_errors() const {
    for (const auto& d : diagnostics)
      if (d.severity == Severity::error) return true;
    return false;
  }
  bool has(std::string_view code) const {
    for (const auto& d : diagnostics)
      if (d.code == code) return true;
    return false;
  }
  // Recomputes the verdict from diagnostics and applied rules.
  void settle() {
    verdict = has_errors() ? Verdict::rejected : applied_rules.empty() ? Verdict::accepted : Verdict::repaired;
  }
  void absorb(const ValidationReport& other) {
    applied_rules.insert(applied_rules.end(), other.applied_rules.begin(), other.applied_rules.end());
    diagnostics.insert(diagnostics.end(), other.diagnostics.begin(), other.diagnostics.end());
    settle();
  }
};

inline void to_json(nlohmann::json& j, const Diagnostic& d) {
  j = {{"code", d.code},
       {"message", d.message},
       {"span", {{"start", d.span.start}, {"end", d.span.end}}},
       {"severity", d.severity == Severity::error ? "error" : "warning"}};
}

inline void to_json(nlohmann::json& j, const ValidationReport& r) {
  j = {{"verdict", to_string(r.verdict)}, {"applied_rules", r.applied_rules}, {"diagnostics", r.diagnostics}};
}

struct QueryCandidate {
  std::string sql;
  Origin origin = Origin::generated;
};

// Pulls the SQL statement out of model text: the first fenced block if any,
// otherwise the whole text minus a leading "SQL:" label.
inline std::string extract_sql(std::string_view text) {
  auto trim = [](std::string s) {
    auto b = s.find_first_not_of(" \t\r\n");
    auto e = s.find_last_not_of(" \t\r\n");
    return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
  };
  std::string t(text);
  auto fence = t.find("```");
  if (fence != std::string::npos) {
    auto body = t.find('\n', fence);
    auto close = body == std::string::npos ? std::string::npos : t.find("```", body);
    if (body != std::string::npos) return trim(t.substr(body + 1, close == std::string::npos ? std::string::npos : close - body - 1));
  }
  t = trim(t);
  for (std::string_view label : {"SQLQuery:", "SQL:", "Query:"})
    if (to_lower(t.substr(0, label.size())) == to_lower(label)) return trim(t.substr(label.size()));
  return t;
}

namespace detail {

inline const std::unordered_set<std::string>& mutating_words() {
  static const std::unordered_set<std::string> s = {
      "INSERT", "UPDATE", "DELETE",   "DROP",    "CREATE", "ALTER",  "ATTACH", "DETACH",  "PRAGMA",
      "REPLACE", "VACUUM", "REINDEX", "ANALYZE", "BEGIN",  "COMMIT", "ROLLBACK", "SAVEPOINT", "RELEASE",
      "GRANT",  "REVOKE", "TRUNCATE", "MERGE",   "COPY",   "CALL",   "EXEC",   "EXECUTE", "INTO",
      "UPSERT", "LOCK",   "RENAME",  "COMMENT", "REFRESH", "DO"};
  return s;
}

// Words that can never be a table alias.
inline const std::unordered_set<std::string>& clause_words() {
  static const std::unordered_set<std::string> s = {
      "WHERE", "JOIN",  "LEFT",   "RIGHT",  "INNER",   "OUTER",  "FULL",  "CROSS",    "NATURAL", "ON",
      "USING", "GROUP", "ORDER",  "LIMIT",  "OFFSET",  "UNION",  "INTERSECT", "EXCEPT", "HAVING", "WINDOW",
      "AS",    "SELECT", "FROM",  "AND",    "OR",      "NOT",    "IN",    "IS",       "LIKE",    "BETWEEN",
      "CASE",  "WHEN",  "THEN",   "ELSE",   "END",     "ASC",    "DESC",  "BY",       "ALL",     "DISTINCT",
      "EXISTS", "NULL", "WITH",   "VALUES", "INTO",    "RETURNING", "INDEXED", "GLOB", "REGEXP", "MATCH",
      "ESCAPE", "COLLATE", "FILTER", "OVER", "LATERAL", "FETCH", "SET"};
  return s;
}

// Words followed by '(' that are not function calls.
inline const std::unordered_set<std::string>& paren_keywords() {
  static const std::unordered_set<std::string> s = {
      "IN",   "EXISTS", "VALUES", "USING", "AS",   "ON",    "AND",  "OR",    "NOT",    "FROM",  "JOIN",
      "WHERE", "SELECT", "ALL",   "ANY",   "SOME", "OVER",  "FILTER", "WITH", "THEN",   "ELSE",  "WHEN",
      "CASE", "BY",     "HAVING", "LIKE",  "IS",   "BETWEEN", "DISTINCT", "RECURSIVE", "MATERIALIZED",
      "UNION", "INTERSECT", "EXCEPT", "LIMIT", "OFFSET", "END", "CHECK", "KEY", "REFERENCES"};
  return s;
}

inline const std::unordered_set<std::string>& known_functions() {
  static const std::unordered_set<std::string> s = {
      "count",   "sum",     "avg",      "min",     "max",       "total",     "group_concat", "string_agg",
      "upper",   "lower",   "length",   "substr",  "substring", "trim",      "ltrim",        "rtrim",
      "replace", "round",   "abs",      "coalesce", "ifnull",   "nullif",    "iif",          "cast",
      "date",    "time",    "datetime", "julianday", "strftime", "unixepoch", "printf",      "format",
      "instr",   "like",    "glob",     "typeof",  "hex",       "quote",     "char",         "unicode",
      "random",  "sign",    "ceil",     "ceiling", "floor",     "sqrt",      "power",        "pow",
      "exp",     "ln",      "log",      "log10",   "mod",       "pi",        "row_number",   "rank",
      "dense_rank", "ntile", "lag",     "lead",    "first_value", "last_value", "nth_value", "percent_rank",
      "cume_dist", "json_each", "json_extract", "json_array", "json_object", "json_group_array",
      "likelihood", "zeroblob", "concat",  "concat_ws", "radians", "degrees", "sin", "cos", "tan",
      "asin", "acos", "atan", "atan2"};
  return s;
}

inline const std::unordered_set<std::string>& aggregate_functions() {
  static const std::unordered_set<std::string> s = {"count", "sum", "avg", "min", "max", "total", "group_concat",
                                                     "string_agg"};
  return s;
}

inline std::size_t matching_paren(const std::vector<Token>& t, std::size_t open) {
  int depth = 0;
  for (std::size_t i = open; i < t.size(); ++i) {
    if (t[i].is_op("(")) ++depth;
    else if (t[i].is_op(")") && --depth == 0) return i;
  }
  return t.size();
}

inline bool is_numeric_text(std::string_view s) {
  auto toks = lex_code(s);
  if (toks.size() == 1) return toks[0].kind == TokenKind::number;
  return toks.size() == 2 && (toks[0].is_op("-") || toks[0].is_op("+")) && toks[1].kind == TokenKind::number;
}

}  // namespace detail

// A relation referenced in a FROM or JOIN clause.
struct SourceRef {
  std::string name;   // lower-cased relation name, empty for subqueries
  std::string alias;  // lower-cased alias, may be empty
  Span span;
  bool subquery = false;
  bool table_function = false;
};

struct ColumnRef {
  std::string qualifier;  // lower-cased, empty when unqualified
  std::string column;     // lower-cased
  std::size_t qualifier_token = 0;
  std::size_t column_token = 0;
};

struct Comparison {
  ColumnRef column;
  std::vector<std::size_t> literal_tokens;  // one for =, several for IN lists
};

// Flat structural view of one statement. Alias scopes are not modelled: all
// aliases of every subquery are visible everywhere, which errs on accepting.
struct QueryAnalysis {
  std::vector<Token> tokens;
  std::vector<SourceRef> sources;
  std::set<std::string> ctes;
  std::set<std::string> output_aliases;
  std::vector<ColumnRef> qualified_refs;
  std::vector<std::pair<std::string, std::size_t>> function_calls;
  std::vector<Comparison> comparisons;

  // qualifier -> source
  const SourceRef* resolve_qualifier(std::string_view q) const {
    for (const auto& s : sources)
      if (!s.alias.empty() && s.alias == q) return &s;
    for (const auto& s : sources)
      if (s.alias.empty() && !s.subquery && s.name == q) return &s;
    return nullptr;
  }
};

inline QueryAnalysis analyze(std::string_view sql) {
  QueryAnalysis a;
  a.tokens = lex_code(sql);
  const auto& t = a.tokens;
  std::set<std::size_t> table_name_tokens;
  auto lower = [&](std::size_t i) { return t[i].name(); };

  // CTE names
  if (!t.empty() && t[0].is_word("WITH")) {
    std::size_t i = 1;
    if (i < t.size() && t[i].is_word("RECURSIVE")) ++i;
    while (i < t.size() && t[i].is_name()) {
      a.ctes.insert(lower(i));
      ++i;
      if (i < t.size() && t[i].is_op("(")) i = detail::matching_paren(t, i) + 1;
      if (i < t.size() && t[i].is_word("AS")) ++i;
      while (i < t.size() && (t[i].is_word("NOT") || t[i].is_word("MATERIALIZED"))) ++i;
      if (i < t.size() && t[i].is_op("(")) i = detail::matching_paren(t, i) + 1;
      if (i < t.size() && t[i].is_op(",")) {
        ++i;
        continue;
      }
      break;
    }
  }

  // Sources after FROM / JOIN clauses.
  for (std::size_t i = 0; i < t.size(); ++i) {
    bool is_from = t[i].is_word("FROM");
    if (!is_from && !t[i].is_word("JOIN")) continue;
    if (is_from && i >= 1 && t[i - 1].is_word("DISTINCT")) continue;  // IS [NOT] DISTINCT FROM
    if (t[i].depth > 0) {
      // Clause only when the enclosing parenthesis starts a subquery.
      std::size_t open = i;
      while (open > 0 && !(t[open - 1].is_op("(") && t[open - 1].depth == t[i].depth - 1)) --open;
      if (open == 0 || !(t[open].is_word("SELECT") || t[open].is_word("WITH") || t[open].is_word("VALUES"))) continue;
    }
    std::size_t j = i + 1;
    for (;;) {
      if (j >= t.size()) break;
      SourceRef src;
      if (t[j].is_op("(")) {
        std::size_t close = detail::matching_paren(t, j);
        src.subquery = true;
        src.span = {t[j].span.start, close < t.size() ? t[close].span.end : t[j].span.end};
        j = close + 1;
      } else if (t[j].is_name() && !(t[j].kind == TokenKind::word && detail::clause_words().count(t[j].value))) {
        table_name_tokens.insert(j);
        src.name = lower(j);
        src.span = t[j].span;
        ++j;
        if (j + 1 < t.size() && t[j].is_op(".") && t[j + 1].is_name()) {
          table_name_tokens.insert(j + 1);
          src.name = lower(j + 1);
          src.span.end = t[j + 1].span.end;
          j += 2;
        }
        if (j < t.size() && t[j].is_op("(")) {
          src.table_function = true;
          j = detail::matching_paren(t, j) + 1;
        }
      } else {
        break;
      }
      if (j < t.size() && t[j].is_word("AS")) ++j;
      if (j < t.size() && t[j].is_name() && !(t[j].kind == TokenKind::word && detail::clause_words().count(t[j].value))) {
        src.alias = lower(j);
        table_name_tokens.insert(j);
        ++j;
      }
      a.sources.push_back(std::move(src));
      if (is_from && j < t.size() && t[j].is_op(",")) {
        ++j;
        continue;
      }
      break;
    }
  }

  for (std::size_t i = 0; i + 1 < t.size(); ++i)
    if (t[i].is_word("AS") && t[i + 1].is_name()) a.output_aliases.insert(lower(i + 1));

  for (std::size_t i = 0; i + 2 < t.size(); ++i) {
    if (!t[i].is_name() || !t[i + 1].is_op(".") || table_name_tokens.count(i)) continue;
    if (i > 0 && t[i - 1].is_op(".")) continue;
    if (!(t[i + 2].is_name() || t[i + 2].is_op("*"))) continue;
    if (i + 3 < t.size() && t[i + 3].is_op("(")) continue;
    a.qualified_refs.push_back({lower(i), t[i + 2].is_op("*") ? "*" : lower(i + 2), i, i + 2});
  }

  for (std::size_t i = 0; i + 1 < t.size(); ++i) {
    if (t[i].kind != TokenKind::word || !t[i + 1].is_op("(")) continue;
    if (detail::paren_keywords().count(t[i].value) || table_name_tokens.count(i)) continue;
    if (i > 0 && t[i - 1].is_op(".")) continue;
    a.function_calls.emplace_back(lower(i), i);
  }

  // Comparisons between a column reference and literals.
  auto column_at = [&](std::size_t i, ColumnRef& out) -> std::size_t {  // returns tokens consumed
    if (i + 2 < t.size() && t[i].is_name() && t[i + 1].is_op(".") && t[i + 2].is_name()) {
      out = {lower(i), lower(i + 2), i, i + 2};
      return 3;
    }
    if (i < t.size() && t[i].is_name() && !(t[i].kind == TokenKind::word && detail::clause_words().count(t[i].value)) &&
        !(i + 1 < t.size() && t[i + 1].is_op("(")) && !(i + 1 < t.size() && t[i + 1].is_op("."))) {
      out = {"", lower(i), i, i};
      return 1;
    }
    return 0;
  };
  auto literal_at = [&](std::size_t i) -> std::size_t {  // index of literal token or npos
    if (i < t.size() && (t[i].kind == TokenKind::number || t[i].kind == TokenKind::string)) return i;
    if (i + 1 < t.size() && t[i].is_op("-") && t[i + 1].kind == TokenKind::number) return i + 1;
    return std::string::npos;
  };
  static const std::set<std::string> cmp_ops = {"=", "==", "!=", "<>", "<", ">", "<=", ">="};
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (t[i].kind == TokenKind::op && cmp_ops.count(t[i].text)) {
      // column OP literal
      for (std::size_t back : {3u, 1u}) {
        if (i < back) continue;
        ColumnRef col;
        if (column_at(i - back, col) == back && (i - back == 0 || !t[i - back - 1].is_op("."))) {
          auto lit = literal_at(i + 1);
          if (lit != std::string::npos) a.comparisons.push_back({col, {lit}});
          break;
        }
      }
      // literal OP column
      if (i >= 1 && (t[i - 1].kind == TokenKind::number || t[i - 1].kind == TokenKind::string)) {
        ColumnRef col;
        std::size_t n = column_at(i + 1, col);
        if (n > 0 && !(i + 1 + n < t.size() && t[i + 1 + n].is_op("."))) a.comparisons.push_back({col, {i - 1}});
      }
    } else if (t[i].is_word("IN") && i + 1 < t.size() && t[i + 1].is_op("(")) {
      std::size_t k = i - 1;
      if (i >= 1 && t[i - 1].is_word("NOT")) --k;
      if (i < 1 || k >= t.size()) continue;
      ColumnRef col;
      std::size_t start = (k >= 2 && t[k - 1].is_op(".")) ? k - 2 : k;
      if (column_at(start, col) != k - start + 1) continue;
      std::size_t close = detail::matching_paren(t, i + 1);
      std::vector<std::size_t> lits;
      bool all_literals = close > i + 2;
      for (std::size_t j = i + 2; j < close && all_literals; ++j) {
        if (t[j].is_op(",")) continue;
        auto lit = literal_at(j);
        if (lit == std::string::npos) {
          all_literals = false;
          break;
        }
        lits.push_back(lit);
        j = lit;
      }
      if (all_literals && !lits.empty()) a.comparisons.push_back({col, lits});
    }
  }
  return a;
}

struct GuardOptions {
  bool alias_qualifier_rule = true;
  bool direction_literal_rule = true;
  bool quote_text_literal_rule = true;
  int max_repair_rounds = 1;
};

struct GuardResult {
  QueryCandidate candidate;
  ValidationReport report;
};

// Validates and repairs generated SQL against one schema. Stateless apart
// from the immutable schema; safe to share between threads.
class Guard {
 public:
  explicit Guard(SchemaInfo schema = {}, GuardOptions opts = {}) : schema_(std::move(schema)), opts_(opts) {}

  const SchemaInfo& schema() const { return schema_; }
  const GuardOptions& options() const { return opts_; }

  // Accepts exactly one SELECT statement (optionally WITH-prefixed).
  ValidationReport enforce_read_only(const QueryCandidate& q) const {
    ValidationReport r;
    auto all = lex(q.sql);
    for (const auto& t : all)
      if (t.kind == TokenKind::error) {
        r.diagnostics.push_back({"SYNTAX_ERROR", t.value, t.span});
        r.settle();
        return r;
      }
    auto t = lex_code(q.sql);
    std::size_t statements = 0;
    bool in_statement = false;
    for (const auto& tok : t) {
      if (tok.is_op(";")) {
        in_statement = false;
      } else if (!in_statement) {
        in_statement = true;
        ++statements;
      }
    }
    if (statements == 0) {
      r.diagnostics.push_back({"EMPTY_QUERY", "query is empty", {0, q.sql.size()}});
    } else if (statements > 1) {
      r.diagnostics.push_back({"MULTI_STATEMENT", "only a single statement is allowed", {0, q.sql.size()}});
    } else if (!(t[0].is_word("SELECT") || t[0].is_word("WITH"))) {
      r.diagnostics.push_back({"NON_SELECT", "only SELECT queries are allowed, found " + t[0].text, t[0].span});
    } else {
      for (std::size_t i = 0; i < t.size(); ++i) {
        if (t[i].kind != TokenKind::word) continue;
        if (t[i].value == "REPLACE" && i + 1 < t.size() && t[i + 1].is_op("(")) continue;  // replace() function
        if (detail::mutating_words().count(t[i].value)) {
          r.diagnostics.push_back({"NON_SELECT", "statement contains " + t[i].value, t[i].span});
          break;
        }
        if (to_lower(t[i].value) == "load_extension") {
          r.diagnostics.push_back({"NON_SELECT", "load_extension is not allowed", t[i].span});
          break;
        }
      }
    }
    r.settle();
    return r;
  }

  // Parse and resolution check. With a connection the engine also compiles
  // the statement, which catches everything the lint cannot see.
  ValidationReport syntax_check(const QueryCandidate& q, const db::Connection* conn = nullptr) const {
    ValidationReport r;
    QueryAnalysis a = analyze(q.sql);
    const auto& t = a.tokens;

    if (!schema_.empty()) {
      for (const auto& s : a.sources) {
        if (s.subquery || s.table_function || a.ctes.count(s.name) || schema_.find(s.name)) continue;
        r.diagnostics.push_back({"UNKNOWN_TABLE", "table '" + s.name + "' does not exist", s.span});
      }
    }
    for (const auto& ref : a.qualified_refs) {
      Span span{t[ref.qualifier_token].span.start, t[ref.column_token].span.end};
      const SourceRef* src = a.resolve_qualifier(ref.qualifier);
      if (!src) {
        r.diagnostics.push_back({"UNKNOWN_ALIAS",
                                 "alias or table '" + ref.qualifier + "' is not declared in a FROM or JOIN clause", span});
        continue;
      }
      if (ref.column == "*" || src->subquery || src->table_function || a.ctes.count(src->name)) continue;
      const RelationInfo* rel = schema_.find(src->name);
      if (rel && !rel->find(ref.column))
        r.diagnostics.push_back({"UNKNOWN_COLUMN", "column " + rel->name + "." + ref.column + " does not exist", span});
    }
    for (const auto& [fn, idx] : a.function_calls) {
      if (detail::known_functions().count(fn)) continue;
      r.diagnostics.push_back({"UNKNOWN_FUNCTION", "function '" + fn + "' is outside the supported set", t[idx].span,
                               Severity::warning});
    }
    check_literals(a, r);

    if (conn && !r.has_errors()) {
      bool read_only = true;
      if (auto err = conn->compile_error(q.sql, &read_only)) {
        r.diagnostics.push_back(engine_diagnostic(*err, q.sql, a));
      } else if (!read_only) {
        r.diagnostics.push_back({"NON_SELECT", "statement would modify the database", {0, q.sql.size()}});
      }
    }
    r.settle();
    return r;
  }

  // Deterministic rewrites in rule-id order. Idempotent.
  std::pair<QueryCandidate, ValidationReport> apply_repair_rules(const QueryCandidate& q) const {
    QueryCandidate cur = q;
    ValidationReport r;
    if (opts_.alias_qualifier_rule && rewrite(cur, &Guard::alias_qualifier_edits)) r.applied_rules.push_back("ALIAS_QUALIFIER");
    if (opts_.direction_literal_rule && rewrite(cur, &Guard::direction_literal_edits)) r.applied_rules.push_back("DIRECTION_LITERAL");
    if (opts_.quote_text_literal_rule && rewrite(cur, &Guard::quote_text_edits)) r.applied_rules.push_back("QUOTE_TEXT_LITERAL");
    if (!r.applied_rules.empty()) cur.origin = Origin::repaired;
    r.settle();
    return {cur, r};
  }

  // read-only -> deterministic repairs -> syntax check.
  GuardResult check(const QueryCandidate& q, const db::Connection* conn = nullptr) const {
    auto ro = enforce_read_only(q);
    if (ro.verdict == Verdict::rejected) return {q, ro};
    auto [fixed, report] = apply_repair_rules(q);
    report.absorb(syntax_check(fixed, conn));
    return {fixed, report};
  }

  // Asks the model to fix a rejected query. The rewrite must pass check();
  // otherwise (or when the provider fails) RepairFailed is thrown.
  QueryCandidate llm_repair(const QueryCandidate& q, const std::vector<Diagnostic>& diagnostics,
                            provider::CompletionProvider& provider, const db::Connection* conn = nullptr,
                            ValidationReport* final_report = nullptr) const {
    QueryCandidate cur = q;
    std::vector<Diagnostic> diags = diagnostics;
    std::string last_problem;
    for (int round = 0; round < std::max(1, opts_.max_repair_rounds); ++round) {
      provider::CompletionRequest req;
      req.system_prompt = repair_prompt();
      req.messages.push_back({provider::Role::user, repair_message(cur.sql, diags)});
      req.temperature = 0;
      std::string text;
      try {
        text = provider.complete(req);
      } catch (const Error& e) {
        throw RepairFailed(std::string("repair provider failed: ") + e.code() + ": " + e.what());
      }
      QueryCandidate next{extract_sql(text), Origin::repaired};
      if (next.sql.empty()) throw RepairFailed("repair provider returned no query");
      auto res = check(next, conn);
      res.candidate.origin = Origin::repaired;
      if (res.report.verdict != Verdict::rejected) {
        if (final_report) *final_report = res.report;
        return res.candidate;
      }
      cur = res.candidate;
      diags = res.report.diagnostics;
      last_problem = diags.empty() ? "rejected" : diags.front().code + ": " + diags.front().message;
      if (final_report) *final_report = res.report;
    }
    throw RepairFailed("repaired query still invalid (" + last_problem + ")");
  }

  // Appends LIMIT n unless the statement already has a top-level LIMIT or is
  // a single-row aggregate (aggregate in the select list, no GROUP BY).
  static QueryCandidate inject_limit(const QueryCandidate& q, int n) {
    if (n <= 0) return q;
    auto t = lex_code(q.sql);
    std::size_t last = t.size();
    while (last > 0 && t[last - 1].is_op(";")) --last;
    if (last == 0) return q;
    bool select_list = false, has_aggregate = false, has_group = false;
    for (std::size_t i = 0; i < last; ++i) {
      if (t[i].depth != 0) continue;
      if (t[i].is_word("LIMIT")) return q;
      if (t[i].is_word("SELECT")) select_list = true;
      else if (t[i].is_word("FROM")) select_list = false;
      else if (t[i].is_word("GROUP")) has_group = true;
      else if (select_list && t[i].kind == TokenKind::word && i + 1 < last && t[i + 1].is_op("(") &&
               detail::aggregate_functions().count(to_lower(t[i].value)))
        has_aggregate = true;
    }
    // OVER(...) makes an aggregate a window function
    for (std::size_t i = 0; i < last; ++i)
      if (t[i].is_word("OVER")) has_aggregate = false;
    if (has_aggregate && !has_group) return q;
    QueryCandidate out = q;
    out.sql = q.sql.substr(0, t[last - 1].span.end) + " limit " + std::to_string(n);
    return out;
  }

 private:
  struct Edit {
    Span span;
    std::string replacement;
  };
  using EditFn = std::vector<Edit> (Guard::*)(const QueryAnalysis&) const;

  bool rewrite(QueryCandidate& q, EditFn fn) const {
    auto a = analyze(q.sql);
    auto edits = (this->*fn)(a);
    if (edits.empty()) return false;
    std::sort(edits.begin(), edits.end(), [](const Edit& x, const Edit& y) { return x.span.start > y.span.start; });
    for (const auto& e : edits) q.sql.replace(e.span.start, e.span.end - e.span.start, e.replacement);
    return true;
  }

  const ColumnInfo* resolve_column(const QueryAnalysis& a, const ColumnRef& ref) const {
    if (!ref.qualifier.empty()) {
      const SourceRef* src = a.resolve_qualifier(ref.qualifier);
      if (!src || src->subquery || src->table_function || a.ctes.count(src->name)) return nullptr;
      const RelationInfo* rel = schema_.find(src->name);
      return rel ? rel->find(ref.column) : nullptr;
    }
    const ColumnInfo* found = nullptr;
    for (const auto& s : a.sources) {
      if (s.subquery || s.table_function) continue;
      const RelationInfo* rel = schema_.find(s.name);
      if (!rel) continue;
      if (const ColumnInfo* c = rel->find(ref.column)) {
        if (found && found->affinity != c->affinity) return nullptr;  // ambiguous
        found = c;
      }
    }
    return found;
  }

  // Undeclared qualifier: replace with the alias of the only source that has
  // the column. A table name used while the table is aliased becomes the alias.
  std::vector<Edit> alias_qualifier_edits(const QueryAnalysis& a) const {
    std::vector<Edit> edits;
    if (schema_.empty()) return edits;
    for (const auto& ref : a.qualified_refs) {
      if (a.resolve_qualifier(ref.qualifier) || ref.column == "*") continue;
      const SourceRef* target = nullptr;
      int candidates = 0;
      for (const auto& s : a.sources) {
        if (s.subquery || s.table_function) continue;
        const RelationInfo* rel = schema_.find(s.name);
        if (!rel || !rel->find(ref.column)) continue;
        if (s.name == ref.qualifier) {  // aliased table referenced by name
          target = &s;
          candidates = 1;
          break;
        }
        target = &s;
        ++candidates;
      }
      if (candidates != 1) continue;
      edits.push_back({a.tokens[ref.qualifier_token].span, target->alias.empty() ? target->name : target->alias});
    }
    return edits;
  }

  static bool is_direction_column(const ColumnInfo* c, const ColumnRef& ref) {
    if (c) {
      auto& v = c->allowed_values;
      return std::find(v.begin(), v.end(), "andata") != v.end() && std::find(v.begin(), v.end(), "ritorno") != v.end();
    }
    return ref.column == "direction";
  }

  // GTFS numeric directions compared against the string-valued column.
  std::vector<Edit> direction_literal_edits(const QueryAnalysis& a) const {
    std::vector<Edit> edits;
    for (const auto& cmp : a.comparisons) {
      if (!is_direction_column(resolve_column(a, cmp.column), cmp.column)) continue;
      for (std::size_t li : cmp.literal_tokens) {
        const Token& lit = a.tokens[li];
        std::string v = lit.kind == TokenKind::string ? lit.value : lit.text;
        if (li > 0 && a.tokens[li - 1].is_op("-")) continue;
        if (v == "0") edits.push_back({lit.span, "'andata'"});
        else if (v == "1") edits.push_back({lit.span, "'ritorno'"});
      }
    }
    return edits;
  }

  // Numeric literal compared with a free-text column: quote it.
  std::vector<Edit> quote_text_edits(const QueryAnalysis& a) const {
    std::vector<Edit> edits;
    for (const auto& cmp : a.comparisons) {
      const ColumnInfo* c = resolve_column(a, cmp.column);
      if (!c || c->affinity != Affinity::text || !c->allowed_values.empty()) continue;
      for (std::size_t li : cmp.literal_tokens) {
        const Token& lit = a.tokens[li];
        if (lit.kind != TokenKind::number || (li > 0 && a.tokens[li - 1].is_op("-"))) continue;
        edits.push_back({lit.span, "'" + lit.text + "'"});
      }
    }
    return edits;
  }

  void check_literals(const QueryAnalysis& a, ValidationReport& r) const {
    for (const auto& cmp : a.comparisons) {
      const ColumnInfo* c = resolve_column(a, cmp.column);
      if (!c) continue;
      for (std::size_t li : cmp.literal_tokens) {
        const Token& lit = a.tokens[li];
        std::string col = (cmp.column.qualifier.empty() ? "" : cmp.column.qualifier + ".") + cmp.column.column;
        Span span{a.tokens[cmp.column.qualifier.empty() ? cmp.column.column_token : cmp.column.qualifier_token].span.start,
                  lit.span.end};
        if (!c->allowed_values.empty()) {
          if (lit.kind != TokenKind::string) {
            r.diagnostics.push_back({"TYPE_MISMATCH", col + " holds text values, compared with number " + lit.text, span});
          } else if (std::find(c->allowed_values.begin(), c->allowed_values.end(), lit.value) == c->allowed_values.end()) {
            std::string allowed;
            for (const auto& v : c->allowed_values) allowed += (allowed.empty() ? "'" : ", '") + v + "'";
            r.diagnostics.push_back(
                {"VALUE_NOT_IN_DOMAIN", col + " only takes the values " + allowed + ", not '" + lit.value + "'", span});
          }
          continue;
        }
        bool numeric_col = c->affinity == Affinity::integer || c->affinity == Affinity::real;
        if (c->affinity == Affinity::text && lit.kind == TokenKind::number)
          r.diagnostics.push_back({"TYPE_MISMATCH", col + " is text, compared with number " + lit.text, span});
        else if (numeric_col && lit.kind == TokenKind::string && !detail::is_numeric_text(lit.value))
          r.diagnostics.push_back({"TYPE_MISMATCH", col + " is numeric, compared with string " + lit.text, span});
      }
    }
  }

  static Diagnostic engine_diagnostic(const std::string& msg, const std::string& sql, const QueryAnalysis& a) {
    auto locate = [&](const std::string& needle) -> Span {
      auto pos = to_lower(sql).find(to_lower(needle));
      if (needle.empty() || pos == std::string::npos) return {0, sql.size()};
      return {pos, pos + needle.size()};
    };
    auto after = [&](std::string_view prefix) { return msg.substr(prefix.size()); };
    if (msg.rfind("no such table: ", 0) == 0) {
      std::string name = after("no such table: ");
      return {"UNKNOWN_TABLE", msg, locate(name)};
    }
    if (msg.rfind("no such column: ", 0) == 0) {
      std::string name = after("no such column: ");
      auto dot = name.find('.');
      if (dot != std::string::npos && !a.resolve_qualifier(to_lower(name.substr(0, dot))))
        return {"UNKNOWN_ALIAS", msg, locate(name)};
      return {"UNKNOWN_COLUMN", msg, locate(name)};
    }
    if (msg.rfind("no such function: ", 0) == 0) return {"UNKNOWN_FUNCTION", msg, locate(after("no such function: "))};
    if (msg.rfind("ambiguous column name: ", 0) == 0) return {"AMBIGUOUS_COLUMN", msg, locate(after("ambiguous column name: "))};
    if (msg.find("syntax error") != std::string::npos) {
      auto q1 = msg.find('"'), q2 = msg.rfind('"');
      Span span = q1 != std::string::npos && q2 > q1 ? locate(msg.substr(q1 + 1, q2 - q1 - 1)) : Span{0, sql.size()};
      return {"SYNTAX_ERROR", msg, span};
    }
    return {"SYNTAX_ERROR", msg, {0, sql.size()}};
  }

  std::string repair_prompt() const {
    std::string p =
        "<repair>\n"
        "  <task>You correct SQLite SELECT queries written for a public transport database. Return only the corrected "
        "query, with no explanation.</task>\n"
        "  <common_errors>\n"
        "    <error>Every table alias used as a qualifier must be declared in a FROM or JOIN clause.</error>\n"
        "    <error>trips.direction stores the strings 'andata' (outbound) and 'ritorno' (inbound), never 0 or 1.</error>\n"
        "    <error>Text columns are compared with quoted strings, numeric columns with numbers.</error>\n"
        "    <error>Only tables and columns listed in the schema exist.</error>\n"
        "  </common_errors>\n"
        "  <schema>\n";
    for (const RelationInfo* rel : schema_.relations()) {
      p += "    " + rel->name + "(";
      for (std::size_t i = 0; i < rel->columns.size(); ++i)
        p += (i ? ", " : "") + rel->columns[i].name + (rel->columns[i].declared_type.empty() ? "" : " " + rel->columns[i].declared_type);
      p += ")\n";
    }
    p += "  </schema>\n</repair>";
    return p;
  }

  static std::string repair_message(const std::string& sql, const std::vector<Diagnostic>& diags) {
    std::string m = "Query:\n" + sql + "\nProblems:\n";
    for (const auto& d : diags) m += "- " + d.code + ": " + d.message + "\n";
    m += "Return the corrected query.";
    return m;
  }

  SchemaInfo schema_;
  GuardOptions opts_;
};

}  // namespace transitq::sql
