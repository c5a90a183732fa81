#pragma once

#include <chrono>
#include <memory>
#include <optional>
#include <regex>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "transitq/catalog.hpp"
#include "transitq/exemplars.hpp"
#include "transitq/gtfs/types.hpp"
#include "transitq/log.hpp"
#include "transitq/map_builder.hpp"
#include "transitq/provider.hpp"
#include "transitq/sql/guard.hpp"
#include "transitq/sqlite.hpp"

namespace transitq::agent {

enum class Tool { retrieve_examples, generate_sql, guard, execute_sql, build_map, synthesize };

inline std::string_view to_string(Tool t) {
  switch (t) {
    case Tool::retrieve_examples: return "retrieve_examples";
    case Tool::generate_sql: return "generate_sql";
    case Tool::guard: return "guard";
    case Tool::execute_sql: return "execute_sql";
    case Tool::build_map: return "build_map";
    case Tool::synthesize: return "synthesize";
  }
  return "unknown";
}

struct ToolInvocation {
  Tool tool = Tool::generate_sql;
  std::string input_digest;
  std::string output_digest;
  std::int64_t duration_ms = 0;
  bool ok = true;
};

struct AnswerError {
  std::string code;
  std::string message;
};

struct AnswerPayload {
  std::string text;
  std::optional<std::string> generated_sql;  // raw model output after extraction
  std::optional<std::string> sql;            // the statement that was executed
  std::optional<db::Table> rows;
  std::optional<nlohmann::json> map;  // GeoJSON document
  std::optional<std::string> map_id;  // assigned by whoever stores the document
  std::vector<std::string> assumptions;
  std::optional<sql::ValidationReport> guard;
  std::optional<AnswerError> error;
};

struct AgentTurn {
  std::string question;
  std::vector<ToolInvocation> trace;
  AnswerPayload answer;
};

struct Conversation {
  std::string session_id;
  std::vector<AgentTurn> turns;
  std::chrono::system_clock::time_point created_at = std::chrono::system_clock::now();
};

inline nlohmann::json table_json(const db::Table& t) {
  nlohmann::json data = nlohmann::json::array();
  for (const auto& row : t.rows) {
    nlohmann::json r = nlohmann::json::array();
    for (const auto& v : row) {
      if (db::is_null(v)) r.push_back(nullptr);
      else if (auto i = std::get_if<std::int64_t>(&v)) r.push_back(*i);
      else if (auto d = std::get_if<double>(&v)) r.push_back(*d);
      else r.push_back(std::get<std::string>(v));
    }
    data.push_back(std::move(r));
  }
  return {{"columns", t.columns}, {"data", std::move(data)}};
}

inline db::Table table_from_json(const nlohmann::json& j) {
  db::Table t;
  t.columns = j.at("columns").get<std::vector<std::string>>();
  for (const auto& r : j.at("data")) {
    std::vector<db::Value> row;
    for (const auto& v : r) {
      if (v.is_null()) row.emplace_back(db::Null{});
      else if (v.is_number_integer()) row.emplace_back(v.get<std::int64_t>());
      else if (v.is_number()) row.emplace_back(v.get<double>());
      else if (v.is_string()) row.emplace_back(v.get<std::string>());
      else row.emplace_back(v.dump());
    }
    t.rows.push_back(std::move(row));
  }
  return t;
}

inline nlohmann::json to_json(const ToolInvocation& t) {
  return {{"tool", to_string(t.tool)},
          {"input", t.input_digest},
          {"output", t.output_digest},
          {"duration_ms", t.duration_ms},
          {"outcome", t.ok ? "ok" : "error"}};
}

inline nlohmann::json to_json(const AgentTurn& turn) {
  nlohmann::json trace = nlohmann::json::array();
  for (const auto& t : turn.trace) trace.push_back(to_json(t));
  const auto& a = turn.answer;
  nlohmann::json answer = {{"text", a.text}, {"assumptions", a.assumptions}};
  answer["generated_sql"] = a.generated_sql ? nlohmann::json(*a.generated_sql) : nlohmann::json();
  answer["sql"] = a.sql ? nlohmann::json(*a.sql) : nlohmann::json();
  answer["rows"] = a.rows ? table_json(*a.rows) : nlohmann::json();
  answer["map_id"] = a.map_id ? nlohmann::json(*a.map_id) : nlohmann::json();
  answer["guard"] = a.guard ? nlohmann::json(*a.guard) : nlohmann::json();
  answer["error"] = a.error ? nlohmann::json{{"code", a.error->code}, {"message", a.error->message}} : nlohmann::json();
  return {{"question", turn.question}, {"trace", std::move(trace)}, {"answer", std::move(answer)}};
}

struct AgentConfig {
  std::size_t k = 3;
  int row_limit = 50;  // 0 disables limit injection
  std::size_t synthesis_rows = 50;
  std::size_t memory_turns = 5;
  std::chrono::milliseconds query_timeout{30000};
  std::size_t prompt_char_limit = 0;
  std::optional<gtfs::Date> reference_date;  // "current date"; today when unset
  int max_tokens = 1024;

  static AgentConfig from_json(const nlohmann::json& j) {
    AgentConfig c;
    c.k = j.value("k", c.k);
    c.row_limit = j.value("row_limit", c.row_limit);
    c.synthesis_rows = j.value("synthesis_rows", c.synthesis_rows);
    c.memory_turns = j.value("memory_turns", c.memory_turns);
    c.query_timeout = std::chrono::milliseconds(j.value("query_timeout_ms", static_cast<long long>(c.query_timeout.count())));
    c.prompt_char_limit = j.value("prompt_char_limit", c.prompt_char_limit);
    c.max_tokens = j.value("max_tokens", c.max_tokens);
    if (j.contains("reference_date") && j["reference_date"].is_string()) {
      c.reference_date = gtfs::Date::parse_iso(j["reference_date"].get<std::string>());
      if (!c.reference_date) throw ConfigError("reference_date must be YYYY-MM-DD");
    }
    if (c.k == 0) throw ConfigError("k must be positive");
    return c;
  }
};

inline const char* kCannotAnswer = "I don't know the answer to this question: I could not write a valid query for it.";
inline const char* kNoResults = "No results were found for this question.";

namespace detail {

inline std::string digest(std::string_view s, std::size_t n = 300) {
  if (s.size() <= n) return std::string(s);
  return std::string(s.substr(0, n)) + "...";
}

inline std::string result_csv(const db::Table& t, std::size_t max_rows) {
  std::string out;
  for (std::size_t i = 0; i < t.columns.size(); ++i) out += (i ? "," : "") + t.columns[i];
  out += "\n";
  for (std::size_t r = 0; r < t.rows.size() && r < max_rows; ++r) {
    for (std::size_t i = 0; i < t.rows[r].size(); ++i) out += (i ? "," : "") + db::to_text(t.rows[r][i]);
    out += "\n";
  }
  return out;
}

inline std::vector<std::string> numbers_in(const std::string& text) {
  static const std::regex num(R"((^|[^\w.])(-?\d+(?:\.\d+)?))");
  std::vector<std::string> out;
  for (std::sregex_iterator it(text.begin(), text.end(), num), end; it != end; ++it) out.push_back((*it)[2]);
  return out;
}

// A number in the answer is grounded if it equals a cell (textually or as the
// cell rounded to the same number of decimals), a count of result rows, or a
// number the user wrote.
inline bool grounded(const std::string& answer, const db::Table& rows, const std::string& question) {
  std::set<std::string> allowed;
  std::vector<double> numeric;
  for (const auto& row : rows.rows)
    for (const auto& v : row) {
      allowed.insert(db::to_text(v));
      for (const auto& n : numbers_in(db::to_text(v))) allowed.insert(n);
      if (auto d = db::as_number(v)) numeric.push_back(*d);
    }
  for (const auto& n : numbers_in(question)) allowed.insert(n);
  allowed.insert(std::to_string(rows.rows.size()));
  for (const auto& n : numbers_in(answer)) {
    if (allowed.count(n)) continue;
    auto dot = n.find('.');
    int decimals = dot == std::string::npos ? 0 : static_cast<int>(n.size() - dot - 1);
    double value = std::stod(n);
    double scale = std::pow(10.0, decimals);
    bool ok = false;
    for (double d : numeric)
      if (decimals > 0 && std::round(d * scale) / scale == value) ok = true;
    if (!ok) return false;
  }
  return true;
}

}  // namespace detail

// Deterministic answer text quoting only values present in the rows.
inline std::string fallback_answer(const db::Table& rows, std::size_t max_rows = 50) {
  if (rows.rows.empty()) return kNoResults;
  if (rows.rows.size() == 1 && rows.columns.size() == 1) {
    if (db::is_null(rows.rows[0][0])) return kNoResults;
    return "The answer is " + db::to_text(rows.rows[0][0]) + ".";
  }
  std::string out = "Here are the results:\n";
  for (std::size_t i = 0; i < rows.columns.size(); ++i) out += (i ? " | " : "") + rows.columns[i];
  out += "\n";
  for (std::size_t r = 0; r < rows.rows.size() && r < max_rows; ++r) {
    for (std::size_t i = 0; i < rows.rows[r].size(); ++i) out += (i ? " | " : "") + db::to_text(rows.rows[r][i]);
    out += "\n";
  }
  if (rows.rows.size() > max_rows) out += "(further rows omitted)\n";
  out.pop_back();
  return out;
}

// Explicit keywords decide; ambiguous wording ("show me route 18") is asked
// to the provider, and any provider failure means "no map".
inline bool classify_map_request(std::string_view question, provider::CompletionProvider* provider = nullptr) {
  std::string q = sql::to_lower(question);
  static const std::regex explicit_map(R"(\b(map|maps|draw|plot|mappa|disegna)\b)");
  static const std::regex ambiguous(R"(\b(show|display|visuali[sz]e|path|trace|where does)\b)");
  static const std::regex route_word(R"(\b(route|line|linea|bus)\b)");
  if (std::regex_search(q, explicit_map)) return true;
  if (!provider || !std::regex_search(q, ambiguous) || !std::regex_search(q, route_word)) return false;
  provider::CompletionRequest req;
  req.system_prompt =
      "<classification><task>Decide whether the user asks to see a route drawn on a map. Reply with yes or "
      "no.</task></classification>";
  req.messages.push_back({provider::Role::user, "Map request? " + std::string(question)});
  req.max_tokens = 5;
  try {
    std::string a = sql::to_lower(provider->complete(req));
    auto b = a.find_first_not_of(" \t\r\n\"'");
    return b != std::string::npos && a.compare(b, 3, "yes") == 0;
  } catch (const Error& e) {
    log::warn(std::string("map classification failed: ") + e.what());
    return false;
  }
}

// The fixed tool pipeline. Shared across sessions; callers serialize turns of
// one conversation.
class Agent {
 public:
  Agent(std::shared_ptr<db::ConnectionPool> pool, std::shared_ptr<const catalog::Catalog> cat,
        std::shared_ptr<const sql::Guard> guard, std::shared_ptr<const exemplars::ExemplarStore> store,
        provider::Providers providers, AgentConfig cfg = {})
      : pool_(std::move(pool)),
        catalog_(std::move(cat)),
        guard_(std::move(guard)),
        store_(std::move(store)),
        providers_(std::move(providers)),
        cfg_(cfg) {}

  const AgentConfig& config() const { return cfg_; }
  const provider::Providers& providers() const { return providers_; }
  gtfs::Date reference_date() const { return cfg_.reference_date ? *cfg_.reference_date : gtfs::Date::today(); }

  // Replaces the exemplar index (e.g. after a provider change).
  void set_store(std::shared_ptr<const exemplars::ExemplarStore> s) { std::atomic_store(&store_, std::move(s)); }

  // Generation prompt for a question, exemplars included.
  std::string build_prompt(const std::vector<exemplars::Scored>& ex) const {
    std::vector<catalog::PromptExemplar> pe;
    for (const auto& s : ex) pe.push_back({s.pair->question, s.pair->sql, s.similarity});
    auto doc = catalog::make_document(*catalog_, catalog::default_rules(reference_date()), std::move(pe));
    return catalog::render_prompt(doc, cfg_.prompt_char_limit);
  }

  AgentTurn handle_question(const Conversation& conv, const std::string& question) const {
    AgentTurn turn;
    turn.question = question;
    try {
      run(conv, turn);
    } catch (const std::exception& e) {
      // Totality: nothing escapes a turn.
      turn.answer.text = "Something went wrong while answering this question.";
      turn.answer.error = AnswerError{"INTERNAL_ERROR", e.what()};
      turn.answer.rows.reset();
    }
    return turn;
  }

  std::string synthesize_answer(const std::string& question, const std::string& sql, const db::Table& rows,
                                bool* used_fallback = nullptr) const {
    if (used_fallback) *used_fallback = true;
    if (rows.rows.empty()) return kNoResults;
    provider::CompletionRequest req;
    req.system_prompt =
        "<synthesis><task>Answer the user's question in plain language using only the query result. Never invent "
        "values. If the result is empty, say that no results were found.</task><sql>" +
        catalog::xml_escape(sql) + "</sql></synthesis>";
    std::string body = "Question: " + question + "\nResult:\n" + detail::result_csv(rows, cfg_.synthesis_rows);
    if (rows.rows.size() > cfg_.synthesis_rows)
      body += "(" + std::to_string(rows.rows.size()) + " rows in total, first " + std::to_string(cfg_.synthesis_rows) +
              " shown)\n";
    req.messages.push_back({provider::Role::user, body + "Answer:"});
    req.max_tokens = cfg_.max_tokens;
    try {
      if (!providers_.chat) throw ProviderUnavailable("no completion provider");
      std::string text = providers_.chat->complete(req);
      auto b = text.find_first_not_of(" \t\r\n");
      if (b != std::string::npos && detail::grounded(text, rows, question)) {
        if (used_fallback) *used_fallback = false;
        return text.substr(b, text.find_last_not_of(" \t\r\n") - b + 1);
      }
      log::warn("synthesis rejected: answer quotes values absent from the result");
    } catch (const Error& e) {
      log::warn(std::string("synthesis failed, using fallback: ") + e.what());
    }
    return fallback_answer(rows, cfg_.synthesis_rows);
  }

 private:
  template <typename F>
  auto timed(AgentTurn& turn, Tool tool, std::string input, F&& f) const {
    ToolInvocation inv{tool, detail::digest(input), {}, 0, true};
    auto start = std::chrono::steady_clock::now();
    auto finish = [&] {
      inv.duration_ms =
          std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - start).count();
    };
    try {
      auto result = f(inv);
      finish();
      turn.trace.push_back(inv);
      return result;
    } catch (const Error& e) {
      finish();
      inv.ok = false;
      inv.output_digest = detail::digest(std::string(e.code()) + ": " + e.what());
      turn.trace.push_back(inv);
      throw;
    }
  }

  void fail(AgentTurn& turn, std::string code, std::string message, std::string text) const {
    turn.answer.text = std::move(text);
    turn.answer.error = AnswerError{std::move(code), std::move(message)};
  }

  void run(const Conversation& conv, AgentTurn& turn) const {
    const std::string& question = turn.question;
    AnswerPayload& answer = turn.answer;
    const bool wants_map = classify_map_request(question, providers_.chat.get());

    // retrieve
    std::vector<exemplars::Scored> ex;
    auto store = std::atomic_load(&store_);
    try {
      ex = timed(turn, Tool::retrieve_examples, question, [&](ToolInvocation& inv) {
        if (!store || !providers_.embedder) throw EmptyStore("no exemplar store");
        auto r = store->top_k(question, *providers_.embedder, cfg_.k);
        for (const auto& s : r) inv.output_digest += (inv.output_digest.empty() ? "" : ",") + s.pair->id;
        return r;
      });
    } catch (const Error& e) {
      log::warn(std::string("exemplar retrieval failed: ") + e.what());
    }

    // generate
    provider::CompletionRequest req;
    req.system_prompt = build_prompt(ex);
    std::size_t first = conv.turns.size() > cfg_.memory_turns ? conv.turns.size() - cfg_.memory_turns : 0;
    for (std::size_t i = first; i < conv.turns.size(); ++i) {
      const auto& t = conv.turns[i];
      req.messages.push_back({provider::Role::user, t.question});
      req.messages.push_back({provider::Role::assistant, t.answer.generated_sql ? *t.answer.generated_sql : t.answer.text});
    }
    req.messages.push_back({provider::Role::user, question});
    req.temperature = 0;
    req.max_tokens = cfg_.max_tokens;
    std::string generated;
    try {
      generated = timed(turn, Tool::generate_sql, question, [&](ToolInvocation& inv) {
        if (!providers_.chat) throw ProviderUnavailable("no completion provider configured");
        auto sql = sql::extract_sql(providers_.chat->complete(req));
        inv.output_digest = detail::digest(sql);
        return sql;
      });
    } catch (const ContextOverflow& e) {
      return fail(turn, "CONTEXT_OVERFLOW", e.what(), "The question could not be processed: the prompt is too long.");
    } catch (const Error& e) {
      return fail(turn, "PROVIDER_UNAVAILABLE", e.what(), "The language model is not available right now.");
    }
    answer.generated_sql = generated;

    // guard (+ one model repair)
    auto lease = pool_->acquire();
    sql::QueryCandidate candidate{generated, sql::Origin::generated};
    bool cannot = false;
    timed(turn, Tool::guard, generated, [&](ToolInvocation& inv) {
      auto res = guard_->check(candidate, &*lease);
      sql::ValidationReport report = res.report;
      candidate = res.candidate;
      bool read_only_violation = report.has("NON_SELECT") || report.has("MULTI_STATEMENT") || report.has("EMPTY_QUERY");
      if (report.verdict == sql::Verdict::rejected && !read_only_violation && providers_.chat) {
        try {
          sql::ValidationReport repaired_report;
          candidate = guard_->llm_repair(candidate, report.diagnostics, *providers_.chat, &*lease, &repaired_report);
          repaired_report.applied_rules.insert(repaired_report.applied_rules.begin(), "LLM_REPAIR");
          repaired_report.applied_rules.insert(repaired_report.applied_rules.begin(), report.applied_rules.begin(),
                                               report.applied_rules.end());
          repaired_report.settle();
          report = repaired_report;
        } catch (const RepairFailed& e) {
          report.diagnostics.push_back({"REPAIR_FAILED", e.what(), {0, candidate.sql.size()}});
          report.settle();
        }
      }
      answer.guard = report;
      inv.output_digest = detail::digest(nlohmann::json(report).dump());
      cannot = report.verdict == sql::Verdict::rejected;
      inv.ok = !cannot;
      return 0;
    });
    if (cannot) {
      const auto& d = answer.guard->diagnostics.front();
      return fail(turn, "INVALID_QUERY", d.code + ": " + d.message, kCannotAnswer);
    }
    for (const auto& rule : answer.guard->applied_rules)
      answer.assumptions.push_back(rule == "LLM_REPAIR" ? "The generated query was corrected by a second model pass."
                                                        : "The generated query was corrected automatically (" + rule + ").");

    auto limited = sql::Guard::inject_limit(candidate, cfg_.row_limit);
    bool limit_injected = limited.sql != candidate.sql;

    // execute
    db::Table rows;
    try {
      rows = timed(turn, Tool::execute_sql, limited.sql, [&](ToolInvocation& inv) {
        auto t = lease->query(limited.sql, cfg_.query_timeout);
        inv.output_digest = std::to_string(t.rows.size()) + " rows";
        return t;
      });
    } catch (const QueryTimeout& e) {
      return fail(turn, "QUERY_TIMEOUT", e.what(), "The query took too long to run, so I cannot answer.");
    } catch (const Error& e) {
      return fail(turn, "EXECUTION_ERROR", e.what(), kCannotAnswer);
    }
    answer.sql = limited.sql;
    answer.rows = rows;
    std::string ref = reference_date().iso();
    if (limited.sql.find(ref) != std::string::npos)
      answer.assumptions.push_back("Only services active on the current date (" + ref + ") were considered.");
    if (limit_injected && rows.rows.size() >= static_cast<std::size_t>(cfg_.row_limit))
      answer.assumptions.push_back("Only the first " + std::to_string(cfg_.row_limit) + " rows were retrieved.");

    // synthesize
    answer.text = timed(turn, Tool::synthesize, question, [&](ToolInvocation& inv) {
      bool fallback = false;
      auto text = synthesize_answer(question, limited.sql, rows, &fallback);
      inv.output_digest = detail::digest((fallback ? "[fallback] " : "") + text);
      return text;
    });

    if (wants_map) build_map(turn, *lease, rows);
  }

  void build_map(AgentTurn& turn, const db::Connection& conn, const db::Table& rows) const {
    AnswerPayload& answer = turn.answer;
    std::string q = sql::to_lower(turn.question);
    try {
      timed(turn, Tool::build_map, turn.question, [&](ToolInvocation& inv) {
        auto col = [&](std::string_view name) -> int {
          for (std::size_t i = 0; i < rows.columns.size(); ++i)
            if (sql::to_lower(rows.columns[i]) == name) return static_cast<int>(i);
          return -1;
        };
        int ci_route = col("route_id"), ci_agency = col("agency_id");
        std::string route_id;
        std::string agency_id;
        if (ci_route >= 0 && !rows.rows.empty()) {
          route_id = db::to_text(rows.rows[0][ci_route]);
          if (ci_agency >= 0) agency_id = db::to_text(rows.rows[0][ci_agency]);
        } else {
          static const std::regex named(R"(\b(?:route|line|linea)\s+([A-Za-z0-9_]+))");
          std::smatch m;
          if (!std::regex_search(q, m, named)) throw UnknownRoute("no route found in the result or the question");
          route_id = m[1];
        }
        if (agency_id.empty()) {
          auto refs = maps::find_routes(conn, route_id);
          if (refs.empty()) throw UnknownRoute("unknown route " + route_id);
          agency_id = refs.front().agency_id;
          if (refs.size() > 1)
            answer.assumptions.push_back("Route " + route_id + " exists for several agencies; the map shows the one of " +
                                         agency_id + ".");
        }
        std::optional<gtfs::Direction> dir;
        static const std::regex inbound(R"(\b(inbound|return|ritorno|back)\b)");
        static const std::regex outbound(R"(\b(outbound|andata)\b)");
        if (std::regex_search(q, inbound)) dir = gtfs::Direction::inbound;
        else if (std::regex_search(q, outbound)) dir = gtfs::Direction::outbound;
        auto g = maps::fetch_route_geometry(conn, {agency_id, route_id}, dir);
        if (!dir)
          answer.assumptions.push_back("The map shows the " +
                                       std::string(g.direction == "ritorno" ? "inbound (ritorno)" : "outbound (andata)") +
                                       " direction.");
        answer.map = maps::to_geo_document(g);
        inv.output_digest = agency_id + "/" + route_id + " shape " + g.shape_id + ", " +
                            std::to_string(g.shape_points.size()) + " points, " + std::to_string(g.stops.size()) + " stops";
        return 0;
      });
    } catch (const Error& e) {
      answer.text += "\nNo map could be drawn: " + std::string(e.what());
    }
  }

  std::shared_ptr<db::ConnectionPool> pool_;
  std::shared_ptr<const catalog::Catalog> catalog_;
  std::shared_ptr<const sql::Guard> guard_;
  std::shared_ptr<const exemplars::ExemplarStore> store_;
  provider::Providers providers_;
  AgentConfig cfg_;
};

}  // namespace transitq::agent
