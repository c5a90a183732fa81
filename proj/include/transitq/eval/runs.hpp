#pragma once

#include <atomic>
#include <chrono>
#include <filesystem>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "transitq/agent.hpp"
#include "transitq/eval/compare.hpp"
#include "transitq/eval/questions.hpp"
#include "transitq/log.hpp"
#include "transitq/sqlite.hpp"

namespace transitq::eval {

struct RunRecord {
  std::string question_id;
  int attempt = 1;
  std::string status;  // complete | http_error | unreachable
  std::optional<std::string> generated_sql;
  std::optional<std::string> sql;
  nlohmann::json guard_report;  // null when the pipeline stopped earlier
  nlohmann::json result;        // {columns, data} or null
  std::string answer_text;
  nlohmann::json error;  // {code, message} or null
  std::string session_id;
  std::string started_at;
  std::string finished_at;

  bool complete() const { return status == "complete"; }
};

// Everything but the session id and timestamps, which differ between reruns.
inline nlohmann::json canonical_json(const RunRecord& r) {
  auto opt = [](const std::optional<std::string>& v) { return v ? nlohmann::json(*v) : nlohmann::json(); };
  return {{"question_id", r.question_id}, {"attempt", r.attempt},      {"status", r.status},
          {"generated_sql", opt(r.generated_sql)}, {"sql", opt(r.sql)}, {"guard_report", r.guard_report},
          {"result", r.result},           {"answer_text", r.answer_text}, {"error", r.error}};
}

inline std::string utc_timestamp() {
  auto now = std::chrono::floor<std::chrono::milliseconds>(std::chrono::system_clock::now());
  auto day = std::chrono::floor<std::chrono::days>(now);
  std::chrono::hh_mm_ss tod{now - day};
  auto date = gtfs::Date::from_ymd(std::chrono::year_month_day{day});
  char buf[40];
  std::snprintf(buf, sizeof buf, "%sT%02d:%02d:%02d.%03dZ", date.iso().c_str(), static_cast<int>(tod.hours().count()),
                static_cast<int>(tod.minutes().count()), static_cast<int>(tod.seconds().count()),
                static_cast<int>(tod.subseconds().count()));
  return buf;
}

inline const char* kRunStoreSchema = R"sql(
CREATE TABLE IF NOT EXISTS questions (
  position INTEGER NOT NULL,
  id TEXT NOT NULL PRIMARY KEY,
  template_id TEXT NOT NULL,
  text TEXT NOT NULL,
  bindings TEXT NOT NULL,
  riders TEXT NOT NULL,
  injected_invalid INTEGER NOT NULL,
  paraphrase_seed TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS gold (
  question_id TEXT NOT NULL PRIMARY KEY REFERENCES questions (id),
  gold_sql TEXT NOT NULL,
  expected_kind TEXT NOT NULL,
  result TEXT
);
CREATE TABLE IF NOT EXISTS runs (
  question_id TEXT NOT NULL REFERENCES questions (id),
  attempt INTEGER NOT NULL,
  status TEXT NOT NULL,
  session_id TEXT,
  generated_sql TEXT,
  sql TEXT,
  guard_report TEXT,
  result TEXT,
  answer_text TEXT,
  error TEXT,
  started_at TEXT,
  finished_at TEXT,
  PRIMARY KEY (question_id, attempt)
);
CREATE TABLE IF NOT EXISTS outcomes (
  question_id TEXT NOT NULL,
  attempt INTEGER NOT NULL,
  category TEXT NOT NULL,
  fp_rate REAL,
  fn_rate REAL,
  scalar_delta REAL,
  PRIMARY KEY (question_id, attempt),
  FOREIGN KEY (question_id, attempt) REFERENCES runs (question_id, attempt)
);
CREATE TABLE IF NOT EXISTS meta (
  key TEXT NOT NULL PRIMARY KEY,
  value TEXT
);
)sql";

// Evaluation results database, separate from the transit data. Safe to share
// between threads.
class RunStore {
 public:
  explicit RunStore(const std::filesystem::path& path) : conn_(path, db::Connection::Mode::create) {
    conn_.exec("PRAGMA busy_timeout = 5000");
    conn_.exec(kRunStoreSchema);
  }

  // Replaces the question set; earlier runs and outcomes are dropped.
  void save_questions(const std::vector<GeneratedQuestion>& qs, const std::vector<GoldEntry>& gold) {
    std::lock_guard g(mu_);
    db::Transaction tx(conn_);
    conn_.exec("DELETE FROM outcomes; DELETE FROM runs; DELETE FROM gold; DELETE FROM questions; DELETE FROM meta");
    auto ins = conn_.prepare("INSERT INTO questions VALUES (?, ?, ?, ?, ?, ?, ?, ?)");
    for (std::size_t i = 0; i < qs.size(); ++i) {
      const auto& q = qs[i];
      ins.run(static_cast<std::int64_t>(i), q.id, q.template_id, q.text, nlohmann::json(q.bindings).dump(),
              nlohmann::json(q.riders).dump(), static_cast<std::int64_t>(q.injected_invalid),
              std::to_string(q.paraphrase_seed));
    }
    auto ins_gold = conn_.prepare("INSERT INTO gold (question_id, gold_sql, expected_kind) VALUES (?, ?, ?)");
    for (const auto& e : gold) ins_gold.run(e.question_id, e.gold_sql, std::string(to_string(e.expected_kind)));
    tx.commit();
  }

  std::vector<GeneratedQuestion> questions() const {
    std::lock_guard g(mu_);
    auto s = conn_.prepare(
        "SELECT id, template_id, text, bindings, riders, injected_invalid, paraphrase_seed FROM questions ORDER BY position");
    std::vector<GeneratedQuestion> out;
    while (s.step()) {
      GeneratedQuestion q;
      q.id = s.text(0);
      q.template_id = s.text(1);
      q.text = s.text(2);
      q.bindings = nlohmann::json::parse(s.text(3)).get<std::map<std::string, std::string>>();
      q.riders = nlohmann::json::parse(s.text(4)).get<std::set<std::string>>();
      q.injected_invalid = s.integer(5) != 0;
      q.paraphrase_seed = std::stoull(s.text(6));
      out.push_back(std::move(q));
    }
    return out;
  }

  std::vector<GoldEntry> gold() const {
    std::lock_guard g(mu_);
    auto s = conn_.prepare(
        "SELECT g.question_id, g.gold_sql, g.expected_kind FROM gold g JOIN questions q ON q.id = g.question_id "
        "ORDER BY q.position");
    std::vector<GoldEntry> out;
    while (s.step()) out.push_back({s.text(0), s.text(1), parse_answer_kind(s.text(2))});
    return out;
  }

  void save_gold_result(const std::string& question_id, const db::Table& t) {
    std::lock_guard g(mu_);
    conn_.prepare("UPDATE gold SET result = ? WHERE question_id = ?").run(agent::table_json(t).dump(), question_id);
  }

  void clear_runs() {
    std::lock_guard g(mu_);
    conn_.exec("DELETE FROM outcomes; DELETE FROM runs; DELETE FROM meta WHERE key = 'partial'");
  }

  void save_run(const RunRecord& r) {
    std::lock_guard g(mu_);
    auto opt = [](const std::optional<std::string>& v) { return v ? db::Value(*v) : db::Value(db::Null{}); };
    auto js = [](const nlohmann::json& j) { return j.is_null() ? db::Value(db::Null{}) : db::Value(j.dump()); };
    conn_.prepare("INSERT OR REPLACE INTO runs VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?)")
        .run(r.question_id, static_cast<std::int64_t>(r.attempt), r.status, r.session_id, opt(r.generated_sql),
             opt(r.sql), js(r.guard_report), js(r.result), r.answer_text, js(r.error), r.started_at, r.finished_at);
  }

  std::vector<RunRecord> runs() const {
    std::lock_guard g(mu_);
    auto s = conn_.prepare(
        "SELECT r.question_id, r.attempt, r.status, r.session_id, r.generated_sql, r.sql, r.guard_report, r.result, "
        "r.answer_text, r.error, r.started_at, r.finished_at FROM runs r JOIN questions q ON q.id = r.question_id "
        "ORDER BY q.position, r.attempt");
    std::vector<RunRecord> out;
    auto opt = [&](int i) { return db::is_null(s.column(i)) ? std::optional<std::string>() : s.text(i); };
    auto js = [&](int i) { return db::is_null(s.column(i)) ? nlohmann::json() : nlohmann::json::parse(s.text(i)); };
    while (s.step()) {
      RunRecord r;
      r.question_id = s.text(0);
      r.attempt = static_cast<int>(s.integer(1));
      r.status = s.text(2);
      r.session_id = s.text(3);
      r.generated_sql = opt(4);
      r.sql = opt(5);
      r.guard_report = js(6);
      r.result = js(7);
      r.answer_text = s.text(8);
      r.error = js(9);
      r.started_at = s.text(10);
      r.finished_at = s.text(11);
      out.push_back(std::move(r));
    }
    return out;
  }

  void set_partial(bool partial) {
    std::lock_guard g(mu_);
    conn_.prepare("INSERT OR REPLACE INTO meta VALUES ('partial', ?)").run(std::string(partial ? "1" : "0"));
  }

  bool partial() const {
    std::lock_guard g(mu_);
    auto s = conn_.prepare("SELECT value FROM meta WHERE key = 'partial'");
    return s.step() && s.text(0) == "1";
  }

  void save_outcome(const GradedOutcome& o) {
    std::lock_guard g(mu_);
    auto opt = [](const std::optional<double>& v) { return v ? db::Value(*v) : db::Value(db::Null{}); };
    conn_.prepare("INSERT OR REPLACE INTO outcomes VALUES (?, ?, ?, ?, ?, ?)")
        .run(o.question_id, static_cast<std::int64_t>(o.attempt), std::string(to_string(o.outcome.category)),
             opt(o.outcome.fp_rate), opt(o.outcome.fn_rate), opt(o.outcome.scalar_delta));
  }

  std::vector<GradedOutcome> outcomes() const {
    std::lock_guard g(mu_);
    auto s = conn_.prepare(
        "SELECT o.question_id, q.template_id, o.attempt, o.category, o.fp_rate, o.fn_rate, o.scalar_delta "
        "FROM outcomes o JOIN questions q ON q.id = o.question_id ORDER BY q.position, o.attempt");
    std::vector<GradedOutcome> out;
    auto opt = [&](int i) { return db::is_null(s.column(i)) ? std::optional<double>() : s.real(i); };
    while (s.step())
      out.push_back({s.text(0), s.text(1), static_cast<int>(s.integer(2)),
                     {parse_category(s.text(3)), opt(4), opt(5), opt(6)}});
    return out;
  }

 private:
  mutable std::mutex mu_;
  db::Connection conn_;
};

// Sends one chat request and returns {status, body}. Throws
// EndpointUnreachable when the service cannot be contacted at all.
struct ChatReply {
  int status = 0;
  nlohmann::json body;
};
using ChatTransport = std::function<ChatReply(const nlohmann::json& request)>;

// POSTs to <endpoint>/api/chat, e.g. http://127.0.0.1:8080.
inline ChatTransport http_transport(const std::string& endpoint,
                                    std::chrono::seconds timeout = std::chrono::seconds(60)) {
  return [endpoint, timeout](const nlohmann::json& request) {
    httplib::Client cli(endpoint);
    cli.set_connection_timeout(std::chrono::seconds(5));
    cli.set_read_timeout(timeout);
    cli.set_write_timeout(timeout);
    auto res = cli.Post("/api/chat", request.dump(), "application/json");
    if (!res) throw EndpointUnreachable("cannot reach " + endpoint + ": " + httplib::to_string(res.error()));
    ChatReply reply{res->status, nlohmann::json()};
    try {
      reply.body = nlohmann::json::parse(res->body);
    } catch (const nlohmann::json::exception&) {
      reply.body = {{"error", {{"code", "BAD_RESPONSE"}, {"message", res->body.substr(0, 200)}}}};
    }
    return reply;
  };
}

struct SuiteOptions {
  int repeats = 1;
  std::map<std::string, int> repeats_per_question;  // overrides `repeats`
  int parallelism = 1;
};

struct SuiteResult {
  std::vector<RunRecord> records;
  bool partial = false;
};

namespace detail {

inline RunRecord record_from_reply(const std::string& question_id, int attempt, const ChatReply& reply) {
  RunRecord r;
  r.question_id = question_id;
  r.attempt = attempt;
  const auto& b = reply.body;
  r.status = reply.status == 200 ? "complete" : "http_error";
  r.session_id = b.value("session_id", "");
  if (b.contains("generated_sql") && b["generated_sql"].is_string()) r.generated_sql = b["generated_sql"].get<std::string>();
  if (b.contains("sql") && b["sql"].is_string()) r.sql = b["sql"].get<std::string>();
  r.guard_report = b.value("guard", nlohmann::json());
  r.result = b.value("rows", nlohmann::json());
  r.answer_text = b.value("answer_text", "");
  r.error = b.value("error", nlohmann::json());
  if (reply.status != 200 && r.error.is_null())
    r.error = {{"code", "HTTP_" + std::to_string(reply.status)}, {"message", "request failed"}};
  return r;
}

}  // namespace detail

// Asks every question `repeats` times, each time in a fresh session, and
// records every attempt. An unreachable endpoint stops the suite; what was
// collected so far is kept and the result is flagged partial.
inline SuiteResult run_suite(const std::vector<GeneratedQuestion>& questions, const ChatTransport& transport,
                             const SuiteOptions& opts, RunStore* store = nullptr) {
  if (opts.repeats < 1) throw ConfigError("repeats must be a positive integer");
  struct Job {
    const GeneratedQuestion* q;
    int attempt;
  };
  std::vector<Job> jobs;
  for (const auto& q : questions) {
    auto it = opts.repeats_per_question.find(q.id);
    int n = it == opts.repeats_per_question.end() ? opts.repeats : it->second;
    for (int a = 1; a <= n; ++a) jobs.push_back({&q, a});
  }
  std::vector<std::optional<RunRecord>> slots(jobs.size());
  std::atomic<std::size_t> next{0};
  std::atomic<bool> unreachable{false};
  auto worker = [&] {
    for (std::size_t i; !unreachable && (i = next++) < jobs.size();) {
      const auto& job = jobs[i];
      RunRecord r;
      std::string started = utc_timestamp();
      try {
        r = detail::record_from_reply(job.q->id, job.attempt, transport({{"message", job.q->text}}));
      } catch (const EndpointUnreachable& e) {
        unreachable = true;
        r.question_id = job.q->id;
        r.attempt = job.attempt;
        r.status = "unreachable";
        r.error = {{"code", e.code()}, {"message", e.what()}};
        log::warn(std::string("suite aborted: ") + e.what());
      }
      r.started_at = started;
      r.finished_at = utc_timestamp();
      if (store) store->save_run(r);
      slots[i] = std::move(r);
    }
  };
  int n_threads = std::max(1, opts.parallelism);
  if (n_threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < n_threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  SuiteResult out;
  out.partial = unreachable;
  for (auto& s : slots)
    if (s) out.records.push_back(std::move(*s));
  if (store) store->set_partial(out.partial);
  return out;
}

// Grades one attempt against the gold result.
inline ComparisonOutcome grade_run(const GoldEntry& gold, const db::Table& gold_rows, const RunRecord& run,
                                   double tolerance = kDefaultScalarTolerance) {
  if (!run.complete() || !run.error.is_null() || run.result.is_null()) return {Category::syntax_error};
  db::Table generated = agent::table_from_json(run.result);
  if (gold.expected_kind == AnswerKind::entity_list) return compare_result_sets(gold_rows, generated);
  bool wrong_shape = false;
  auto value = scalar_of(generated, &wrong_shape);
  if (wrong_shape) return {Category::wrong_shape};
  auto gold_value = scalar_of(gold_rows);
  return compare_scalar(gold_value.value_or(0.0), value, tolerance);
}

// Executes the gold queries on the transit database and grades every stored
// run; outcomes are written back to the store.
inline std::vector<GradedOutcome> grade_store(RunStore& store, const db::Connection& transit,
                                              double tolerance = kDefaultScalarTolerance) {
  std::map<std::string, std::pair<GoldEntry, db::Table>> gold;
  for (const auto& g : store.gold()) {
    auto rows = transit.query(g.gold_sql);
    store.save_gold_result(g.question_id, rows);
    gold.emplace(g.question_id, std::make_pair(g, std::move(rows)));
  }
  std::map<std::string, std::string> template_of;
  for (const auto& q : store.questions()) template_of[q.id] = q.template_id;
  std::vector<GradedOutcome> out;
  for (const auto& r : store.runs()) {
    auto it = gold.find(r.question_id);
    if (it == gold.end()) throw ConfigError("no gold query for question " + r.question_id);
    GradedOutcome o{r.question_id, template_of[r.question_id], r.attempt,
                    grade_run(it->second.first, it->second.second, r, tolerance)};
    store.save_outcome(o);
    out.push_back(std::move(o));
  }
  return out;
}

}  // namespace transitq::eval
