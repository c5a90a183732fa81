#pragma once

#include <atomic>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <regex>
#include <string>
#include <thread>

#include <httplib.h>
#include <json.hpp>

#include "transitq/agent.hpp"
#include "transitq/catalog.hpp"
#include "transitq/eval/compare.hpp"
#include "transitq/eval/runs.hpp"
#include "transitq/exemplars.hpp"
#include "transitq/log.hpp"
#include "transitq/provider.hpp"
#include "transitq/sql/guard.hpp"
#include "transitq/sqlite.hpp"

#ifndef TRANSITQ_VERSION
#define TRANSITQ_VERSION "dev"
#endif

namespace transitq::service {

inline constexpr std::size_t kMaxMessageChars = 4000;

struct ServiceConfig {
  std::filesystem::path run_store;  // sessions and maps; empty keeps them in memory only
  std::chrono::seconds session_ttl{24 * 3600};
  int max_concurrent_requests = 16;
  std::chrono::seconds request_timeout{60};
  std::string cors_origin = "*";
};

// The whole deployment configuration. Relative paths are resolved against
// the directory of the config file.
struct AppConfig {
  nlohmann::json provider = {{"kind", "scripted"}};
  agent::AgentConfig agent;
  sql::GuardOptions guard;
  std::filesystem::path annotations;
  std::filesystem::path exemplars;
  std::optional<std::filesystem::path> exemplar_index;
  ServiceConfig service;
  nlohmann::json eval = nlohmann::json::object();
  std::filesystem::path base_dir;

  static AppConfig from_json(const nlohmann::json& j, const std::filesystem::path& base_dir) {
    AppConfig c;
    c.base_dir = base_dir;
    auto resolve = [&](const std::string& p) {
      std::filesystem::path path(p);
      return path.is_relative() ? base_dir / path : path;
    };
    try {
      if (j.contains("provider")) c.provider = j["provider"];
      if (j.contains("agent")) c.agent = agent::AgentConfig::from_json(j["agent"]);
      if (j.contains("guard")) {
        const auto& g = j["guard"];
        c.guard.alias_qualifier_rule = g.value("alias_qualifier", c.guard.alias_qualifier_rule);
        c.guard.direction_literal_rule = g.value("direction_literal", c.guard.direction_literal_rule);
        c.guard.quote_text_literal_rule = g.value("quote_text_literal", c.guard.quote_text_literal_rule);
        c.guard.max_repair_rounds = g.value("max_repair_rounds", c.guard.max_repair_rounds);
      }
      c.annotations = resolve(j.value("annotations", "annotations.txt"));
      c.exemplars = resolve(j.value("exemplars", "exemplars.json"));
      if (j.contains("exemplar_index")) c.exemplar_index = resolve(j["exemplar_index"].get<std::string>());
      if (j.contains("service")) {
        const auto& s = j["service"];
        if (s.contains("run_store")) c.service.run_store = resolve(s["run_store"].get<std::string>());
        c.service.session_ttl = std::chrono::seconds(static_cast<std::int64_t>(s.value("session_ttl_hours", 24.0) * 3600));
        c.service.max_concurrent_requests = s.value("max_concurrent_requests", c.service.max_concurrent_requests);
        c.service.request_timeout = std::chrono::seconds(s.value("request_timeout_s", 60));
        c.service.cors_origin = s.value("cors_origin", c.service.cors_origin);
      }
      if (j.contains("eval")) c.eval = j["eval"];
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("invalid configuration: ") + e.what());
    }
    return c;
  }

  static AppConfig load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw MissingFile("cannot read configuration " + path.string());
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(path.string() + ": " + e.what());
    }
    return from_json(j, std::filesystem::absolute(path).parent_path());
  }
};

// Default location of the exemplar embedding index for a database.
inline std::filesystem::path default_index_path(const std::filesystem::path& db) {
  return db.string() + ".exemplars.json";
}

namespace detail {

inline std::string random_id() {
  static std::mutex mu;
  static std::mt19937_64 rng{std::random_device{}()};
  std::lock_guard g(mu);
  char buf[33];
  std::snprintf(buf, sizeof buf, "%016llx%016llx", static_cast<unsigned long long>(rng()),
                static_cast<unsigned long long>(rng()));
  return buf;
}

inline std::size_t utf8_length(std::string_view s) {
  std::size_t n = 0;
  for (unsigned char c : s)
    if ((c & 0xC0) != 0x80) ++n;
  return n;
}

inline bool blank(std::string_view s) {
  for (unsigned char c : s)
    if (!std::isspace(c)) return false;
  return true;
}

inline std::int64_t epoch_seconds(std::chrono::system_clock::time_point t) {
  return std::chrono::duration_cast<std::chrono::seconds>(t.time_since_epoch()).count();
}

// The parts of a stored turn the agent's memory needs.
inline agent::AgentTurn turn_from_json(const nlohmann::json& j) {
  agent::AgentTurn t;
  t.question = j.value("question", "");
  const auto& a = j.value("answer", nlohmann::json::object());
  t.answer.text = a.value("text", "");
  if (a.contains("generated_sql") && a["generated_sql"].is_string())
    t.answer.generated_sql = a["generated_sql"].get<std::string>();
  if (a.contains("sql") && a["sql"].is_string()) t.answer.sql = a["sql"].get<std::string>();
  return t;
}

}  // namespace detail

// Conversations and stored maps. Sessions idle for longer than the TTL start
// over. Persisted in the run-store database when one is configured.
class SessionStore {
 public:
  struct Session {
    std::mutex mu;  // serializes turns of one session
    agent::Conversation conversation;
    std::atomic<std::int64_t> last_active{0};  // epoch seconds
  };

  SessionStore(const std::filesystem::path& path, std::chrono::seconds ttl) : ttl_(ttl) {
    if (path.empty()) return;
    conn_.emplace(path, db::Connection::Mode::create);
    conn_->exec("PRAGMA busy_timeout = 5000");
    conn_->exec(
        "CREATE TABLE IF NOT EXISTS sessions (session_id TEXT NOT NULL PRIMARY KEY, created_at INTEGER NOT NULL, "
        "last_active INTEGER NOT NULL, turns TEXT NOT NULL);"
        "CREATE TABLE IF NOT EXISTS maps (map_id TEXT NOT NULL PRIMARY KEY, session_id TEXT, created_at INTEGER NOT "
        "NULL, document TEXT NOT NULL);");
  }

  // Existing live session, or a fresh one under `id` (a new id when empty).
  std::shared_ptr<Session> open(std::string id) {
    auto now = std::chrono::system_clock::now();
    std::lock_guard g(mu_);
    if (id.empty()) id = detail::random_id();
    const std::int64_t cutoff = detail::epoch_seconds(now - ttl_);
    auto it = live_.find(id);
    if (it != live_.end()) {
      if (it->second->last_active >= cutoff) {
        it->second->last_active = detail::epoch_seconds(now);
        return it->second;
      }
      live_.erase(it);
    }
    auto s = std::make_shared<Session>();
    s->conversation.session_id = id;
    s->conversation.created_at = now;
    s->last_active = detail::epoch_seconds(now);
    if (conn_) {
      auto q = conn_->prepare("SELECT created_at, last_active, turns FROM sessions WHERE session_id = ?");
      q.bind_all(id);
      if (q.step()) {
        if (q.integer(1) >= cutoff) {
          s->conversation.created_at = std::chrono::system_clock::time_point(std::chrono::seconds(q.integer(0)));
          for (const auto& t : nlohmann::json::parse(q.text(2))) s->conversation.turns.push_back(detail::turn_from_json(t));
        }
      }
      auto purge = conn_->prepare("DELETE FROM sessions WHERE last_active < ?");
      purge.run(cutoff);
    }
    live_[id] = s;
    return s;
  }

  // Appends a turn; the caller holds the session's mutex.
  void append(Session& s, const agent::AgentTurn& turn) {
    s.conversation.turns.push_back(turn);
    s.last_active = detail::epoch_seconds(std::chrono::system_clock::now());
    if (!conn_) return;
    nlohmann::json turns = nlohmann::json::array();
    for (const auto& t : s.conversation.turns) turns.push_back(agent::to_json(t));
    std::lock_guard g(mu_);
    conn_->prepare("INSERT OR REPLACE INTO sessions VALUES (?, ?, ?, ?)")
        .run(s.conversation.session_id, detail::epoch_seconds(s.conversation.created_at),
             s.last_active.load(), turns.dump());
  }

  std::string store_map(const std::string& session_id, const nlohmann::json& doc) {
    std::string id = detail::random_id();
    std::lock_guard g(mu_);
    if (conn_)
      conn_->prepare("INSERT INTO maps VALUES (?, ?, ?, ?)")
          .run(id, session_id, detail::epoch_seconds(std::chrono::system_clock::now()), doc.dump());
    else
      maps_[id] = doc;
    return id;
  }

  std::optional<nlohmann::json> map(const std::string& id) const {
    std::lock_guard g(mu_);
    if (!conn_) {
      auto it = maps_.find(id);
      if (it == maps_.end()) return std::nullopt;
      return it->second;
    }
    auto q = conn_->prepare("SELECT document FROM maps WHERE map_id = ?");
    q.bind_all(id);
    if (!q.step()) return std::nullopt;
    return nlohmann::json::parse(q.text(0));
  }

 private:
  std::chrono::seconds ttl_;
  mutable std::mutex mu_;
  std::optional<db::Connection> conn_;
  std::map<std::string, std::shared_ptr<Session>> live_;
  std::map<std::string, nlohmann::json> maps_;
};

struct Reply {
  int status = 200;
  nlohmann::json body;
};

// The HTTP facade over the agent.
class Service {
 public:
  Service(std::filesystem::path db_path, std::shared_ptr<const agent::Agent> agent, ServiceConfig cfg = {})
      : db_path_(std::move(db_path)),
        agent_(std::move(agent)),
        cfg_(std::move(cfg)),
        sessions_(cfg_.run_store, cfg_.session_ttl) {}

  // Wires catalog, guard, exemplars, providers and agent from configuration.
  static std::unique_ptr<Service> create(const std::filesystem::path& db_path, const AppConfig& cfg) {
    if (!std::filesystem::exists(db_path)) throw MissingFile("database not found: " + db_path.string());
    auto pool = std::make_shared<db::ConnectionPool>(db_path, std::max(2, cfg.service.max_concurrent_requests));
    auto lease = pool->acquire();
    auto notes = std::filesystem::exists(cfg.annotations) ? catalog::Annotations::load(cfg.annotations)
                                                          : catalog::Annotations{};
    auto cat = std::make_shared<catalog::Catalog>(catalog::Catalog::describe(*lease, notes));
    for (const auto& w : cat->warnings()) log::warn("catalog: " + w.message);
    auto guard = std::make_shared<sql::Guard>(sql::SchemaInfo::introspect(*lease), cfg.guard);
    auto providers = provider::make_providers(cfg.provider, cfg.base_dir);
    std::shared_ptr<exemplars::ExemplarStore> store;
    if (std::filesystem::exists(cfg.exemplars)) {
      try {
        auto pairs = exemplars::load_exemplars(cfg.exemplars, *guard, &*lease);
        nlohmann::json cached;
        auto index = cfg.exemplar_index.value_or(default_index_path(db_path));
        if (std::ifstream in(index); in) {
          try {
            cached = nlohmann::json::parse(in);
          } catch (const nlohmann::json::exception&) {
            log::warn("ignoring unreadable exemplar index " + index.string());
          }
        }
        store = std::make_shared<exemplars::ExemplarStore>(std::move(pairs), *providers.embedder,
                                                           cached.is_null() ? nullptr : &cached);
      } catch (const Error& e) {
        log::warn(std::string("exemplars unavailable: ") + e.what());
      }
    }
    auto ag = std::make_shared<agent::Agent>(pool, cat, guard, store, providers, cfg.agent);
    return std::make_unique<Service>(db_path, ag, cfg.service);
  }

  const agent::Agent& agent() const { return *agent_; }

  Reply health() const {
    std::string db = "ok";
    try {
      db::Connection c(db_path_, db::Connection::Mode::read_only);
      c.query("SELECT count(*) FROM sqlite_master");
    } catch (const Error&) {
      db = "error";
    }
    const auto& p = agent_->providers();
    std::string prov = !p.chat || !p.embedder ? "unconfigured" : p.chat->configured() ? "ok" : "unconfigured";
    return {200, {{"db", db}, {"provider", prov}, {"version", TRANSITQ_VERSION}}};
  }

  Reply chat(const std::string& body) {
    nlohmann::json req;
    try {
      req = nlohmann::json::parse(body);
    } catch (const nlohmann::json::exception&) {
      return bad_request("request body is not valid JSON");
    }
    if (!req.is_object() || !req.contains("message") || !req["message"].is_string())
      return bad_request("message must be a string");
    std::string message = req["message"].get<std::string>();
    if (detail::blank(message)) return bad_request("message must not be empty");
    if (detail::utf8_length(message) > kMaxMessageChars)
      return bad_request("message is longer than " + std::to_string(kMaxMessageChars) + " characters");
    std::string session_id;
    if (req.contains("session_id") && !req["session_id"].is_null()) {
      if (!req["session_id"].is_string()) return bad_request("session_id must be a string");
      session_id = req["session_id"].get<std::string>();
      static const std::regex valid("[A-Za-z0-9_-]{1,64}");
      if (!std::regex_match(session_id, valid)) return bad_request("session_id has an invalid format");
    }
    if (!agent_->providers().configured())
      return {503, error_body(session_id, "PROVIDER_UNAVAILABLE", "no language model provider is configured")};

    struct Slot {
      std::atomic<int>& n;
      ~Slot() { --n; }
    } slot{in_flight_};
    if (++in_flight_ > cfg_.max_concurrent_requests)
      return {503, error_body(session_id, "BUSY", "too many concurrent requests")};

    auto session = sessions_.open(session_id);
    std::lock_guard g(session->mu);
    auto turn = agent_->handle_question(session->conversation, message);
    auto& a = turn.answer;
    if (a.map) a.map_id = sessions_.store_map(session->conversation.session_id, *a.map);
    bool provider_down = a.error && a.error->code == "PROVIDER_UNAVAILABLE";
    if (!provider_down) sessions_.append(*session, turn);
    return {provider_down ? 503 : 200, response_body(session->conversation.session_id, a)};
  }

  Reply map(const std::string& id) const {
    auto doc = sessions_.map(id);
    if (!doc) return {404, {{"error", {{"code", "NOT_FOUND"}, {"message", "unknown map id " + id}}}}};
    return {200, *doc};
  }

  // Stateless grading helper: {"gold": table|number, "generated": table|number|null}.
  Reply compare(const std::string& body) const {
    try {
      auto j = nlohmann::json::parse(body);
      const auto& gold = j.at("gold");
      const auto& gen = j.at("generated");
      eval::ComparisonOutcome o;
      if (gold.is_number()) {
        std::optional<double> g;
        if (gen.is_number()) g = gen.get<double>();
        o = eval::compare_scalar(gold.get<double>(), g, j.value("tolerance", eval::kDefaultScalarTolerance));
      } else {
        o = eval::compare_result_sets(agent::table_from_json(gold), agent::table_from_json(gen));
      }
      return {200, eval::to_json(o)};
    } catch (const std::exception& e) {
      return bad_request(std::string("invalid comparison request: ") + e.what());
    }
  }

  // Registers the routes and CORS handling on `svr`.
  void mount(httplib::Server& svr) {
    auto send = [this](httplib::Response& res, const Reply& r) {
      res.status = r.status;
      res.set_content(r.body.dump(), "application/json; charset=utf-8");
    };
    svr.set_post_routing_handler([this](const httplib::Request&, httplib::Response& res) {
      res.set_header("Access-Control-Allow-Origin", cfg_.cors_origin);
      res.set_header("Vary", "Origin");
    });
    svr.Options(R"(/api/.*)", [](const httplib::Request&, httplib::Response& res) {
      res.status = 204;
      res.set_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS");
      res.set_header("Access-Control-Allow-Headers", "Content-Type");
      res.set_header("Access-Control-Max-Age", "600");
    });
    svr.Post("/api/chat", [this, send](const httplib::Request& req, httplib::Response& res) { send(res, chat(req.body)); });
    svr.Get(R"(/api/maps/([A-Za-z0-9_-]+))",
            [this, send](const httplib::Request& req, httplib::Response& res) { send(res, map(req.matches[1])); });
    svr.Get("/api/health", [this, send](const httplib::Request&, httplib::Response& res) { send(res, health()); });
    svr.Post("/api/eval/compare",
             [this, send](const httplib::Request& req, httplib::Response& res) { send(res, compare(req.body)); });
    svr.set_error_handler([](const httplib::Request&, httplib::Response& res) {
      if (!res.body.empty()) return;
      nlohmann::json e = {{"error", {{"code", res.status == 404 ? "NOT_FOUND" : "HTTP_ERROR"},
                                     {"message", httplib::status_message(res.status)}}}};
      res.set_content(e.dump(), "application/json; charset=utf-8");
    });
    svr.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
      std::string msg = "internal error";
      try {
        std::rethrow_exception(ep);
      } catch (const std::exception& e) {
        msg = e.what();
      } catch (...) {
      }
      log::error("request failed: " + msg);
      res.status = 500;
      res.set_content(nlohmann::json{{"error", {{"code", "INTERNAL_ERROR"}, {"message", msg}}}}.dump(),
                      "application/json; charset=utf-8");
    });
    svr.set_read_timeout(cfg_.request_timeout);
    svr.set_write_timeout(cfg_.request_timeout);
  }

  // Same handlers without a socket, for in-process clients.
  eval::ChatTransport in_process_transport() {
    return [this](const nlohmann::json& req) {
      auto r = chat(req.dump());
      return eval::ChatReply{r.status, nlohmann::json::parse(r.body.dump())};
    };
  }

 private:
  static Reply bad_request(const std::string& message) {
    return {400, {{"error", {{"code", "INVALID_REQUEST"}, {"message", message}}}}};
  }

  static nlohmann::json error_body(const std::string& session_id, const std::string& code, const std::string& message) {
    return {{"session_id", session_id.empty() ? nlohmann::json() : nlohmann::json(session_id)},
            {"answer_text", nullptr},
            {"generated_sql", nullptr},
            {"sql", nullptr},
            {"rows", nullptr},
            {"map_id", nullptr},
            {"assumptions", nlohmann::json::array()},
            {"guard", nullptr},
            {"error", {{"code", code}, {"message", message}}}};
  }

  static nlohmann::json response_body(const std::string& session_id, const agent::AnswerPayload& a) {
    auto opt = [](const std::optional<std::string>& v) { return v ? nlohmann::json(*v) : nlohmann::json(); };
    return {{"session_id", session_id},
            {"answer_text", a.text},
            {"generated_sql", opt(a.generated_sql)},
            {"sql", opt(a.sql)},
            {"rows", a.rows ? agent::table_json(*a.rows) : nlohmann::json()},
            {"map_id", opt(a.map_id)},
            {"assumptions", a.assumptions},
            {"guard", a.guard ? nlohmann::json(*a.guard) : nlohmann::json()},
            {"error", a.error ? nlohmann::json{{"code", a.error->code}, {"message", a.error->message}} : nlohmann::json()}};
  }

  std::filesystem::path db_path_;
  std::shared_ptr<const agent::Agent> agent_;
  ServiceConfig cfg_;
  SessionStore sessions_;
  std::atomic<int> in_flight_{0};
};

// A server on a background thread; stops on destruction.
class BackgroundServer {
 public:
  explicit BackgroundServer(Service& svc, const std::string& host = "127.0.0.1", int port = 0) {
    svc.mount(svr_);
    port_ = port == 0 ? svr_.bind_to_any_port(host) : (svr_.bind_to_port(host, port) ? port : -1);
    if (port_ < 0) throw ConfigError("cannot bind " + host + ":" + std::to_string(port));
    thread_ = std::thread([this] { svr_.listen_after_bind(); });
    svr_.wait_until_ready();
  }
  ~BackgroundServer() {
    svr_.stop();
    if (thread_.joinable()) thread_.join();
  }
  BackgroundServer(const BackgroundServer&) = delete;
  BackgroundServer& operator=(const BackgroundServer&) = delete;

  int port() const { return port_; }
  std::string endpoint() const { return "http://127.0.0.1:" + std::to_string(port_); }

 private:
  httplib::Server svr_;
  int port_ = -1;
  std::thread thread_;
};

}  // namespace transitq::service
