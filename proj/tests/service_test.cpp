#include <gtest/gtest.h>

#include <thread>

#include "support.hpp"
#include "transitq/map_builder.hpp"
#include "transitq/service.hpp"

using namespace transitq;
using namespace transitq::service;
using transitq::testing::data_path;
using transitq::testing::read_file;
using transitq::testing::shared_fixture_db;
using transitq::testing::shipped_path;

namespace {

AppConfig fixture_config(const transitq::testing::TempDir& dir) {
  auto cfg = AppConfig::load(shipped_path("config.json"));
  cfg.service.run_store = dir / "runs.db";
  return cfg;
}

struct Running {
  transitq::testing::TempDir dir;
  std::unique_ptr<Service> svc;
  std::unique_ptr<BackgroundServer> server;
  std::unique_ptr<httplib::Client> client;

  explicit Running(std::function<void(AppConfig&)> tweak = {}, std::filesystem::path db = shared_fixture_db()) {
    auto cfg = fixture_config(dir);
    if (tweak) tweak(cfg);
    svc = Service::create(db, cfg);
    server = std::make_unique<BackgroundServer>(*svc);
    client = std::make_unique<httplib::Client>(server->endpoint());
    client->set_read_timeout(std::chrono::seconds(60));
  }

  std::pair<int, nlohmann::json> post(const nlohmann::json& body) { return post_raw(body.dump()); }

  std::pair<int, nlohmann::json> post_raw(const std::string& body) {
    auto res = client->Post("/api/chat", body, "application/json");
    if (!res) throw std::runtime_error("no response");
    return {res->status, nlohmann::json::parse(res->body)};
  }

  std::pair<int, nlohmann::json> get(const std::string& path) {
    auto res = client->Get(path);
    if (!res) throw std::runtime_error("no response");
    return {res->status, nlohmann::json::parse(res->body)};
  }
};

std::size_t data_lines(const std::string& rel) {
  std::size_t n = 0;
  std::istringstream in(read_file(data_path(rel)));
  for (std::string line; std::getline(in, line);)
    if (!line.empty()) ++n;
  return n - 1;
}

void expect_rows_arity(const nlohmann::json& body) {
  if (body["rows"].is_null()) return;
  auto n = body["rows"]["columns"].size();
  for (const auto& r : body["rows"]["data"]) EXPECT_EQ(r.size(), n);
}

}  // namespace

TEST(Health, HealthyService) {
  Running r;
  auto [status, body] = r.get("/api/health");
  EXPECT_EQ(status, 200);
  EXPECT_EQ(body["db"], "ok");
  EXPECT_EQ(body["provider"], "ok");
  EXPECT_TRUE(body["version"].is_string());
}

TEST(Health, MissingDatabase) {
  transitq::testing::TempDir copy;
  std::filesystem::copy_file(shared_fixture_db(), copy / "transit.db");
  auto cfg = fixture_config(copy);
  auto svc = Service::create(copy / "transit.db", cfg);
  std::filesystem::remove(copy / "transit.db");
  EXPECT_EQ(svc->health().body["db"], "error");
}

TEST(Health, UnconfiguredProvider) {
  Running r([](AppConfig& c) { c.provider = {{"kind", "remote"}, {"endpoint", ""}, {"model", ""}}; });
  EXPECT_EQ(r.get("/api/health").second["provider"], "unconfigured");
  auto [status, body] = r.post({{"message", "Which municipalities are served by route 27?"}});
  EXPECT_EQ(status, 503);
  EXPECT_EQ(body["error"]["code"], "PROVIDER_UNAVAILABLE");
}

TEST(Chat, InvalidRequests) {
  Running r;
  EXPECT_EQ(r.post({{"message", ""}}).first, 400);
  EXPECT_EQ(r.post({{"message", "   "}}).first, 400);
  EXPECT_EQ(r.post(nlohmann::json::object()).first, 400);
  EXPECT_EQ(r.post({{"message", 5}}).first, 400);
  EXPECT_EQ(r.post_raw("{not json").first, 400);
  EXPECT_EQ(r.post({{"message", std::string(4001, 'a')}}).first, 400);
  EXPECT_EQ(r.post({{"message", "hi"}, {"session_id", "bad id!"}}).first, 400);
  auto [status, body] = r.post({{"message", std::string(4000, 'a')}});
  EXPECT_EQ(status, 200);
  EXPECT_EQ(body["error"]["code"], "INVALID_QUERY");
  // 4000 characters of two bytes each is still within the limit.
  std::string wide;
  for (int i = 0; i < 4000; ++i) wide += "\xC3\xA8";
  EXPECT_EQ(r.post({{"message", wide}}).first, 200);
}

TEST(Chat, CountAnswerFromFixture) {
  Running r;
  auto [status, body] = r.post({{"message", "How many routes are managed by the agency of Ferrara?"}});
  ASSERT_EQ(status, 200);
  ASSERT_TRUE(body["error"].is_null()) << body.dump();
  // Oracle: Ferrara's routes file.
  auto expected = std::to_string(data_lines("feed_ferrara/routes.txt"));
  EXPECT_NE(body["answer_text"].get<std::string>().find(expected), std::string::npos) << body["answer_text"];
  EXPECT_FALSE(body["session_id"].get<std::string>().empty());
  EXPECT_TRUE(body["sql"].is_string());
}

TEST(Chat, RowsAreByteStable) {
  Running r;
  nlohmann::json req = {{"message", "Which municipalities are served by route 27?"}};
  auto a = r.post(req).second;
  auto b = r.post(req).second;
  ASSERT_FALSE(a["rows"].is_null());
  EXPECT_FALSE(a["rows"]["data"].empty());
  EXPECT_EQ(a["rows"].dump(), b["rows"].dump());
  EXPECT_NE(a["session_id"], b["session_id"]);
}

TEST(Chat, ResponsesParseAndKeepArity) {
  Running r;
  for (const char* q : {"Which routes serve the municipality of Bologna?", "Which municipalities are served by route 18?",
                        "What is the average number of trips that belong to route 11 and use the stop 1003?",
                        "Which stops does route 11 use in the outbound direction?", "Draw the map of route 27",
                        "What is the meaning of life?", "Which routes serve the municipality of Granarolo dell'Emilia?"}) {
    auto res = r.client->Post("/api/chat", nlohmann::json{{"message", q}}.dump(), "application/json");
    ASSERT_TRUE(res);
    EXPECT_EQ(res->status, 200) << q;
    auto body = nlohmann::json::parse(res->body);
    EXPECT_EQ(nlohmann::json::parse(body.dump()), body);
    for (const char* key : {"session_id", "answer_text", "sql", "rows", "map_id", "assumptions", "error"})
      EXPECT_TRUE(body.contains(key)) << key;
    expect_rows_arity(body);
  }
}

TEST(Chat, DirectionLiteralIsRepairedEndToEnd) {
  Running r;
  auto body = r.post({{"message", "Which stops does route 11 use in the outbound direction?"}}).second;
  ASSERT_TRUE(body["error"].is_null()) << body.dump();
  EXPECT_NE(body["sql"].get<std::string>().find("'andata'"), std::string::npos);
  EXPECT_EQ(body["guard"]["applied_rules"][0], "DIRECTION_LITERAL");
}

TEST(Chat, NoWriteAccessThroughTheApi) {
  transitq::testing::TempDir dir;
  auto script = nlohmann::json::parse(read_file(shipped_path("scripted_provider.json")));
  script["completions"].insert(script["completions"].begin(),
                               nlohmann::json::object({{"match", "^Remove"}, {"response", "DELETE FROM routes"}}));
  script["completions"].insert(script["completions"].begin(),
                               nlohmann::json::object({{"match", "^Wipe"}, {"response", "select 1; drop table routes"}}));
  transitq::testing::write_file(dir / "script.json", script.dump());
  Running r([&](AppConfig& c) { c.provider = {{"kind", "scripted"}, {"script", (dir / "script.json").string()}}; });
  db::Connection c(shared_fixture_db(), db::Connection::Mode::read_only);
  auto before = c.query("SELECT count(*) FROM routes").rows[0][0];
  for (const char* q : {"Remove every route", "Wipe the routes"}) {
    auto [status, body] = r.post({{"message", q}});
    EXPECT_EQ(status, 200);
    EXPECT_EQ(body["error"]["code"], "INVALID_QUERY") << body.dump();
    EXPECT_TRUE(body["sql"].is_null());
  }
  EXPECT_EQ(c.query("SELECT count(*) FROM routes").rows[0][0], before);
}

TEST(Maps, StoredDocumentRoundTrips) {
  Running r;
  auto [status, body] = r.post({{"message", "Draw the map of route 27"}});
  ASSERT_EQ(status, 200);
  ASSERT_TRUE(body["map_id"].is_string()) << body.dump();
  auto [mstatus, doc] = r.get("/api/maps/" + body["map_id"].get<std::string>());
  ASSERT_EQ(mstatus, 200);
  EXPECT_TRUE(maps::validate_geo_document(doc).empty());
  auto g = maps::from_geo_document(doc);
  // Oracle: geometry fetched straight from the database.
  db::Connection c(shared_fixture_db(), db::Connection::Mode::read_only);
  auto expected = maps::fetch_route_geometry(c, g.route);
  EXPECT_EQ(g.shape_id, expected.shape_id);
  ASSERT_EQ(g.shape_points.size(), expected.shape_points.size());
  for (std::size_t i = 0; i < g.shape_points.size(); ++i) {
    EXPECT_EQ(g.shape_points[i].lat, maps::round_coordinate(expected.shape_points[i].lat));
    EXPECT_EQ(g.shape_points[i].lon, maps::round_coordinate(expected.shape_points[i].lon));
  }
  EXPECT_EQ(g.stops.size(), expected.stops.size());
}

TEST(Maps, UnknownIdIs404) {
  Running r;
  EXPECT_EQ(r.get("/api/maps/0123456789abcdef").first, 404);
  EXPECT_EQ(r.get("/api/nothing-here").first, 404);
}

TEST(Cors, HeadersAndPreflight) {
  Running r;
  auto res = r.client->Get("/api/health");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->get_header_value("Access-Control-Allow-Origin"), "*");
  auto pre = r.client->Options("/api/chat");
  ASSERT_TRUE(pre);
  EXPECT_EQ(pre->status, 204);
  EXPECT_NE(pre->get_header_value("Access-Control-Allow-Methods").find("POST"), std::string::npos);
  EXPECT_EQ(pre->get_header_value("Access-Control-Allow-Origin"), "*");
}

TEST(Sessions, ConcurrentSessionsStayIsolated) {
  Running r;
  auto first_a = r.post({{"message", "Which municipalities are served by route 11?"}}).second;
  auto first_b = r.post({{"message", "Which municipalities are served by route 13?"}}).second;
  std::string a = first_a["session_id"], b = first_b["session_id"];
  auto ask = [&](const std::string& session, const std::string& route) {
    httplib::Client cli(r.server->endpoint());
    for (int i = 0; i < 3; ++i)
      cli.Post("/api/chat",
               nlohmann::json{{"session_id", session}, {"message", "Which municipalities are served by route " + route + "?"}}
                   .dump(),
               "application/json");
  };
  std::thread ta(ask, a, "11"), tb(ask, b, "13");
  ta.join();
  tb.join();
  db::Connection store(r.dir / "runs.db", db::Connection::Mode::read_only);
  auto turns_of = [&](const std::string& id) {
    auto s = store.prepare("SELECT turns FROM sessions WHERE session_id = ?");
    s.bind_all(id);
    EXPECT_TRUE(s.step());
    return nlohmann::json::parse(s.text(0));
  };
  for (const auto& [id, route] : {std::pair{a, "11"}, std::pair{b, "13"}}) {
    auto turns = turns_of(id);
    EXPECT_EQ(turns.size(), 4u);
    for (const auto& t : turns)
      EXPECT_NE(t["question"].get<std::string>().find("route " + std::string(route) + "?"), std::string::npos);
  }
}

TEST(Sessions, PersistedAndExpired) {
  transitq::testing::TempDir dir;
  agent::AgentTurn turn;
  turn.question = "q1";
  turn.answer.text = "a1";
  turn.answer.generated_sql = "select 1";
  {
    SessionStore s(dir / "runs.db", std::chrono::hours(24));
    auto session = s.open("keep");
    s.append(*session, turn);
  }
  SessionStore again(dir / "runs.db", std::chrono::hours(24));
  auto restored = again.open("keep");
  ASSERT_EQ(restored->conversation.turns.size(), 1u);
  EXPECT_EQ(*restored->conversation.turns[0].answer.generated_sql, "select 1");

  SessionStore short_lived(dir / "short.db", std::chrono::seconds(1));
  auto s = short_lived.open("x");
  short_lived.append(*s, turn);
  EXPECT_EQ(short_lived.open("x")->conversation.turns.size(), 1u);
  std::this_thread::sleep_for(std::chrono::milliseconds(2100));
  EXPECT_TRUE(short_lived.open("x")->conversation.turns.empty());
}

TEST(EvalEndpoint, ComparesResultSets) {
  Running r;
  nlohmann::json req = {{"gold", {{"columns", {"name"}}, {"data", {{"a"}}}}},
                        {"generated", {{"columns", {"name"}}, {"data", {{"a"}, {"b"}, {"c"}, {"d"}, {"e"}, {"f"}}}}}};
  auto res = r.client->Post("/api/eval/compare", req.dump(), "application/json");
  ASSERT_TRUE(res);
  auto body = nlohmann::json::parse(res->body);
  EXPECT_EQ(body["category"], "superset");
  EXPECT_NEAR(body["fp_rate"].get<double>(), 5.0 / 6.0, 1e-12);
  res = r.client->Post("/api/eval/compare", R"({"gold": 7.5, "generated": 0})", "application/json");
  EXPECT_EQ(nlohmann::json::parse(res->body)["category"], "zero_result");
}
