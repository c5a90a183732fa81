#include <gtest/gtest.h>

#include <random>
#include <sstream>

#include "support.hpp"
#include "transitq/sql/guard.hpp"

using namespace transitq;
using namespace transitq::sql;
using transitq::testing::data_path;
using transitq::testing::read_file;
using transitq::testing::shared_fixture_db;

namespace {

const char* kBologna =
    "select count(distinct r.route_id) from routes r join agency a using (agency_id) "
    "where upper(a.agency_hq_city) like upper('Bologna')";

class GuardTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    conn_ = new db::Connection(shared_fixture_db(), db::Connection::Mode::read_only);
    guard_ = new Guard(SchemaInfo::introspect(*conn_));
  }
  static void TearDownTestSuite() {
    delete guard_;
    delete conn_;
  }
  static ValidationReport syntax(const std::string& sql) { return guard_->syntax_check({sql}, conn_); }

  static db::Connection* conn_;
  static Guard* guard_;
};
db::Connection* GuardTest::conn_ = nullptr;
Guard* GuardTest::guard_ = nullptr;

std::vector<std::string> mutating_statements() {
  std::istringstream in(read_file(data_path("mutating_sql.txt")));
  std::vector<std::string> out;
  for (std::string line; std::getline(in, line);)
    if (!line.empty() && line[0] != '#') out.push_back(line);
  return out;
}

// Database fingerprint: per-table row counts plus the schema text.
std::string fingerprint(const db::Connection& c) {
  std::string fp;
  for (const auto& t : c.table_names(false)) {
    auto s = c.prepare("SELECT count(*) FROM \"" + t + "\"");
    s.step();
    fp += t + "=" + std::to_string(s.integer(0)) + ";";
  }
  auto s = c.prepare("SELECT group_concat(sql, '|') FROM sqlite_master");
  s.step();
  return fp + s.text(0);
}

}  // namespace

TEST(ReadOnly, AcceptsSelectAndCte) {
  Guard g;
  EXPECT_EQ(g.enforce_read_only({"select 1"}).verdict, Verdict::accepted);
  EXPECT_EQ(g.enforce_read_only({"with t as (select 1) select * from t"}).verdict, Verdict::accepted);
  EXPECT_EQ(g.enforce_read_only({"select replace(stop_name, 'a', 'b') from stops;"}).verdict, Verdict::accepted);
  EXPECT_EQ(g.enforce_read_only({"select 'drop table x' as s -- delete"}).verdict, Verdict::accepted);
}

TEST(ReadOnly, RejectsDrop) {
  auto r = Guard().enforce_read_only({"DROP TABLE trips"});
  EXPECT_EQ(r.verdict, Verdict::rejected);
  ASSERT_FALSE(r.diagnostics.empty());
  EXPECT_EQ(r.diagnostics[0].code, "NON_SELECT");
}

TEST(ReadOnly, RejectsEmptyAndUnterminated) {
  EXPECT_TRUE(Guard().enforce_read_only({"  -- nothing"}).has("EMPTY_QUERY"));
  EXPECT_TRUE(Guard().enforce_read_only({"select 'abc"}).has("SYNTAX_ERROR"));
  EXPECT_TRUE(Guard().enforce_read_only({"select 1; select 2"}).has("MULTI_STATEMENT"));
}

TEST_F(GuardTest, MutatingTaxonomyNeverReachesExecution) {
  auto stmts = mutating_statements();
  ASSERT_GE(stmts.size(), 15u);
  transitq::testing::TempDir dir;
  auto copy = dir / "copy.db";
  std::filesystem::copy_file(shared_fixture_db(), copy);
  db::Connection rw(copy, db::Connection::Mode::read_write);
  std::string before = fingerprint(rw);
  for (const auto& s : stmts) {
    auto res = guard_->check({s}, &rw);
    EXPECT_EQ(res.report.verdict, Verdict::rejected) << s;
    // Oracle: whatever the guard lets through is executed against a copy.
    if (res.report.verdict != Verdict::rejected) {
      try {
        rw.exec(res.candidate.sql);
      } catch (const Error&) {
      }
    }
  }
  EXPECT_EQ(fingerprint(rw), before);
}

TEST_F(GuardTest, RandomMutatingSuffixesRejected) {
  auto stmts = mutating_statements();
  std::mt19937 rng(11);
  const std::vector<std::string> prefixes = {"select 1", "select * from routes", "with t as (select 1) select * from t",
                                             "select count(*) from trips /* x */"};
  for (int i = 0; i < 200; ++i) {
    std::string sql = prefixes[rng() % prefixes.size()] + ";" + (rng() % 2 ? "\n" : " ") + stmts[rng() % stmts.size()];
    EXPECT_EQ(guard_->check({sql}, conn_).report.verdict, Verdict::rejected) << sql;
  }
}

TEST_F(GuardTest, BolognaQueryAccepted) {
  auto r = syntax(kBologna);
  EXPECT_EQ(r.verdict, Verdict::accepted) << nlohmann::json(r).dump();
  EXPECT_EQ(guard_->check({kBologna}, conn_).report.verdict, Verdict::accepted);
}

TEST_F(GuardTest, UndeclaredAliasRejected) {
  auto r = syntax("select r.route_id from routes join agency a on a.agency_id = routes.agency_id where r.route_type = 3");
  EXPECT_EQ(r.verdict, Verdict::rejected);
  ASSERT_FALSE(r.diagnostics.empty());
  EXPECT_EQ(r.diagnostics[0].code, "UNKNOWN_ALIAS");
  EXPECT_EQ(r.diagnostics[0].span.start, 7u);
  EXPECT_EQ(r.diagnostics[0].span.end, 17u);
}

TEST_F(GuardTest, UnknownColumnRejected) {
  auto r = syntax("select routes.color from routes");
  EXPECT_EQ(r.verdict, Verdict::rejected);
  EXPECT_TRUE(r.has("UNKNOWN_COLUMN"));
  // Unqualified: only the engine sees it.
  EXPECT_TRUE(syntax("select color from routes").has("UNKNOWN_COLUMN"));
  EXPECT_TRUE(syntax("select * from lines").has("UNKNOWN_TABLE"));
  EXPECT_TRUE(syntax("select route_id from routes where").has("SYNTAX_ERROR"));
}

TEST_F(GuardTest, AcceptsViewsSubqueriesAndCtes) {
  for (const char* sql : {
           "select * from route_geometry g where g.kind = 'stop'",
           "with x as (select route_id from routes) select x.route_id from x",
           "select q.n from (select count(*) as n from trips) q",
           "select s.stop_name, m.name from stops s left join municipalities m on m.code = s.municipality_code",
           "select t.trip_id from trips t where t.direction = 'ritorno' and t.route_id in ('18', '27')",
           "select c.service_id from calendar c where c.monday = 1 and '2024-10-01' between c.start_date and c.end_date",
           "select st.stop_id from stop_times st where st.arrival_seconds >= 25200 order by st.arrival_seconds limit 5",
       }) {
    auto r = syntax(sql);
    EXPECT_EQ(r.verdict, Verdict::accepted) << sql << " " << nlohmann::json(r).dump();
  }
}

TEST_F(GuardTest, LiteralTypeChecks) {
  auto r = syntax("select * from trips where direction = 'outbound'");
  EXPECT_TRUE(r.has("VALUE_NOT_IN_DOMAIN"));
  EXPECT_TRUE(syntax("select * from trips t where t.direction = 0").has("TYPE_MISMATCH"));
  EXPECT_TRUE(syntax("select * from stop_times where arrival_seconds > 'late'").has("TYPE_MISMATCH"));
  EXPECT_TRUE(syntax("select * from routes where route_short_name = 18").has("TYPE_MISMATCH"));
  EXPECT_EQ(syntax("select * from stop_times where arrival_seconds > '3600'").verdict, Verdict::accepted);
}

TEST_F(GuardTest, UnknownFunctionIsWarningOnly) {
  Guard lint_only(guard_->schema());
  auto r = lint_only.syntax_check({"select median(route_type) from routes"});
  EXPECT_EQ(r.verdict, Verdict::accepted);
  ASSERT_EQ(r.diagnostics.size(), 1u);
  EXPECT_EQ(r.diagnostics[0].code, "UNKNOWN_FUNCTION");
  EXPECT_EQ(r.diagnostics[0].severity, Severity::warning);
}

TEST_F(GuardTest, DirectionLiteralRule) {
  auto [q0, r0] = guard_->apply_repair_rules({"select trip_id from trips where direction = 0"});
  EXPECT_EQ(q0.sql, "select trip_id from trips where direction = 'andata'");
  EXPECT_EQ(r0.applied_rules, std::vector<std::string>{"DIRECTION_LITERAL"});
  EXPECT_EQ(r0.verdict, Verdict::repaired);
  EXPECT_EQ(q0.origin, Origin::repaired);

  auto [q1, r1] = guard_->apply_repair_rules({"select trip_id from trips t where 1 = t.direction"});
  EXPECT_EQ(q1.sql, "select trip_id from trips t where 'ritorno' = t.direction");

  auto [q2, r2] = guard_->apply_repair_rules({"select trip_id from trips where direction in (0, 1)"});
  EXPECT_EQ(q2.sql, "select trip_id from trips where direction in ('andata', 'ritorno')");

  // Also without a catalog (name-based).
  auto [q3, r3] = Guard().apply_repair_rules({"select * from trips where direction = 1"});
  EXPECT_EQ(q3.sql, "select * from trips where direction = 'ritorno'");
}

TEST_F(GuardTest, NoRuleMatchLeavesQueryUnchanged) {
  auto [q, r] = guard_->apply_repair_rules({kBologna});
  EXPECT_EQ(q.sql, kBologna);
  EXPECT_TRUE(r.applied_rules.empty());
  EXPECT_EQ(r.verdict, Verdict::accepted);
  EXPECT_EQ(q.origin, Origin::generated);
}

TEST_F(GuardTest, AliasAndQuoteRules) {
  auto [q, r] = guard_->apply_repair_rules(
      {"select r.route_long_name from routes join trips t on t.route_id = routes.route_id where routes.route_short_name = 18"});
  EXPECT_EQ(q.sql,
            "select routes.route_long_name from routes join trips t on t.route_id = routes.route_id where "
            "routes.route_short_name = '18'");
  EXPECT_EQ(r.applied_rules, (std::vector<std::string>{"ALIAS_QUALIFIER", "QUOTE_TEXT_LITERAL"}));
  EXPECT_EQ(syntax(q.sql).verdict, Verdict::accepted);

  auto [q2, r2] = guard_->apply_repair_rules({"select routes.route_id from routes r"});
  EXPECT_EQ(q2.sql, "select r.route_id from routes r");

  // Ambiguous column: left alone for the model-assisted pass.
  auto [q3, r3] = guard_->apply_repair_rules({"select x.route_id from routes join trips t using (route_id)"});
  EXPECT_TRUE(r3.applied_rules.empty());
}

TEST_F(GuardTest, RepairsAreIdempotentAndKeepParseValidity) {
  const std::vector<std::string> inputs = {
      "select trip_id from trips where direction = 0",
      "select t.trip_id from trips t where t.direction in (1, 0) and t.route_id = 11",
      "select r.route_long_name from routes join trips t using (agency_id, route_id) where t.direction = 1",
      "select count(*) from routes where route_short_name = 27 or route_short_name = '18'",
      kBologna,
  };
  for (const auto& in : inputs) {
    auto [once, r1] = guard_->apply_repair_rules({in});
    auto [twice, r2] = guard_->apply_repair_rules(once);
    EXPECT_EQ(once.sql, twice.sql) << in;
    EXPECT_TRUE(r2.applied_rules.empty()) << in;
    EXPECT_FALSE(conn_->compile_error(once.sql).has_value()) << once.sql;
  }
}

TEST_F(GuardTest, DecisionsArePure) {
  for (int i = 0; i < 3; ++i) {
    auto a = nlohmann::json(guard_->check({"select r.x from routes where direction = 0"}, conn_).report);
    auto b = nlohmann::json(guard_->check({"select r.x from routes where direction = 0"}, conn_).report);
    EXPECT_EQ(a, b);
  }
}

TEST_F(GuardTest, LlmRepairAcceptsFixedQuery) {
  provider::ScriptedProvider p;
  p.add("select r\\.route_id from routes x", "```sql\nselect x.route_id from routes x\n```");
  std::string bad = "select r.route_id from routes x join trips y on y.agency_id = x.agency_id";
  auto r = syntax(bad);
  ASSERT_EQ(r.verdict, Verdict::rejected);
  auto fixed = guard_->llm_repair({bad}, r.diagnostics, p, conn_);
  EXPECT_EQ(fixed.sql, "select x.route_id from routes x");
  EXPECT_EQ(fixed.origin, Origin::repaired);
}

TEST_F(GuardTest, LlmRepairRejectsNonSelect) {
  provider::ScriptedProvider p;
  p.add(".*", "DELETE FROM routes");
  EXPECT_THROW(guard_->llm_repair({"select bogus from routes"}, {}, p, conn_), RepairFailed);
}

TEST_F(GuardTest, LlmRepairProviderUnavailable) {
  provider::ScriptedProvider p;
  p.set_unavailable(true);
  try {
    guard_->llm_repair({"select bogus from routes"}, {}, p, conn_);
    FAIL() << "expected RepairFailed";
  } catch (const RepairFailed& e) {
    EXPECT_NE(std::string(e.what()).find("unavailable"), std::string::npos) << e.what();
  }
}

TEST(InjectLimit, Cases) {
  EXPECT_EQ(Guard::inject_limit({"select route_id from routes"}, 10).sql, "select route_id from routes limit 10");
  EXPECT_EQ(Guard::inject_limit({"select route_id from routes limit 5"}, 10).sql, "select route_id from routes limit 5");
  EXPECT_EQ(Guard::inject_limit({"select count(*) from trips"}, 10).sql, "select count(*) from trips");
  EXPECT_EQ(Guard::inject_limit({"select route_id, count(*) from trips group by route_id;"}, 3).sql,
            "select route_id, count(*) from trips group by route_id limit 3");
  EXPECT_EQ(Guard::inject_limit({"select * from routes -- note"}, 7).sql, "select * from routes limit 7");
  EXPECT_EQ(Guard::inject_limit({"select * from (select * from routes limit 2)"}, 7).sql,
            "select * from (select * from routes limit 2) limit 7");
  EXPECT_EQ(Guard::inject_limit({"select route_id from routes"}, 0).sql, "select route_id from routes");
}

TEST(ExtractSql, FencesAndLabels) {
  EXPECT_EQ(extract_sql("```sql\nselect 1\n```"), "select 1");
  EXPECT_EQ(extract_sql("Here you go:\n```\nselect 2\n```\nDone"), "select 2");
  EXPECT_EQ(extract_sql("SQL: select 3"), "select 3");
  EXPECT_EQ(extract_sql("  select 4  "), "select 4");
}

TEST(Diagnostics, JsonShape) {
  auto r = Guard().enforce_read_only({"DROP TABLE trips"});
  auto j = nlohmann::json(r);
  EXPECT_EQ(j["verdict"], "rejected");
  EXPECT_EQ(j["diagnostics"][0]["code"], "NON_SELECT");
  EXPECT_EQ(j["diagnostics"][0]["span"]["start"], 0);
  EXPECT_EQ(j["diagnostics"][0]["span"]["end"], 4);
}
