#include <gtest/gtest.h>

#include <regex>

#include "support.hpp"
#include "transitq/catalog.hpp"

using namespace transitq;
using namespace transitq::catalog;
using transitq::testing::shared_fixture_db;
using transitq::testing::shipped_path;

namespace {

db::Connection open_fixture() { return db::Connection(shared_fixture_db(), db::Connection::Mode::read_only); }

std::vector<std::string> column_names(const db::Connection& c, const std::string& table) {
  auto s = c.prepare("SELECT name FROM pragma_table_info(?) ORDER BY cid");
  s.bind_all(table);
  std::vector<std::string> out;
  while (s.step()) out.push_back(s.text(0));
  return out;
}

// Returns the first structural problem of a tag tree, or "" when well formed.
std::string tag_problem(const std::string& text, std::vector<std::string>* top_level = nullptr) {
  static const std::regex tag(R"(<(/?)([a-z_]+)>)");
  std::vector<std::string> stack;
  for (std::sregex_iterator it(text.begin(), text.end(), tag), end; it != end; ++it) {
    std::string name = (*it)[2];
    if ((*it)[1].length() == 0) {
      if (top_level && stack.size() == 1) top_level->push_back(name);
      stack.push_back(name);
    } else {
      if (stack.empty() || stack.back() != name) return "unexpected </" + name + ">";
      stack.pop_back();
    }
  }
  return stack.empty() ? "" : "unclosed <" + stack.back() + ">";
}

std::size_t count(const std::string& hay, const std::string& needle) {
  std::size_t n = 0;
  for (auto pos = hay.find(needle); pos != std::string::npos; pos = hay.find(needle, pos + 1)) ++n;
  return n;
}

}  // namespace

TEST(Annotations, ParsesTablesAndColumns) {
  auto a = Annotations::parse("# c\nagency = the agencies\n agency.agency_id = id = key \n\n");
  ASSERT_NE(a.table("AGENCY"), nullptr);
  EXPECT_EQ(*a.table("agency"), "the agencies");
  ASSERT_NE(a.column("agency", "agency_id"), nullptr);
  EXPECT_EQ(*a.column("agency", "agency_id"), "id = key");
  EXPECT_THROW(Annotations::parse("no equals sign"), ConfigError);
  EXPECT_THROW(Annotations::load("/nonexistent/annotations.txt"), MissingFile);
}

TEST(Catalog, TwoTableDatabase) {
  auto c = db::Connection::in_memory();
  c.exec("CREATE TABLE agency (agency_id TEXT PRIMARY KEY, agency_name TEXT)");
  c.exec("CREATE TABLE routes (route_id TEXT PRIMARY KEY, agency_id TEXT REFERENCES agency (agency_id))");
  auto notes = Annotations::parse(
      "agency = agencies\nagency.agency_id = unique identifier of the agency\nagency.agency_name = full name of the agency\n"
      "routes = routes\nroutes.route_id = route id\nroutes.agency_id = operator\nroutes.color = not a column\n");
  auto cat = Catalog::describe(c, notes);
  ASSERT_EQ(cat.tables().size(), 2u);
  ASSERT_EQ(cat.foreign_keys().size(), 1u);
  EXPECT_EQ(cat.foreign_keys()[0].child_table, "routes");
  EXPECT_EQ(cat.foreign_keys()[0].parent_table, "agency");
  ASSERT_EQ(cat.warnings().size(), 1u);
  EXPECT_EQ(cat.warnings()[0].code, "UNKNOWN_ANNOTATION");
  EXPECT_NE(cat.warnings()[0].message.find("routes.color"), std::string::npos);
}

TEST(Catalog, MissingAnnotationIsWarningWithPlaceholder) {
  auto c = db::Connection::in_memory();
  c.exec("CREATE TABLE agency (agency_id TEXT PRIMARY KEY, agency_name TEXT)");
  auto cat = Catalog::describe(c, Annotations::parse("agency = a\nagency.agency_id = id\n"));
  ASSERT_EQ(cat.warnings().size(), 1u);
  EXPECT_EQ(cat.warnings()[0].code, "MISSING_ANNOTATION");
  EXPECT_EQ(cat.tables()[0].column_comments[1].second, kNoDescription);
}

TEST(Catalog, ShippedAnnotationsCoverFixtureSchema) {
  auto c = open_fixture();
  auto cat = Catalog::describe(c, Annotations::load(shipped_path("annotations.txt")));
  EXPECT_TRUE(cat.warnings().empty()) << cat.warnings().front().message;
  // Oracle: every table/view listed by the engine, each column exactly one comment.
  auto names = c.table_names(true);
  EXPECT_EQ(cat.tables().size(), names.size());
  for (const auto& t : cat.tables()) {
    auto cols = column_names(c, t.name);
    ASSERT_EQ(t.column_comments.size(), cols.size()) << t.name;
    for (std::size_t i = 0; i < cols.size(); ++i) EXPECT_EQ(t.column_comments[i].first, cols[i]);
  }
  // Oracle: foreign keys counted straight from the pragma.
  std::size_t fks = 0;
  for (const auto& n : c.table_names(false)) {
    auto s = c.prepare("SELECT count(DISTINCT id) FROM pragma_foreign_key_list(?)");
    s.bind_all(n);
    s.step();
    fks += static_cast<std::size_t>(s.integer(0));
  }
  EXPECT_EQ(cat.foreign_keys().size(), fks);
}

TEST(Catalog, DdlReparsesToSameColumns) {
  auto c = open_fixture();
  auto cat = Catalog::describe(c, Annotations::load(shipped_path("annotations.txt")));
  auto mem = db::Connection::in_memory();
  for (const auto& t : cat.tables()) mem.exec(t.ddl);
  for (const auto& t : cat.tables()) EXPECT_EQ(column_names(mem, t.name), column_names(c, t.name)) << t.name;
}

TEST(Prompt, MinimalDocument) {
  PromptDocument doc;
  doc.task_text = "Answer questions.";
  doc.tables.push_back({"agency", "agencies", "CREATE TABLE agency (agency_id TEXT)", false, {{"agency_id", "id"}}});
  doc.rules = baseline_rules();
  auto text = render_prompt(doc);
  EXPECT_EQ(count(text, "<table>"), 1u);
  EXPECT_EQ(count(text, "<rule>"), 3u);
  EXPECT_NE(text.find("<rule>Query only relevant columns.</rule>"), std::string::npos);
  EXPECT_NE(text.find("COMMENT ON column agency.agency_id IS 'id';"), std::string::npos);
  EXPECT_EQ(tag_problem(text), "");
}

TEST(Prompt, FullDocumentStructure) {
  auto c = open_fixture();
  auto cat = Catalog::describe(c, Annotations::load(shipped_path("annotations.txt")));
  auto doc = make_document(cat, default_rules(*gtfs::Date::parse_iso("2024-10-16")),
                           {{"How many routes?", "select count(*) from routes", 0.9},
                            {"Routes of <agency> & co", "select * from routes where route_id < '5'", 0.5}});
  auto text = render_prompt(doc);
  std::vector<std::string> top;
  EXPECT_EQ(tag_problem(text, &top), "");
  EXPECT_EQ(top, (std::vector<std::string>{"task", "database", "rules", "examples"}));
  for (const auto& n : c.table_names(true)) EXPECT_EQ(count(text, "<name>" + n + "</name>"), 1u) << n;
  EXPECT_NE(text.find("ALTER TABLE routes ADD CONSTRAINT routes_references_agency FOREIGN KEY (agency_id) "
                      "REFERENCES agency(agency_id);"),
            std::string::npos);
  EXPECT_NE(text.find("Routes of &lt;agency&gt; &amp; co"), std::string::npos);
  EXPECT_NE(text.find("(a wednesday)"), std::string::npos);
  EXPECT_GT(text.find("<examples>"), text.find("</rules>"));
  EXPECT_EQ(render_prompt(doc), text);
}

TEST(Prompt, BudgetDropsLeastSimilarExemplarsFirst) {
  PromptDocument doc;
  doc.task_text = "t";
  doc.rules = baseline_rules();
  doc.exemplars = {{"q-high", "select 1", 0.9}, {"q-low", "select 2", 0.1}, {"q-mid", "select 3", 0.5}};
  auto full = render_prompt(doc);
  std::size_t dropped = 0;
  auto cut = render_prompt(doc, full.size() - 1, &dropped);
  EXPECT_EQ(dropped, 1u);
  EXPECT_EQ(cut.find("q-low"), std::string::npos);
  EXPECT_NE(cut.find("q-mid"), std::string::npos);
  EXPECT_LE(cut.size(), full.size() - 1);
  auto none = render_prompt(doc, 10, &dropped);
  EXPECT_EQ(dropped, 3u);
  EXPECT_EQ(none.find("<examples>"), std::string::npos);
}
