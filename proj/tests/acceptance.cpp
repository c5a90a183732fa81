// Acceptance gate: one PASS/FAIL line per criterion, exit status 1 if any fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <iostream>
#include <numeric>
#include <set>
#include <sstream>

#include "support.hpp"
#include "transitq/eval/compare.hpp"
#include "transitq/eval/questions.hpp"
#include "transitq/eval/runs.hpp"
#include "transitq/map_builder.hpp"
#include "transitq/service.hpp"

using namespace transitq;
using transitq::testing::data_path;
using transitq::testing::read_file;
using transitq::testing::shipped_path;
using transitq::testing::TempDir;

namespace {

using Clock = std::chrono::steady_clock;
const gtfs::Date kRef = *gtfs::Date::parse_iso("2024-10-16");
const char* kFeeds[][2] = {{"feed_bologna", "TPER_BO"}, {"feed_ferrara", "TPER_FE"}};

// Collects failed expectations for one criterion.
struct Check {
  std::vector<std::string> failures;
  std::string detail;
  void expect(bool ok, const std::string& what) {
    if (!ok) failures.push_back(what);
  }
};

double seconds_since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

std::string fmt(double v, int digits = 3) {
  std::ostringstream o;
  o.precision(digits);
  o << std::fixed << v;
  return o.str();
}

// Plain CSV rows keyed by header; the fixture files never quote fields.
std::vector<std::map<std::string, std::string>> csv_rows(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::string line;
  std::getline(in, line);
  std::vector<std::string> header;
  std::stringstream hs(line);
  for (std::string f; std::getline(hs, f, ',');) header.push_back(f);
  std::vector<std::map<std::string, std::string>> out;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::stringstream ls(line);
    std::map<std::string, std::string> r;
    std::size_t i = 0;
    for (std::string f; std::getline(ls, f, ',');) r[header.at(i++)] = f;
    out.push_back(r);
  }
  return out;
}

// Winding-number containment, independent of the crossing-number code under test.
bool winding_contains(const gtfs::Ring& ring, const gtfs::Coord& p) {
  int wn = 0;
  for (std::size_t i = 0; i + 1 < ring.size(); ++i) {
    const auto& a = ring[i];
    const auto& b = ring[i + 1];
    double is_left = (b.lon - a.lon) * (p.lat - a.lat) - (p.lon - a.lon) * (b.lat - a.lat);
    if (a.lat <= p.lat) {
      if (b.lat > p.lat && is_left > 0) ++wn;
    } else if (b.lat <= p.lat && is_left < 0) {
      --wn;
    }
  }
  return wn != 0;
}

// Distance-based edge test: the point lies on segment ab within 1e-9 degrees.
bool on_edge(const gtfs::Coord& a, const gtfs::Coord& b, const gtfs::Coord& p) {
  double dx = b.lon - a.lon, dy = b.lat - a.lat;
  double len2 = dx * dx + dy * dy;
  double t = len2 == 0 ? 0 : std::clamp(((p.lon - a.lon) * dx + (p.lat - a.lat) * dy) / len2, 0.0, 1.0);
  return std::hypot(a.lon + t * dx - p.lon, a.lat + t * dy - p.lat) < 1e-9;
}

bool on_ring(const gtfs::Ring& ring, const gtfs::Coord& p) {
  for (std::size_t i = 0; i + 1 < ring.size(); ++i)
    if (on_edge(ring[i], ring[i + 1], p)) return true;
  return false;
}

// Boundary points belong to the first municipality in file order; hole
// interiors do not belong to the polygon.
std::optional<std::string> brute_force_municipality(const std::vector<gtfs::MunicipalityRecord>& ms, const gtfs::Coord& p) {
  for (const auto& m : ms)
    for (const auto& poly : m.boundary) {
      if (!on_ring(poly.rings[0], p) && !winding_contains(poly.rings[0], p)) continue;
      bool in_hole = false;
      for (std::size_t h = 1; h < poly.rings.size(); ++h)
        in_hole = in_hole || (!on_ring(poly.rings[h], p) && winding_contains(poly.rings[h], p));
      if (!in_hole) return m.code;
    }
  return std::nullopt;
}

// Every (route_id, stop_id) pair some trip links, from the source files.
std::set<std::pair<std::string, std::string>> source_links() {
  std::set<std::pair<std::string, std::string>> links;
  for (auto& [feed, _] : kFeeds) {
    std::map<std::string, std::string> route_of;
    for (auto& t : csv_rows(data_path(std::string(feed) + "/trips.txt"))) route_of[t["trip_id"]] = t["route_id"];
    for (auto& st : csv_rows(data_path(std::string(feed) + "/stop_times.txt")))
      links.insert({route_of.at(st["trip_id"]), st["stop_id"]});
  }
  return links;
}

db::Table letters(const std::string& s) {
  db::Table t{{"name"}, {}};
  for (char c : s) t.rows.push_back({std::string(1, c)});
  return t;
}

void ingestion_round_trip(Check& c) {
  TempDir dir;
  auto started = Clock::now();
  gtfs::BuildReport report;
  auto conn = gtfs::build_database(dir / "t.db", transitq::testing::fixture_bundles(),
                                   transitq::testing::fixture_municipalities(), &report);
  auto violations = gtfs::foreign_key_violations(conn);
  double elapsed = seconds_since(started);

  auto count = [&](const std::string& sql) { return std::get<std::int64_t>(conn.query(sql).rows.at(0).at(0)); };
  auto agencies = count("SELECT count(*) FROM agency"), routes = count("SELECT count(*) FROM routes"),
       shapes = count("SELECT count(*) FROM shapes"), stop_times = count("SELECT count(*) FROM stop_times");
  c.expect(agencies >= 2 && routes >= 5 && shapes >= 3 && stop_times >= 50, "fixture too small");

  std::size_t compared = 0;
  for (auto& [feed, tag] : kFeeds) {
    std::map<std::string, std::map<int, gtfs::Coord>> expected;
    for (auto& r : csv_rows(data_path(std::string(feed) + "/shapes.txt")))
      expected[r["shape_id"]][std::stoi(r["shape_pt_sequence"])] = {std::stod(r["shape_pt_lat"]), std::stod(r["shape_pt_lon"])};
    std::map<std::string, std::vector<gtfs::Coord>> rebuilt;
    auto s = conn.prepare(
        "SELECT ss.shape_id, p.lat, p.lon FROM shape_sequences ss JOIN shape_points p ON p.agency_id = ss.agency_id AND "
        "p.point_id = ss.point_id WHERE ss.agency_id = ? ORDER BY ss.shape_id, ss.seq");
    s.bind_all(std::string(tag));
    while (s.step()) rebuilt[s.text(0)].push_back({s.real(1), s.real(2)});
    c.expect(rebuilt.size() == expected.size(), std::string(tag) + " shape count differs");
    for (const auto& [shape, pts] : expected) {
      std::vector<gtfs::Coord> src;
      for (const auto& [_, p] : pts) src.push_back(p);
      c.expect(rebuilt[shape] == src, std::string(tag) + "/" + shape + " differs from shapes.txt");
      ++compared;
    }
  }
  c.expect(violations.empty(), std::to_string(violations.size()) + " integrity violations");
  c.expect(elapsed < 10.0, "build took " + fmt(elapsed) + " s");
  c.detail = std::to_string(agencies) + " agencies, " + std::to_string(routes) + " routes, " + std::to_string(compared) +
             " shapes equal to source, " + std::to_string(stop_times) + " stop_times, " +
             std::to_string(violations.size()) + " violations, " + fmt(elapsed) + " s";
}

void key_augmentation(Check& c) {
  db::Connection conn(transitq::testing::shared_fixture_db(), db::Connection::Mode::read_only);
  std::set<std::string> owners;
  for (auto& r : conn.query("SELECT agency_id FROM routes WHERE route_id = '18'").rows)
    owners.insert(std::get<std::string>(r[0]));
  c.expect(owners.size() == 2, std::to_string(owners.size()) + " routes with id 18");

  // Pairwise scan of every keyed entity, plus row counts against the source files.
  std::size_t collisions = 0;
  const std::vector<std::pair<std::string, std::string>> keyed = {
      {"routes", "route_id"}, {"trips", "trip_id"}, {"stops", "stop_id"}, {"shapes", "shape_id"}};
  for (const auto& [table, id] : keyed) {
    auto rows = conn.query("SELECT agency_id, " + id + " FROM " + table).rows;
    for (std::size_t i = 0; i < rows.size(); ++i)
      for (std::size_t j = i + 1; j < rows.size(); ++j) collisions += rows[i] == rows[j];
    std::size_t source = 0;
    for (auto& [feed, _] : kFeeds) {
      std::set<std::string> ids;
      auto file = table == "shapes" ? std::string("shapes.txt") : table + ".txt";
      for (auto& r : csv_rows(data_path(std::string(feed) + "/" + file))) ids.insert(r[id]);
      source += ids.size();
    }
    c.expect(rows.size() == source, table + ": " + std::to_string(rows.size()) + " rows vs " + std::to_string(source) + " in source");
  }
  c.expect(collisions == 0, std::to_string(collisions) + " collisions");
  c.detail = "route 18 owned by " + std::to_string(owners.size()) + " agencies, " + std::to_string(collisions) + " collisions";
}

void municipality_assignment(Check& c) {
  auto ms = transitq::testing::fixture_municipalities();
  std::mt19937 rng(20241016);
  std::uniform_real_distribution<double> lat(44.46, 44.57), lon(11.29, 11.40);
  std::vector<gtfs::StopRecord> stops;
  for (int i = 0; i < 100; ++i) stops.push_back({"X", std::to_string(i), "", lat(rng), lon(rng), {}});
  std::size_t agree = 0, inside = 0;
  for (const auto& s : gtfs::assign_stop_municipality(stops, ms)) {
    auto expected = brute_force_municipality(ms, {s.lat, s.lon});
    inside += expected.has_value();
    agree += s.municipality_code == expected;
  }
  // The ingested fixture stops as well.
  db::Connection conn(transitq::testing::shared_fixture_db(), db::Connection::Mode::read_only);
  std::size_t fixture = 0, fixture_agree = 0;
  auto s = conn.prepare("SELECT stop_lat, stop_lon, municipality_code FROM stops");
  while (s.step()) {
    ++fixture;
    auto code = s.column(2);
    std::optional<std::string> got;
    if (auto* str = std::get_if<std::string>(&code)) got = *str;
    bool same = got == brute_force_municipality(ms, {s.real(0), s.real(1)});
    fixture_agree += same;
    c.expect(same, "fixture stop at " + fmt(s.real(0), 4) + "," + fmt(s.real(1), 4) + " disagrees");
  }
  c.expect(agree == 100, std::to_string(100 - agree) + " random stops disagree");
  c.expect(inside > 0 && inside < 100, "random stops do not straddle borders");
  c.detail = std::to_string(agree) + "/100 random stops (" + std::to_string(inside) + " inside), " +
             std::to_string(fixture_agree) + "/" + std::to_string(fixture) + " fixture stops";
}

void guard(Check& c) {
  db::Connection conn(transitq::testing::shared_fixture_db(), db::Connection::Mode::read_only);
  sql::Guard g(sql::SchemaInfo::introspect(conn));
  std::istringstream in(read_file(data_path("mutating_sql.txt")));
  std::size_t total = 0, rejected = 0;
  for (std::string line; std::getline(in, line);) {
    if (line.empty() || line[0] == '#') continue;
    ++total;
    bool r = g.check({line}, &conn).report.verdict == sql::Verdict::rejected;
    rejected += r;
    c.expect(r, "not rejected: " + line);
  }
  c.expect(total >= 15, "taxonomy has only " + std::to_string(total) + " statements");

  const std::string bologna =
      "select count(distinct r.route_id) from routes r join agency a using (agency_id) "
      "where upper(a.agency_hq_city) like upper('Bologna')";
  auto b = g.check({bologna}, &conn);
  c.expect(b.report.verdict == sql::Verdict::accepted && b.candidate.sql == bologna, "Bologna query not accepted verbatim");

  const std::vector<std::pair<std::string, std::string>> repairs = {
      {"select trip_id from trips where direction = 0", "select trip_id from trips where direction = 'andata'"},
      {"select trip_id from trips t where t.direction = 1", "select trip_id from trips t where t.direction = 'ritorno'"},
  };
  for (const auto& [in_sql, want] : repairs) {
    auto [once, r1] = g.apply_repair_rules({in_sql});
    auto [twice, r2] = g.apply_repair_rules(once);
    c.expect(once.sql == want, "repair gave: " + once.sql);
    c.expect(r1.applied_rules == std::vector<std::string>{"DIRECTION_LITERAL"}, "rule not reported for: " + in_sql);
    c.expect(twice.sql == once.sql && r2.applied_rules.empty(), "repair not idempotent: " + in_sql);
  }
  c.detail = std::to_string(rejected) + "/" + std::to_string(total) + " mutating statements rejected, Bologna query " +
             (b.report.verdict == sql::Verdict::accepted ? "accepted" : "rejected") + ", direction repair idempotent";
}

void comparator(Check& c) {
  using eval::Category;
  auto six = eval::compare_result_sets(letters("a"), letters("abcdef"));
  c.expect(six.category == Category::superset && six.fp_rate && std::abs(*six.fp_rate - 0.833) <= 0.001,
           "gold 1 / generated 6 fp_rate");
  auto four = eval::compare_result_sets(letters("a"), letters("abcd"));
  c.expect(four.category == Category::superset && four.fp_rate && *four.fp_rate == 0.75, "gold 1 / generated 4 fp_rate");
  // Four gold rows against four generated rows with one swapped has no
  // false-positive rate under the taxonomy; it is a partial overlap.
  auto swapped = eval::compare_result_sets(letters("abcd"), letters("abce"));
  c.expect(swapped.category == Category::partial_overlap, "4/4 with one swapped");
  auto sub = eval::compare_result_sets(letters("abcde"), letters("abc"));
  c.expect(sub.category == Category::subset && sub.fn_rate && *sub.fn_rate == 0.4, "3 of 5 fn_rate");

  std::mt19937 rng(7);
  auto pick = [&](int n) { return static_cast<int>(rng() % static_cast<unsigned>(n)); };
  auto value = [&]() -> db::Value {
    switch (pick(4)) {
      case 0: return db::Null{};
      case 1: return std::int64_t{pick(4)};
      case 2: return pick(4) + (pick(2) ? 0.5 : 0.0);
      default: return std::string(1, static_cast<char>('a' + pick(4)));
    }
  };
  auto permute = [&](const db::Table& t) {
    std::vector<std::size_t> cols(t.columns.size());
    std::iota(cols.begin(), cols.end(), 0);
    std::shuffle(cols.begin(), cols.end(), rng);
    db::Table out;
    for (auto k : cols) out.columns.push_back(t.columns[k]);
    for (const auto& row : t.rows) {
      std::vector<db::Value> r;
      for (auto k : cols) r.push_back(row[k]);
      out.rows.push_back(std::move(r));
    }
    std::shuffle(out.rows.begin(), out.rows.end(), rng);
    return out;
  };
  int variant = 0;
  std::set<Category> seen;
  for (int iter = 0; iter < 1000; ++iter) {
    int ncols = 1 + pick(3);
    db::Table gold, gen;
    for (int k = 0; k < ncols; ++k) gold.columns.push_back("c" + std::to_string(k));
    gen.columns = gold.columns;
    if (pick(10) == 0) gen.columns.back() = "other";
    std::vector<std::vector<db::Value>> universe(1 + pick(8));
    for (auto& r : universe)
      for (int k = 0; k < ncols; ++k) r.push_back(value());
    for (const auto& r : universe) {
      if (pick(2)) gold.rows.push_back(r);
      if (pick(2)) gen.rows.push_back(r);
    }
    auto base = eval::compare_result_sets(gold, gen);
    seen.insert(base.category);
    variant += !(eval::compare_result_sets(permute(gold), permute(gen)) == base);
  }
  c.expect(variant == 0, std::to_string(variant) + " tables changed category under permutation");
  c.detail = "fp gold 1 vs 6 " + fmt(*six.fp_rate) + ", gold 1 vs 4 " + fmt(four.fp_rate.value_or(-1), 2) + ", fn 3 of 5 " +
             fmt(sub.fn_rate.value_or(-1), 2) + ", 4/4 one swapped " + std::string(eval::to_string(swapped.category)) +
             ", 1000 random tables permutation-invariant over " + std::to_string(seen.size()) + " categories";
}

void summary(Check& c) {
  using eval::Category;
  eval::MetricsSummary s;
  for (auto [cat, n] : {std::pair{Category::syntax_error, 10}, {Category::wrong_shape, 17}, {Category::exact_match, 59},
                        {Category::superset, 2}, {Category::subset, 10}, {Category::disjoint, 14}})
    s.add("T1", cat, n);
  c.expect(s.total() == 112, "total " + std::to_string(s.total()));
  double a = s.overall_accuracy();
  c.expect(std::abs(a - 0.527) <= 0.001, "accuracy " + fmt(a, 4));
  std::vector<eval::GradedOutcome> t3;
  for (int i = 0; i < 34; ++i) t3.push_back({"q" + std::to_string(i), "T3", 1, {i < 6 ? Category::scalar_exact : Category::scalar_diff}});
  double b = eval::summarize(t3).accuracy("T3");
  c.expect(std::abs(b - 0.176) <= 0.001, "scalar accuracy " + fmt(b, 4));
  c.detail = "59/112 -> " + fmt(a) + ", 6/34 -> " + fmt(b);
}

void end_to_end(Check& c) {
  auto started = Clock::now();
  const auto& db_path = transitq::testing::shared_fixture_db();
  db::Connection conn(db_path, db::Connection::Mode::read_only);
  eval::ExpandConfig ec;
  ec.seed = 12;
  ec.counts = {{"T1", 4}, {"T2", 4}, {"T3", 4}};
  ec.reference_date = kRef;
  auto questions = eval::expand_templates(conn, ec);
  sql::Guard guard(sql::SchemaInfo::introspect(conn));
  auto gold = eval::build_gold(questions, conn, guard, kRef);
  std::map<std::string, std::string> template_of;
  for (const auto& q : questions) template_of[q.id] = q.template_id;
  std::map<std::string, std::pair<eval::GoldEntry, db::Table>> gold_rows;
  for (const auto& g : gold) gold_rows.emplace(g.question_id, std::pair{g, conn.query(g.gold_sql)});

  auto run_once = [&](std::string& records, std::string& report, std::size_t& complete) {
    TempDir dir;
    auto cfg = service::AppConfig::load(shipped_path("config.json"));
    cfg.service.run_store = dir / "runs.db";
    auto svc = service::Service::create(db_path, cfg);
    service::BackgroundServer server(*svc);
    auto result = eval::run_suite(questions, eval::http_transport(server.endpoint()), {});
    std::vector<eval::GradedOutcome> outcomes;
    nlohmann::json all = nlohmann::json::array();
    for (const auto& r : result.records) {
      all.push_back(eval::canonical_json(r));
      complete += r.complete();
      const auto& [g, rows] = gold_rows.at(r.question_id);
      outcomes.push_back({r.question_id, template_of.at(r.question_id), r.attempt, eval::grade_run(g, rows, r)});
    }
    records = all.dump();
    report = eval::report_json(eval::summarize(outcomes)).dump();
    c.expect(!result.partial, "suite reported partial");
  };
  std::string rec1, rec2, rep1, rep2;
  std::size_t complete1 = 0, complete2 = 0;
  run_once(rec1, rep1, complete1);
  run_once(rec2, rep2, complete2);
  double elapsed = seconds_since(started);
  c.expect(questions.size() == 12, std::to_string(questions.size()) + " questions");
  c.expect(rec1 == rec2, "run records differ between runs");
  c.expect(rep1 == rep2, "summaries differ between runs");
  c.expect(complete1 == questions.size() && complete2 == questions.size(), "not every request completed");
  c.expect(elapsed < 60.0, "suite took " + fmt(elapsed) + " s");
  auto summary = nlohmann::json::parse(rep1);
  c.detail = std::to_string(questions.size()) + " questions x 2 runs, records " + (rec1 == rec2 ? "identical" : "differ") +
             ", accuracy " + fmt(summary["accuracy"]["overall"].get<double>()) + " both times, " + fmt(elapsed, 2) + " s";
}

void template_expansion(Check& c) {
  db::Connection conn(transitq::testing::shared_fixture_db(), db::Connection::Mode::read_only);
  eval::ExpandConfig ec;
  ec.seed = 2024;
  ec.counts = {{"T1", 20}, {"T2", 20}, {"T3", 60}};
  ec.invalid_probability = 0.3;
  ec.reference_date = kRef;
  auto a = eval::expand_templates(conn, ec);
  auto b = eval::expand_templates(conn, ec);
  c.expect(a == b, "same seed gave different questions");
  auto links = source_links();
  std::size_t invalid = 0, linked = 0;
  for (const auto& q : a) {
    if (!q.injected_invalid) continue;
    ++invalid;
    linked += links.count({q.bindings.at("route"), q.bindings.at("stop")});
  }
  c.expect(invalid > 0, "no invalid pairs injected");
  c.expect(linked == 0, std::to_string(linked) + " injected pairs are actually linked");
  c.detail = std::to_string(a.size()) + " questions identical across runs, " + std::to_string(invalid) +
             " injected T3 pairs, " + std::to_string(linked) + " linked in stop_times";
}

void map_pipeline(Check& c) {
  db::Connection conn(transitq::testing::shared_fixture_db(), db::Connection::Mode::read_only);
  auto s = conn.prepare("SELECT DISTINCT agency_id, route_id, direction FROM trips WHERE shape_id IS NOT NULL ORDER BY 1, 2, 3");
  std::size_t checked = 0;
  while (s.step()) {
    maps::RouteRef ref{s.text(0), s.text(1)};
    auto name = ref.agency_id + "/" + ref.route_id + " " + s.text(2);
    auto g = maps::fetch_route_geometry(conn, ref, gtfs::parse_direction(s.text(2)));
    auto doc = nlohmann::json::parse(maps::to_geo_document(g).dump());
    c.expect(maps::validate_geo_document(doc).empty(), name + ": invalid document");
    auto back = maps::from_geo_document(doc);
    bool same = back.route == g.route && back.shape_id == g.shape_id && back.direction == g.direction &&
                back.shape_points.size() == g.shape_points.size() && back.stops.size() == g.stops.size();
    for (std::size_t i = 0; same && i < g.shape_points.size(); ++i)
      same = back.shape_points[i].lat == maps::round_coordinate(g.shape_points[i].lat) &&
             back.shape_points[i].lon == maps::round_coordinate(g.shape_points[i].lon);
    for (std::size_t i = 0; same && i < g.stops.size(); ++i)
      same = back.stops[i].stop_id == g.stops[i].stop_id && back.stops[i].name == g.stops[i].name &&
             back.stops[i].lat == maps::round_coordinate(g.stops[i].lat) &&
             back.stops[i].lon == maps::round_coordinate(g.stops[i].lon);
    c.expect(same, name + ": round trip differs");

    auto seq = conn.prepare(
        "SELECT p.lat, p.lon FROM shape_sequences ss JOIN shape_points p ON p.agency_id = ss.agency_id AND "
        "p.point_id = ss.point_id WHERE ss.agency_id = ? AND ss.shape_id = ? ORDER BY ss.seq");
    seq.bind_all(ref.agency_id, g.shape_id);
    std::vector<std::array<double, 2>> expected;
    while (seq.step()) expected.push_back({maps::round_coordinate(seq.real(1)), maps::round_coordinate(seq.real(0))});
    std::vector<std::array<double, 2>> line;
    for (const auto& f : doc["features"])
      if (f["geometry"]["type"] == "LineString")
        for (const auto& p : f["geometry"]["coordinates"]) line.push_back({p[0].get<double>(), p[1].get<double>()});
    c.expect(line == expected, name + ": LineString order differs from shape sequence");
    ++checked;
  }
  // Routes whose trips carry no shape cannot be drawn and must say so.
  std::size_t routes = 0, shapeless = 0;
  for (auto& r : conn.query("SELECT agency_id, route_id FROM routes").rows) {
    ++routes;
    maps::RouteRef ref{std::get<std::string>(r[0]), std::get<std::string>(r[1])};
    auto has_shape = conn.prepare("SELECT count(*) FROM trips WHERE agency_id = ? AND route_id = ? AND shape_id IS NOT NULL");
    has_shape.bind_all(ref.agency_id, ref.route_id);
    has_shape.step();
    if (has_shape.integer(0) > 0) continue;
    ++shapeless;
    bool refused = false;
    try {
      maps::fetch_route_geometry(conn, ref, std::nullopt);
    } catch (const NoGeometry&) {
      refused = true;
    }
    c.expect(refused, ref.agency_id + "/" + ref.route_id + ": shapeless route not reported as NO_GEOMETRY");
  }
  c.detail = std::to_string(checked) + " route directions round-tripped over " + std::to_string(routes - shapeless) +
             " shaped routes, " + std::to_string(shapeless) + " shapeless route refused";
}

}  // namespace

int main() {
  log::set_level(log::Level::error);
  const std::vector<std::pair<std::string, std::function<void(Check&)>>> criteria = {
      {"ingestion round-trip", ingestion_round_trip},
      {"key augmentation", key_augmentation},
      {"municipality assignment", municipality_assignment},
      {"sql guard", guard},
      {"comparator rates", comparator},
      {"summary arithmetic", summary},
      {"end-to-end determinism", end_to_end},
      {"template expansion", template_expansion},
      {"map pipeline", map_pipeline},
  };
  int failed = 0;
  for (const auto& [name, run] : criteria) {
    Check c;
    try {
      run(c);
    } catch (const std::exception& e) {
      c.failures.push_back(std::string("exception: ") + e.what());
    }
    bool ok = c.failures.empty();
    failed += !ok;
    std::cout << (ok ? "PASS " : "FAIL ") << name << ": " << c.detail << "\n";
    for (const auto& f : c.failures) std::cout << "     - " << f << "\n";
  }
  std::cout << (criteria.size() - failed) << "/" << criteria.size() << " criteria passed\n";
  return failed == 0 ? 0 : 1;
}
