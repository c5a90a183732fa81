#pragma once

#include <array>
#include <cstdio>
#include <map>

#include "transitq/gtfs/feed.hpp"
#include "transitq/gtfs/municipality.hpp"
#include "transitq/sqlite.hpp"

namespace transitq::gtfs {

// Creation order matters: parents before children.
inline constexpr std::array<std::string_view, 11> kSchema = {
    R"sql(CREATE TABLE municipalities (
  code TEXT NOT NULL PRIMARY KEY,
  name TEXT NOT NULL
))sql",
    R"sql(CREATE TABLE agency (
  agency_id TEXT NOT NULL PRIMARY KEY,
  agency_name TEXT NOT NULL,
  agency_hq_city TEXT
))sql",
    R"sql(CREATE TABLE routes (
  agency_id TEXT NOT NULL,
  route_id TEXT NOT NULL,
  route_short_name TEXT,
  route_long_name TEXT,
  route_type INTEGER,
  PRIMARY KEY (agency_id, route_id),
  FOREIGN KEY (agency_id) REFERENCES agency (agency_id)
))sql",
    R"sql(CREATE TABLE calendar (
  agency_id TEXT NOT NULL,
  service_id TEXT NOT NULL,
  monday INTEGER NOT NULL CHECK (monday IN (0, 1)),
  tuesday INTEGER NOT NULL CHECK (tuesday IN (0, 1)),
  wednesday INTEGER NOT NULL CHECK (wednesday IN (0, 1)),
  thursday INTEGER NOT NULL CHECK (thursday IN (0, 1)),
  friday INTEGER NOT NULL CHECK (friday IN (0, 1)),
  saturday INTEGER NOT NULL CHECK (saturday IN (0, 1)),
  sunday INTEGER NOT NULL CHECK (sunday IN (0, 1)),
  start_date TEXT NOT NULL,
  end_date TEXT NOT NULL,
  PRIMARY KEY (agency_id, service_id),
  FOREIGN KEY (agency_id) REFERENCES agency (agency_id),
  CHECK (start_date <= end_date)
))sql",
    R"sql(CREATE TABLE shapes (
  agency_id TEXT NOT NULL,
  shape_id TEXT NOT NULL,
  PRIMARY KEY (agency_id, shape_id),
  FOREIGN KEY (agency_id) REFERENCES agency (agency_id)
))sql",
    R"sql(CREATE TABLE shape_points (
  agency_id TEXT NOT NULL,
  point_id INTEGER NOT NULL,
  lat REAL NOT NULL,
  lon REAL NOT NULL,
  PRIMARY KEY (agency_id, point_id),
  FOREIGN KEY (agency_id) REFERENCES agency (agency_id)
))sql",
    R"sql(CREATE TABLE shape_sequences (
  agency_id TEXT NOT NULL,
  shape_id TEXT NOT NULL,
  seq INTEGER NOT NULL CHECK (seq > 0),
  point_id INTEGER NOT NULL,
  PRIMARY KEY (agency_id, shape_id, seq),
  FOREIGN KEY (agency_id, shape_id) REFERENCES shapes (agency_id, shape_id),
  FOREIGN KEY (agency_id, point_id) REFERENCES shape_points (agency_id, point_id)
))sql",
    R"sql(CREATE TABLE trips (
  agency_id TEXT NOT NULL,
  trip_id TEXT NOT NULL,
  route_id TEXT NOT NULL,
  service_id TEXT NOT NULL,
  shape_id TEXT,
  direction TEXT CHECK (direction IN ('andata', 'ritorno')),
  trip_headsign TEXT,
  PRIMARY KEY (agency_id, trip_id),
  FOREIGN KEY (agency_id, route_id) REFERENCES routes (agency_id, route_id),
  FOREIGN KEY (agency_id, service_id) REFERENCES calendar (agency_id, service_id),
  FOREIGN KEY (agency_id, shape_id) REFERENCES shapes (agency_id, shape_id)
))sql",
    R"sql(CREATE TABLE stops (
  agency_id TEXT NOT NULL,
  stop_id TEXT NOT NULL,
  stop_name TEXT,
  stop_lat REAL NOT NULL CHECK (stop_lat BETWEEN -90 AND 90),
  stop_lon REAL NOT NULL CHECK (stop_lon BETWEEN -180 AND 180),
  municipality_code TEXT,
  PRIMARY KEY (agency_id, stop_id),
  FOREIGN KEY (agency_id) REFERENCES agency (agency_id),
  FOREIGN KEY (municipality_code) REFERENCES municipalities (code)
))sql",
    R"sql(CREATE TABLE stop_times (
  agency_id TEXT NOT NULL,
  trip_id TEXT NOT NULL,
  stop_id TEXT NOT NULL,
  stop_sequence INTEGER NOT NULL CHECK (stop_sequence >= 0),
  arrival_time TEXT NOT NULL,
  departure_time TEXT NOT NULL,
  arrival_seconds INTEGER NOT NULL,
  departure_seconds INTEGER NOT NULL,
  PRIMARY KEY (agency_id, trip_id, stop_sequence),
  FOREIGN KEY (agency_id, trip_id) REFERENCES trips (agency_id, trip_id),
  FOREIGN KEY (agency_id, stop_id) REFERENCES stops (agency_id, stop_id),
  CHECK (arrival_seconds <= departure_seconds)
))sql",
    // One row per shape point and per stop of every (route, direction, shape).
    R"sql(CREATE VIEW route_geometry AS
SELECT DISTINCT t.agency_id, t.route_id, t.direction, t.shape_id, 'shape_point' AS kind, ss.seq AS seq,
       NULL AS stop_id, NULL AS stop_name, p.lat AS lat, p.lon AS lon
FROM trips t
JOIN shape_sequences ss ON ss.agency_id = t.agency_id AND ss.shape_id = t.shape_id
JOIN shape_points p ON p.agency_id = ss.agency_id AND p.point_id = ss.point_id
UNION ALL
SELECT DISTINCT t.agency_id, t.route_id, t.direction, t.shape_id, 'stop' AS kind, st.stop_sequence AS seq,
       s.stop_id AS stop_id, s.stop_name AS stop_name, s.stop_lat AS lat, s.stop_lon AS lon
FROM trips t
JOIN stop_times st ON st.agency_id = t.agency_id AND st.trip_id = t.trip_id
JOIN stops s ON s.agency_id = st.agency_id AND s.stop_id = st.stop_id)sql",
};

inline std::string format_hms(int seconds) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%02d:%02d:%02d", seconds / 3600, (seconds / 60) % 60, seconds % 60);
  return buf;
}

struct BuildReport {
  std::map<std::string, std::size_t> rows_per_table;
  std::size_t unassigned_stops = 0;
};

// One row reported by PRAGMA foreign_key_check.
struct ForeignKeyViolation {
  std::string table;
  std::int64_t rowid = 0;
  std::string parent;
};

inline std::vector<ForeignKeyViolation> foreign_key_violations(const db::Connection& conn) {
  std::vector<ForeignKeyViolation> out;
  auto stmt = conn.prepare("PRAGMA foreign_key_check");
  while (stmt.step()) out.push_back({stmt.text(0), stmt.integer(1), stmt.text(2)});
  return out;
}

namespace detail {

inline db::Value opt_text(const std::string& s) { return s.empty() ? db::Value{} : db::Value{s}; }

// Runs one insert; a constraint failure is rethrown with the offending row.
template <typename... Args>
void insert_row(db::Statement& stmt, std::string_view table, const std::string& row_desc, const Args&... args) {
  try {
    stmt.run(args...);
  } catch (const ConstraintViolation& e) {
    stmt.reset();
    throw ConstraintViolation(std::string(table) + " row " + row_desc + ": " + e.what());
  }
}

inline std::string most_common_city(const FeedBundle& b, const std::map<std::string, std::string>& names) {
  std::map<std::string, std::size_t> counts;
  for (const auto& s : b.stops)
    if (s.municipality_code) ++counts[names.at(*s.municipality_code)];
  std::string best;
  std::size_t best_n = 0;
  for (const auto& [name, n] : counts)
    if (n > best_n) best = name, best_n = n;
  return best;
}

}  // namespace detail

// Creates (or replaces) the SQLite database at `path` and loads every bundle.
// Bundles are normalized and stops enriched with municipalities on the way.
// An agency without an explicit agency_hq_city gets the municipality that
// contains most of its stops.
inline db::Connection build_database(const std::filesystem::path& path, std::vector<FeedBundle> bundles,
                                     const std::vector<MunicipalityRecord>& municipalities,
                                     BuildReport* report = nullptr) {
  if (path.string() != ":memory:") {
    std::error_code ec;
    std::filesystem::remove(path, ec);
  }
  db::Connection conn(path, db::Connection::Mode::create);
  conn.exec("PRAGMA journal_mode = DELETE");
  for (auto ddl : kSchema) conn.exec(std::string(ddl));

  BuildReport rep;
  std::map<std::string, std::string> municipality_names;
  for (const auto& m : municipalities) municipality_names.emplace(m.code, m.name);

  db::Transaction tx(conn);
  {
    auto ins = conn.prepare("INSERT INTO municipalities (code, name) VALUES (?, ?)");
    for (const auto& m : municipalities) detail::insert_row(ins, "municipalities", m.code, m.code, m.name);
    rep.rows_per_table["municipalities"] = municipalities.size();
  }

  auto agency = conn.prepare("INSERT INTO agency VALUES (?, ?, ?)");
  auto route = conn.prepare("INSERT INTO routes VALUES (?, ?, ?, ?, ?)");
  auto cal = conn.prepare("INSERT INTO calendar VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?)");
  auto shape = conn.prepare("INSERT INTO shapes VALUES (?, ?)");
  auto point = conn.prepare("INSERT INTO shape_points VALUES (?, ?, ?, ?)");
  auto seq = conn.prepare("INSERT INTO shape_sequences VALUES (?, ?, ?, ?)");
  auto trip = conn.prepare("INSERT INTO trips VALUES (?, ?, ?, ?, ?, ?, ?)");
  auto stop = conn.prepare("INSERT INTO stops VALUES (?, ?, ?, ?, ?, ?)");
  auto st = conn.prepare("INSERT INTO stop_times VALUES (?, ?, ?, ?, ?, ?, ?, ?)");

  for (auto& raw : bundles) {
    FeedBundle b = normalize_keys(std::move(raw));
    AssignmentReport assignment;
    b.stops = assign_stop_municipality(std::move(b.stops), municipalities, &assignment);
    rep.unassigned_stops += assignment.unassigned_stop_ids.size();
    const std::string& tag = b.agency_tag;

    for (auto& a : b.agencies) {
      if (a.agency_hq_city.empty()) a.agency_hq_city = detail::most_common_city(b, municipality_names);
      detail::insert_row(agency, "agency", a.agency_id, a.agency_id, a.agency_name, detail::opt_text(a.agency_hq_city));
    }
    for (const auto& r : b.routes) {
      db::Value type = r.route_type ? db::Value{std::int64_t{*r.route_type}} : db::Value{};
      detail::insert_row(route, "routes", Key{tag, r.route_id}.str(), r.agency_id, r.route_id,
                         detail::opt_text(r.short_name), detail::opt_text(r.long_name), type);
    }
    for (const auto& c : b.calendars) {
      std::array<std::int64_t, 7> f{};
      for (int i = 0; i < 7; ++i) f[i] = c.weekday_flags[i] ? 1 : 0;
      detail::insert_row(cal, "calendar", Key{tag, c.service_id}.str(), c.agency_id, c.service_id, f[0], f[1], f[2],
                         f[3], f[4], f[5], f[6], c.start_date.iso(), c.end_date.iso());
    }
    auto shapes = decompose_shapes(b);
    for (const auto& s : shapes.shapes) detail::insert_row(shape, "shapes", Key{tag, s.shape_id}.str(), s.agency_id, s.shape_id);
    for (const auto& p : shapes.points)
      detail::insert_row(point, "shape_points", Key{tag, std::to_string(p.point_id)}.str(), p.agency_id, p.point_id,
                         p.lat, p.lon);
    for (const auto& s : shapes.sequences)
      detail::insert_row(seq, "shape_sequences", Key{tag, s.shape_id + "#" + std::to_string(s.seq)}.str(),
                         s.agency_id, s.shape_id, std::int64_t{s.seq}, s.point_id);
    for (const auto& s : b.stops) {
      db::Value code = s.municipality_code ? db::Value{*s.municipality_code} : db::Value{};
      detail::insert_row(stop, "stops", Key{tag, s.stop_id}.str(), s.agency_id, s.stop_id, detail::opt_text(s.name),
                         s.lat, s.lon, code);
    }
    for (const auto& t : b.trips) {
      db::Value dir = t.direction ? db::Value{std::string(to_string(*t.direction))} : db::Value{};
      detail::insert_row(trip, "trips", Key{tag, t.trip_id}.str(), t.agency_id, t.trip_id, t.route_id, t.service_id,
                         detail::opt_text(t.shape_id), dir, detail::opt_text(t.headsign));
    }
    for (const auto& x : b.stop_times)
      detail::insert_row(st, "stop_times", Key{tag, x.trip_id + "#" + std::to_string(x.stop_sequence)}.str(),
                         x.agency_id, x.trip_id, x.stop_id, std::int64_t{x.stop_sequence}, format_hms(x.arrival),
                         format_hms(x.departure), std::int64_t{x.arrival}, std::int64_t{x.departure});

    rep.rows_per_table["agency"] += b.agencies.size();
    rep.rows_per_table["routes"] += b.routes.size();
    rep.rows_per_table["calendar"] += b.calendars.size();
    rep.rows_per_table["shapes"] += shapes.shapes.size();
    rep.rows_per_table["shape_points"] += shapes.points.size();
    rep.rows_per_table["shape_sequences"] += shapes.sequences.size();
    rep.rows_per_table["stops"] += b.stops.size();
    rep.rows_per_table["trips"] += b.trips.size();
    rep.rows_per_table["stop_times"] += b.stop_times.size();
  }

  auto violations = foreign_key_violations(conn);
  if (!violations.empty())
    throw ConstraintViolation(std::to_string(violations.size()) + " foreign key violation(s); first in " +
                              violations[0].table + " rowid " + std::to_string(violations[0].rowid) + " -> " +
                              violations[0].parent);
  tx.commit();
  if (report) *report = std::move(rep);
  return conn;
}

}  // namespace transitq::gtfs
