#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <unordered_map>
#include <unordered_set>

#include "transitq/csv.hpp"
#include "transitq/error.hpp"
#include "transitq/gtfs/types.hpp"
#include "transitq/log.hpp"

namespace transitq::gtfs {

struct ParseOptions {
  // Malformed rows tolerated per file before the whole parse aborts.
  std::size_t error_cap = 100;
};

namespace detail {

struct RowReject {
  std::string reason;
};

[[noreturn]] inline void reject(std::string reason) { throw RowReject{std::move(reason)}; }

inline std::optional<double> parse_double(std::string_view s) {
  if (s.empty()) return std::nullopt;
  double v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size() || !std::isfinite(v)) return std::nullopt;
  return v;
}

inline std::optional<int> parse_int(std::string_view s) {
  if (s.empty()) return std::nullopt;
  int v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) return std::nullopt;
  return v;
}

// H:MM:SS or HH:MM:SS; hours may run past 24.
inline std::optional<int> parse_time(std::string_view s) {
  auto c1 = s.find(':');
  if (c1 == std::string_view::npos) return std::nullopt;
  auto c2 = s.find(':', c1 + 1);
  if (c2 == std::string_view::npos) return std::nullopt;
  auto h = parse_int(s.substr(0, c1));
  auto m = parse_int(s.substr(c1 + 1, c2 - c1 - 1));
  auto sec = parse_int(s.substr(c2 + 1));
  if (!h || !m || !sec || *h < 0 || *m < 0 || *m > 59 || *sec < 0 || *sec > 59) return std::nullopt;
  return *h * 3600 + *m * 60 + *sec;
}

// Reads one CSV file and hands each data row to `fn`, which calls reject()
// for rows that fail type checks.
class FileParser {
 public:
  FileParser(const std::filesystem::path& dir, std::string name, FeedBundle& bundle, const ParseOptions& opts)
      : name_(std::move(name)), bundle_(bundle), opts_(opts) {
    path_ = dir / (name_ + ".txt");
    if (!std::filesystem::is_regular_file(path_)) throw MissingFile(name_);
  }

  template <typename Fn>
  void each(const std::vector<std::string_view>& required_columns, Fn&& fn) {
    std::ifstream in(path_, std::ios::binary);
    if (!in) throw MissingFile(name_);
    csv::Reader reader(in);
    csv::Row row;
    if (!reader.next(row)) return;
    csv::Header header(row.fields);
    for (auto col : required_columns)
      if (!header.has(col)) throw MalformedRow(file_name(), row.line, "missing column " + std::string(col));

    std::string csv_error;
    while (reader.next(row, &csv_error)) {
      if (row.fields.size() == 1 && csv::trim(row.fields[0]).empty()) continue;
      try {
        if (!csv_error.empty()) reject(csv_error);
        fn(header, row);
      } catch (const RowReject& rej) {
        report(row.line, rej.reason);
      }
    }
  }

  std::string file_name() const { return name_ + ".txt"; }

 private:
  void report(std::size_t line, const std::string& reason) {
    bundle_.issues.push_back({file_name(), line, reason});
    log::warn(bundle_.agency_tag + ": " + file_name() + ":" + std::to_string(line) + ": " + reason);
    if (++errors_ > opts_.error_cap)
      throw MalformedRow(file_name(), line, reason + " (error cap of " + std::to_string(opts_.error_cap) + " exceeded)");
  }

  std::string name_;
  std::filesystem::path path_;
  FeedBundle& bundle_;
  const ParseOptions& opts_;
  std::size_t errors_ = 0;
};

inline std::string need(const csv::Header& h, const csv::Row& r, std::string_view col) {
  auto v = h.get(r, col);
  if (v.empty()) detail::reject(std::string(col) + " is empty");
  return std::string(v);
}

inline double need_coord(const csv::Header& h, const csv::Row& r, std::string_view col) {
  auto v = parse_double(h.get(r, col));
  if (!v) detail::reject(std::string(col) + " is not a number");
  return *v;
}

}  // namespace detail

// Reads the seven required GTFS files of one feed. Rows that fail type checks
// are skipped and recorded in `issues`; more than `error_cap` of them in one
// file aborts with MalformedRow.
inline FeedBundle parse_feed(const std::filesystem::path& dir, std::string agency_tag, const ParseOptions& opts = {}) {
  if (!std::filesystem::is_directory(dir)) throw MissingFile(dir.string() + " is not a directory");
  for (auto f : kRequiredFiles)
    if (!std::filesystem::is_regular_file(dir / (std::string(f) + ".txt"))) throw MissingFile(std::string(f));

  FeedBundle b;
  b.agency_tag = std::move(agency_tag);
  b.source_path = dir;
  using detail::need;

  {
    detail::FileParser p(dir, "agency", b, opts);
    std::unordered_set<std::string> seen;
    p.each({"agency_name"}, [&](const csv::Header& h, const csv::Row& r) {
      AgencyRecord a;
      a.source_agency_id = std::string(h.get(r, "agency_id"));
      a.agency_id = a.source_agency_id;
      a.agency_name = need(h, r, "agency_name");
      a.agency_hq_city = std::string(h.get(r, "agency_hq_city"));
      if (!seen.insert(a.source_agency_id).second) detail::reject("duplicate agency_id " + a.source_agency_id);
      b.agencies.push_back(std::move(a));
    });
  }
  {
    detail::FileParser p(dir, "routes", b, opts);
    std::unordered_set<std::string> seen;
    p.each({"route_id"}, [&](const csv::Header& h, const csv::Row& r) {
      RouteRecord rt;
      rt.route_id = need(h, r, "route_id");
      rt.source_agency_id = std::string(h.get(r, "agency_id"));
      rt.agency_id = rt.source_agency_id;
      rt.short_name = std::string(h.get(r, "route_short_name"));
      rt.long_name = std::string(h.get(r, "route_long_name"));
      if (rt.short_name.empty() && rt.long_name.empty()) detail::reject("route has neither short nor long name");
      if (auto t = h.get(r, "route_type"); !t.empty()) {
        rt.route_type = detail::parse_int(t);
        if (!rt.route_type) detail::reject("route_type is not an integer: " + std::string(t));
      }
      if (!seen.insert(rt.route_id).second) detail::reject("duplicate route_id " + rt.route_id);
      b.routes.push_back(std::move(rt));
    });
  }
  {
    detail::FileParser p(dir, "trips", b, opts);
    std::unordered_set<std::string> seen;
    p.each({"route_id", "service_id", "trip_id"}, [&](const csv::Header& h, const csv::Row& r) {
      TripRecord t;
      t.trip_id = need(h, r, "trip_id");
      t.route_id = need(h, r, "route_id");
      t.service_id = need(h, r, "service_id");
      t.shape_id = std::string(h.get(r, "shape_id"));
      t.headsign = std::string(h.get(r, "trip_headsign"));
      if (auto d = h.get(r, "direction_id"); !d.empty()) {
        t.direction = parse_direction(d);
        if (!t.direction) detail::reject("invalid direction_id " + std::string(d));
      }
      if (!seen.insert(t.trip_id).second) detail::reject("duplicate trip_id " + t.trip_id);
      b.trips.push_back(std::move(t));
    });
  }
  {
    detail::FileParser p(dir, "calendar", b, opts);
    static constexpr std::array<std::string_view, 7> days = {"monday", "tuesday", "wednesday", "thursday",
                                                             "friday", "saturday", "sunday"};
    std::unordered_set<std::string> seen;
    std::vector<std::string_view> cols = {"service_id", "start_date", "end_date"};
    cols.insert(cols.end(), days.begin(), days.end());
    p.each(cols, [&](const csv::Header& h, const csv::Row& r) {
      ServiceCalendar c;
      c.service_id = need(h, r, "service_id");
      for (std::size_t i = 0; i < days.size(); ++i) {
        auto v = h.get(r, days[i]);
        if (v != "0" && v != "1") detail::reject(std::string(days[i]) + " must be 0 or 1");
        c.weekday_flags[i] = v == "1";
      }
      auto s = Date::parse_compact(h.get(r, "start_date"));
      auto e = Date::parse_compact(h.get(r, "end_date"));
      if (!s || !e) detail::reject("invalid start_date/end_date");
      if (*e < *s) detail::reject("end_date before start_date");
      c.start_date = *s;
      c.end_date = *e;
      if (!seen.insert(c.service_id).second) detail::reject("duplicate service_id " + c.service_id);
      b.calendars.push_back(std::move(c));
    });
  }
  {
    detail::FileParser p(dir, "shapes", b, opts);
    std::set<std::pair<std::string, int>> seen;
    p.each({"shape_id", "shape_pt_lat", "shape_pt_lon", "shape_pt_sequence"},
           [&](const csv::Header& h, const csv::Row& r) {
             ShapeSourceRow s;
             s.shape_id = need(h, r, "shape_id");
             s.lat = detail::need_coord(h, r, "shape_pt_lat");
             s.lon = detail::need_coord(h, r, "shape_pt_lon");
             if (!valid_wgs84(s.lat, s.lon)) detail::reject("coordinates outside WGS84 bounds");
             auto seq = detail::parse_int(h.get(r, "shape_pt_sequence"));
             if (!seq || *seq < 0) detail::reject("shape_pt_sequence must be a non-negative integer");
             s.source_sequence = *seq;
             if (!seen.emplace(s.shape_id, s.source_sequence).second)
               detail::reject("duplicate sequence " + std::to_string(*seq) + " in shape " + s.shape_id);
             b.shape_rows.push_back(std::move(s));
           });
    // Group by shape in order of first appearance, then by sequence.
    std::unordered_map<std::string, std::size_t> first_seen;
    for (const auto& s : b.shape_rows) first_seen.emplace(s.shape_id, first_seen.size());
    std::stable_sort(b.shape_rows.begin(), b.shape_rows.end(), [&](const auto& x, const auto& y) {
      auto fx = first_seen[x.shape_id], fy = first_seen[y.shape_id];
      if (fx != fy) return fx < fy;
      return x.source_sequence < y.source_sequence;
    });
  }
  {
    detail::FileParser p(dir, "stops", b, opts);
    std::unordered_set<std::string> seen;
    p.each({"stop_id", "stop_lat", "stop_lon"}, [&](const csv::Header& h, const csv::Row& r) {
      StopRecord s;
      s.stop_id = need(h, r, "stop_id");
      s.name = std::string(h.get(r, "stop_name"));
      s.lat = detail::need_coord(h, r, "stop_lat");
      s.lon = detail::need_coord(h, r, "stop_lon");
      if (!valid_wgs84(s.lat, s.lon)) detail::reject("coordinates outside WGS84 bounds");
      if (!seen.insert(s.stop_id).second) detail::reject("duplicate stop_id " + s.stop_id);
      b.stops.push_back(std::move(s));
    });
  }
  {
    detail::FileParser p(dir, "stop_times", b, opts);
    std::set<std::pair<std::string, int>> seen;
    p.each({"trip_id", "stop_id", "stop_sequence"}, [&](const csv::Header& h, const csv::Row& r) {
      StopTimeRecord st;
      st.trip_id = need(h, r, "trip_id");
      st.stop_id = need(h, r, "stop_id");
      auto seq = detail::parse_int(h.get(r, "stop_sequence"));
      if (!seq || *seq < 0) detail::reject("stop_sequence must be a non-negative integer");
      st.stop_sequence = *seq;
      auto arr_s = h.get(r, "arrival_time");
      auto dep_s = h.get(r, "departure_time");
      if (arr_s.empty() && dep_s.empty()) detail::reject("arrival_time and departure_time both empty");
      auto arr = detail::parse_time(arr_s.empty() ? dep_s : arr_s);
      auto dep = detail::parse_time(dep_s.empty() ? arr_s : dep_s);
      if (!arr || !dep) detail::reject("invalid time value");
      if (*arr > *dep) detail::reject("arrival_time after departure_time");
      st.arrival = *arr;
      st.departure = *dep;
      if (!seen.emplace(st.trip_id, st.stop_sequence).second)
        detail::reject("duplicate stop_sequence " + std::to_string(st.stop_sequence) + " in trip " + st.trip_id);
      b.stop_times.push_back(std::move(st));
    });
  }

  for (auto f : {"agency", "routes", "trips", "stops"})
    if (b.record_count(f) == 0) throw MalformedRow(std::string(f) + ".txt", 0, "no valid records");
  return b;
}

// A child record whose parent is missing. Both keys are composite.
struct DanglingRef {
  std::string relation;  // e.g. "trips.route_id -> routes"
  Key child;
  Key parent;
};

// Exhaustive reference check over one bundle (normalized or not).
inline std::vector<DanglingRef> find_dangling_references(const FeedBundle& b) {
  std::vector<DanglingRef> out;
  const std::string& tag = b.agency_tag;
  std::unordered_set<std::string> agencies, routes, services, shapes, trips, stops;
  for (const auto& a : b.agencies) agencies.insert(a.source_agency_id);
  for (const auto& r : b.routes) routes.insert(r.route_id);
  for (const auto& c : b.calendars) services.insert(c.service_id);
  for (const auto& s : b.shape_rows) shapes.insert(s.shape_id);
  for (const auto& t : b.trips) trips.insert(t.trip_id);
  for (const auto& s : b.stops) stops.insert(s.stop_id);

  for (const auto& r : b.routes) {
    // A route may omit agency_id only when the feed has a single agency.
    bool ok = r.source_agency_id.empty() ? b.agencies.size() == 1 : agencies.count(r.source_agency_id) > 0;
    if (!ok) out.push_back({"routes.agency_id -> agency", {tag, r.route_id}, {tag, r.source_agency_id}});
  }
  for (const auto& t : b.trips) {
    if (!routes.count(t.route_id)) out.push_back({"trips.route_id -> routes", {tag, t.trip_id}, {tag, t.route_id}});
    if (!services.count(t.service_id))
      out.push_back({"trips.service_id -> calendar", {tag, t.trip_id}, {tag, t.service_id}});
    if (!t.shape_id.empty() && !shapes.count(t.shape_id))
      out.push_back({"trips.shape_id -> shapes", {tag, t.trip_id}, {tag, t.shape_id}});
  }
  for (const auto& st : b.stop_times) {
    Key child{tag, st.trip_id + "#" + std::to_string(st.stop_sequence)};
    if (!trips.count(st.trip_id)) out.push_back({"stop_times.trip_id -> trips", child, {tag, st.trip_id}});
    if (!stops.count(st.stop_id)) out.push_back({"stop_times.stop_id -> stops", child, {tag, st.stop_id}});
  }
  return out;
}

// Rewrites every record key to the composite (agency_tag, local id). The
// agency table collapses to one row per feed whose id is the tag; extra
// agencies listed in agency.txt are reported as issues.
inline FeedBundle normalize_keys(FeedBundle b) {
  if (b.normalized) return b;
  auto dangling = find_dangling_references(b);
  if (!dangling.empty()) {
    std::string msg = std::to_string(dangling.size()) + " dangling reference(s); first: " + dangling[0].relation +
                      " child " + dangling[0].child.str() + " parent " + dangling[0].parent.str();
    throw DanglingReference(msg);
  }
  const std::string& tag = b.agency_tag;
  if (b.agencies.size() > 1) {
    for (std::size_t i = 1; i < b.agencies.size(); ++i)
      b.issues.push_back({"agency.txt", 0,
                          "agency " + b.agencies[i].source_agency_id + " merged into feed agency " + tag});
  }
  b.agencies.resize(1);
  b.agencies[0].agency_id = tag;
  for (auto& r : b.routes) r.agency_id = tag;
  for (auto& t : b.trips) t.agency_id = tag;
  for (auto& c : b.calendars) c.agency_id = tag;
  for (auto& s : b.stops) s.agency_id = tag;
  for (auto& st : b.stop_times) st.agency_id = tag;
  b.normalized = true;
  return b;
}

// Splits shapes.txt into shapes, deduplicated points and ordered sequences.
// Identical (lat, lon) pairs within the feed share one point id; ids start at
// 1 in order of first use.
inline DecomposedShapes decompose_shapes(const FeedBundle& b) {
  DecomposedShapes out;
  std::map<std::pair<double, double>, std::int64_t> point_ids;
  std::string current;
  int seq = 0;
  for (const auto& row : b.shape_rows) {
    if (out.shapes.empty() || row.shape_id != current) {
      current = row.shape_id;
      out.shapes.push_back({b.agency_tag, row.shape_id});
      seq = 0;
    }
    auto [it, inserted] = point_ids.try_emplace({row.lat, row.lon}, static_cast<std::int64_t>(point_ids.size() + 1));
    if (inserted) out.points.push_back({b.agency_tag, it->second, row.lat, row.lon});
    out.sequences.push_back({b.agency_tag, row.shape_id, ++seq, it->second});
  }
  return out;
}

}  // namespace transitq::gtfs
