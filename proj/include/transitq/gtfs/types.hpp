#pragma once

#include <array>
#include <cstdint>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace transitq::gtfs {

// Trip direction as stored in the database. GTFS 0/1 is converted once at
// ingest; nothing downstream sees the numeric form.
enum class Direction { outbound, inbound };

inline constexpr std::string_view kOutbound = "andata";
inline constexpr std::string_view kInbound = "ritorno";

inline std::string_view to_string(Direction d) { return d == Direction::outbound ? kOutbound : kInbound; }

inline std::optional<Direction> parse_direction(std::string_view s) {
  if (s == "0" || s == kOutbound) return Direction::outbound;
  if (s == "1" || s == kInbound) return Direction::inbound;
  return std::nullopt;
}

struct Date {
  int year = 1970;
  int month = 1;
  int day = 1;

  friend auto operator<=>(const Date&, const Date&) = default;

  std::string iso() const {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%04d-%02d-%02d", year, month, day);
    return buf;
  }

  // GTFS YYYYMMDD.
  static std::optional<Date> parse_compact(std::string_view s) {
    if (s.size() != 8) return std::nullopt;
    for (char c : s)
      if (c < '0' || c > '9') return std::nullopt;
    auto num = [&](std::size_t pos, std::size_t len) {
      int v = 0;
      for (std::size_t i = pos; i < pos + len; ++i) v = v * 10 + (s[i] - '0');
      return v;
    };
    Date d{num(0, 4), num(4, 2), num(6, 2)};
    if (d.month < 1 || d.month > 12 || d.day < 1 || d.day > 31) return std::nullopt;
    return d;
  }

  // YYYY-MM-DD, calendar-checked.
  static std::optional<Date> parse_iso(std::string_view s) {
    if (s.size() != 10 || s[4] != '-' || s[7] != '-') return std::nullopt;
    std::string compact = std::string(s.substr(0, 4)) + std::string(s.substr(5, 2)) + std::string(s.substr(8, 2));
    auto d = parse_compact(compact);
    if (!d || !d->ymd().ok()) return std::nullopt;
    return d;
  }

  std::chrono::year_month_day ymd() const {
    return std::chrono::year_month_day{std::chrono::year{year}, std::chrono::month{static_cast<unsigned>(month)},
                                       std::chrono::day{static_cast<unsigned>(day)}};
  }

  // 0 = monday ... 6 = sunday
  int weekday_index() const { return static_cast<int>(std::chrono::weekday{std::chrono::sys_days{ymd()}}.iso_encoding()) - 1; }

  std::string weekday_name() const {
    static constexpr const char* names[] = {"monday", "tuesday", "wednesday", "thursday", "friday", "saturday", "sunday"};
    return names[weekday_index()];
  }

  static Date from_ymd(std::chrono::year_month_day d) {
    return {static_cast<int>(d.year()), static_cast<int>(static_cast<unsigned>(d.month())),
            static_cast<int>(static_cast<unsigned>(d.day()))};
  }

  Date plus_days(int n) const { return from_ymd(std::chrono::year_month_day{std::chrono::sys_days{ymd()} + std::chrono::days{n}}); }

  static Date today() {
    return from_ymd(std::chrono::year_month_day{std::chrono::floor<std::chrono::days>(std::chrono::system_clock::now())});
  }
};

// Composite key after augmentation: (agency tag, feed-local id).
struct Key {
  std::string agency;
  std::string id;

  friend auto operator<=>(const Key&, const Key&) = default;

  std::string str() const { return "(" + agency + ", " + id + ")"; }
};

struct AgencyRecord {
  std::string agency_id;
  std::string agency_name;
  std::string agency_hq_city;
  std::string source_agency_id;  // agency_id as written in agency.txt
};

struct RouteRecord {
  std::string agency_id;
  std::string route_id;
  std::string short_name;
  std::string long_name;
  std::optional<int> route_type;
  std::string source_agency_id;
};

struct TripRecord {
  std::string agency_id;
  std::string trip_id;
  std::string route_id;
  std::string service_id;
  std::string shape_id;  // empty when the trip has no shape
  std::optional<Direction> direction;
  std::string headsign;
};

struct ServiceCalendar {
  std::string agency_id;
  std::string service_id;
  std::array<bool, 7> weekday_flags{};  // Monday first
  Date start_date;
  Date end_date;
};

struct StopRecord {
  std::string agency_id;
  std::string stop_id;
  std::string name;
  double lat = 0;
  double lon = 0;
  std::optional<std::string> municipality_code;
};

struct StopTimeRecord {
  std::string agency_id;
  std::string trip_id;
  std::string stop_id;
  int stop_sequence = 0;
  int arrival = 0;  // seconds since midnight of the service day, may exceed 86400
  int departure = 0;
};

// One row of shapes.txt before decomposition.
struct ShapeSourceRow {
  std::string shape_id;
  double lat = 0;
  double lon = 0;
  int source_sequence = 0;
};

struct ShapeRecord {
  std::string agency_id;
  std::string shape_id;
};

struct ShapePointRecord {
  std::string agency_id;
  std::int64_t point_id = 0;
  double lat = 0;
  double lon = 0;
};

struct ShapeSequenceRecord {
  std::string agency_id;
  std::string shape_id;
  int seq = 0;  // 1..n per shape
  std::int64_t point_id = 0;
};

struct DecomposedShapes {
  std::vector<ShapeRecord> shapes;
  std::vector<ShapePointRecord> points;
  std::vector<ShapeSequenceRecord> sequences;
};

// A skipped row (or other non-fatal finding) reported by the parser.
struct ParseIssue {
  std::string file;
  std::size_t line = 0;
  std::string message;
};

// Every required file of one feed, typed. Before normalize_keys the
// agency_id fields hold feed-local values; afterwards they hold the tag.
struct FeedBundle {
  std::string agency_tag;
  std::filesystem::path source_path;
  bool normalized = false;

  std::vector<AgencyRecord> agencies;
  std::vector<RouteRecord> routes;
  std::vector<TripRecord> trips;
  std::vector<ServiceCalendar> calendars;
  std::vector<ShapeSourceRow> shape_rows;  // grouped by shape, ordered by sequence
  std::vector<StopRecord> stops;
  std::vector<StopTimeRecord> stop_times;

  std::vector<ParseIssue> issues;

  std::size_t record_count(std::string_view file) const {
    if (file == "agency") return agencies.size();
    if (file == "routes") return routes.size();
    if (file == "trips") return trips.size();
    if (file == "calendar") return calendars.size();
    if (file == "shapes") return shape_rows.size();
    if (file == "stops") return stops.size();
    if (file == "stop_times") return stop_times.size();
    return 0;
  }
};

inline constexpr std::array<std::string_view, 7> kRequiredFiles = {
    "agency", "routes", "trips", "calendar", "shapes", "stops", "stop_times"};

// Point / polygon types for the municipality join.
struct Coord {
  double lat = 0;
  double lon = 0;
  friend bool operator==(const Coord&, const Coord&) = default;
};

using Ring = std::vector<Coord>;

struct Polygon {
  std::vector<Ring> rings;  // outer ring first, then holes
};

struct MunicipalityRecord {
  std::string code;
  std::string name;
  std::vector<Polygon> boundary;
};

inline bool valid_wgs84(double lat, double lon) {
  return lat >= -90.0 && lat <= 90.0 && lon >= -180.0 && lon <= 180.0;
}

}  // namespace transitq::gtfs
