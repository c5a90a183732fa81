#pragma once

#include <cmath>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "transitq/error.hpp"
#include "transitq/gtfs/types.hpp"
#include "transitq/sqlite.hpp"

namespace transitq::maps {

struct RouteRef {
  std::string agency_id;
  std::string route_id;

  friend bool operator==(const RouteRef&, const RouteRef&) = default;
};

struct StopMarker {
  std::string stop_id;
  std::string name;
  double lat = 0;
  double lon = 0;

  friend bool operator==(const StopMarker&, const StopMarker&) = default;
};

struct RouteGeometry {
  RouteRef route;
  std::string direction;
  std::string shape_id;
  std::vector<gtfs::Coord> shape_points;  // in sequence order
  std::vector<StopMarker> stops;          // one per stop id, in visiting order
};

inline constexpr int kCoordinateDecimals = 6;

inline double round_coordinate(double v) {
  const double scale = std::pow(10.0, kCoordinateDecimals);
  return std::round(v * scale) / scale;
}

// Routes with the given id, across agencies.
inline std::vector<RouteRef> find_routes(const db::Connection& conn, const std::string& route_id) {
  auto s = conn.prepare("SELECT agency_id, route_id FROM routes WHERE route_id = ? ORDER BY agency_id");
  s.bind_all(route_id);
  std::vector<RouteRef> out;
  while (s.step()) out.push_back({s.text(0), s.text(1)});
  return out;
}

// Picks the representative shape (most points, then smallest id) of the
// route in the requested direction; without a direction, outbound first and
// then any direction.
inline RouteGeometry fetch_route_geometry(const db::Connection& conn, const RouteRef& ref,
                                          std::optional<gtfs::Direction> direction = std::nullopt) {
  {
    auto s = conn.prepare("SELECT count(*) FROM routes WHERE agency_id = ? AND route_id = ?");
    s.bind_all(ref.agency_id, ref.route_id);
    s.step();
    if (s.integer(0) == 0) throw UnknownRoute("unknown route " + ref.route_id + " of agency " + ref.agency_id);
  }
  auto pick = [&](const std::string* dir) -> std::optional<std::pair<std::string, std::string>> {
    std::string sql =
        "SELECT shape_id, coalesce(direction, ''), count(*) AS n FROM route_geometry "
        "WHERE kind = 'shape_point' AND agency_id = ? AND route_id = ?";
    if (dir) sql += " AND direction = ?";
    sql += " GROUP BY shape_id, direction ORDER BY n DESC, shape_id, direction LIMIT 1";
    auto s = conn.prepare(sql);
    if (dir) s.bind_all(ref.agency_id, ref.route_id, *dir);
    else s.bind_all(ref.agency_id, ref.route_id);
    if (!s.step()) return std::nullopt;
    return std::make_pair(s.text(0), s.text(1));
  };
  std::optional<std::pair<std::string, std::string>> chosen;
  if (direction) {
    std::string d(gtfs::to_string(*direction));
    chosen = pick(&d);
  } else {
    std::string outbound(gtfs::to_string(gtfs::Direction::outbound));
    chosen = pick(&outbound);
    if (!chosen) chosen = pick(nullptr);
  }
  if (!chosen) throw NoGeometry("route " + ref.route_id + " of agency " + ref.agency_id + " has no shape");

  RouteGeometry g;
  g.route = ref;
  g.shape_id = chosen->first;
  g.direction = chosen->second;
  const std::string dir_filter = g.direction.empty() ? "direction IS NULL" : "direction = ?";
  auto bind = [&](db::Statement& s) {
    if (g.direction.empty()) s.bind_all(ref.agency_id, ref.route_id, g.shape_id);
    else s.bind_all(ref.agency_id, ref.route_id, g.shape_id, g.direction);
  };
  auto pts = conn.prepare("SELECT lat, lon FROM route_geometry WHERE kind = 'shape_point' AND agency_id = ? AND route_id = ? "
                          "AND shape_id = ? AND " + dir_filter + " ORDER BY seq");
  bind(pts);
  while (pts.step()) g.shape_points.push_back({pts.real(0), pts.real(1)});
  auto stops = conn.prepare("SELECT stop_id, coalesce(stop_name, ''), lat, lon FROM route_geometry WHERE kind = 'stop' "
                            "AND agency_id = ? AND route_id = ? AND shape_id = ? AND " + dir_filter + " ORDER BY seq, stop_id");
  bind(stops);
  std::set<std::string> seen;
  while (stops.step()) {
    std::string id = stops.text(0);
    if (seen.insert(id).second) g.stops.push_back({id, stops.text(1), stops.real(2), stops.real(3)});
  }
  return g;
}

// FeatureCollection: one LineString for the shape, one Point per stop.
inline nlohmann::json to_geo_document(const RouteGeometry& g) {
  if (g.shape_points.size() < 2)
    throw EmptyGeometry("route " + g.route.route_id + " has " + std::to_string(g.shape_points.size()) +
                        " shape points; a line needs at least two");
  auto position = [](double lat, double lon) {
    return nlohmann::json::array({round_coordinate(lon), round_coordinate(lat)});
  };
  nlohmann::json line = nlohmann::json::array();
  for (const auto& p : g.shape_points) line.push_back(position(p.lat, p.lon));
  nlohmann::json features = nlohmann::json::array();
  features.push_back({{"type", "Feature"},
                      {"geometry", {{"type", "LineString"}, {"coordinates", std::move(line)}}},
                      {"properties",
                       {{"agency_id", g.route.agency_id},
                        {"route_id", g.route.route_id},
                        {"direction", g.direction},
                        {"shape_id", g.shape_id}}}});
  for (const auto& s : g.stops)
    features.push_back({{"type", "Feature"},
                        {"geometry", {{"type", "Point"}, {"coordinates", position(s.lat, s.lon)}}},
                        {"properties", {{"name", s.name}, {"stop_id", s.stop_id}}}});
  return {{"type", "FeatureCollection"}, {"features", std::move(features)}};
}

// Structural problems of a route document; empty when valid.
inline std::vector<std::string> validate_geo_document(const nlohmann::json& doc) {
  std::vector<std::string> problems;
  auto valid_position = [](const nlohmann::json& p) {
    return p.is_array() && p.size() == 2 && p[0].is_number() && p[1].is_number() &&
           gtfs::valid_wgs84(p[1].get<double>(), p[0].get<double>());
  };
  if (!doc.is_object() || doc.value("type", "") != "FeatureCollection") return {"not a FeatureCollection"};
  if (!doc.contains("features") || !doc["features"].is_array()) return {"features is not an array"};
  for (std::size_t i = 0; i < doc["features"].size(); ++i) {
    const auto& f = doc["features"][i];
    std::string where = "feature " + std::to_string(i);
    if (!f.is_object() || f.value("type", "") != "Feature") {
      problems.push_back(where + " is not a Feature");
      continue;
    }
    if (!f.contains("properties") || !(f["properties"].is_object() || f["properties"].is_null()))
      problems.push_back(where + " lacks properties");
    if (!f.contains("geometry") || !f["geometry"].is_object()) {
      problems.push_back(where + " lacks geometry");
      continue;
    }
    const auto& geom = f["geometry"];
    std::string type = geom.value("type", "");
    const auto coords = geom.contains("coordinates") ? geom["coordinates"] : nlohmann::json();
    if (type == "Point") {
      if (!valid_position(coords)) problems.push_back(where + " has an invalid Point position");
    } else if (type == "LineString") {
      if (!coords.is_array() || coords.size() < 2) problems.push_back(where + " LineString needs two positions");
      else
        for (const auto& p : coords)
          if (!valid_position(p)) {
            problems.push_back(where + " has an invalid LineString position");
            break;
          }
    } else {
      problems.push_back(where + " has unsupported geometry type '" + type + "'");
    }
  }
  return problems;
}

// Inverse of to_geo_document.
inline RouteGeometry from_geo_document(const nlohmann::json& doc) {
  auto problems = validate_geo_document(doc);
  if (!problems.empty()) throw InvalidRequest("invalid route document: " + problems.front());
  RouteGeometry g;
  bool have_line = false;
  for (const auto& f : doc["features"]) {
    const auto& geom = f["geometry"];
    const auto& props = f["properties"];
    if (geom["type"] == "LineString") {
      if (have_line) throw InvalidRequest("route document has more than one LineString");
      have_line = true;
      g.route = {props.value("agency_id", ""), props.value("route_id", "")};
      g.direction = props.value("direction", "");
      g.shape_id = props.value("shape_id", "");
      for (const auto& p : geom["coordinates"]) g.shape_points.push_back({p[1].get<double>(), p[0].get<double>()});
    } else {
      const auto& p = geom["coordinates"];
      g.stops.push_back({props.value("stop_id", ""), props.value("name", ""), p[1].get<double>(), p[0].get<double>()});
    }
  }
  if (!have_line) throw InvalidRequest("route document has no LineString");
  return g;
}

}  // namespace transitq::maps
