#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include <json.hpp>

#include "transitq/error.hpp"
#include "transitq/gtfs/types.hpp"
#include "transitq/log.hpp"

namespace transitq::gtfs {

namespace geo {

// Closed-interval test for p lying on segment ab.
inline bool on_segment(const Coord& a, const Coord& b, const Coord& p) {
  double cross = (b.lon - a.lon) * (p.lat - a.lat) - (b.lat - a.lat) * (p.lon - a.lon);
  double scale = std::max({std::fabs(b.lon - a.lon), std::fabs(b.lat - a.lat), 1e-12});
  if (std::fabs(cross) > 1e-12 * scale) return false;
  return p.lon >= std::min(a.lon, b.lon) && p.lon <= std::max(a.lon, b.lon) && p.lat >= std::min(a.lat, b.lat) &&
         p.lat <= std::max(a.lat, b.lat);
}

enum class Where { outside, boundary, inside };

// Crossing-number test on a closed ring (first point repeated last).
inline Where locate(const Ring& ring, const Coord& p) {
  bool inside = false;
  for (std::size_t i = 0, j = ring.size() - 1; i < ring.size(); j = i++) {
    const Coord& a = ring[i];
    const Coord& b = ring[j];
    if (on_segment(a, b, p)) return Where::boundary;
    if ((a.lat > p.lat) != (b.lat > p.lat)) {
      double lon_at = a.lon + (p.lat - a.lat) * (b.lon - a.lon) / (b.lat - a.lat);
      if (p.lon < lon_at) inside = !inside;
    }
  }
  return inside ? Where::inside : Where::outside;
}

// Boundary points count as contained; points inside a hole do not.
inline bool contains(const Polygon& poly, const Coord& p) {
  if (poly.rings.empty()) return false;
  if (locate(poly.rings[0], p) == Where::outside) return false;
  for (std::size_t h = 1; h < poly.rings.size(); ++h)
    if (locate(poly.rings[h], p) == Where::inside) return false;
  return true;
}

struct BBox {
  double min_lat = std::numeric_limits<double>::infinity();
  double max_lat = -std::numeric_limits<double>::infinity();
  double min_lon = std::numeric_limits<double>::infinity();
  double max_lon = -std::numeric_limits<double>::infinity();

  void extend(const Coord& c) {
    min_lat = std::min(min_lat, c.lat);
    max_lat = std::max(max_lat, c.lat);
    min_lon = std::min(min_lon, c.lon);
    max_lon = std::max(max_lon, c.lon);
  }
  bool covers(const Coord& c) const {
    return c.lat >= min_lat && c.lat <= max_lat && c.lon >= min_lon && c.lon <= max_lon;
  }
};

inline BBox bounds(const MunicipalityRecord& m) {
  BBox box;
  for (const auto& poly : m.boundary)
    if (!poly.rings.empty())
      for (const auto& c : poly.rings[0]) box.extend(c);
  return box;
}

inline bool contains(const MunicipalityRecord& m, const Coord& p) {
  return std::any_of(m.boundary.begin(), m.boundary.end(), [&](const Polygon& poly) { return contains(poly, p); });
}

}  // namespace geo

namespace detail {

inline Ring parse_ring(const nlohmann::json& j, const std::string& where) {
  if (!j.is_array() || j.size() < 4) throw MalformedGeometry(where + ": ring needs at least 4 positions");
  Ring ring;
  ring.reserve(j.size());
  for (const auto& pos : j) {
    if (!pos.is_array() || pos.size() < 2 || !pos[0].is_number() || !pos[1].is_number())
      throw MalformedGeometry(where + ": position is not [lon, lat]");
    Coord c{pos[1].get<double>(), pos[0].get<double>()};
    if (!valid_wgs84(c.lat, c.lon)) throw MalformedGeometry(where + ": position outside WGS84 bounds");
    ring.push_back(c);
  }
  if (!(ring.front() == ring.back())) throw MalformedGeometry(where + ": ring is not closed");
  return ring;
}

inline Polygon parse_polygon(const nlohmann::json& j, const std::string& where) {
  if (!j.is_array() || j.empty()) throw MalformedGeometry(where + ": polygon has no rings");
  Polygon p;
  for (const auto& r : j) p.rings.push_back(parse_ring(r, where));
  return p;
}

inline std::string property_text(const nlohmann::json& props, std::initializer_list<const char*> keys) {
  for (const char* k : keys) {
    auto it = props.find(k);
    if (it == props.end() || it->is_null()) continue;
    if (it->is_string()) return it->get<std::string>();
    if (it->is_number_integer()) return std::to_string(it->get<long long>());
    return it->dump();
  }
  return {};
}

}  // namespace detail

// Parses a GeoJSON FeatureCollection of municipality boundaries. Each feature
// carries properties {code, name} and a Polygon or MultiPolygon geometry.
inline std::vector<MunicipalityRecord> parse_municipalities(const nlohmann::json& doc) {
  if (!doc.is_object() || doc.value("type", "") != "FeatureCollection" || !doc.contains("features") ||
      !doc["features"].is_array())
    throw MalformedGeometry("expected a GeoJSON FeatureCollection");
  std::vector<MunicipalityRecord> out;
  std::size_t idx = 0;
  for (const auto& f : doc["features"]) {
    std::string where = "feature " + std::to_string(idx++);
    if (!f.is_object() || !f.contains("geometry") || !f["geometry"].is_object())
      throw MalformedGeometry(where + ": missing geometry");
    const auto& props = f.contains("properties") && f["properties"].is_object() ? f["properties"] : nlohmann::json::object();
    MunicipalityRecord m;
    m.code = detail::property_text(props, {"code", "PRO_COM_T", "PRO_COM"});
    m.name = detail::property_text(props, {"name", "COMUNE"});
    if (m.code.empty()) throw MalformedGeometry(where + ": missing code property");
    where += " (" + m.code + ")";
    const auto& g = f["geometry"];
    std::string type = g.value("type", "");
    if (!g.contains("coordinates")) throw MalformedGeometry(where + ": geometry has no coordinates");
    if (type == "Polygon") {
      m.boundary.push_back(detail::parse_polygon(g["coordinates"], where));
    } else if (type == "MultiPolygon") {
      if (!g["coordinates"].is_array() || g["coordinates"].empty())
        throw MalformedGeometry(where + ": empty MultiPolygon");
      for (const auto& p : g["coordinates"]) m.boundary.push_back(detail::parse_polygon(p, where));
    } else {
      throw MalformedGeometry(where + ": unsupported geometry type '" + type + "'");
    }
    out.push_back(std::move(m));
  }
  return out;
}

inline std::vector<MunicipalityRecord> load_municipalities(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw MissingFile(path.string());
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw MalformedGeometry(path.string() + ": " + e.what());
  }
  return parse_municipalities(doc);
}

struct AssignmentReport {
  std::size_t assigned = 0;
  std::vector<std::string> unassigned_stop_ids;
};

// Sets each stop's municipality to the first polygon (in file order) that
// contains it; stops outside every polygon keep an empty code and are logged.
inline std::vector<StopRecord> assign_stop_municipality(std::vector<StopRecord> stops,
                                                        const std::vector<MunicipalityRecord>& municipalities,
                                                        AssignmentReport* report = nullptr) {
  std::vector<geo::BBox> boxes;
  boxes.reserve(municipalities.size());
  for (const auto& m : municipalities) boxes.push_back(geo::bounds(m));

  AssignmentReport local;
  for (auto& s : stops) {
    s.municipality_code.reset();
    Coord p{s.lat, s.lon};
    for (std::size_t i = 0; i < municipalities.size(); ++i) {
      if (!boxes[i].covers(p)) continue;
      if (geo::contains(municipalities[i], p)) {
        s.municipality_code = municipalities[i].code;
        break;
      }
    }
    if (s.municipality_code) {
      ++local.assigned;
    } else {
      local.unassigned_stop_ids.push_back(s.stop_id);
      log::warn("stop " + s.agency_id + "/" + s.stop_id + " lies outside every municipality");
    }
  }
  if (report) *report = std::move(local);
  return stops;
}

}  // namespace transitq::gtfs
