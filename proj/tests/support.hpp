#pragma once

#include <atomic>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <string>

#include "transitq/gtfs/database.hpp"

namespace transitq::testing {

inline std::filesystem::path data_path(const std::string& rel) { return std::filesystem::path(TRANSITQ_TEST_DATA) / rel; }
inline std::filesystem::path shipped_path(const std::string& rel) { return std::filesystem::path(TRANSITQ_DATA_DIR) / rel; }

// Removes the directory on scope exit.
class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() /
            ("transitq-" + std::to_string(rd()) + "-" + std::to_string(counter++));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& rel) const { return path_ / rel; }

 private:
  std::filesystem::path path_;
};

inline void write_file(const std::filesystem::path& p, const std::string& content) {
  std::filesystem::create_directories(p.parent_path());
  std::ofstream(p, std::ios::binary) << content;
}

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// A tiny valid feed; `overrides` replaces whole files by name (without .txt),
// an empty value deletes the file.
inline void write_minimal_feed(const std::filesystem::path& dir, const std::map<std::string, std::string>& overrides = {}) {
  std::map<std::string, std::string> files = {
      {"agency", "agency_id,agency_name\nX,Example Transit\n"},
      {"routes", "route_id,agency_id,route_short_name,route_long_name\nR1,X,1,One\nR2,X,2,Two\nR3,X,3,Three\n"},
      {"trips", "route_id,service_id,trip_id,direction_id,shape_id\nR1,WK,T1,0,SH1\nR2,WK,T2,1,SH1\nR3,WK,T3,0,\n"},
      {"calendar",
       "service_id,monday,tuesday,wednesday,thursday,friday,saturday,sunday,start_date,end_date\n"
       "WK,1,1,1,1,1,0,0,20240101,20241231\n"},
      {"shapes",
       "shape_id,shape_pt_lat,shape_pt_lon,shape_pt_sequence\nSH1,45.0,11.0,1\nSH1,45.1,11.1,2\nSH1,45.2,11.2,3\n"
       "SH1,45.3,11.3,4\n"},
      {"stops", "stop_id,stop_name,stop_lat,stop_lon\nA,Alpha,45.0,11.0\nB,Beta,45.3,11.3\n"},
      {"stop_times",
       "trip_id,arrival_time,departure_time,stop_id,stop_sequence\nT1,08:00:00,08:00:00,A,1\nT1,08:10:00,08:10:00,B,2\n"
       "T2,09:00:00,09:00:00,B,1\nT2,09:10:00,09:10:00,A,2\nT3,10:00:00,10:00:00,A,1\n"},
  };
  for (const auto& [k, v] : overrides) files[k] = v;
  std::filesystem::create_directories(dir);
  for (const auto& [name, content] : files)
    if (!content.empty()) write_file(dir / (name + ".txt"), content);
}

inline std::vector<gtfs::FeedBundle> fixture_bundles() {
  return {gtfs::parse_feed(data_path("feed_bologna"), "TPER_BO"), gtfs::parse_feed(data_path("feed_ferrara"), "TPER_FE")};
}

inline std::vector<gtfs::MunicipalityRecord> fixture_municipalities() {
  return gtfs::load_municipalities(data_path("municipalities.geojson"));
}

// Builds the two-feed fixture database at `path` and closes it.
inline void build_fixture_db(const std::filesystem::path& path) {
  gtfs::build_database(path, fixture_bundles(), fixture_municipalities());
}

// Shared fixture database built once per test binary.
inline const std::filesystem::path& shared_fixture_db() {
  static TempDir dir;
  static std::filesystem::path path = [] {
    auto p = dir / "transit.db";
    build_fixture_db(p);
    return p;
  }();
  return path;
}

}  // namespace transitq::testing
