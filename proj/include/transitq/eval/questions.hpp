#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "transitq/error.hpp"
#include "transitq/gtfs/types.hpp"
#include "transitq/provider.hpp"
#include "transitq/sql/guard.hpp"
#include "transitq/sqlite.hpp"

namespace transitq::eval {

enum class AnswerKind { entity_list, scalar };

inline std::string_view to_string(AnswerKind k) { return k == AnswerKind::entity_list ? "entity_list" : "scalar"; }

inline AnswerKind parse_answer_kind(std::string_view s) {
  if (s == "entity_list") return AnswerKind::entity_list;
  if (s == "scalar") return AnswerKind::scalar;
  throw ConfigError("unknown answer kind '" + std::string(s) + "'");
}

struct QuestionTemplate {
  std::string id;
  std::string text_pattern;  // {placeholder} slots
  AnswerKind answer_kind;
};

inline const std::vector<QuestionTemplate>& templates() {
  static const std::vector<QuestionTemplate> all = {
      {"T1", "Which routes serve the municipality of {municipality}?", AnswerKind::entity_list},
      {"T2", "Which municipalities are served by route {route}?", AnswerKind::entity_list},
      {"T3", "What is the average number of trips that belong to route {route} and use the stop {stop}?",
       AnswerKind::scalar},
  };
  return all;
}

inline const QuestionTemplate& find_template(const std::string& id) {
  for (const auto& t : templates())
    if (t.id == id) return t;
  throw ConfigError("unknown question template '" + id + "'");
}

inline const std::vector<std::string>& rider_names() {
  static const std::vector<std::string> names = {"hour_range", "date_range", "weekday_set", "direction"};
  return names;
}

struct GeneratedQuestion {
  std::string id;
  std::string template_id;
  std::string text;
  std::map<std::string, std::string> bindings;
  std::set<std::string> riders;
  bool injected_invalid = false;
  std::uint64_t paraphrase_seed = 0;

  friend bool operator==(const GeneratedQuestion&, const GeneratedQuestion&) = default;
};

inline void to_json(nlohmann::json& j, const GeneratedQuestion& q) {
  j = {{"id", q.id},
       {"template_id", q.template_id},
       {"text", q.text},
       {"bindings", q.bindings},
       {"riders", q.riders},
       {"injected_invalid", q.injected_invalid},
       {"paraphrase_seed", q.paraphrase_seed}};
}

inline void from_json(const nlohmann::json& j, GeneratedQuestion& q) {
  q.id = j.at("id").get<std::string>();
  q.template_id = j.at("template_id").get<std::string>();
  q.text = j.at("text").get<std::string>();
  q.bindings = j.value("bindings", std::map<std::string, std::string>{});
  q.riders = j.value("riders", std::set<std::string>{});
  q.injected_invalid = j.value("injected_invalid", false);
  q.paraphrase_seed = j.value("paraphrase_seed", std::uint64_t{0});
}

struct ExpandConfig {
  std::map<std::string, int> counts = {{"T1", 14}, {"T2", 14}, {"T3", 14}};
  double rider_probability = 0.25;    // per rider, independently
  double invalid_probability = 0.2;   // T3 only
  bool paraphrase = false;            // provider-assisted rewording
  std::uint64_t seed = 1;
  gtfs::Date reference_date = gtfs::Date::today();

  static ExpandConfig from_json(const nlohmann::json& j) {
    ExpandConfig c;
    if (j.contains("counts")) c.counts = j["counts"].get<std::map<std::string, int>>();
    c.rider_probability = j.value("rider_probability", c.rider_probability);
    c.invalid_probability = j.value("invalid_probability", c.invalid_probability);
    c.paraphrase = j.value("paraphrase", c.paraphrase);
    c.seed = j.value("seed", c.seed);
    if (j.contains("reference_date")) {
      auto d = gtfs::Date::parse_iso(j["reference_date"].get<std::string>());
      if (!d) throw ConfigError("reference_date must be YYYY-MM-DD");
      c.reference_date = *d;
    }
    for (const auto& [t, n] : c.counts) {
      find_template(t);
      if (n < 0) throw ConfigError("negative question count for " + t);
    }
    return c;
  }
};

namespace detail {

inline std::string quote(const std::string& s) {
  std::string out = "'";
  for (char c : s) out += c == '\'' ? std::string("''") : std::string(1, c);
  return out + "'";
}

inline const char* kWeekdayTitles[] = {"Mondays", "Tuesdays", "Wednesdays", "Thursdays", "Fridays", "Saturdays", "Sundays"};
inline const char* kWeekdayColumns[] = {"monday", "tuesday", "wednesday", "thursday", "friday", "saturday", "sunday"};

inline std::string join_list(const std::vector<std::string>& items) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (i) out += i + 1 == items.size() ? " and " : ", ";
    out += items[i];
  }
  return out;
}

// Weekday indices (0 = monday) from "monday,friday".
inline std::vector<int> weekday_indices(const std::string& csv) {
  std::vector<int> out;
  std::size_t pos = 0;
  while (pos <= csv.size()) {
    auto end = csv.find(',', pos);
    std::string name = csv.substr(pos, end == std::string::npos ? std::string::npos : end - pos);
    for (int i = 0; i < 7; ++i)
      if (name == kWeekdayColumns[i]) out.push_back(i);
    if (end == std::string::npos) break;
    pos = end + 1;
  }
  return out;
}

inline std::string hh(const std::string& hour) { return (hour.size() < 2 ? "0" : "") + hour + ":00"; }

// Natural-language clauses, in a fixed order, inserted before the '?'.
inline std::string rider_clauses(const GeneratedQuestion& q) {
  std::string out;
  const auto& b = q.bindings;
  if (q.riders.count("direction"))
    out += b.at("direction") == "andata" ? " in the outbound direction" : " in the inbound direction";
  if (q.riders.count("weekday_set")) {
    std::vector<std::string> names;
    for (int i : weekday_indices(b.at("weekdays"))) names.push_back(kWeekdayTitles[i]);
    out += " on " + join_list(names);
  }
  if (q.riders.count("hour_range")) out += " between " + hh(b.at("hour_from")) + " and " + hh(b.at("hour_to"));
  if (q.riders.count("date_range")) out += " from " + b.at("date_from") + " to " + b.at("date_to");
  return out;
}

inline std::string fill(std::string pattern, const std::map<std::string, std::string>& bindings) {
  for (const auto& [k, v] : bindings) {
    std::string slot = "{" + k + "}";
    for (auto pos = pattern.find(slot); pos != std::string::npos; pos = pattern.find(slot, pos + v.size()))
      pattern.replace(pos, slot.size(), v);
  }
  return pattern;
}

inline std::vector<std::string> column(const db::Connection& conn, const std::string& sql) {
  auto s = conn.prepare(sql);
  std::vector<std::string> out;
  while (s.step()) out.push_back(s.text(0));
  return out;
}

inline std::vector<std::pair<std::string, std::string>> pairs(const db::Connection& conn, const std::string& sql) {
  auto s = conn.prepare(sql);
  std::vector<std::pair<std::string, std::string>> out;
  while (s.step()) out.emplace_back(s.text(0), s.text(1));
  return out;
}

// Portable draws: the standard distributions are implementation-defined.
struct Draw {
  std::mt19937_64 rng;
  std::size_t index(std::size_t n) { return static_cast<std::size_t>(rng() % n); }
  double unit() { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }
  bool chance(double p) { return unit() < p; }
  int between(int lo, int hi) { return lo + static_cast<int>(index(static_cast<std::size_t>(hi - lo + 1))); }
};

}  // namespace detail

// The question text for a template, bindings and riders.
inline std::string render_question(const GeneratedQuestion& q) {
  std::string base = detail::fill(find_template(q.template_id).text_pattern, q.bindings);
  auto qm = base.rfind('?');
  return base.substr(0, qm) + detail::rider_clauses(q) + base.substr(qm);
}

// Expands the configured templates with values from the database. Without
// paraphrasing the result depends only on the database and the config.
inline std::vector<GeneratedQuestion> expand_templates(const db::Connection& conn, const ExpandConfig& cfg,
                                                       provider::CompletionProvider* paraphraser = nullptr) {
  detail::Draw draw{std::mt19937_64(cfg.seed)};
  auto municipalities = detail::column(
      conn, "SELECT DISTINCT m.name FROM municipalities m JOIN stops s ON s.municipality_code = m.code "
            "JOIN stop_times st ON st.agency_id = s.agency_id AND st.stop_id = s.stop_id ORDER BY m.name");
  auto routes = detail::column(conn, "SELECT DISTINCT route_id FROM trips ORDER BY route_id");
  auto linked = detail::pairs(conn,
                              "SELECT DISTINCT t.route_id, st.stop_id FROM trips t JOIN stop_times st "
                              "ON st.agency_id = t.agency_id AND st.trip_id = t.trip_id ORDER BY 1, 2");
  auto all_stops = detail::column(conn, "SELECT DISTINCT stop_id FROM stops ORDER BY stop_id");
  std::set<std::pair<std::string, std::string>> linked_set(linked.begin(), linked.end());
  std::vector<std::pair<std::string, std::string>> unlinked;
  for (const auto& r : routes)
    for (const auto& s : all_stops)
      if (!linked_set.count({r, s})) unlinked.emplace_back(r, s);

  std::vector<GeneratedQuestion> out;
  int serial = 0;
  for (const auto& tmpl : templates()) {
    auto it = cfg.counts.find(tmpl.id);
    int n = it == cfg.counts.end() ? 0 : it->second;
    for (int i = 0; i < n; ++i) {
      GeneratedQuestion q;
      char id[16];
      std::snprintf(id, sizeof id, "q%03d", ++serial);
      q.id = id;
      q.template_id = tmpl.id;
      if (tmpl.id == "T1") {
        if (municipalities.empty()) throw InsufficientData("no served municipality to bind");
        q.bindings["municipality"] = municipalities[draw.index(municipalities.size())];
      } else if (tmpl.id == "T2") {
        if (routes.empty()) throw InsufficientData("no route with trips to bind");
        q.bindings["route"] = routes[draw.index(routes.size())];
      } else {
        q.injected_invalid = draw.chance(cfg.invalid_probability);
        const auto& pool = q.injected_invalid ? unlinked : linked;
        if (pool.empty())
          throw InsufficientData(q.injected_invalid ? "every route uses every stop; no invalid pair exists"
                                                    : "no route/stop pair to bind");
        const auto& p = pool[draw.index(pool.size())];
        q.bindings["route"] = p.first;
        q.bindings["stop"] = p.second;
      }
      for (const auto& rider : rider_names()) {
        if (!draw.chance(cfg.rider_probability)) continue;
        q.riders.insert(rider);
        if (rider == "hour_range") {
          int from = draw.between(5, 20);
          q.bindings["hour_from"] = std::to_string(from);
          q.bindings["hour_to"] = std::to_string(from + draw.between(1, 3));
        } else if (rider == "date_range") {
          auto from = cfg.reference_date.plus_days(draw.between(0, 30));
          q.bindings["date_from"] = from.iso();
          q.bindings["date_to"] = from.plus_days(draw.between(7, 20)).iso();
        } else if (rider == "weekday_set") {
          std::string days;
          unsigned mask = 0;
          while (mask == 0 || mask == 0x7f) mask = static_cast<unsigned>(draw.index(128));
          for (int d = 0; d < 7; ++d)
            if (mask & (1u << d)) days += (days.empty() ? "" : ",") + std::string(detail::kWeekdayColumns[d]);
          q.bindings["weekdays"] = days;
        } else {
          q.bindings["direction"] = draw.chance(0.5) ? "andata" : "ritorno";
        }
      }
      q.text = render_question(q);
      q.paraphrase_seed = draw.rng();
      if (cfg.paraphrase && paraphraser) {
        provider::CompletionRequest req;
        req.system_prompt =
            "Rewrite the user's question with different wording and the same meaning. Keep every name, number, "
            "date and time exactly as written. Reply with the question only.";
        req.messages.push_back({provider::Role::user, "Paraphrase (variant " + std::to_string(q.paraphrase_seed % 1000) +
                                                          "): " + q.text});
        req.temperature = 0.7;
        try {
          std::string p = paraphraser->complete(req);
          bool keeps_values = !p.empty();
          for (const auto& [k, v] : q.bindings)
            if (k != "weekdays" && k != "direction" && k.rfind("hour_", 0) != 0 && p.find(v) == std::string::npos)
              keeps_values = false;
          if (keeps_values) q.text = p;
        } catch (const Error&) {
          // keep the template wording
        }
      }
      out.push_back(std::move(q));
    }
  }
  return out;
}

struct GoldEntry {
  std::string question_id;
  std::string gold_sql;
  AnswerKind expected_kind = AnswerKind::entity_list;
};

namespace detail {

inline std::string weekday_case(const std::string& day_expr) {
  return "(case cast(strftime('%w', " + day_expr +
         ") as integer) when 0 then c.sunday when 1 then c.monday when 2 then c.tuesday when 3 then c.wednesday "
         "when 4 then c.thursday when 5 then c.friday else c.saturday end) = 1";
}

// Conditions shared by every template on trips t, calendar c, stop_times st.
inline std::string rider_filters(const GeneratedQuestion& q) {
  std::string w;
  const auto& b = q.bindings;
  if (q.riders.count("direction")) w += " and t.direction = " + quote(b.at("direction"));
  if (q.riders.count("hour_range"))
    w += " and st.departure_seconds between " + std::to_string(std::stoi(b.at("hour_from")) * 3600) + " and " +
         std::to_string(std::stoi(b.at("hour_to")) * 3600);
  return w;
}

}  // namespace detail

// The reference query for a question. Lists consider services valid on the
// reference date (or overlapping the asked date range) and running on at
// least one asked weekday; averages are per day over the 7 days from the
// reference date (or the asked range), restricted to the asked weekdays.
inline std::string gold_sql(const GeneratedQuestion& q, const gtfs::Date& reference_date) {
  using detail::quote;
  const auto& b = q.bindings;
  const std::string ref = quote(reference_date.iso());
  std::string validity = q.riders.count("date_range")
                             ? "c.start_date <= " + quote(b.at("date_to")) + " and c.end_date >= " + quote(b.at("date_from"))
                             : "c.start_date <= " + ref + " and c.end_date >= " + ref;
  std::string weekdays;
  if (q.riders.count("weekday_set")) {
    std::string terms;
    for (int i : detail::weekday_indices(b.at("weekdays")))
      terms += (terms.empty() ? "c." : " or c.") + std::string(detail::kWeekdayColumns[i]) + " = 1";
    weekdays = " and (" + terms + ")";
  }
  const std::string joins =
      " join calendar c on c.agency_id = t.agency_id and c.service_id = t.service_id"
      " join stop_times st on st.agency_id = t.agency_id and st.trip_id = t.trip_id";
  if (q.template_id == "T1")
    return "select distinct r.agency_id, r.route_id from routes r join trips t on t.agency_id = r.agency_id and "
           "t.route_id = r.route_id" +
           joins +
           " join stops s on s.agency_id = st.agency_id and s.stop_id = st.stop_id"
           " join municipalities m on m.code = s.municipality_code where m.name = " +
           quote(b.at("municipality")) + " and " + validity + weekdays + detail::rider_filters(q);
  if (q.template_id == "T2")
    return "select distinct m.name from trips t" + joins +
           " join stops s on s.agency_id = st.agency_id and s.stop_id = st.stop_id"
           " join municipalities m on m.code = s.municipality_code where t.route_id = " +
           quote(b.at("route")) + " and " + validity + weekdays + detail::rider_filters(q);
  if (q.template_id == "T3") {
    std::string from = q.riders.count("date_range") ? quote(b.at("date_from")) : ref;
    std::string to = q.riders.count("date_range") ? quote(b.at("date_to")) : "date(" + ref + ", '+6 day')";
    std::string day_filter;
    if (q.riders.count("weekday_set")) {
      // strftime('%w'): 0 = sunday
      std::string list;
      for (int i : detail::weekday_indices(b.at("weekdays")))
        list += (list.empty() ? "" : ", ") + std::to_string((i + 1) % 7);
      day_filter = " where cast(strftime('%w', days.d) as integer) in (" + list + ")";
    }
    return "with recursive days(d) as (select " + from + " union all select date(d, '+1 day') from days where d < " + to +
           ") select avg(n) as avg_trips from (select days.d, (select count(distinct t.trip_id) from trips t" + joins +
           " where t.route_id = " + quote(b.at("route")) + " and st.stop_id = " + quote(b.at("stop")) +
           " and c.start_date <= days.d and c.end_date >= days.d and " + detail::weekday_case("days.d") +
           detail::rider_filters(q) + ") as n from days" + day_filter + ")";
  }
  throw ConfigError("unknown question template '" + q.template_id + "'");
}

// Gold entries for a question list; every gold query must pass the guard
// unchanged and execute.
inline std::vector<GoldEntry> build_gold(const std::vector<GeneratedQuestion>& questions, const db::Connection& conn,
                                         const sql::Guard& guard, const gtfs::Date& reference_date) {
  std::vector<GoldEntry> out;
  for (const auto& q : questions) {
    GoldEntry g{q.id, gold_sql(q, reference_date), find_template(q.template_id).answer_kind};
    auto res = guard.check({g.gold_sql, sql::Origin::gold}, &conn);
    if (res.report.verdict != sql::Verdict::accepted)
      throw ConfigError("gold query for " + q.id + " does not pass the guard: " +
                        (res.report.diagnostics.empty() ? std::string("repaired") : res.report.diagnostics.front().message));
    conn.query(g.gold_sql);
    out.push_back(std::move(g));
  }
  return out;
}

}  // namespace transitq::eval
