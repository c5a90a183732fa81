#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "transitq/error.hpp"
#include "transitq/sql/lexer.hpp"
#include "transitq/sqlite.hpp"

namespace transitq::eval {

enum class Category {
  syntax_error,
  wrong_shape,
  exact_match,
  superset,
  subset,
  disjoint,
  partial_overlap,
  scalar_exact,
  scalar_diff,
  zero_result,
};

inline const std::vector<Category>& all_categories() {
  static const std::vector<Category> all = {Category::syntax_error, Category::wrong_shape,    Category::exact_match,
                                            Category::superset,     Category::subset,         Category::disjoint,
                                            Category::partial_overlap, Category::scalar_exact, Category::scalar_diff,
                                            Category::zero_result};
  return all;
}

inline std::string_view to_string(Category c) {
  switch (c) {
    case Category::syntax_error: return "syntax_error";
    case Category::wrong_shape: return "wrong_shape";
    case Category::exact_match: return "exact_match";
    case Category::superset: return "superset";
    case Category::subset: return "subset";
    case Category::disjoint: return "disjoint";
    case Category::partial_overlap: return "partial_overlap";
    case Category::scalar_exact: return "scalar_exact";
    case Category::scalar_diff: return "scalar_diff";
    case Category::zero_result: return "zero_result";
  }
  return "?";
}

inline Category parse_category(std::string_view s) {
  for (auto c : all_categories())
    if (to_string(c) == s) return c;
  throw ConfigError("unknown outcome category '" + std::string(s) + "'");
}

inline bool is_correct(Category c) { return c == Category::exact_match || c == Category::scalar_exact; }

struct ComparisonOutcome {
  Category category = Category::syntax_error;
  std::optional<double> fp_rate;  // superset only
  std::optional<double> fn_rate;  // subset only
  std::optional<double> scalar_delta;

  friend bool operator==(const ComparisonOutcome&, const ComparisonOutcome&) = default;
};

inline nlohmann::json to_json(const ComparisonOutcome& o) {
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(); };
  return {{"category", to_string(o.category)},
          {"fp_rate", opt(o.fp_rate)},
          {"fn_rate", opt(o.fn_rate)},
          {"scalar_delta", opt(o.scalar_delta)}};
}

namespace detail {

// Canonical cell: NULLs equal each other, integral reals equal integers.
inline std::string cell_key(const db::Value& v) {
  if (db::is_null(v)) return std::string("\x01N");
  if (auto i = std::get_if<std::int64_t>(&v)) return "n" + std::to_string(*i);
  if (auto d = std::get_if<double>(&v)) {
    if (std::isfinite(*d) && *d == std::floor(*d) && std::fabs(*d) < 9e15)
      return "n" + std::to_string(static_cast<std::int64_t>(*d));
    std::ostringstream os;
    os.precision(12);
    os << "n" << *d;
    return os.str();
  }
  return "s" + std::get<std::string>(v);
}

// Columns ordered by lower-cased name; rows as a set.
struct Normalized {
  std::vector<std::string> columns;
  std::set<std::vector<std::string>> rows;
};

inline Normalized normalize(const db::Table& t) {
  std::vector<std::size_t> order(t.columns.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  auto name = [&](std::size_t i) { return sql::to_lower(t.columns[i]); };
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return name(a) < name(b); });
  Normalized n;
  for (auto i : order) n.columns.push_back(name(i));
  for (const auto& row : t.rows) {
    std::vector<std::string> key;
    for (auto i : order) key.push_back(i < row.size() ? cell_key(row[i]) : cell_key(db::Null{}));
    n.rows.insert(std::move(key));
  }
  return n;
}

}  // namespace detail

// Set comparison of two column-named tables after sorting columns by name.
inline ComparisonOutcome compare_result_sets(const db::Table& gold, const db::Table& generated) {
  auto g = detail::normalize(gold);
  auto x = detail::normalize(generated);
  if (g.columns != x.columns) return {Category::wrong_shape};
  std::size_t common = 0;
  for (const auto& r : x.rows) common += g.rows.count(r);
  const std::size_t only_gen = x.rows.size() - common, only_gold = g.rows.size() - common;
  if (only_gen == 0 && only_gold == 0) return {Category::exact_match};
  if (common == 0 && !g.rows.empty() && !x.rows.empty()) return {Category::disjoint};
  if (only_gold == 0) return {Category::superset, static_cast<double>(only_gen) / static_cast<double>(x.rows.size())};
  if (only_gen == 0)
    return {Category::subset, std::nullopt, static_cast<double>(only_gold) / static_cast<double>(g.rows.size())};
  return {Category::partial_overlap};
}

inline constexpr double kDefaultScalarTolerance = 1e-6;

// Relative tolerance, floored at an absolute one for values below 1.
inline ComparisonOutcome compare_scalar(double gold, std::optional<double> generated,
                                        double tolerance = kDefaultScalarTolerance) {
  if (!generated) return {Category::syntax_error};
  double delta = *generated - gold;
  if (std::fabs(delta) <= tolerance * std::max(1.0, std::fabs(gold))) return {Category::scalar_exact, {}, {}, delta};
  if (*generated == 0 && gold > 0) return {Category::zero_result, {}, {}, delta};
  return {Category::scalar_diff, {}, {}, delta};
}

// Single number of a one-cell result; an empty result or NULL counts as 0
// (nothing to average). Anything else has the wrong shape.
inline std::optional<double> scalar_of(const db::Table& t, bool* wrong_shape = nullptr) {
  if (wrong_shape) *wrong_shape = false;
  if (t.rows.empty()) return 0.0;
  if (t.columns.size() != 1 || t.rows.size() != 1) {
    if (wrong_shape) *wrong_shape = true;
    return std::nullopt;
  }
  const auto& v = t.rows[0][0];
  if (db::is_null(v)) return 0.0;
  if (auto n = db::as_number(v)) return n;
  if (auto s = std::get_if<std::string>(&v)) {
    try {
      std::size_t used = 0;
      double d = std::stod(*s, &used);
      if (used == s->size()) return d;
    } catch (const std::exception&) {
    }
  }
  if (wrong_shape) *wrong_shape = true;
  return std::nullopt;
}

struct MetricsSummary {
  std::map<std::string, std::map<Category, int>> counts;  // per template
  std::map<Category, int> overall;

  int total(const std::string& template_id) const {
    auto it = counts.find(template_id);
    if (it == counts.end()) return 0;
    int n = 0;
    for (const auto& [c, k] : it->second) n += k;
    return n;
  }

  int total() const {
    int n = 0;
    for (const auto& [c, k] : overall) n += k;
    return n;
  }

  // Correct answers over questions asked, for a family of templates.
  double accuracy_for(const std::set<std::string>& family) const {
    int correct = 0, asked = 0;
    for (const auto& [t, cats] : counts) {
      if (!family.empty() && !family.count(t)) continue;
      for (const auto& [c, k] : cats) {
        asked += k;
        if (is_correct(c)) correct += k;
      }
    }
    return asked == 0 ? 0.0 : static_cast<double>(correct) / asked;
  }

  double accuracy(const std::string& template_id) const { return accuracy_for({template_id}); }
  double overall_accuracy() const { return accuracy_for({}); }

  void add(const std::string& template_id, Category c, int n = 1) {
    counts[template_id][c] += n;
    overall[c] += n;
  }

  friend bool operator==(const MetricsSummary&, const MetricsSummary&) = default;
};

struct GradedOutcome {
  std::string question_id;
  std::string template_id;
  int attempt = 1;
  ComparisonOutcome outcome;
};

inline MetricsSummary summarize(const std::vector<GradedOutcome>& outcomes) {
  MetricsSummary s;
  for (const auto& o : outcomes) s.add(o.template_id, o.outcome.category);
  return s;
}

// {template_id: {category: count}, accuracy: {template_id: fraction}}
inline nlohmann::json report_json(const MetricsSummary& s) {
  nlohmann::json j = nlohmann::json::object();
  nlohmann::json acc = nlohmann::json::object();
  for (const auto& [t, cats] : s.counts) {
    nlohmann::json c = nlohmann::json::object();
    for (auto cat : all_categories()) {
      auto it = cats.find(cat);
      c[std::string(to_string(cat))] = it == cats.end() ? 0 : it->second;
    }
    j[t] = std::move(c);
    acc[t] = s.accuracy(t);
  }
  acc["overall"] = s.overall_accuracy();
  j["accuracy"] = std::move(acc);
  return j;
}

inline std::string report_text(const MetricsSummary& s) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  for (const auto& [t, cats] : s.counts) {
    os << t << ": " << s.total(t) << " runs, accuracy ";
    os.precision(3);
    os << s.accuracy(t) << "\n";
    for (auto cat : all_categories()) {
      auto it = cats.find(cat);
      if (it != cats.end() && it->second) os << "  " << to_string(cat) << ": " << it->second << "\n";
    }
  }
  os.precision(3);
  os << "overall: " << s.total() << " runs, accuracy " << s.overall_accuracy() << "\n";
  return os.str();
}

}  // namespace transitq::eval
