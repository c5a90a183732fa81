#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <memory>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "transitq/error.hpp"
#include "transitq/provider.hpp"
#include "transitq/sql/guard.hpp"

namespace transitq::exemplars {

struct ExemplarPair {
  std::string id;
  std::string question;
  std::string sql;
  std::set<std::string> tags;
};

inline void to_json(nlohmann::json& j, const ExemplarPair& e) {
  j = {{"id", e.id}, {"question", e.question}, {"sql", e.sql}, {"tags", e.tags}};
}

// Parses and validates exemplar records: each SQL must pass the read-only and
// syntax checks (against `conn` when given) without repairs.
inline std::vector<ExemplarPair> parse_exemplars(const nlohmann::json& j, const sql::Guard& guard,
                                                 const db::Connection* conn = nullptr) {
  const nlohmann::json& list = j.is_object() ? j.at("exemplars") : j;
  if (!list.is_array()) throw InvalidExemplar("exemplar file must hold an array of records");
  std::vector<ExemplarPair> out;
  std::set<std::string> ids;
  for (const auto& r : list) {
    ExemplarPair e;
    try {
      e.id = r.at("id").get<std::string>();
      e.question = r.at("question").get<std::string>();
      e.sql = r.at("sql").get<std::string>();
      if (r.contains("tags")) e.tags = r["tags"].get<std::set<std::string>>();
    } catch (const nlohmann::json::exception& ex) {
      throw InvalidExemplar(std::string("malformed exemplar record: ") + ex.what());
    }
    if (e.id.empty() || e.question.empty() || e.sql.empty()) throw InvalidExemplar("exemplar " + e.id + " has empty fields");
    if (!ids.insert(e.id).second) throw DuplicateId("duplicate exemplar id " + e.id);
    sql::QueryCandidate q{e.sql, sql::Origin::gold};
    auto report = guard.enforce_read_only(q);
    if (report.verdict != sql::Verdict::rejected) report = guard.syntax_check(q, conn);
    if (report.verdict == sql::Verdict::rejected) {
      const auto& d = report.diagnostics.front();
      throw InvalidExemplar("exemplar " + e.id + ": " + d.code + ": " + d.message);
    }
    out.push_back(std::move(e));
  }
  return out;
}

inline std::vector<ExemplarPair> load_exemplars(const std::filesystem::path& path, const sql::Guard& guard,
                                                const db::Connection* conn = nullptr) {
  std::ifstream in(path);
  if (!in) throw MissingFile("exemplar file not found: " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw InvalidExemplar(path.string() + ": " + e.what());
  }
  return parse_exemplars(j, guard, conn);
}

struct Scored {
  const ExemplarPair* pair = nullptr;
  double similarity = 0;
};

// Exemplars plus their question embeddings. Immutable once built; rebuild
// by constructing a new store and swapping the pointer.
class ExemplarStore {
 public:
  // `cached` is a previously saved index; vectors are reused only when it
  // was built by the same provider identity.
  ExemplarStore(std::vector<ExemplarPair> pairs, provider::EmbeddingProvider& embedder,
                const nlohmann::json* cached = nullptr)
      : pairs_(std::move(pairs)), identity_(embedder.identity()) {
    std::unordered_map<std::string, std::vector<double>> reuse;
    if (cached && cached->value("provider", "") == identity_) {
      for (const auto& e : cached->value("entries", nlohmann::json::array()))
        reuse[e.at("id").get<std::string>() + "\n" + e.value("question", "")] = e.at("vector").get<std::vector<double>>();
    }
    for (const auto& p : pairs_) {
      auto it = reuse.find(p.id + "\n" + p.question);
      if (it != reuse.end() && it->second.size() == embedder.dimension()) {
        vectors_.push_back({it->second});
        ++reused_;
      } else {
        vectors_.push_back(embedder.embed(p.question));
      }
      if (vectors_.back().values.size() != vectors_.front().values.size())
        throw InvalidExemplar("embedding dimension changed while indexing " + p.id);
    }
  }

  std::size_t size() const { return pairs_.size(); }
  const std::vector<ExemplarPair>& pairs() const { return pairs_; }
  const std::string& provider_identity() const { return identity_; }
  std::size_t reused_vectors() const { return reused_; }

  // Every exemplar ranked by descending cosine similarity, ties by id.
  std::vector<Scored> ranked(const provider::EmbeddingVector& q) const {
    if (pairs_.empty()) throw EmptyStore("exemplar store is empty");
    std::vector<Scored> all;
    all.reserve(pairs_.size());
    for (std::size_t i = 0; i < pairs_.size(); ++i) all.push_back({&pairs_[i], provider::cosine(q, vectors_[i])});
    std::sort(all.begin(), all.end(), [](const Scored& a, const Scored& b) {
      if (a.similarity != b.similarity) return a.similarity > b.similarity;
      return a.pair->id < b.pair->id;
    });
    return all;
  }

  std::vector<Scored> top_k(std::string_view question, provider::EmbeddingProvider& embedder, std::size_t k = 3) const {
    if (pairs_.empty()) throw EmptyStore("exemplar store is empty");
    if (embedder.identity() != identity_)
      throw ConfigError("exemplar index was built with " + identity_ + ", not " + embedder.identity());
    auto all = ranked(embedder.embed(question));
    if (all.size() > k) all.resize(k);
    return all;
  }

  nlohmann::json index_json() const {
    nlohmann::json entries = nlohmann::json::array();
    for (std::size_t i = 0; i < pairs_.size(); ++i)
      entries.push_back({{"id", pairs_[i].id}, {"question", pairs_[i].question}, {"vector", vectors_[i].values}});
    return {{"provider", identity_},
            {"dimension", vectors_.empty() ? 0 : vectors_.front().values.size()},
            {"entries", std::move(entries)}};
  }

 private:
  std::vector<ExemplarPair> pairs_;
  std::vector<provider::EmbeddingVector> vectors_;
  std::string identity_;
  std::size_t reused_ = 0;
};

}  // namespace transitq::exemplars
