#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <memory>
#include <mutex>
#include <regex>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "transitq/error.hpp"
#include "transitq/log.hpp"

namespace transitq::provider {

enum class Role { system, user, assistant };

inline std::string_view to_string(Role r) {
  switch (r) {
    case Role::system: return "system";
    case Role::user: return "user";
    case Role::assistant: return "assistant";
  }
  return "user";
}

struct Message {
  Role role = Role::user;
  std::string text;
};

struct CompletionRequest {
  std::string system_prompt;
  std::vector<Message> messages;
  double temperature = 0.0;
  int max_tokens = 1024;

  void validate() const {
    if (messages.empty()) throw InvalidRequest("completion request has no messages");
    if (!(temperature >= 0.0)) throw InvalidRequest("temperature must be >= 0");
    if (max_tokens <= 0) throw InvalidRequest("max_tokens must be positive");
  }

  std::string_view last_user_message() const {
    for (auto it = messages.rbegin(); it != messages.rend(); ++it)
      if (it->role == Role::user) return it->text;
    return {};
  }

  std::size_t char_count() const {
    std::size_t n = system_prompt.size();
    for (const auto& m : messages) n += m.text.size();
    return n;
  }
};

struct EmbeddingVector {
  std::vector<double> values;

  std::size_t dimension() const { return values.size(); }
};

inline double dot(const EmbeddingVector& a, const EmbeddingVector& b) {
  if (a.dimension() != b.dimension()) throw InvalidRequest("embedding dimensions differ");
  double s = 0;
  for (std::size_t i = 0; i < a.values.size(); ++i) s += a.values[i] * b.values[i];
  return s;
}

inline double cosine(const EmbeddingVector& a, const EmbeddingVector& b) {
  double na = std::sqrt(dot(a, a)), nb = std::sqrt(dot(b, b));
  if (na == 0 || nb == 0) return 0;
  return dot(a, b) / (na * nb);
}

class CompletionProvider {
 public:
  virtual ~CompletionProvider() = default;
  virtual std::string complete(const CompletionRequest& req) = 0;
  virtual std::string identity() const = 0;
  virtual bool configured() const { return true; }
};

class EmbeddingProvider {
 public:
  virtual ~EmbeddingProvider() = default;
  virtual EmbeddingVector embed(std::string_view text) = 0;
  virtual std::size_t dimension() const = 0;
  // Changes whenever vectors from this provider are not comparable with
  // vectors from another configuration.
  virtual std::string identity() const = 0;
};

// Lowercased alphanumeric runs; bytes >= 0x80 count as letters so accented
// words stay whole.
inline std::vector<std::string> tokenize_words(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (unsigned char c : text) {
    if (std::isalnum(c) || c >= 0x80) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

inline std::uint64_t fnv1a(std::string_view s, std::uint64_t seed) {
  std::uint64_t h = 14695981039346656037ull ^ (seed * 0x9E3779B97F4A7C15ull);
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  // final avalanche (splitmix64)
  h ^= h >> 30;
  h *= 0xBF58476D1CE4E5B9ull;
  h ^= h >> 27;
  h *= 0x94D049BB133111EBull;
  h ^= h >> 31;
  return h;
}

// Deterministic offline provider. Completions come from an ordered list of
// (regex over the last user message, response) pairs; the first match wins
// and its response may use $1.. back-references. Embeddings are a seeded
// signed hash of the token multiset, L2-normalized.
class ScriptedProvider : public CompletionProvider, public EmbeddingProvider {
 public:
  struct Rule {
    std::string pattern;
    std::regex matcher;
    std::string response;
  };

  explicit ScriptedProvider(std::uint64_t seed = 7, std::size_t dimension = 256) : seed_(seed), dimension_(dimension) {
    if (dimension_ == 0) throw ConfigError("embedding dimension must be positive");
  }

  // {"seed": n, "dimension": n, "unavailable": bool, "default": "...",
  //  "completions": [{"match": "regex", "response": "..."}]}
  static std::shared_ptr<ScriptedProvider> from_json(const nlohmann::json& j) {
    auto p = std::make_shared<ScriptedProvider>(j.value("seed", std::uint64_t{7}), j.value("dimension", std::size_t{256}));
    p->unavailable_ = j.value("unavailable", false);
    if (j.contains("default") && j["default"].is_string()) p->default_response_ = j["default"].get<std::string>();
    for (const auto& r : j.value("completions", nlohmann::json::array()))
      p->add(r.at("match").get<std::string>(), r.at("response").get<std::string>());
    return p;
  }

  static std::shared_ptr<ScriptedProvider> load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read scripted provider file " + path.string());
    try {
      return from_json(nlohmann::json::parse(in));
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(path.string() + ": " + e.what());
    }
  }

  ScriptedProvider& add(const std::string& pattern, std::string response) {
    try {
      rules_.push_back({pattern, std::regex(pattern, std::regex::ECMAScript | std::regex::icase), std::move(response)});
    } catch (const std::regex_error& e) {
      throw ConfigError("bad matcher '" + pattern + "': " + e.what());
    }
    return *this;
  }

  void set_unavailable(bool v) { unavailable_ = v; }

  std::string complete(const CompletionRequest& req) override {
    req.validate();
    if (unavailable_) throw ProviderUnavailable("scripted provider marked unavailable");
    std::string last(req.last_user_message());
    for (const auto& rule : rules_) {
      std::smatch m;
      if (std::regex_search(last, m, rule.matcher)) return m.format(rule.response);
    }
    if (default_response_) return *default_response_;
    throw ProviderUnavailable("scripted provider has no response for: " + last.substr(0, 120));
  }

  EmbeddingVector embed(std::string_view text) override {
    if (unavailable_) throw ProviderUnavailable("scripted provider marked unavailable");
    auto tokens = tokenize_words(text);
    if (tokens.empty()) throw InvalidRequest("cannot embed text without tokens");
    EmbeddingVector v{std::vector<double>(dimension_, 0.0)};
    for (const auto& t : tokens) {
      std::uint64_t h = fnv1a(t, seed_);
      v.values[h % dimension_] += (h >> 63) ? 1.0 : -1.0;
    }
    double norm = std::sqrt(dot(v, v));
    if (norm == 0) {
      // Every token cancelled out; fall back to an unsigned bag.
      for (const auto& t : tokens) v.values[fnv1a(t, seed_) % dimension_] += 1.0;
      norm = std::sqrt(dot(v, v));
    }
    for (auto& x : v.values) x /= norm;
    return v;
  }

  std::size_t dimension() const override { return dimension_; }
  std::string identity() const override {
    return "scripted/hash-bow/seed=" + std::to_string(seed_) + "/dim=" + std::to_string(dimension_);
  }
  bool configured() const override { return !unavailable_; }

  const std::vector<Rule>& rules() const { return rules_; }

 private:
  std::uint64_t seed_;
  std::size_t dimension_;
  bool unavailable_ = false;
  std::optional<std::string> default_response_;
  std::vector<Rule> rules_;
};

struct RemoteConfig {
  std::string endpoint;  // e.g. https://api.example.com/v1
  std::string chat_model;
  std::string embedding_model;
  std::string api_key;
  std::size_t embedding_dimension = 1536;
  int max_retries = 3;
  std::chrono::milliseconds initial_backoff{500};
  std::chrono::milliseconds timeout{60000};
  std::size_t max_context_chars = 400000;
  double requests_per_second = 0;  // 0 disables the limiter

  static RemoteConfig from_env() {
    auto env = [](const char* name, const char* fallback = "") {
      const char* v = std::getenv(name);
      return std::string(v ? v : fallback);
    };
    RemoteConfig c;
    c.endpoint = env("TRANSITQ_LLM_ENDPOINT", "https://api.openai.com/v1");
    c.chat_model = env("TRANSITQ_LLM_MODEL", "gpt-4-turbo");
    c.embedding_model = env("TRANSITQ_EMBEDDING_MODEL", "text-embedding-ada-002");
    c.api_key = env("TRANSITQ_LLM_API_KEY");
    return c;
  }

  bool configured() const { return !endpoint.empty() && !chat_model.empty() && !api_key.empty(); }
};

// Chat-completion and embedding client for OpenAI-compatible JSON endpoints.
class RemoteProvider : public CompletionProvider, public EmbeddingProvider {
 public:
  explicit RemoteProvider(RemoteConfig cfg) : cfg_(std::move(cfg)) { split_endpoint(); }

  std::string complete(const CompletionRequest& req) override {
    req.validate();
    if (!cfg_.configured()) throw ProviderUnavailable("remote provider is not configured (missing endpoint, model or key)");
    if (req.char_count() > cfg_.max_context_chars)
      throw ContextOverflow("prompt of " + std::to_string(req.char_count()) + " characters exceeds limit of " +
                            std::to_string(cfg_.max_context_chars));
    nlohmann::json body{{"model", cfg_.chat_model}, {"temperature", req.temperature}, {"max_tokens", req.max_tokens}};
    auto& msgs = body["messages"] = nlohmann::json::array();
    if (!req.system_prompt.empty()) msgs.push_back({{"role", "system"}, {"content", req.system_prompt}});
    for (const auto& m : req.messages) msgs.push_back({{"role", to_string(m.role)}, {"content", m.text}});
    auto res = post("/chat/completions", body);
    try {
      return res.at("choices").at(0).at("message").at("content").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      throw ProviderUnavailable(std::string("unexpected completion payload: ") + e.what());
    }
  }

  EmbeddingVector embed(std::string_view text) override {
    if (text.empty()) throw InvalidRequest("cannot embed empty text");
    if (!cfg_.configured()) throw ProviderUnavailable("remote provider is not configured");
    auto res = post("/embeddings", {{"model", cfg_.embedding_model}, {"input", std::string(text)}});
    try {
      EmbeddingVector v{res.at("data").at(0).at("embedding").get<std::vector<double>>()};
      for (double x : v.values)
        if (!std::isfinite(x)) throw ProviderUnavailable("embedding contains non-finite values");
      return v;
    } catch (const nlohmann::json::exception& e) {
      throw ProviderUnavailable(std::string("unexpected embedding payload: ") + e.what());
    }
  }

  std::size_t dimension() const override { return cfg_.embedding_dimension; }
  std::string identity() const override { return "remote/" + cfg_.endpoint + "/" + cfg_.embedding_model; }
  bool configured() const override { return cfg_.configured(); }
  const RemoteConfig& config() const { return cfg_; }

 private:
  void split_endpoint() {
    auto scheme_end = cfg_.endpoint.find("://");
    auto host_start = scheme_end == std::string::npos ? 0 : scheme_end + 3;
    auto path_start = cfg_.endpoint.find('/', host_start);
    origin_ = cfg_.endpoint.substr(0, path_start);
    prefix_ = path_start == std::string::npos ? "" : cfg_.endpoint.substr(path_start);
    while (!prefix_.empty() && prefix_.back() == '/') prefix_.pop_back();
  }

  void throttle() {
    if (cfg_.requests_per_second <= 0) return;
    using Clock = std::chrono::steady_clock;
    auto interval = std::chrono::duration_cast<Clock::duration>(std::chrono::duration<double>(1.0 / cfg_.requests_per_second));
    Clock::time_point wait_until;
    {
      std::lock_guard g(limiter_mu_);
      auto now = Clock::now();
      next_slot_ = std::max(next_slot_, now);
      wait_until = next_slot_;
      next_slot_ += interval;
    }
    std::this_thread::sleep_until(wait_until);
  }

  nlohmann::json post(const std::string& path, const nlohmann::json& body) {
    auto backoff = cfg_.initial_backoff;
    std::string last_error;
    for (int attempt = 0; attempt <= cfg_.max_retries; ++attempt) {
      if (attempt > 0) {
        std::this_thread::sleep_for(backoff);
        backoff *= 2;
      }
      throttle();
      httplib::Client client(origin_);
      auto secs = std::chrono::duration_cast<std::chrono::seconds>(cfg_.timeout).count();
      client.set_connection_timeout(std::max<long long>(1, secs), 0);
      client.set_read_timeout(std::max<long long>(1, secs), 0);
      client.set_write_timeout(std::max<long long>(1, secs), 0);
      httplib::Headers headers{{"Authorization", "Bearer " + cfg_.api_key}};
      auto res = client.Post(prefix_ + path, headers, body.dump(), "application/json");
      if (!res) {
        last_error = "transport error: " + httplib::to_string(res.error());
        continue;
      }
      if (res->status == 200) {
        try {
          return nlohmann::json::parse(res->body);
        } catch (const nlohmann::json::parse_error& e) {
          throw ProviderUnavailable(std::string("invalid JSON from provider: ") + e.what());
        }
      }
      last_error = "HTTP " + std::to_string(res->status) + ": " + res->body.substr(0, 300);
      if (res->status == 429 || res->status >= 500) continue;
      if (res->body.find("context_length_exceeded") != std::string::npos) throw ContextOverflow(last_error);
      throw ProviderUnavailable(last_error);
    }
    throw ProviderUnavailable("giving up after " + std::to_string(cfg_.max_retries + 1) + " attempts; " + last_error);
  }

  RemoteConfig cfg_;
  std::string origin_;
  std::string prefix_;
  std::mutex limiter_mu_;
  std::chrono::steady_clock::time_point next_slot_{};
};

// The pair of services one deployment uses, selected from configuration.
struct Providers {
  std::shared_ptr<CompletionProvider> chat;
  std::shared_ptr<EmbeddingProvider> embedder;
  std::string kind;

  bool configured() const { return chat && embedder && chat->configured(); }
};

// {"kind": "scripted", "script": "<path>"} or
// {"kind": "remote", "endpoint": ..., "model": ..., "embedding_model": ..., ...}.
// Remote credentials come from the environment only.
inline Providers make_providers(const nlohmann::json& cfg, const std::filesystem::path& base_dir = {}) {
  std::string kind = cfg.value("kind", "scripted");
  Providers p;
  p.kind = kind;
  if (kind == "scripted") {
    std::shared_ptr<ScriptedProvider> s;
    if (cfg.contains("script")) {
      std::filesystem::path script = cfg["script"].get<std::string>();
      if (script.is_relative() && !base_dir.empty()) script = base_dir / script;
      s = ScriptedProvider::load(script);
    } else {
      s = ScriptedProvider::from_json(cfg);
    }
    p.chat = s;
    p.embedder = s;
  } else if (kind == "remote") {
    auto rc = RemoteConfig::from_env();
    if (cfg.contains("endpoint")) rc.endpoint = cfg["endpoint"].get<std::string>();
    if (cfg.contains("model")) rc.chat_model = cfg["model"].get<std::string>();
    if (cfg.contains("embedding_model")) rc.embedding_model = cfg["embedding_model"].get<std::string>();
    rc.embedding_dimension = cfg.value("embedding_dimension", rc.embedding_dimension);
    rc.max_retries = cfg.value("max_retries", rc.max_retries);
    rc.timeout = std::chrono::milliseconds(cfg.value("timeout_ms", static_cast<long long>(rc.timeout.count())));
    rc.max_context_chars = cfg.value("max_context_chars", rc.max_context_chars);
    rc.requests_per_second = cfg.value("requests_per_second", rc.requests_per_second);
    auto r = std::make_shared<RemoteProvider>(rc);
    p.chat = r;
    p.embedder = r;
  } else {
    throw ConfigError("unknown provider kind '" + kind + "'");
  }
  return p;
}

}  // namespace transitq::provider
