#pragma once

#include <functional>
#include <iostream>
#include <mutex>
#include <string>
#include <string_view>

namespace transitq::log {

enum class Level { debug, info, warn, error };

inline std::string_view name(Level l) {
  switch (l) {
    case Level::debug: return "debug";
    case Level::info: return "info";
    case Level::warn: return "warn";
    case Level::error: return "error";
  }
  return "?";
}

using Sink = std::function<void(Level, std::string_view)>;

namespace detail {
struct State {
  std::mutex mu;
  Level threshold = Level::info;
  Sink sink;
};
inline State& state() {
  static State s;
  return s;
}
}  // namespace detail

// Replaces the process-wide sink. Passing an empty function restores stderr.
inline void set_sink(Sink sink) {
  std::lock_guard g(detail::state().mu);
  detail::state().sink = std::move(sink);
}

inline void set_level(Level l) {
  std::lock_guard g(detail::state().mu);
  detail::state().threshold = l;
}

inline void write(Level l, std::string_view msg) {
  auto& s = detail::state();
  std::lock_guard g(s.mu);
  if (l < s.threshold) return;
  if (s.sink) {
    s.sink(l, msg);
    return;
  }
  std::cerr << "[" << name(l) << "] " << msg << '\n';
}

inline void debug(std::string_view m) { write(Level::debug, m); }
inline void info(std::string_view m) { write(Level::info, m); }
inline void warn(std::string_view m) { write(Level::warn, m); }
inline void error(std::string_view m) { write(Level::error, m); }

}  // namespace transitq::log
