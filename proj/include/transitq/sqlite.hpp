#pragma once

#include <sqlite3.h>

#include <chrono>
#include <cmath>
#include <condition_variable>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "transitq/error.hpp"

namespace transitq::db {

using Null = std::monostate;
using Value = std::variant<Null, std::int64_t, double, std::string>;

inline bool is_null(const Value& v) { return std::holds_alternative<Null>(v); }

inline std::optional<double> as_number(const Value& v) {
  if (auto i = std::get_if<std::int64_t>(&v)) return static_cast<double>(*i);
  if (auto d = std::get_if<double>(&v)) return *d;
  return std::nullopt;
}

// Text form used in answers and fallbacks. Reals are printed with up to 15
// significant digits and integral reals lose the trailing ".0".
inline std::string to_text(const Value& v) {
  struct Visitor {
    std::string operator()(Null) const { return "NULL"; }
    std::string operator()(std::int64_t i) const { return std::to_string(i); }
    std::string operator()(double d) const {
      if (std::isfinite(d) && d == std::floor(d) && std::fabs(d) < 1e15)
        return std::to_string(static_cast<std::int64_t>(d));
      std::ostringstream os;
      os.precision(15);
      os << d;
      return os.str();
    }
    std::string operator()(const std::string& s) const { return s; }
  };
  return std::visit(Visitor{}, v);
}

// A column-named result set.
struct Table {
  std::vector<std::string> columns;
  std::vector<std::vector<Value>> rows;

  bool empty() const { return rows.empty(); }
};

class Statement;

// Owning handle to one SQLite connection.
class Connection {
 public:
  enum class Mode { read_only, read_write, create };

  Connection() = default;

  explicit Connection(const std::filesystem::path& path, Mode mode = Mode::read_only) {
    int flags = SQLITE_OPEN_NOMUTEX;
    switch (mode) {
      case Mode::read_only: flags |= SQLITE_OPEN_READONLY; break;
      case Mode::read_write: flags |= SQLITE_OPEN_READWRITE; break;
      case Mode::create: flags |= SQLITE_OPEN_READWRITE | SQLITE_OPEN_CREATE; break;
    }
    if (path.string() == ":memory:") flags |= SQLITE_OPEN_MEMORY;
    sqlite3* raw = nullptr;
    int rc = sqlite3_open_v2(path.string().c_str(), &raw, flags, nullptr);
    handle_.reset(raw);
    if (rc != SQLITE_OK) {
      std::string msg = raw ? sqlite3_errmsg(raw) : "out of memory";
      throw DatabaseError("cannot open " + path.string() + ": " + msg);
    }
    read_only_ = mode == Mode::read_only;
    sqlite3_extended_result_codes(raw, 1);
    exec("PRAGMA foreign_keys = ON");
  }

  static Connection in_memory() { return Connection(":memory:", Mode::create); }

  sqlite3* get() const { return handle_.get(); }
  bool read_only() const { return read_only_; }
  explicit operator bool() const { return handle_ != nullptr; }

  void exec(const std::string& sql) {
    char* err = nullptr;
    if (sqlite3_exec(get(), sql.c_str(), nullptr, nullptr, &err) != SQLITE_OK) {
      std::string msg = err ? err : "unknown error";
      sqlite3_free(err);
      throw DatabaseError(msg + " [" + sql.substr(0, 200) + "]");
    }
  }

  Statement prepare(std::string_view sql) const;

  // Compiles without running. Returns the engine's message on failure.
  std::optional<std::string> compile_error(std::string_view sql, bool* read_only_stmt = nullptr) const {
    sqlite3_stmt* stmt = nullptr;
    const char* tail = nullptr;
    int rc = sqlite3_prepare_v2(get(), sql.data(), static_cast<int>(sql.size()), &stmt, &tail);
    std::optional<std::string> out;
    if (rc != SQLITE_OK) {
      out = sqlite3_errmsg(get());
    } else if (!stmt) {
      out = "empty statement";
    } else if (read_only_stmt) {
      *read_only_stmt = sqlite3_stmt_readonly(stmt) != 0;
    }
    sqlite3_finalize(stmt);
    return out;
  }

  // Runs `sql` and materializes every row. A positive timeout interrupts the
  // statement through the progress handler once the deadline passes.
  Table query(std::string_view sql, std::chrono::milliseconds timeout = std::chrono::milliseconds{0}) const;

  std::vector<std::string> table_names(bool include_views = false) const;

 private:
  struct Closer {
    void operator()(sqlite3* db) const { sqlite3_close_v2(db); }
  };
  std::unique_ptr<sqlite3, Closer> handle_;
  bool read_only_ = false;
};

class Statement {
 public:
  Statement(sqlite3* db, std::string_view sql) : db_(db) {
    sqlite3_stmt* raw = nullptr;
    int rc = sqlite3_prepare_v2(db, sql.data(), static_cast<int>(sql.size()), &raw, nullptr);
    stmt_.reset(raw);
    if (rc != SQLITE_OK)
      throw DatabaseError(std::string(sqlite3_errmsg(db)) + " [" + std::string(sql.substr(0, 200)) + "]");
    if (!raw) throw DatabaseError("empty statement");
  }

  Statement& bind(int idx, const Value& v) {
    int rc = SQLITE_OK;
    if (is_null(v)) {
      rc = sqlite3_bind_null(get(), idx);
    } else if (auto i = std::get_if<std::int64_t>(&v)) {
      rc = sqlite3_bind_int64(get(), idx, *i);
    } else if (auto d = std::get_if<double>(&v)) {
      rc = sqlite3_bind_double(get(), idx, *d);
    } else {
      const auto& s = std::get<std::string>(v);
      rc = sqlite3_bind_text(get(), idx, s.data(), static_cast<int>(s.size()), SQLITE_TRANSIENT);
    }
    if (rc != SQLITE_OK) throw DatabaseError(sqlite3_errmsg(db_));
    return *this;
  }

  template <typename... Args>
  Statement& bind_all(const Args&... args) {
    int idx = 1;
    (bind(idx++, Value(args)), ...);
    return *this;
  }

  // true while a row is available.
  bool step() {
    int rc = sqlite3_step(get());
    if (rc == SQLITE_ROW) return true;
    if (rc == SQLITE_DONE) return false;
    if (rc == SQLITE_INTERRUPT) throw QueryTimeout("query interrupted after timeout");
    if ((rc & 0xff) == SQLITE_CONSTRAINT) throw ConstraintViolation(sqlite3_errmsg(db_));
    throw DatabaseError(sqlite3_errmsg(db_));
  }

  void reset() {
    sqlite3_reset(get());
    sqlite3_clear_bindings(get());
  }

  // Bind, run to completion, reset. For inserts.
  template <typename... Args>
  void run(const Args&... args) {
    bind_all(args...);
    while (step()) {
    }
    reset();
  }

  int column_count() const { return sqlite3_column_count(get()); }
  std::string column_name(int i) const {
    const char* n = sqlite3_column_name(get(), i);
    return n ? n : "";
  }

  Value column(int i) const {
    switch (sqlite3_column_type(get(), i)) {
      case SQLITE_INTEGER: return std::int64_t{sqlite3_column_int64(get(), i)};
      case SQLITE_FLOAT: return sqlite3_column_double(get(), i);
      case SQLITE_NULL: return Null{};
      default: {
        auto p = reinterpret_cast<const char*>(sqlite3_column_text(get(), i));
        return std::string(p ? p : "", static_cast<std::size_t>(sqlite3_column_bytes(get(), i)));
      }
    }
  }

  std::string text(int i) const {
    auto p = reinterpret_cast<const char*>(sqlite3_column_text(get(), i));
    return p ? std::string(p) : std::string();
  }
  std::int64_t integer(int i) const { return sqlite3_column_int64(get(), i); }
  double real(int i) const { return sqlite3_column_double(get(), i); }

  sqlite3_stmt* get() const { return stmt_.get(); }

 private:
  struct Finalizer {
    void operator()(sqlite3_stmt* s) const { sqlite3_finalize(s); }
  };
  sqlite3* db_;
  std::unique_ptr<sqlite3_stmt, Finalizer> stmt_;
};

inline Statement Connection::prepare(std::string_view sql) const { return Statement(get(), sql); }

inline Table Connection::query(std::string_view sql, std::chrono::milliseconds timeout) const {
  using Clock = std::chrono::steady_clock;
  struct Deadline {
    Clock::time_point at;
  } deadline{Clock::now() + timeout};
  if (timeout.count() > 0) {
    sqlite3_progress_handler(
        get(), 1000,
        [](void* p) -> int { return Clock::now() > static_cast<Deadline*>(p)->at ? 1 : 0; },
        &deadline);
  }
  struct Restore {
    sqlite3* db;
    bool active;
    ~Restore() {
      if (active) sqlite3_progress_handler(db, 0, nullptr, nullptr);
    }
  } restore{get(), timeout.count() > 0};

  Statement stmt = prepare(sql);
  Table out;
  for (int i = 0; i < stmt.column_count(); ++i) out.columns.push_back(stmt.column_name(i));
  while (stmt.step()) {
    std::vector<Value> row;
    row.reserve(out.columns.size());
    for (int i = 0; i < stmt.column_count(); ++i) row.push_back(stmt.column(i));
    out.rows.push_back(std::move(row));
  }
  return out;
}

inline std::vector<std::string> Connection::table_names(bool include_views) const {
  std::string sql =
      "SELECT name FROM sqlite_master WHERE type IN ('table'" + std::string(include_views ? ",'view'" : "") +
      ") AND name NOT LIKE 'sqlite_%' ORDER BY rowid";
  auto stmt = prepare(sql);
  std::vector<std::string> names;
  while (stmt.step()) names.push_back(stmt.text(0));
  return names;
}

// RAII transaction; rolls back unless committed.
class Transaction {
 public:
  explicit Transaction(Connection& c) : conn_(c) { conn_.exec("BEGIN"); }
  ~Transaction() {
    if (!done_) {
      try {
        conn_.exec("ROLLBACK");
      } catch (...) {
      }
    }
  }
  void commit() {
    conn_.exec("COMMIT");
    done_ = true;
  }

 private:
  Connection& conn_;
  bool done_ = false;
};

// Bounded pool of read-only connections to one database file.
class ConnectionPool {
 public:
  ConnectionPool(std::filesystem::path path, std::size_t size) : path_(std::move(path)), capacity_(size ? size : 1) {}

  class Lease {
   public:
    Lease(ConnectionPool* pool, std::unique_ptr<Connection> c) : pool_(pool), conn_(std::move(c)) {}
    Lease(Lease&&) = default;
    Lease& operator=(Lease&&) = default;
    ~Lease() {
      if (pool_ && conn_) pool_->give_back(std::move(conn_));
    }
    Connection& operator*() const { return *conn_; }
    Connection* operator->() const { return conn_.get(); }

   private:
    ConnectionPool* pool_;
    std::unique_ptr<Connection> conn_;
  };

  Lease acquire() {
    std::unique_lock lock(mu_);
    cv_.wait(lock, [&] { return !idle_.empty() || created_ < capacity_; });
    if (!idle_.empty()) {
      auto c = std::move(idle_.back());
      idle_.pop_back();
      return Lease(this, std::move(c));
    }
    ++created_;
    lock.unlock();
    try {
      return Lease(this, std::make_unique<Connection>(path_, Connection::Mode::read_only));
    } catch (...) {
      std::lock_guard g(mu_);
      --created_;
      cv_.notify_one();
      throw;
    }
  }

  const std::filesystem::path& path() const { return path_; }

 private:
  void give_back(std::unique_ptr<Connection> c) {
    std::lock_guard g(mu_);
    idle_.push_back(std::move(c));
    cv_.notify_one();
  }

  std::filesystem::path path_;
  std::size_t capacity_;
  std::size_t created_ = 0;
  std::vector<std::unique_ptr<Connection>> idle_;
  std::mutex mu_;
  std::condition_variable cv_;
};

}  // namespace transitq::db
