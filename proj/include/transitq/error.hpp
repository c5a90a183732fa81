#pragma once

#include <stdexcept>
#include <string>

namespace transitq {

// Base of every error the library throws. `code()` is a stable upper-case
// identifier that ends up in logs and API payloads.
class Error : public std::runtime_error {
 public:
  Error(std::string code, const std::string& message)
      : std::runtime_error(message), code_(std::move(code)) {}

  const std::string& code() const noexcept { return code_; }

 private:
  std::string code_;
};

#define TRANSITQ_DEFINE_ERROR(Name, Code)                              \
  class Name : public Error {                                          \
   public:                                                             \
    explicit Name(const std::string& message) : Error(Code, message) {} \
  };

// ingest
TRANSITQ_DEFINE_ERROR(MissingFile, "MISSING_FILE")
TRANSITQ_DEFINE_ERROR(DanglingReference, "DANGLING_REFERENCE")
TRANSITQ_DEFINE_ERROR(MalformedGeometry, "MALFORMED_GEOMETRY")
TRANSITQ_DEFINE_ERROR(ConstraintViolation, "CONSTRAINT_VIOLATION")

// storage
TRANSITQ_DEFINE_ERROR(DatabaseError, "DATABASE_ERROR")
TRANSITQ_DEFINE_ERROR(QueryTimeout, "QUERY_TIMEOUT")

// providers
TRANSITQ_DEFINE_ERROR(ProviderUnavailable, "PROVIDER_UNAVAILABLE")
TRANSITQ_DEFINE_ERROR(ContextOverflow, "CONTEXT_OVERFLOW")
TRANSITQ_DEFINE_ERROR(InvalidRequest, "INVALID_REQUEST")

// exemplars
TRANSITQ_DEFINE_ERROR(InvalidExemplar, "INVALID_EXEMPLAR")
TRANSITQ_DEFINE_ERROR(DuplicateId, "DUPLICATE_ID")
TRANSITQ_DEFINE_ERROR(EmptyStore, "EMPTY_STORE")

// guard
TRANSITQ_DEFINE_ERROR(RepairFailed, "REPAIR_FAILED")

// maps
TRANSITQ_DEFINE_ERROR(UnknownRoute, "UNKNOWN_ROUTE")
TRANSITQ_DEFINE_ERROR(NoGeometry, "NO_GEOMETRY")
TRANSITQ_DEFINE_ERROR(EmptyGeometry, "EMPTY_GEOMETRY")

// evaluation
TRANSITQ_DEFINE_ERROR(InsufficientData, "INSUFFICIENT_DATA")
TRANSITQ_DEFINE_ERROR(EndpointUnreachable, "ENDPOINT_UNREACHABLE")

TRANSITQ_DEFINE_ERROR(ConfigError, "CONFIG_ERROR")

#undef TRANSITQ_DEFINE_ERROR

// A CSV row that failed type checks. Carries the file name and the 1-based
// physical line so it can be reported next to the source.
class MalformedRow : public Error {
 public:
  MalformedRow(std::string file, std::size_t line, const std::string& reason)
      : Error("MALFORMED_ROW",
              file + ":" + std::to_string(line) + ": " + reason),
        file_(std::move(file)),
        line_(line),
        reason_(reason) {}

  const std::string& file() const noexcept { return file_; }
  std::size_t line() const noexcept { return line_; }
  const std::string& reason() const noexcept { return reason_; }

 private:
  std::string file_;
  std::size_t line_;
  std::string reason_;
};

}  // namespace transitq
