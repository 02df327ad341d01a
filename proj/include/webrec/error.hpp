#pragma once

#include <stdexcept>
#include <string>

namespace webrec {

// Exit codes used by the CLI; every library error maps to one of them.
enum class ErrorCode : int {
  kConfig = 2,
  kData = 3,
  kNetwork = 4,
  kInvariant = 5,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

  // Short machine-parseable token, e.g. "E_CONFIG".
  const char* tag() const noexcept {
    switch (code_) {
      case ErrorCode::kConfig: return "E_CONFIG";
      case ErrorCode::kData: return "E_DATA";
      case ErrorCode::kNetwork: return "E_NETWORK";
      case ErrorCode::kInvariant: return "E_INVARIANT";
    }
    return "E_UNKNOWN";
  }

 private:
  ErrorCode code_;
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error(ErrorCode::kConfig, what) {}
};

class DataError : public Error {
 public:
  explicit DataError(const std::string& what) : Error(ErrorCode::kData, what) {}
};

class NetworkError : public Error {
 public:
  explicit NetworkError(const std::string& what) : Error(ErrorCode::kNetwork, what) {}
};

class InvariantError : public Error {
 public:
  explicit InvariantError(const std::string& what) : Error(ErrorCode::kInvariant, what) {}
};

// Shape and argument problems are programming errors, not data errors.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

}  // namespace webrec
