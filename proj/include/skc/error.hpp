#pragma once

#include <stdexcept>
#include <string>

namespace skc {

// Process exit codes used by the CLI: 0 success, 2 validation error,
// 3 numeric error, 4 I/O error.
class Error : public std::runtime_error {
 public:
  Error(const std::string& msg, int exit_code)
      : std::runtime_error(msg), exit_code_(exit_code) {}
  int exit_code() const { return exit_code_; }

 private:
  int exit_code_;
};

struct DimensionError : Error {
  explicit DimensionError(const std::string& m) : Error(m, 2) {}
};

struct PreconditionError : Error {
  explicit PreconditionError(const std::string& m) : Error(m, 2) {}
};

struct ConfigError : Error {
  explicit ConfigError(const std::string& m) : Error(m, 2) {}
};

struct VocabError : Error {
  explicit VocabError(const std::string& m) : Error(m, 2) {}
};

struct ValidationError : Error {
  explicit ValidationError(const std::string& m) : Error(m, 2) {}
};

struct NumericError : Error {
  explicit NumericError(const std::string& m) : Error(m, 3) {}
};

struct IoError : Error {
  explicit IoError(const std::string& m) : Error(m, 4) {}
};

}  // namespace skc
