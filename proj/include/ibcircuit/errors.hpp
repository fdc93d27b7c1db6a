#pragma once

#include <stdexcept>
#include <string>

namespace ibc {

// Root of every error the library raises. `kind()` is a stable, machine-parsable tag.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& what)
      : std::runtime_error(what), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

struct ShapeError : Error {
  explicit ShapeError(const std::string& w) : Error("shape", w) {}
};
struct DomainError : Error {
  explicit DomainError(const std::string& w) : Error("domain", w) {}
};
struct NumericError : Error {
  explicit NumericError(const std::string& w) : Error("numeric", w) {}
};
struct FormatError : Error {
  explicit FormatError(const std::string& w) : Error("format", w) {}
};
struct IoError : Error {
  explicit IoError(const std::string& w) : Error("io", w) {}
};
struct ConfigError : Error {
  explicit ConfigError(const std::string& w) : Error("config", w) {}
};
struct TrainingError : Error {
  explicit TrainingError(const std::string& w) : Error("training", w) {}
};
struct LookupError : Error {
  explicit LookupError(const std::string& w) : Error("lookup", w) {}
};

}  // namespace ibc
