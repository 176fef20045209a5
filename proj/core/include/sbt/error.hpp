#pragma once

#include <stdexcept>
#include <string>

namespace sbt {

// Error categories map onto the CLI exit codes (config 2, data 3, numeric 4).
enum class ErrorKind { kConfig, kData, kNumeric, kFormat, kShape };

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error(ErrorKind::kConfig, what) {}
};

class DataError : public Error {
 public:
  explicit DataError(const std::string& what) : Error(ErrorKind::kData, what) {}
};

class NumericError : public Error {
 public:
  explicit NumericError(const std::string& what) : Error(ErrorKind::kNumeric, what) {}
};

class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& what) : Error(ErrorKind::kShape, what) {}
};

// Container decoding failures. Each cause gets its own subtype so callers can
// tell a corrupted file from a newer writer.
class FormatError : public Error {
 public:
  explicit FormatError(const std::string& what) : Error(ErrorKind::kFormat, what) {}
};

class ChecksumError : public FormatError {
 public:
  explicit ChecksumError(const std::string& what) : FormatError(what) {}
};

class VersionError : public FormatError {
 public:
  explicit VersionError(const std::string& what) : FormatError(what) {}
};

class TruncatedError : public FormatError {
 public:
  explicit TruncatedError(const std::string& what) : FormatError(what) {}
};

}  // namespace sbt
