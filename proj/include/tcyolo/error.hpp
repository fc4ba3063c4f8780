#pragma once

#include <stdexcept>
#include <string>

namespace tcyolo {

/// Error category, printed as the first token of CLI failure lines.
enum class ErrorCategory { config, dimension, io, data, usage, checkpoint };

inline const char* category_name(ErrorCategory c) {
  switch (c) {
    case ErrorCategory::config: return "config";
    case ErrorCategory::dimension: return "dimension";
    case ErrorCategory::io: return "io";
    case ErrorCategory::data: return "data";
    case ErrorCategory::usage: return "usage";
    case ErrorCategory::checkpoint: return "checkpoint";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCategory category, const std::string& what)
      : std::runtime_error(what), category_(category) {}
  ErrorCategory category() const noexcept { return category_; }

 private:
  ErrorCategory category_;
};

struct ConfigError : Error {
  explicit ConfigError(const std::string& what) : Error(ErrorCategory::config, what) {}
};
struct DimensionError : Error {
  explicit DimensionError(const std::string& what) : Error(ErrorCategory::dimension, what) {}
};
struct IoError : Error {
  explicit IoError(const std::string& what) : Error(ErrorCategory::io, what) {}
};
struct DataError : Error {
  explicit DataError(const std::string& what) : Error(ErrorCategory::data, what) {}
};
struct CheckpointError : Error {
  explicit CheckpointError(const std::string& what) : Error(ErrorCategory::checkpoint, what) {}
};

}  // namespace tcyolo
