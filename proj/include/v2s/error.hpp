#pragma once

#include <stdexcept>
#include <string>

namespace v2s {

struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Shape or dimension mismatch between tensors / signals.
struct ShapeError : Error {
  explicit ShapeError(const std::string& msg) : Error("shape error: " + msg) {}
};

// Bad configuration value or inconsistent config combination.
struct ConfigError : Error {
  explicit ConfigError(const std::string& msg) : Error("config error: " + msg) {}
};

// File IO and on-disk format problems.
struct IoError : Error {
  explicit IoError(const std::string& msg) : Error("io error: " + msg) {}
  IoError(const std::string& path, const std::string& msg)
      : Error("io error: " + path + ": " + msg) {}
  IoError(const std::string& path, long long offset, const std::string& msg)
      : Error("io error: " + path + " (byte " + std::to_string(offset) + "): " + msg) {}
};

// Corpus / dataset level problems (missing frames, bad landmark counts, ...).
struct DataError : Error {
  explicit DataError(const std::string& msg) : Error("data error: " + msg) {}
};

// Numerical failure: NaN loss, divergence, non-finite values where finite required.
struct NumericError : Error {
  explicit NumericError(const std::string& msg) : Error("numeric error: " + msg) {}
};

// Degenerate geometry (coincident landmarks etc).
struct GeometryError : Error {
  explicit GeometryError(const std::string& msg) : Error("geometry error: " + msg) {}
};

}  // namespace v2s
