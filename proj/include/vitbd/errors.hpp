#pragma once

#include <stdexcept>
#include <string>

namespace vitbd {

class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Shape or rank disagreement between operands.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Invalid argument, configuration value, or precondition violation.
class ValueError : public Error {
 public:
  using Error::Error;
};

// NaN or infinity produced by a completed operation.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Filesystem-level failure (open, rename, read, write).
class IoError : public Error {
 public:
  using Error::Error;
};

// On-disk format violation. The kind distinguishes the failure modes the
// loaders are required to detect.
class FormatError : public Error {
 public:
  enum class Kind {
    corrupt_header,
    version_mismatch,
    truncated,
    layout_mismatch,
    sidecar_missing,
    sidecar_mismatch,
    bad_content,
  };

  FormatError(Kind kind, const std::string& msg) : Error(msg), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

}  // namespace vitbd
