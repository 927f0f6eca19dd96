#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace arseg {

/// Raised when tensor extents, channel counts or grid sizes disagree.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised for malformed files: bad magic, unsupported version, truncation.
class FormatError : public std::runtime_error {
 public:
  explicit FormatError(const std::string& what, std::size_t offset = 0)
      : std::runtime_error(what), offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

/// Raised when a loss or forward value stops being finite.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace arseg
