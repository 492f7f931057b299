#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace hpc {

/// Malformed or inconsistent coded data. `offset` is the byte position in the
/// enclosing buffer when known.
class FormatError : public std::runtime_error {
 public:
  static constexpr std::uint64_t kNoOffset = ~std::uint64_t{0};

  explicit FormatError(const std::string& what, std::uint64_t offset = kNoOffset)
      : std::runtime_error(offset == kNoOffset ? what : what + " at byte " + std::to_string(offset)),
        offset_(offset) {}
  std::uint64_t offset() const { return offset_; }

 private:
  std::uint64_t offset_;
};

/// The coded data is well-formed but belongs to a different configuration.
class StreamError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace hpc
