#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace jemb {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

/// Operand shapes do not conform for the named operation.
class ShapeError : public Error {
  public:
    using Error::Error;
};

/// An input lies outside the mathematical domain of an operation (log of a
/// non-positive value, zero-norm row in a cosine, ...).
class DomainError : public Error {
  public:
    using Error::Error;
};

/// Binary file could not be decoded. Carries the byte offset where decoding failed.
class FormatError : public Error {
  public:
    FormatError(const std::string& what, std::uint64_t offset)
        : Error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}

    std::uint64_t offset() const noexcept { return offset_; }

  private:
    std::uint64_t offset_;
};

/// Invalid configuration value or schema violation.
class ConfigError : public Error {
  public:
    using Error::Error;
};

}  // namespace jemb
