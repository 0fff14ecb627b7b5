#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace lensforge {

/// Base of every error the library raises.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

class InvalidArgument : public Error {
public:
  using Error::Error;
};

/// Malformed raster, cloud or catalog bytes. Carries the byte offset at
/// which decoding failed.
class FormatError : public Error {
public:
  FormatError(const std::string &what, std::uint64_t offset)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}
  std::uint64_t offset() const noexcept { return offset_; }

private:
  std::uint64_t offset_;
};

/// JSON document that parses but does not match the expected schema.
class CatalogError : public Error {
public:
  using Error::Error;
};

class IoError : public Error {
public:
  IoError(const std::string &what, std::string path)
      : Error(what + ": " + path), path_(std::move(path)) {}
  const std::string &path() const noexcept { return path_; }

private:
  std::string path_;
};

/// Source placed so close behind the lens that the critical density blows up.
class OverflowError : public Error {
public:
  using Error::Error;
};

/// Closed-form lens evaluated at its own center.
class SingularityError : public Error {
public:
  using Error::Error;
};

/// The lens could not produce the requested number of multiple-image systems.
class InsufficientLensing : public Error {
public:
  using Error::Error;
};

class NumericError : public Error {
public:
  using Error::Error;
};

/// Non-finite or runaway sampler state.
class DivergedError : public Error {
public:
  DivergedError(const std::string &what, std::size_t step, std::uint64_t digest)
      : Error(what + " (outer step " + std::to_string(step) + ", state digest " +
              std::to_string(digest) + ")"),
        step_(step), digest_(digest) {}
  std::size_t step() const noexcept { return step_; }
  std::uint64_t digest() const noexcept { return digest_; }

private:
  std::size_t step_;
  std::uint64_t digest_;
};

/// Violation of the external score-provider wire protocol.
class ProtocolError : public Error {
public:
  using Error::Error;
};

} // namespace lensforge
