#pragma once

#include <stdexcept>
#include <string>

namespace hpgn {

// Root of every exception the library throws.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct InvalidArgument : Error {
  using Error::Error;
};
struct ShapeError : Error {
  using Error::Error;
};
struct InvalidHandleError : Error {
  using Error::Error;
};
struct ConfigError : Error {
  using Error::Error;
};
struct FormatError : Error {
  using Error::Error;
};
struct IoError : Error {
  using Error::Error;
};
struct NumericError : Error {
  using Error::Error;
};
struct DeterminismError : Error {
  using Error::Error;
};
struct BatchCompositionError : Error {
  using Error::Error;
};
struct DegenerateFeatureError : Error {
  using Error::Error;
};

// Malformed text input; carries the 1-based line number.
struct ParseError : Error {
  ParseError(const std::string& what, std::size_t line)
      : Error(what + " (line " + std::to_string(line) + ")"), line(line) {}
  std::size_t line;
};

}  // namespace hpgn
