#pragma once

#include <stdexcept>
#include <string>

namespace ummx {

// Error taxonomy. Every throw site uses the most specific type so callers
// (CLI, tests) can map failures to exit codes and messages.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ConfigError : Error {
  using Error::Error;
};
struct ShapeError : Error {
  using Error::Error;
};
struct NumericError : Error {
  using Error::Error;
};
struct VocabError : Error {
  using Error::Error;
};
struct ParseError : Error {
  using Error::Error;
};
struct IoError : Error {
  using Error::Error;
};
struct StructureError : Error {
  using Error::Error;
};
struct VersionError : Error {
  using Error::Error;
};
struct CorruptionError : Error {
  using Error::Error;
};
struct DeterminismError : Error {
  using Error::Error;
};
struct EmptyCohortError : Error {
  using Error::Error;
};

}  // namespace ummx
