#pragma once

#include <stdexcept>
#include <string>

namespace kidnet {

// Errors caused by bad input (files, configs, arguments). The CLI maps these
// to exit code 1; anything else escaping a subcommand is exit code 2.
struct UserError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct RangeError : UserError {
  using UserError::UserError;
};

struct ParseError : UserError {
  using UserError::UserError;
};

struct IntegrityError : UserError {
  using UserError::UserError;
};

struct ConfigError : UserError {
  using UserError::UserError;
};

struct ShapeError : UserError {
  using UserError::UserError;
};

struct SizeError : UserError {
  using UserError::UserError;
};

struct GenerationError : UserError {
  using UserError::UserError;
};

struct DomainError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DegenerateBatchError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct NonFiniteError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace kidnet
