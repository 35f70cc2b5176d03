#pragma once

#include <stdexcept>
#include <string>

namespace semnoma {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor or vector dimensions disagree with the operation's contract.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Input for which the operation has no defined result (e.g. zero-energy symbols).
class DegenerateInputError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A closed-form quantity left its valid domain (negative radicand and similar).
class NumericalDomainError : public Error {
 public:
  using Error::Error;
};

class NonFiniteLossError : public Error {
 public:
  using Error::Error;
};

class IngestionError : public Error {
 public:
  using Error::Error;
};

class CheckpointError : public Error {
 public:
  using Error::Error;
};

}  // namespace semnoma
