#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace im2tex {

// All library failures derive from Error so callers (the CLI in particular)
// can map the category onto an exit code.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shape or extent mismatch between operands.
class DimensionError : public Error {
 public:
  using Error::Error;
};

class IndexError : public Error {
 public:
  using Error::Error;
};

// Caller violated an operation precondition (non-scalar loss, all-masked row...).
class ContractError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// Bad or empty input collection.
class InputError : public Error {
 public:
  using Error::Error;
};

class TokenizeError : public Error {
 public:
  TokenizeError(const std::string& what, std::size_t offset)
      : Error(what + " at byte offset " + std::to_string(offset)), offset_(offset) {}
  std::size_t offset() const { return offset_; }

 private:
  std::size_t offset_;
};

class LengthError : public Error {
 public:
  LengthError(const std::string& what, std::size_t overflow)
      : Error(what + " (overflow " + std::to_string(overflow) + ")"), overflow_(overflow) {}
  std::size_t overflow() const { return overflow_; }

 private:
  std::size_t overflow_;
};

class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t line)
      : Error("line " + std::to_string(line) + ": " + what), line_(line) {}
  // 1-based.
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

class FormatError : public Error {
 public:
  FormatError(const std::string& field, const std::string& what)
      : Error("bad " + field + ": " + what), field_(field) {}
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

// Non-finite values during optimisation.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

}  // namespace im2tex
