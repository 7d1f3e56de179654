#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace ethodec {

// Base for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Caller-side mistakes: bad input data, config, files. The CLI maps these to
// exit code 1; everything else derived from Error maps to exit code 2.
class ValidationError : public Error {
 public:
  using Error::Error;
};

class DimensionError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class ContractError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class ConfigError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class FormatError : public ValidationError {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : ValidationError(what + " (at byte offset " + std::to_string(offset) +
                        ")"),
        offset_(offset) {}

  std::size_t offset() const { return offset_; }

 private:
  std::size_t offset_;
};

class ParseError : public ValidationError {
 public:
  ParseError(const std::string& source, std::size_t line,
             const std::string& what)
      : ValidationError(source + ":" + std::to_string(line) + ": " + what),
        line_(line) {}

  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

class TrainingError : public Error {
 public:
  TrainingError(const std::string& what, std::size_t step)
      : Error(what + " (step " + std::to_string(step) + ")"), step_(step) {}

  std::size_t step() const { return step_; }

 private:
  std::size_t step_;
};

// A forward op produced NaN or Inf.
class NumericError : public Error {
 public:
  using Error::Error;
};

class OracleError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace ethodec
