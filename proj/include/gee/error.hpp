#pragma once

#include <cstddef>
#include <utility>
#include <stdexcept>
#include <string>

namespace gee {

// Base class for every error raised by the library. The CLI maps
// ConfigError/ParseError to exit code 2 and NumericalError to exit code 3.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidInput : public Error {
 public:
  using Error::Error;
};

class InvalidArgument : public Error {
 public:
  using Error::Error;
};

class SymmetryViolation : public Error {
 public:
  SymmetryViolation(double asymmetry)
      : Error("matrix is not symmetric (max |M - M^T| = " + std::to_string(asymmetry) + ")"),
        asymmetry_(asymmetry) {}
  double asymmetry() const noexcept { return asymmetry_; }

 private:
  double asymmetry_;
};

class NumericalError : public Error {
 public:
  using Error::Error;
};

class NotPositiveDefinite : public NumericalError {
 public:
  NotPositiveDefinite(double lambda_min, const std::string& context = {})
      : NumericalError("matrix is not positive definite (lambda_min = " + std::to_string(lambda_min) + ")" +
                       (context.empty() ? std::string{} : " " + context)),
        lambda_min_(lambda_min) {}
  double lambda_min() const noexcept { return lambda_min_; }

 private:
  double lambda_min_;
};

class InvalidVariance : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

class InconsistentMoments : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

class SingularMatrix : public NumericalError {
 public:
  SingularMatrix(const std::string& what, double lambda_min = 0.0) : NumericalError(what), lambda_min_(lambda_min) {}
  double lambda_min() const noexcept { return lambda_min_; }

 private:
  double lambda_min_;
};

class UnsupportedMethod : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  ParseError(std::size_t line, const std::string& what)
      : Error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

class ConfigError : public Error {
 public:
  ConfigError(std::string field, const std::string& what)
      : Error("config field '" + field + "': " + what), field_(std::move(field)) {}
  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

}  // namespace gee
