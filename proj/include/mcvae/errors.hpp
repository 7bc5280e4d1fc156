#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace mcvae {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Exit code 2.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Exit code 3.
class DataError : public Error {
 public:
  using Error::Error;
};

// Exit code 4.
class NumericalError : public Error {
 public:
  using Error::Error;
};

class DimensionMismatch : public DataError {
 public:
  using DataError::DataError;
};
class InvalidCategory : public DataError {
 public:
  using DataError::DataError;
};
class SchemaMismatch : public DataError {
 public:
  using DataError::DataError;
};
class MissingGroundTruth : public DataError {
 public:
  using DataError::DataError;
};
class RateError : public DataError {
 public:
  using DataError::DataError;
};
class ManifestError : public DataError {
 public:
  using DataError::DataError;
};
class TooFewInstances : public DataError {
 public:
  using DataError::DataError;
};

class ParseError : public DataError {
 public:
  ParseError(const std::string& what, std::size_t row, std::size_t column)
      : DataError(what + " (row " + std::to_string(row) + ", column " +
                  std::to_string(column) + ")"),
        row_(row),
        column_(column) {}
  std::size_t row() const { return row_; }
  std::size_t column() const { return column_; }

 private:
  std::size_t row_;
  std::size_t column_;
};

class NotPositiveDefinite : public NumericalError {
 public:
  using NumericalError::NumericalError;
};
class SingularMatrix : public NumericalError {
 public:
  using NumericalError::NumericalError;
};
class NonFiniteOutput : public NumericalError {
 public:
  using NumericalError::NumericalError;
};
class NonPositiveVariance : public NumericalError {
 public:
  using NumericalError::NumericalError;
};
class SupportViolation : public NumericalError {
 public:
  using NumericalError::NumericalError;
};
class SizeGuard : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

class NonFiniteLoss : public NumericalError {
 public:
  explicit NonFiniteLoss(long step)
      : NumericalError("non-finite loss at training step " + std::to_string(step)),
        step_(step) {}
  long step() const { return step_; }

 private:
  long step_;
};

// Raised when the joint categorical enumeration of a row exceeds the cap.
// Callers fall back to single posterior draws.
class EnumerationOverflow : public Error {
 public:
  EnumerationOverflow(std::size_t joint, std::size_t cap)
      : Error("joint categorical enumeration of " + std::to_string(joint) +
              " assignments exceeds cap " + std::to_string(cap)),
        joint_(joint),
        cap_(cap) {}
  std::size_t joint() const { return joint_; }
  std::size_t cap() const { return cap_; }

 private:
  std::size_t joint_;
  std::size_t cap_;
};

}  // namespace mcvae
