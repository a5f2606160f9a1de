#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace cmcl {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes are incompatible.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A caller violated a documented precondition (non-scalar loss, empty list, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

/// A reduction over rows was asked for with zero rows.
class EmptyBatchError : public Error {
 public:
  using Error::Error;
};

/// Covariance needs at least two rows.
class InsufficientSamplesError : public Error {
 public:
  using Error::Error;
};

/// KL divergence is infinite (q has a zero where p is positive).
class DivergenceInfiniteError : public Error {
 public:
  using Error::Error;
};

/// A finite-difference probe produced a non-finite value.
class ProbeError : public Error {
 public:
  ProbeError(const std::string& what, std::size_t coordinate)
      : Error(what), coordinate_(coordinate) {}
  std::size_t coordinate() const { return coordinate_; }

 private:
  std::size_t coordinate_;
};

/// Malformed binary file. `offset` is the byte offset where decoding failed.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}
  std::size_t offset() const { return offset_; }

 private:
  std::size_t offset_;
};

class VersionError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration or scenario. `field` names the offending entry.
class ValidationError : public Error {
 public:
  ValidationError(std::string field, const std::string& what)
      : Error(field + ": " + what), field_(std::move(field)) {}
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

/// Stratified splitting is impossible (a class has fewer than two examples).
class StratificationError : public Error {
 public:
  using Error::Error;
};

/// Training produced a non-finite loss or parameter.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace cmcl
