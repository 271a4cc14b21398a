#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace hcnaf {

// Bad shapes, lengths or values passed by the caller.
class ArgumentError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A value went non-finite somewhere inside a computation.
class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& what, int layer = -1)
      : std::runtime_error(what), layer_(layer) {}

  // Flow layer (1-based) where the failure was detected, -1 if unknown.
  int layer() const noexcept { return layer_; }

 private:
  int layer_;
};

// A target z_d lies outside what the monotone map for dimension d can reach.
class RangeError : public std::runtime_error {
 public:
  RangeError(const std::string& what, std::size_t dim)
      : std::runtime_error(what), dim_(dim) {}

  std::size_t dim() const noexcept { return dim_; }

 private:
  std::size_t dim_;
};

// Too many base draws fall outside the attainable output range.
class SaturationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Misuse of the gradient tape (foreign handles, non-scalar roots, ...).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Malformed files: IDX, checkpoints, configs.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace hcnaf
