#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace fedavg {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shape or dimension disagreement between values that must line up.
class StructuralError : public Error {
 public:
  using Error::Error;
};

// A caller violated an operation's precondition (empty batch, zero epochs...).
class UsageError : public Error {
 public:
  using Error::Error;
};

// Federation protocol violations: unknown/duplicate clients, wrong rounds,
// missing clients after a timeout, malformed frames.
class ProtocolError : public Error {
 public:
  using Error::Error;
};

// Raised when the server gives up waiting; carries the clients it never heard from.
class MissingClientsError : public ProtocolError {
 public:
  MissingClientsError(const std::string& what, std::vector<std::string> missing)
      : ProtocolError(what), missing_(std::move(missing)) {}
  const std::vector<std::string>& missing() const noexcept { return missing_; }

 private:
  std::vector<std::string> missing_;
};

class TransportError : public Error {
 public:
  using Error::Error;
};

// Malformed dataset input. row() is 1-based; 0 when not row-specific.
class DataError : public Error {
 public:
  explicit DataError(const std::string& what, std::size_t row = 0)
      : Error(what), row_(row) {}
  std::size_t row() const noexcept { return row_; }

 private:
  std::size_t row_;
};

// AUROC/AUPRC requested on a set lacking the classes they need.
class UndefinedMetricError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace fedavg
