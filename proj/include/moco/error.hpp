#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace moco {

// Contract-class errors map to CLI exit code 1, I/O-class errors to 2.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ContractError : public Error {
 public:
  using Error::Error;
};

class DimensionError : public ContractError {
 public:
  using ContractError::ContractError;
};

class ConfigError : public ContractError {
 public:
  using ContractError::ContractError;
};

// A loss or parameter went non-finite during training.
class NumericError : public ContractError {
 public:
  NumericError(const std::string& what, std::int64_t step)
      : ContractError(what), step_(step) {}
  std::int64_t step() const { return step_; }

 private:
  std::int64_t step_;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class FormatError : public IoError {
 public:
  FormatError(const std::string& what, std::uint64_t offset)
      : IoError(what + " (at byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}
  std::uint64_t offset() const { return offset_; }

 private:
  std::uint64_t offset_;
};

class CorruptRecordError : public FormatError {
 public:
  CorruptRecordError(const std::string& what, std::uint64_t offset,
                     std::uint64_t record)
      : FormatError(what + " in record " + std::to_string(record), offset),
        record_(record) {}
  std::uint64_t record() const { return record_; }

 private:
  std::uint64_t record_;
};

}  // namespace moco
