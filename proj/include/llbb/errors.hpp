#pragma once

#include <stdexcept>
#include <string>

namespace llbb {

// Exit codes are a stable contract for scripts driving the CLI.
enum class ExitCode : int { Ok = 0, Config = 1, Io = 2, Numeric = 3 };

class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
  virtual ExitCode exit_code() const { return ExitCode::Config; }
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class ContractError : public Error {
 public:
  using Error::Error;
};

class BoundsError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
  ExitCode exit_code() const override { return ExitCode::Io; }
};

class FormatError : public IoError {
 public:
  using IoError::IoError;
};

class CheckpointError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
  ExitCode exit_code() const override { return ExitCode::Numeric; }
};

class EmptyBufferError : public Error {
 public:
  using Error::Error;
};

class UndefinedMetricError : public Error {
 public:
  using Error::Error;
  ExitCode exit_code() const override { return ExitCode::Numeric; }
};

}  // namespace llbb
