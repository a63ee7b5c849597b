#pragma once

#include <stdexcept>
#include <string>

namespace stpl {

/// Process exit codes used by the command-line tool.
enum class ExitCode : int {
  kOk = 0,
  kRuntime = 1,
  kConfig = 2,
  kNumeric = 3,
  kIo = 4,
};

class Error : public std::runtime_error {
 public:
  Error(const std::string& what, ExitCode code) : std::runtime_error(what), code_(code) {}
  ExitCode exit_code() const noexcept { return code_; }

 private:
  ExitCode code_;
};

/// Invalid configuration value (bad kernel size, k out of range, unknown enum...).
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error("config error: " + what, ExitCode::kConfig) {}
};

/// Operand shapes do not conform.
class DimensionError : public Error {
 public:
  explicit DimensionError(const std::string& what)
      : Error("dimension error: " + what, ExitCode::kConfig) {}
};

/// A caller violated an operation's precondition.
class ContractError : public Error {
 public:
  explicit ContractError(const std::string& what)
      : Error("contract error: " + what, ExitCode::kConfig) {}
};

/// A checkpoint does not match the requested model configuration.
class IncompatibleError : public Error {
 public:
  explicit IncompatibleError(const std::string& what)
      : Error("incompatible checkpoint: " + what, ExitCode::kConfig) {}
};

/// NaN/Inf encountered during optimization.
class NumericError : public Error {
 public:
  explicit NumericError(const std::string& what)
      : Error("numeric failure: " + what, ExitCode::kNumeric) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error("i/o error: " + what, ExitCode::kIo) {}
};

/// Corrupt or truncated container file.
class FormatError : public Error {
 public:
  explicit FormatError(const std::string& what) : Error("format error: " + what, ExitCode::kIo) {}
};

}  // namespace stpl
