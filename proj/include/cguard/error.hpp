#pragma once

#include <stdexcept>
#include <string>

namespace cguard {

enum class ErrorCode {
  ShapeMismatch,
  SingularGram,
  NonFiniteActivation,
  NonFiniteLoss,
  TapeMismatch,
  StateShapeMismatch,
  NeverTrained,
  NonPositiveVariance,
  DegenerateSplit,
  TooFewSamples,
  ConstantInput,
  SingleClass,
  InvalidArgument,
  IoError,
  ParseError,
};

const char* error_code_name(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(error_code_name(code)) + ": " + message),
        code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

inline void require(bool condition, ErrorCode code, const std::string& message) {
  if (!condition) fail(code, message);
}

}  // namespace cguard
