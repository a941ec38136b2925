#include "cguard/tensor.hpp"

#include <cmath>
#include <sstream>

namespace cguard {

const char* error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::SingularGram: return "SingularGram";
    case ErrorCode::NonFiniteActivation: return "NonFiniteActivation";
    case ErrorCode::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorCode::TapeMismatch: return "TapeMismatch";
    case ErrorCode::StateShapeMismatch: return "StateShapeMismatch";
    case ErrorCode::NeverTrained: return "NeverTrained";
    case ErrorCode::NonPositiveVariance: return "NonPositiveVariance";
    case ErrorCode::DegenerateSplit: return "DegenerateSplit";
    case ErrorCode::TooFewSamples: return "TooFewSamples";
    case ErrorCode::ConstantInput: return "ConstantInput";
    case ErrorCode::SingleClass: return "SingleClass";
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::IoError: return "IoError";
    case ErrorCode::ParseError: return "ParseError";
  }
  return "UnknownError";
}

std::size_t Tensor::checked_numel(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) {
    require(d > 0, ErrorCode::ShapeMismatch, "zero-sized dimension in " + shape_to_string(shape));
    n *= d;
  }
  return shape.empty() ? 0 : n;
}

bool Tensor::all_finite() const noexcept {
  for (double v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

void Tensor::ensure_finite(const std::string& what) const {
  if (!all_finite()) {
    fail(ErrorCode::NonFiniteActivation, "non-finite values in " + what);
  }
}

std::string shape_to_string(const std::vector<std::size_t>& shape) {
  std::ostringstream out;
  out << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << "x";
    out << shape[i];
  }
  out << "]";
  return out.str();
}

}  // namespace cguard
