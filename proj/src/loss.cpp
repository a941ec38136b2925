#include "cguard/loss.hpp"

#include <cmath>

namespace cguard {

std::pair<double, Tensor> bce_loss(const Tensor& logits, const Tensor& targets) {
  require(logits.rank() == 1 || (logits.rank() == 2 && logits.dim(1) == 1),
          ErrorCode::ShapeMismatch, "logits must be [b] or [b,1]");
  const std::size_t b = logits.dim(0);
  require(targets.size() == b, ErrorCode::ShapeMismatch,
          "target count does not match logit count");

  double total = 0.0;
  Tensor grad(logits.shape());
  for (std::size_t i = 0; i < b; ++i) {
    const double z = logits[i];
    const double y = targets[i];
    require(y == 0.0 || y == 1.0, ErrorCode::InvalidArgument, "targets must be 0 or 1");
    // max(z,0) − z·y + log(1 + e^{−|z|}) never overflows.
    total += std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)));
    const double sig = 1.0 / (1.0 + std::exp(-z));
    grad[i] = (sig - y) / static_cast<double>(b);
  }
  total /= static_cast<double>(b);
  require(std::isfinite(total), ErrorCode::NonFiniteLoss, "BCE loss is not finite");
  return {total, std::move(grad)};
}

}  // namespace cguard
