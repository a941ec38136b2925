#pragma once

#include <utility>

#include "cguard/tensor.hpp"

namespace cguard {

/// Softplus-stabilized binary cross entropy, mean over the batch.
/// Accepts logits shaped [b] or [b,1]; targets must be exactly 0 or 1.
/// Returns the loss and dL/dlogits = (σ(z) − y)/b in the logits' shape.
std::pair<double, Tensor> bce_loss(const Tensor& logits, const Tensor& targets);

}  // namespace cguard
