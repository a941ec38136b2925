#pragma once

#include <string>
#include <vector>

#include "cguard/layers.hpp"

namespace cguard {

struct GradCheckEntry {
  std::string param;
  double max_rel_err = 0.0;
  double analytic_at_worst = 0.0;
  double numeric_at_worst = 0.0;
};

struct GradCheckReport {
  double max_rel_err = 0.0;
  bool passed = false;
  double tolerance = 0.0;
  std::vector<GradCheckEntry> per_param;
  double beta_grad_abs_max = 0.0;  // PMDN β must stay at exactly 0
};

struct GradCheckBatch {
  Tensor x;
  Tensor y;        // binary targets
  MetaBatch meta;  // used only when the net has MDN/PMDN layers
  bool has_meta = false;
};

/// Compares analytic gradients against central finite differences
/// (h = 1e-5) for every weight parameter, using the BCE task loss.
/// Intended for small nets; cost is O(params) forward passes.
GradCheckReport gradient_check(Network& net, const GradCheckBatch& batch, double tolerance);

/// Small mixed-layer network covering Dense, Conv2d, LayerNorm,
/// BatchNorm and PMDN in under 5k parameters, with a matching batch.
Network gradcheck_default_net(std::uint64_t seed);
GradCheckBatch gradcheck_default_batch(std::uint64_t seed, std::size_t batch = 4);

}  // namespace cguard
