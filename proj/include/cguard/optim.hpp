#pragma once

#include <vector>

#include "cguard/layers.hpp"

namespace cguard {

enum class OptimizerKind { SGD, Adam };

const char* optimizer_kind_name(OptimizerKind kind);
OptimizerKind optimizer_kind_from_name(const std::string& name);

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::Adam;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Owns the per-parameter state (Adam moments); binds to a fixed list of
/// parameter shapes at construction and rejects anything else later.
class Optimizer {
 public:
  Optimizer(const OptimizerConfig& cfg, const std::vector<ParamRef>& params);

  /// One update from the gradients currently stored in the refs.
  void step(const std::vector<ParamRef>& params);

  std::size_t timestep() const { return t_; }
  const OptimizerConfig& config() const { return cfg_; }

 private:
  OptimizerConfig cfg_;
  std::vector<std::size_t> shapes_;  // flattened sizes, for mismatch checks
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
  std::size_t t_ = 0;
};

}  // namespace cguard
