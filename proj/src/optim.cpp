#include "cguard/optim.hpp"

#include <cmath>

namespace cguard {

const char* optimizer_kind_name(OptimizerKind kind) {
  return kind == OptimizerKind::SGD ? "sgd" : "adam";
}

OptimizerKind optimizer_kind_from_name(const std::string& name) {
  if (name == "sgd") return OptimizerKind::SGD;
  if (name == "adam") return OptimizerKind::Adam;
  fail(ErrorCode::InvalidArgument, "unknown optimizer '" + name + "'");
}

Optimizer::Optimizer(const OptimizerConfig& cfg, const std::vector<ParamRef>& params)
    : cfg_(cfg) {
  for (const ParamRef& p : params) {
    shapes_.push_back(p.value->size());
    if (cfg_.kind == OptimizerKind::Adam) {
      m_.emplace_back(p.value->shape());
      v_.emplace_back(p.value->shape());
    }
  }
}

void Optimizer::step(const std::vector<ParamRef>& params) {
  require(params.size() == shapes_.size(), ErrorCode::StateShapeMismatch,
          "optimizer bound to a different parameter list");
  for (std::size_t i = 0; i < params.size(); ++i) {
    require(params[i].value->size() == shapes_[i] && params[i].grad->size() == shapes_[i],
            ErrorCode::StateShapeMismatch,
            "parameter '" + params[i].name + "' changed shape");
  }

  if (cfg_.kind == OptimizerKind::SGD) {
    for (const ParamRef& p : params) {
      double* w = p.value->data();
      const double* g = p.grad->data();
      const std::size_t n = p.value->size();
      for (std::size_t j = 0; j < n; ++j) w[j] -= cfg_.lr * g[j];
    }
    ++t_;
    return;
  }

  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    double* w = params[i].value->data();
    const double* g = params[i].grad->data();
    double* m = m_[i].data();
    double* v = v_[i].data();
    const std::size_t n = shapes_[i];
    const auto ni = static_cast<std::ptrdiff_t>(n);
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t j = 0; j < ni; ++j) {
      m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g[j];
      v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g[j] * g[j];
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      w[j] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
    }
  }
}

}  // namespace cguard
