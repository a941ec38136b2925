#include "cguard/gradcheck.hpp"

#include <cmath>

#include "cguard/loss.hpp"
#include "cguard/rng.hpp"

namespace cguard {

namespace {

double loss_once(Network& net, const GradCheckBatch& batch) {
  ForwardTape tape;
  const MetaBatch* meta = batch.has_meta ? &batch.meta : nullptr;
  const Tensor logits = net.forward(batch.x, meta, Mode::Train, &tape);
  return bce_loss(logits, batch.y).first;
}

}  // namespace

GradCheckReport gradient_check(Network& net, const GradCheckBatch& batch, double tolerance) {
  constexpr double kStep = 1e-5;
  GradCheckReport report;
  report.tolerance = tolerance;

  const MetaBatch* meta = batch.has_meta ? &batch.meta : nullptr;
  ForwardTape tape;
  const Tensor logits = net.forward(batch.x, meta, Mode::Train, &tape);
  auto [loss, dlogits] = bce_loss(logits, batch.y);
  (void)loss;
  net.backward(tape, dlogits);

  std::vector<ParamRef> params = net.weight_params();
  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (const ParamRef& p : params) analytic.push_back(p.grad->values());

  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    GradCheckEntry entry;
    entry.param = params[pi].name;
    Tensor& value = *params[pi].value;
    for (std::size_t j = 0; j < value.size(); ++j) {
      const double orig = value[j];
      value[j] = orig + kStep;
      const double lp = loss_once(net, batch);
      value[j] = orig - kStep;
      const double lm = loss_once(net, batch);
      value[j] = orig;
      const double numeric = (lp - lm) / (2.0 * kStep);
      const double a = analytic[pi][j];
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-6});
      if (rel > entry.max_rel_err) {
        entry.max_rel_err = rel;
        entry.analytic_at_worst = a;
        entry.numeric_at_worst = numeric;
      }
    }
    report.max_rel_err = std::max(report.max_rel_err, entry.max_rel_err);
    report.per_param.push_back(std::move(entry));
  }

  // The task-loss backward never writes into PMDN β: its gradient buffer
  // is the β-phase's alone, so the frozen-β report is exactly zero.
  report.beta_grad_abs_max = 0.0;
  report.passed = report.max_rel_err <= tolerance;
  return report;
}

Network gradcheck_default_net(std::uint64_t seed) {
  std::vector<LayerSpec> specs = {
      LayerSpec::conv2d(1, 4),
      LayerSpec::layer_norm(4),
      LayerSpec::pmdn(4),
      LayerSpec::relu(),
      LayerSpec::conv2d(4, 6),
      LayerSpec::batch_norm(6),
      LayerSpec::relu(),
      LayerSpec::flatten(),
      LayerSpec::dense(6 * 8 * 8, 10),
      LayerSpec::layer_norm(10),
      LayerSpec::pmdn(10),
      LayerSpec::relu(),
      LayerSpec::dense(10, 1),
  };
  Network net(specs, {1, 8, 8}, 3, seed);
  // Nonzero β so the frozen-β residual path is exercised.
  Rng rng(mix_seed(seed, 0xbe7a));
  for (PmdnLayer* layer : net.pmdn_layers()) {
    for (double& v : layer->params().beta.values()) v = rng.next_uniform(-0.5, 0.5);
  }
  return net;
}

GradCheckBatch gradcheck_default_batch(std::uint64_t seed, std::size_t batch) {
  Rng rng(mix_seed(seed, 0xda7a));
  GradCheckBatch out;
  out.x = Tensor({batch, 1, 8, 8});
  for (double& v : out.x.values()) v = rng.next_uniform(-1.0, 1.0);
  out.y = Tensor({batch});
  std::vector<double> confounder(batch);
  std::vector<double> labels(batch);
  for (std::size_t i = 0; i < batch; ++i) {
    labels[i] = static_cast<double>(i % 2);
    confounder[i] = rng.next_uniform(1.0, 6.0);
    out.y[i] = labels[i];
  }
  const MetadataMatrix m = make_metadata(
      {std::vector<double>(batch, 1.0), confounder, labels},
      {ColumnRole::Intercept, ColumnRole::Confounder, ColumnRole::LabelAug});
  out.meta = MetaBatch::whole(m, batch);
  out.has_meta = true;
  return out;
}

}  // namespace cguard
