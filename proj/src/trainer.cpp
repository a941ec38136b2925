#include "cguard/trainer.hpp"

#include <cmath>
#include <ostream>

#include "cguard/loss.hpp"
#include "cguard/rng.hpp"

namespace cguard {

void TrainConfig::validate() const {
  require(batch_size >= 1, ErrorCode::InvalidArgument, "batch_size must be >= 1");
  require(eta1 >= 0.0 && eta2 >= 0.0, ErrorCode::InvalidArgument,
          "learning rates must be non-negative");
  require(ridge_eps >= 0.0, ErrorCode::InvalidArgument, "ridge_eps must be non-negative");
}

void write_train_log(const TrainLog& log, std::ostream& out) {
  out << "epoch,batch,loss,lstar,beta_norm\n";
  char buf[160];
  for (const TrainRecord& r : log.records) {
    std::snprintf(buf, sizeof(buf), "%zu,%zu,%.10g,%.10g,%.10g\n", r.epoch, r.batch, r.loss,
                  r.lstar, r.beta_norm);
    out << buf;
  }
}

Trainer::Trainer(Network& net, const TrainConfig& cfg)
    : net_(&net),
      cfg_(cfg),
      pmdn_layers_(net.pmdn_layers()),
      optimizer_(OptimizerConfig{cfg.optimizer, cfg.eta2}, net.weight_params()) {
  cfg_.validate();
  for (std::size_t i = 0; i < net.layer_count(); ++i) {
    if (net.layer(i).spec().kind == LayerKind::Pmdn) pmdn_indices_.push_back(i);
  }
}

TrainRecord Trainer::alternating_step(const Batch& batch) {
  require(cfg_.norm_mode == NormMode::Pmdn, ErrorCode::InvalidArgument,
          "alternating_step is the PMDN schedule");
  return step_impl(batch, true);
}

TrainRecord Trainer::plain_step(const Batch& batch) {
  require(cfg_.norm_mode != NormMode::Pmdn, ErrorCode::InvalidArgument,
          "PMDN training uses alternating_step");
  return step_impl(batch, false);
}

TrainRecord Trainer::step_impl(const Batch& batch, bool alternating) {
  TrainRecord rec;
  rec.epoch = cur_epoch_;
  rec.batch = cur_batch_;

  try {
    if (alternating) {
      // β phase: W frozen. The forward is run as written in the schedule
      // even though the β gradient only needs the PMDN inputs; with
      // skip_redundant_forward it stops after the last PMDN layer.
      ForwardTape beta_tape;
      const std::size_t upto =
          cfg_.skip_redundant_forward && !pmdn_indices_.empty() ? pmdn_indices_.back() + 1
                                                                : SIZE_MAX;
      net_->forward(batch.x, &batch.meta, Mode::Train, &beta_tape, upto);

      double lstar = 0.0;
      for (std::size_t j = 0; j < pmdn_layers_.size(); ++j) {
        const auto* cache = std::get_if<PmdnCache>(&beta_tape.slots[pmdn_indices_[j]]);
        require(cache != nullptr, ErrorCode::TapeMismatch, "missing PMDN cache in β phase");
        auto [l, dbeta] = pmdn_loss(cache->pooled, cache->m_batch, pmdn_layers_[j]->params());
        lstar += l;
        Tensor& beta = pmdn_layers_[j]->params().beta;
        for (std::size_t i = 0; i < beta.size(); ++i) beta[i] -= cfg_.eta1 * dbeta[i];
      }
      rec.lstar = lstar;
    }

    // W phase: β frozen (backward gives it no gradient by construction).
    ForwardTape tape;
    const Tensor logits = net_->forward(batch.x, &batch.meta, Mode::Train, &tape);
    auto [loss, dlogits] = bce_loss(logits, batch.y);
    rec.loss = loss;
    net_->backward(tape, dlogits);
    const std::vector<ParamRef> params = net_->weight_params();
    optimizer_.step(params);

    double beta_sq = 0.0;
    for (PmdnLayer* layer : pmdn_layers_) {
      for (double v : layer->params().beta.values()) beta_sq += v * v;
    }
    rec.beta_norm = std::sqrt(beta_sq);
  } catch (const Error& e) {
    if (e.code() == ErrorCode::NonFiniteLoss || e.code() == ErrorCode::NonFiniteActivation) {
      fail(e.code(), "run aborted at epoch " + std::to_string(cur_epoch_) + ", batch " +
                         std::to_string(cur_batch_) + ": " + e.what());
    }
    throw;
  }

  require(std::isfinite(rec.loss) && std::isfinite(rec.lstar) && std::isfinite(rec.beta_norm),
          ErrorCode::NonFiniteLoss,
          "non-finite training record at epoch " + std::to_string(cur_epoch_));
  return rec;
}

Batch gather_batch(const Dataset& data, const DatasetSplit& split,
                   const std::vector<std::size_t>& positions) {
  const std::size_t hw = data.image_hw;
  Batch batch;
  batch.x = Tensor({positions.size(), 1, hw, hw});
  batch.y = Tensor({positions.size()});
  for (std::size_t i = 0; i < positions.size(); ++i) {
    require(positions[i] < split.train_idx.size(), ErrorCode::ShapeMismatch,
            "batch position out of range");
    const SyntheticSample& s = data.samples[split.train_idx[positions[i]]];
    std::copy(s.image.values().begin(), s.image.values().end(),
              batch.x.values().begin() + i * hw * hw);
    batch.y[i] = static_cast<double>(s.label);
  }
  batch.meta = MetaBatch::from_rows(split.train_meta, positions, split.train_meta.rows());
  return batch;
}

TrainLog fit(Network& net, const Dataset& data, const DatasetSplit& split,
             const TrainConfig& cfg) {
  cfg.validate();
  const std::size_t n_train = split.train_idx.size();
  require(n_train >= 1, ErrorCode::InvalidArgument, "empty training split");
  const std::size_t batch_size = std::min(cfg.batch_size, n_train);

  if (cfg.norm_mode == NormMode::Mdn && !net.mdn_layers().empty()) {
    net.configure_mdn(
        std::make_shared<GramInverse>(invert_gram(split.train_meta, cfg.ridge_eps)));
  }

  Trainer trainer(net, cfg);
  TrainLog log;
  Rng shuffle_rng(mix_seed(cfg.seed, hash_string("shuffle")));

  std::vector<std::size_t> order(n_train);
  for (std::size_t i = 0; i < n_train; ++i) order[i] = i;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    if (cfg.shuffle) shuffle_rng.shuffle(order);
    std::size_t batch_index = 0;
    for (std::size_t start = 0; start < n_train; start += batch_size, ++batch_index) {
      const std::size_t end = std::min(start + batch_size, n_train);
      const std::vector<std::size_t> positions(order.begin() + start, order.begin() + end);
      Batch batch = gather_batch(data, split, positions);
      trainer.cur_epoch_ = epoch;
      trainer.cur_batch_ = batch_index;
      const TrainRecord rec = cfg.norm_mode == NormMode::Pmdn
                                  ? trainer.alternating_step(batch)
                                  : trainer.plain_step(batch);
      log.records.push_back(rec);
    }
  }
  return log;
}

}  // namespace cguard
