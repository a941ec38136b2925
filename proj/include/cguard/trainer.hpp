#pragma once

#include <iosfwd>
#include <optional>

#include "cguard/layers.hpp"
#include "cguard/optim.hpp"
#include "cguard/synth.hpp"

namespace cguard {

struct TrainConfig {
  std::size_t batch_size = 20;
  std::size_t epochs = 50;
  double eta1 = 1e-2;  // β learning rate (plain SGD)
  double eta2 = 1e-3;  // W learning rate (configured optimizer)
  OptimizerKind optimizer = OptimizerKind::Adam;
  std::uint64_t seed = 0;
  NormMode norm_mode = NormMode::None;
  bool shuffle = true;
  bool skip_redundant_forward = false;
  double ridge_eps = 1e-8;

  void validate() const;
};

struct TrainRecord {
  std::size_t epoch = 0;
  std::size_t batch = 0;
  double loss = 0.0;
  double lstar = 0.0;
  double beta_norm = 0.0;
};

struct TrainLog {
  std::vector<TrainRecord> records;
};

/// Fixed field order: epoch,batch,loss,lstar,beta_norm.
void write_train_log(const TrainLog& log, std::ostream& out);

struct Batch {
  Tensor x;
  Tensor y;
  MetaBatch meta;
};

/// Drives one network through the alternating (β-phase / W-phase)
/// schedule, or plain task training for the non-PMDN modes.
class Trainer {
 public:
  Trainer(Network& net, const TrainConfig& cfg);

  /// PMDN step: forward at β(t), β(t+1) = β(t) − η₁·∇βL* per layer,
  /// second forward at β(t+1), then the W update on the task loss.
  /// The β phase treats W as constants and vice versa.
  TrainRecord alternating_step(const Batch& batch);

  /// One forward + W update (None/BatchNorm/MDN modes).
  TrainRecord plain_step(const Batch& batch);

  Network& net() { return *net_; }
  Optimizer& optimizer() { return optimizer_; }

 private:
  TrainRecord step_impl(const Batch& batch, bool alternating);

  Network* net_;
  TrainConfig cfg_;
  std::vector<PmdnLayer*> pmdn_layers_;
  std::vector<std::size_t> pmdn_indices_;
  Optimizer optimizer_;
  std::size_t cur_epoch_ = 0;
  std::size_t cur_batch_ = 0;
  friend TrainLog fit(Network& net, const Dataset& data, const DatasetSplit& split,
                      const TrainConfig& cfg);
};

/// Epochs × shuffled-batches loop; deterministic per seed, no early
/// stopping. MDN layers get the shared train-set Gram inverse installed
/// before the first step. Batches larger than the training split clamp
/// to full-batch training.
TrainLog fit(Network& net, const Dataset& data, const DatasetSplit& split, const TrainConfig& cfg);

/// Gathers one batch (images, labels, metadata rows) for the given
/// positions within the training split.
Batch gather_batch(const Dataset& data, const DatasetSplit& split,
                   const std::vector<std::size_t>& positions);

}  // namespace cguard
