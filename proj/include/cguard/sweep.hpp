#pragma once

#include <string>
#include <vector>

#include "cguard/metrics.hpp"
#include "cguard/synth.hpp"
#include "cguard/trainer.hpp"

namespace cguard {

enum class DcorOn { Train, Eval };

DcorOn dcor_on_from_name(const std::string& name);
const char* dcor_on_name(DcorOn v);

/// Accuracy, grouped dcor² on the probe features, and the metadata
/// correlation of the logits. dcor² uses the split chosen by dcor_on;
/// accuracy and pearson always use the eval split. Forward passes are
/// chunked, which is exact in eval mode.
MetricsReport evaluate_model(const Network& net, const Dataset& data, const DatasetSplit& split,
                             DcorOn dcor_on);

struct SweepSpec {
  std::vector<NormMode> methods = {NormMode::None, NormMode::BatchNorm, NormMode::Mdn,
                                   NormMode::Pmdn};
  std::vector<std::size_t> batch_sizes = {20, 200, 1000, 2000};
  std::size_t repeats = 3;
  std::uint64_t seed = 42;
  std::string out_dir = "sweep_out";
  std::string data_dir;  // empty: generate from seed
  std::size_t n_per_group = 1000;
  double eval_fraction = 0.2;
  std::size_t epochs = 50;
  double eta1 = 0.1;
  double eta2 = 1e-3;
  OptimizerKind optimizer = OptimizerKind::Adam;
  DcorOn dcor_on = DcorOn::Eval;
  std::size_t workers = 0;  // 0: hardware concurrency; env wins over both
  bool zero_timing = false;
  bool write_cell_logs = true;
  bool skip_redundant_forward = false;

  void validate() const;
};

struct SweepRow {
  std::string method;
  std::size_t batch_size = 0;
  std::size_t repeat = 0;
  std::uint64_t seed = 0;
  double accuracy = 0.0;
  double dcor2_g1 = 0.0;
  double dcor2_g2 = 0.0;
  double dcor2_mean = 0.0;
  double final_loss = 0.0;
  double wall_seconds = 0.0;
};

std::string sweep_csv_header();
std::string sweep_csv_row(const SweepRow& row);

/// Seed for one sweep cell, derived from (base seed, method, batch size,
/// repeat) so cells are independent of scheduling order.
std::uint64_t cell_seed(std::uint64_t base, NormMode method, std::size_t batch_size,
                        std::size_t repeat);

/// Runs every (method × batch size × repeat) cell on a bounded worker
/// pool and writes out_dir/sweep.csv with rows sorted by
/// (method, batch_size, repeat). Returns the rows.
std::vector<SweepRow> run_sweep(const SweepSpec& spec);

/// `key: value` lines; '#' starts a comment. Unknown keys are an error.
SweepSpec parse_sweep_config(const std::string& path);

/// Trains one configuration and reports its metrics; used by the train
/// subcommand and by each sweep cell.
struct SingleRunResult {
  MetricsReport metrics;
  TrainLog log;
  double final_loss = 0.0;
  double wall_seconds = 0.0;
};
SingleRunResult run_single(Network& net, const Dataset& data, const DatasetSplit& split,
                           const TrainConfig& cfg, DcorOn dcor_on);

}  // namespace cguard
