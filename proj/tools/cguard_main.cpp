#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "cguard/checkpoint.hpp"
#include "cguard/gradcheck.hpp"
#include "cguard/rng.hpp"
#include "cguard/sweep.hpp"

namespace {

using namespace cguard;

int cmd_synthgen(std::uint64_t seed, std::size_t n_per_group, const std::string& out_dir,
                 double eval_fraction) {
  const Dataset data = generate_dataset(seed, n_per_group);
  const DatasetSplit split =
      split_dataset(data, eval_fraction, mix_seed(seed, hash_string("split")));
  save_dataset(data, split, out_dir);
  std::printf("wrote %zu samples (%zu train / %zu eval) to %s\n", data.samples.size(),
              split.train_idx.size(), split.eval_idx.size(), out_dir.c_str());
  return 0;
}

struct TrainArgs {
  std::string method = "pmdn";
  std::size_t batch_size = 20;
  std::size_t epochs = 50;
  double eta1 = 0.1;
  double eta2 = 1e-3;
  std::string optimizer = "adam";
  std::uint64_t seed = 42;
  std::string data_dir;
  std::string out_dir = "train_out";
  std::string dcor_on = "eval";
  bool no_intercept = false;
  bool skip_redundant_forward = false;
};

int cmd_train(const TrainArgs& args) {
  LoadedDataset loaded;
  if (!args.data_dir.empty()) {
    loaded = load_dataset(args.data_dir, !args.no_intercept);
  } else {
    loaded.data = generate_dataset(args.seed);
    loaded.split = split_dataset(loaded.data, 0.2, mix_seed(args.seed, hash_string("split")),
                                 !args.no_intercept);
  }

  TrainConfig cfg;
  cfg.batch_size = args.batch_size;
  cfg.epochs = args.epochs;
  cfg.eta1 = args.eta1;
  cfg.eta2 = args.eta2;
  cfg.optimizer = optimizer_kind_from_name(args.optimizer);
  cfg.seed = args.seed;
  cfg.norm_mode = norm_mode_from_name(args.method);
  cfg.skip_redundant_forward = args.skip_redundant_forward;

  BaselineCnnConfig net_cfg;
  net_cfg.image_hw = loaded.data.image_hw;
  net_cfg.norm = cfg.norm_mode;
  Network net(baseline_cnn_specs(net_cfg), {1, net_cfg.image_hw, net_cfg.image_hw},
              loaded.split.train_meta.cols(), cfg.seed);
  net.set_feature_probe(baseline_probe_index(net_cfg));

  const SingleRunResult result =
      run_single(net, loaded.data, loaded.split, cfg, dcor_on_from_name(args.dcor_on));

  std::filesystem::create_directories(args.out_dir);
  save_checkpoint(net, cfg.norm_mode, !args.no_intercept, args.out_dir + "/model.pmdn");
  {
    std::ofstream log_out(args.out_dir + "/train_log.csv");
    write_train_log(result.log, log_out);
  }
  {
    std::ofstream metrics_out(args.out_dir + "/metrics.csv");
    metrics_out << metrics_csv_header() << "\n" << metrics_csv_row(result.metrics) << "\n";
  }
  std::printf("%s\n%s\n", metrics_csv_header().c_str(), metrics_csv_row(result.metrics).c_str());
  return 0;
}

int cmd_eval(const std::string& model_path, const std::string& data_dir,
             const std::string& dcor_on, const std::string& out_file) {
  ModelBundle bundle = load_checkpoint(model_path);
  LoadedDataset loaded = load_dataset(data_dir, bundle.with_intercept);
  MetricsReport report =
      evaluate_model(bundle.net, loaded.data, loaded.split, dcor_on_from_name(dcor_on));
  report.method = norm_mode_name(bundle.norm_mode);
  report.seed = bundle.net.seed();

  const std::string text = metrics_csv_header() + "\n" + metrics_csv_row(report) + "\n";
  if (out_file.empty()) {
    std::fputs(text.c_str(), stdout);
  } else {
    std::ofstream out(out_file);
    require(out.good(), ErrorCode::IoError, "cannot write " + out_file);
    out << text;
  }
  return 0;
}

int cmd_gradcheck(std::uint64_t seed, double tolerance, std::size_t batch) {
  Network net = gradcheck_default_net(seed);
  const GradCheckBatch gc_batch = gradcheck_default_batch(seed, batch);
  const GradCheckReport report = gradient_check(net, gc_batch, tolerance);
  for (const GradCheckEntry& e : report.per_param) {
    std::printf("%-28s max_rel_err %.3e (analytic %.6e, numeric %.6e)\n", e.param.c_str(),
                e.max_rel_err, e.analytic_at_worst, e.numeric_at_worst);
  }
  std::printf("pmdn beta grad |max|: %g\n", report.beta_grad_abs_max);
  std::printf("max relative error %.3e (tolerance %.1e): %s\n", report.max_rel_err,
              report.tolerance, report.passed ? "PASS" : "FAIL");
  return report.passed ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"metadata/confounder normalization experiments"};
  app.require_subcommand(1);

  // synthgen
  std::uint64_t sg_seed = 42;
  std::size_t sg_n = 1000;
  std::string sg_out = "data";
  double sg_eval_fraction = 0.2;
  CLI::App* synthgen = app.add_subcommand("synthgen", "generate the synthetic dataset");
  synthgen->add_option("--seed", sg_seed, "generator seed");
  synthgen->add_option("--n", sg_n, "samples per group");
  synthgen->add_option("--out", sg_out, "output directory")->required();
  synthgen->add_option("--eval-fraction", sg_eval_fraction, "held-out fraction");

  // train
  TrainArgs train_args;
  CLI::App* train = app.add_subcommand("train", "train one model");
  train->add_option("--method", train_args.method, "baseline|batchnorm|mdn|pmdn");
  train->add_option("--batch-size", train_args.batch_size, "mini-batch size");
  train->add_option("--epochs", train_args.epochs, "training epochs");
  train->add_option("--eta1", train_args.eta1, "β learning rate");
  train->add_option("--eta2", train_args.eta2, "W learning rate");
  train->add_option("--optimizer", train_args.optimizer, "sgd|adam");
  train->add_option("--seed", train_args.seed, "run seed");
  train->add_option("--data", train_args.data_dir, "dataset directory (else generated)");
  train->add_option("--out", train_args.out_dir, "output directory");
  train->add_option("--dcor-on", train_args.dcor_on, "dcor² split: train|eval");
  train->add_flag("--no-intercept", train_args.no_intercept, "omit the intercept column");
  train->add_flag("--skip-redundant-forward", train_args.skip_redundant_forward,
                  "stop the β-phase forward after the last PMDN layer");

  // eval
  std::string ev_model, ev_data, ev_out;
  std::string ev_dcor_on = "eval";
  CLI::App* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
  eval_cmd->add_option("--model", ev_model, "checkpoint path")->required();
  eval_cmd->add_option("--data", ev_data, "dataset directory")->required();
  eval_cmd->add_option("--dcor-on", ev_dcor_on, "dcor² split: train|eval");
  eval_cmd->add_option("--out", ev_out, "write the CSV here instead of stdout");

  // sweep
  std::string sw_config;
  SweepSpec sw_overrides;
  CLI::App* sweep = app.add_subcommand("sweep", "run the batch-size × method sweep");
  sweep->add_option("--config", sw_config, "key: value config file");
  std::vector<std::string> sw_methods;
  std::vector<std::size_t> sw_batches;
  sweep->add_option("--methods", sw_methods, "methods (comma/space separated)")->delimiter(',');
  sweep->add_option("--batch-sizes", sw_batches, "batch sizes")->delimiter(',');
  auto* opt_repeats = sweep->add_option("--repeats", sw_overrides.repeats, "repeats per cell");
  auto* opt_seed = sweep->add_option("--seed", sw_overrides.seed, "base seed");
  auto* opt_out = sweep->add_option("--out", sw_overrides.out_dir, "output directory");
  auto* opt_data = sweep->add_option("--data", sw_overrides.data_dir, "dataset directory");
  auto* opt_epochs = sweep->add_option("--epochs", sw_overrides.epochs, "training epochs");
  auto* opt_eta1 = sweep->add_option("--eta1", sw_overrides.eta1, "β learning rate");
  auto* opt_eta2 = sweep->add_option("--eta2", sw_overrides.eta2, "W learning rate");
  std::string sw_optimizer;
  auto* opt_optim = sweep->add_option("--optimizer", sw_optimizer, "sgd|adam");
  std::string sw_dcor_on;
  auto* opt_dcor = sweep->add_option("--dcor-on", sw_dcor_on, "train|eval");
  auto* opt_workers = sweep->add_option("--workers", sw_overrides.workers, "worker threads");
  auto* opt_n = sweep->add_option("--n-per-group", sw_overrides.n_per_group, "samples per group");
  bool sw_zero_timing = false;
  auto* opt_zt = sweep->add_flag("--zero-timing", sw_zero_timing,
                                 "write 0 for wall_seconds (bitwise-reproducible output)");

  // gradcheck
  std::uint64_t gc_seed = 7;
  double gc_tolerance = 1e-4;
  std::size_t gc_batch = 4;
  CLI::App* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient check");
  gradcheck->add_option("--seed", gc_seed, "net/batch seed");
  gradcheck->add_option("--tolerance", gc_tolerance, "max relative error");
  gradcheck->add_option("--batch", gc_batch, "batch size");

  CLI11_PARSE(app, argc, argv);

  try {
    if (synthgen->parsed()) return cmd_synthgen(sg_seed, sg_n, sg_out, sg_eval_fraction);
    if (train->parsed()) return cmd_train(train_args);
    if (eval_cmd->parsed()) return cmd_eval(ev_model, ev_data, ev_dcor_on, ev_out);
    if (sweep->parsed()) {
      SweepSpec spec = sw_config.empty() ? SweepSpec{} : parse_sweep_config(sw_config);
      if (!sw_methods.empty()) {
        spec.methods.clear();
        for (const std::string& name : sw_methods) {
          spec.methods.push_back(norm_mode_from_name(name));
        }
      }
      if (!sw_batches.empty()) spec.batch_sizes = sw_batches;
      if (opt_repeats->count()) spec.repeats = sw_overrides.repeats;
      if (opt_seed->count()) spec.seed = sw_overrides.seed;
      if (opt_out->count()) spec.out_dir = sw_overrides.out_dir;
      if (opt_data->count()) spec.data_dir = sw_overrides.data_dir;
      if (opt_epochs->count()) spec.epochs = sw_overrides.epochs;
      if (opt_eta1->count()) spec.eta1 = sw_overrides.eta1;
      if (opt_eta2->count()) spec.eta2 = sw_overrides.eta2;
      if (opt_optim->count()) spec.optimizer = optimizer_kind_from_name(sw_optimizer);
      if (opt_dcor->count()) spec.dcor_on = dcor_on_from_name(sw_dcor_on);
      if (opt_workers->count()) spec.workers = sw_overrides.workers;
      if (opt_n->count()) spec.n_per_group = sw_overrides.n_per_group;
      if (opt_zt->count()) spec.zero_timing = sw_zero_timing;
      const std::vector<SweepRow> rows = run_sweep(spec);
      std::printf("wrote %zu rows to %s/sweep.csv\n", rows.size(), spec.out_dir.c_str());
      return 0;
    }
    if (gradcheck->parsed()) return cmd_gradcheck(gc_seed, gc_tolerance, gc_batch);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
