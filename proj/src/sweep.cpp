#include "cguard/sweep.hpp"

#include <omp.h>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <thread>

#include "cguard/rng.hpp"

namespace cguard {

DcorOn dcor_on_from_name(const std::string& name) {
  if (name == "train") return DcorOn::Train;
  if (name == "eval") return DcorOn::Eval;
  fail(ErrorCode::InvalidArgument, "dcor-on must be 'train' or 'eval'");
}

const char* dcor_on_name(DcorOn v) { return v == DcorOn::Train ? "train" : "eval"; }

namespace {

constexpr std::size_t kEvalChunk = 200;

Tensor gather_images(const Dataset& data, const std::vector<std::size_t>& rows) {
  const std::size_t hw = data.image_hw;
  Tensor x({rows.size(), 1, hw, hw});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const SyntheticSample& s = data.samples[rows[i]];
    std::copy(s.image.values().begin(), s.image.values().end(),
              x.values().begin() + i * hw * hw);
  }
  return x;
}

// Eval-mode forward over the given dataset rows, chunked; `probe` picks
// logits (false) or the feature-probe activations (true).
Tensor eval_rows(const Network& net, const Dataset& data, const MetadataMatrix& meta,
                 const std::vector<std::size_t>& rows, bool probe) {
  Tensor out;
  std::size_t written = 0;
  for (std::size_t start = 0; start < rows.size(); start += kEvalChunk) {
    const std::size_t end = std::min(start + kEvalChunk, rows.size());
    const std::vector<std::size_t> chunk_rows(rows.begin() + start, rows.begin() + end);
    std::vector<std::size_t> meta_rows(end - start);
    for (std::size_t i = 0; i < meta_rows.size(); ++i) meta_rows[i] = start + i;
    const Tensor x = gather_images(data, chunk_rows);
    const MetaBatch mb = MetaBatch::from_rows(meta, meta_rows, meta.rows());
    const Tensor y = probe ? net.forward_features(x, &mb)
                           : net.forward(x, &mb, Mode::Eval, nullptr);
    const std::size_t cols = y.size() / y.dim(0);
    if (out.empty()) out = Tensor({rows.size(), cols});
    std::copy(y.values().begin(), y.values().end(), out.values().begin() + written * cols);
    written += y.dim(0);
  }
  return out;
}

}  // namespace

MetricsReport evaluate_model(const Network& net, const Dataset& data, const DatasetSplit& split,
                             DcorOn dcor_on) {
  MetricsReport report;

  // Accuracy and the logit/metadata correlation on the eval split.
  const Tensor logits2d = eval_rows(net, data, split.eval_meta, split.eval_idx, false);
  const Tensor logits = logits2d.reshaped({logits2d.dim(0)});
  Tensor eval_labels({split.eval_idx.size()});
  Tensor eval_meta_var({split.eval_idx.size()});
  for (std::size_t i = 0; i < split.eval_idx.size(); ++i) {
    eval_labels[i] = static_cast<double>(data.samples[split.eval_idx[i]].label);
    eval_meta_var[i] = data.samples[split.eval_idx[i]].metadata_sigma2;
  }
  report.accuracy = accuracy(logits, eval_labels);
  try {
    report.pearson_meta = std::abs(pearson(eval_meta_var, logits));
  } catch (const Error&) {
    report.pearson_meta = 0.0;  // constant logits carry no correlation
  }

  // dcor² of the probe features against the metadata variable, grouped.
  const bool on_eval = dcor_on == DcorOn::Eval;
  const auto& rows = on_eval ? split.eval_idx : split.train_idx;
  const MetadataMatrix dcor_meta =
      on_eval ? split.eval_meta : split.train_meta.without_label_column();
  const Tensor features = eval_rows(net, data, dcor_meta, rows, true);
  Tensor meta_var({rows.size(), 1});
  Tensor labels({rows.size()});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    meta_var(i, 0) = data.samples[rows[i]].metadata_sigma2;
    labels[i] = static_cast<double>(data.samples[rows[i]].label);
  }
  const GroupedDcor gd = grouped_dcor2(features, meta_var, labels);
  report.dcor2_g1 = gd.group0;
  report.dcor2_g2 = gd.group1;
  report.dcor2_mean = gd.mean;
  return report;
}

void SweepSpec::validate() const {
  require(!methods.empty(), ErrorCode::InvalidArgument, "sweep needs at least one method");
  require(!batch_sizes.empty(), ErrorCode::InvalidArgument, "sweep needs at least one batch size");
  require(repeats >= 1, ErrorCode::InvalidArgument, "repeats must be >= 1");
  require(eval_fraction > 0.0 && eval_fraction < 1.0, ErrorCode::InvalidArgument,
          "eval_fraction must lie in (0,1)");
  require(epochs >= 1, ErrorCode::InvalidArgument, "epochs must be >= 1");
  for (std::size_t b : batch_sizes) {
    require(b >= 1, ErrorCode::InvalidArgument, "batch sizes must be >= 1");
  }
}

std::string sweep_csv_header() {
  return "method,batch_size,repeat,seed,accuracy,dcor2_g1,dcor2_g2,dcor2_mean,final_loss,"
         "wall_seconds";
}

std::string sweep_csv_row(const SweepRow& r) {
  char buf[320];
  std::snprintf(buf, sizeof(buf), "%s,%zu,%zu,%llu,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g",
                r.method.c_str(), r.batch_size, r.repeat, static_cast<unsigned long long>(r.seed),
                r.accuracy, r.dcor2_g1, r.dcor2_g2, r.dcor2_mean, r.final_loss, r.wall_seconds);
  return buf;
}

std::uint64_t cell_seed(std::uint64_t base, NormMode method, std::size_t batch_size,
                        std::size_t repeat) {
  std::uint64_t s = mix_seed(base, hash_string(norm_mode_name(method)));
  s = mix_seed(s, batch_size);
  s = mix_seed(s, repeat);
  return s;
}

SingleRunResult run_single(Network& net, const Dataset& data, const DatasetSplit& split,
                           const TrainConfig& cfg, DcorOn dcor_on) {
  SingleRunResult result;
  const auto t0 = std::chrono::steady_clock::now();
  result.log = fit(net, data, split, cfg);
  result.metrics = evaluate_model(net, data, split, dcor_on);
  result.metrics.method = norm_mode_name(cfg.norm_mode);
  result.metrics.batch_size = cfg.batch_size;
  result.metrics.seed = cfg.seed;
  result.final_loss = result.log.records.empty() ? 0.0 : result.log.records.back().loss;
  const auto t1 = std::chrono::steady_clock::now();
  result.wall_seconds = std::chrono::duration<double>(t1 - t0).count();
  return result;
}

std::vector<SweepRow> run_sweep(const SweepSpec& spec) {
  spec.validate();
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(spec.out_dir, ec);

  // One dataset shared by every cell.
  LoadedDataset loaded;
  if (!spec.data_dir.empty()) {
    loaded = load_dataset(spec.data_dir);
  } else {
    loaded.data = generate_dataset(spec.seed, spec.n_per_group);
    loaded.split = split_dataset(loaded.data, spec.eval_fraction,
                                 mix_seed(spec.seed, hash_string("split")));
  }
  const Dataset& data = loaded.data;
  const DatasetSplit& split = loaded.split;
  for (std::size_t b : spec.batch_sizes) {
    require(b <= data.samples.size(), ErrorCode::InvalidArgument,
            "batch size exceeds dataset size");
  }

  struct Cell {
    NormMode method;
    std::size_t batch_size;
    std::size_t repeat;
  };
  std::vector<Cell> cells;
  for (NormMode m : spec.methods) {
    for (std::size_t b : spec.batch_sizes) {
      for (std::size_t r = 0; r < spec.repeats; ++r) cells.push_back({m, b, r});
    }
  }

  std::size_t workers = spec.workers;
  if (const char* env = std::getenv("CONFOUND_GUARD_THREADS")) {
    workers = static_cast<std::size_t>(std::strtoull(env, nullptr, 10));
  }
  if (workers == 0) workers = std::max(1u, std::thread::hardware_concurrency());
  workers = std::min(workers, cells.size());
  const int omp_per_cell =
      std::max(1, omp_get_max_threads() / static_cast<int>(std::max<std::size_t>(workers, 1)));

  std::vector<SweepRow> rows(cells.size());
  std::vector<std::string> cell_errors(cells.size());
  std::atomic<std::size_t> next{0};

  auto worker_fn = [&]() {
    omp_set_num_threads(omp_per_cell);
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= cells.size()) return;
      const Cell& cell = cells[i];
      try {
        TrainConfig cfg;
        cfg.batch_size = cell.batch_size;
        cfg.epochs = spec.epochs;
        cfg.eta1 = spec.eta1;
        cfg.eta2 = spec.eta2;
        cfg.optimizer = spec.optimizer;
        cfg.seed = cell_seed(spec.seed, cell.method, cell.batch_size, cell.repeat);
        cfg.norm_mode = cell.method;
        cfg.skip_redundant_forward = spec.skip_redundant_forward;

        BaselineCnnConfig net_cfg;
        net_cfg.image_hw = data.image_hw;
        net_cfg.norm = cell.method;
        Network net(baseline_cnn_specs(net_cfg), {1, data.image_hw, data.image_hw},
                    split.train_meta.cols(), cfg.seed);
        net.set_feature_probe(baseline_probe_index(net_cfg));

        const SingleRunResult result = run_single(net, data, split, cfg, spec.dcor_on);

        SweepRow row;
        row.method = norm_mode_name(cell.method);
        row.batch_size = cell.batch_size;
        row.repeat = cell.repeat;
        row.seed = cfg.seed;
        row.accuracy = result.metrics.accuracy;
        row.dcor2_g1 = result.metrics.dcor2_g1;
        row.dcor2_g2 = result.metrics.dcor2_g2;
        row.dcor2_mean = result.metrics.dcor2_mean;
        row.final_loss = result.final_loss;
        row.wall_seconds = spec.zero_timing ? 0.0 : result.wall_seconds;
        rows[i] = row;

        if (spec.write_cell_logs) {
          std::ostringstream name;
          name << spec.out_dir << "/train_log_" << row.method << "_b" << row.batch_size << "_r"
               << row.repeat << ".csv";
          std::ofstream log_out(name.str());
          write_train_log(result.log, log_out);
        }
      } catch (const std::exception& e) {
        cell_errors[i] = e.what();
      }
    }
  };

  std::vector<std::thread> pool;
  for (std::size_t w = 0; w + 1 < workers; ++w) pool.emplace_back(worker_fn);
  worker_fn();
  for (std::thread& t : pool) t.join();
  omp_set_num_threads(omp_get_num_procs());

  for (std::size_t i = 0; i < cells.size(); ++i) {
    if (!cell_errors[i].empty()) {
      fail(ErrorCode::InvalidArgument,
           "sweep cell " + rows[i].method + "/b" + std::to_string(cells[i].batch_size) +
               " failed: " + cell_errors[i]);
    }
  }

  std::stable_sort(rows.begin(), rows.end(), [](const SweepRow& a, const SweepRow& b) {
    if (a.method != b.method) return a.method < b.method;
    if (a.batch_size != b.batch_size) return a.batch_size < b.batch_size;
    return a.repeat < b.repeat;
  });

  std::ofstream csv(spec.out_dir + "/sweep.csv");
  require(csv.good(), ErrorCode::IoError, "cannot write " + spec.out_dir + "/sweep.csv");
  csv << sweep_csv_header() << "\n";
  for (const SweepRow& row : rows) csv << sweep_csv_row(row) << "\n";
  return rows;
}

SweepSpec parse_sweep_config(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), ErrorCode::IoError, "cannot read config " + path);
  SweepSpec spec;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    const auto is_space = [](char c) { return c == ' ' || c == '\t' || c == '\r'; };
    while (!line.empty() && is_space(line.back())) line.pop_back();
    std::size_t begin = 0;
    while (begin < line.size() && is_space(line[begin])) ++begin;
    if (begin == line.size()) continue;
    const std::size_t colon = line.find(':', begin);
    require(colon != std::string::npos, ErrorCode::ParseError,
            path + ":" + std::to_string(lineno) + ": expected 'key: value'");
    std::string key = line.substr(begin, colon - begin);
    while (!key.empty() && is_space(key.back())) key.pop_back();
    std::string value = line.substr(colon + 1);
    std::size_t vb = 0;
    while (vb < value.size() && is_space(value[vb])) ++vb;
    value = value.substr(vb);

    auto split_list = [](const std::string& s) {
      std::vector<std::string> out;
      std::string cur;
      for (char c : s) {
        if (c == ',') {
          out.push_back(cur);
          cur.clear();
        } else if (c != ' ') {
          cur += c;
        }
      }
      if (!cur.empty()) out.push_back(cur);
      return out;
    };

    if (key == "methods") {
      spec.methods.clear();
      for (const std::string& name : split_list(value)) {
        spec.methods.push_back(norm_mode_from_name(name));
      }
    } else if (key == "batch_sizes") {
      spec.batch_sizes.clear();
      for (const std::string& item : split_list(value)) {
        spec.batch_sizes.push_back(std::stoull(item));
      }
    } else if (key == "repeats") {
      spec.repeats = std::stoull(value);
    } else if (key == "seed") {
      spec.seed = std::stoull(value);
    } else if (key == "out") {
      spec.out_dir = value;
    } else if (key == "data") {
      spec.data_dir = value;
    } else if (key == "n_per_group") {
      spec.n_per_group = std::stoull(value);
    } else if (key == "eval_fraction") {
      spec.eval_fraction = std::stod(value);
    } else if (key == "epochs") {
      spec.epochs = std::stoull(value);
    } else if (key == "eta1") {
      spec.eta1 = std::stod(value);
    } else if (key == "eta2") {
      spec.eta2 = std::stod(value);
    } else if (key == "optimizer") {
      spec.optimizer = optimizer_kind_from_name(value);
    } else if (key == "dcor_on") {
      spec.dcor_on = dcor_on_from_name(value);
    } else if (key == "workers") {
      spec.workers = std::stoull(value);
    } else if (key == "zero_timing") {
      spec.zero_timing = value == "1" || value == "true";
    } else if (key == "skip_redundant_forward") {
      spec.skip_redundant_forward = value == "1" || value == "true";
    } else if (key == "write_cell_logs") {
      spec.write_cell_logs = value == "1" || value == "true";
    } else {
      fail(ErrorCode::ParseError, path + ":" + std::to_string(lineno) + ": unknown key '" + key +
                                      "'");
    }
  }
  return spec;
}

}  // namespace cguard
