#include "cguard/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "cguard/rng.hpp"

namespace cguard {

namespace {

constexpr std::size_t kQuadrant = 16;

// Q1 = top-right, Q2 = top-left, Q3 = bottom-left, Q4 = bottom-right
// (Cartesian quadrant numbering on the image plane).
void paste_quadrant(Tensor& image, const Tensor& block, std::size_t row0, std::size_t col0) {
  for (std::size_t r = 0; r < kQuadrant; ++r) {
    for (std::size_t c = 0; c < kQuadrant; ++c) {
      image(row0 + r, col0 + c) = block(r, c);
    }
  }
}

std::vector<double> label_bounds(int label) {
  return label == 0 ? std::vector<double>{1.0, 4.0} : std::vector<double>{3.0, 6.0};
}

}  // namespace

Tensor render_gaussian_quadrant(double sigma2) {
  require(sigma2 > 0.0, ErrorCode::NonPositiveVariance, "variance must be positive");
  Tensor block({kQuadrant, kQuadrant});
  const double inv = 1.0 / (2.0 * sigma2);
  for (std::size_t r = 0; r < kQuadrant; ++r) {
    for (std::size_t c = 0; c < kQuadrant; ++c) {
      const double dy = static_cast<double>(r) - 7.5;
      const double dx = static_cast<double>(c) - 7.5;
      block(r, c) = std::exp(-(dx * dx + dy * dy) * inv);
    }
  }
  return block;
}

Dataset generate_dataset(std::uint64_t seed, std::size_t n_per_group) {
  require(n_per_group >= 1, ErrorCode::InvalidArgument, "n_per_group must be >= 1");
  Dataset data;
  data.seed = seed;
  data.n_per_group = n_per_group;
  data.samples.resize(2 * n_per_group);

  const std::uint64_t stream_base = mix_seed(seed, hash_string("synth"));
  const auto total = static_cast<std::ptrdiff_t>(2 * n_per_group);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t ii = 0; ii < total; ++ii) {
    const auto i = static_cast<std::size_t>(ii);
    const int label = i < n_per_group ? 0 : 1;
    Rng rng(mix_seed(stream_base, i));
    const auto bounds = label_bounds(label);
    SyntheticSample& s = data.samples[i];
    s.label = label;
    s.main_sigma2 = rng.next_uniform(bounds[0], bounds[1]);
    s.metadata_sigma2 = rng.next_uniform(bounds[0], bounds[1]);

    s.image = Tensor({2 * kQuadrant, 2 * kQuadrant});
    const Tensor main_block = render_gaussian_quadrant(s.main_sigma2);
    const Tensor meta_block = render_gaussian_quadrant(s.metadata_sigma2);
    paste_quadrant(s.image, main_block, 0, 0);                  // Q2 top-left
    paste_quadrant(s.image, main_block, kQuadrant, kQuadrant);  // Q4 bottom-right
    paste_quadrant(s.image, meta_block, kQuadrant, 0);          // Q3 bottom-left
    // Q1 (top-right) stays zero.
  }
  return data;
}

double bayes_ceiling() { return 5.0 / 6.0; }

DatasetSplit split_dataset(const Dataset& data, double eval_fraction, std::uint64_t seed,
                           bool with_intercept) {
  require(eval_fraction > 0.0 && eval_fraction < 1.0, ErrorCode::InvalidArgument,
          "eval_fraction must lie in (0,1)");

  std::vector<std::size_t> by_label[2];
  for (std::size_t i = 0; i < data.samples.size(); ++i) {
    by_label[data.samples[i].label == 0 ? 0 : 1].push_back(i);
  }
  require(!by_label[0].empty() && !by_label[1].empty(), ErrorCode::DegenerateSplit,
          "dataset does not contain both classes");

  DatasetSplit out;
  for (int label = 0; label < 2; ++label) {
    auto& idx = by_label[label];
    Rng rng(mix_seed(mix_seed(seed, hash_string("split")), static_cast<std::uint64_t>(label)));
    rng.shuffle(idx);
    const auto n_eval = static_cast<std::size_t>(
        std::llround(eval_fraction * static_cast<double>(idx.size())));
    require(n_eval >= 1 && n_eval < idx.size(), ErrorCode::DegenerateSplit,
            "split leaves an empty side for one class");
    out.eval_idx.insert(out.eval_idx.end(), idx.begin(), idx.begin() + n_eval);
    out.train_idx.insert(out.train_idx.end(), idx.begin() + n_eval, idx.end());
  }
  std::sort(out.train_idx.begin(), out.train_idx.end());
  std::sort(out.eval_idx.begin(), out.eval_idx.end());

  auto column = [&](const std::vector<std::size_t>& rows, auto getter) {
    std::vector<double> col(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) col[i] = getter(data.samples[rows[i]]);
    return col;
  };
  const auto meta_of = [](const SyntheticSample& s) { return s.metadata_sigma2; };
  const auto label_of = [](const SyntheticSample& s) { return static_cast<double>(s.label); };

  std::vector<std::vector<double>> train_cols;
  std::vector<ColumnRole> train_roles;
  if (with_intercept) {
    train_cols.push_back(std::vector<double>(out.train_idx.size(), 1.0));
    train_roles.push_back(ColumnRole::Intercept);
  }
  train_cols.push_back(column(out.train_idx, meta_of));
  train_roles.push_back(ColumnRole::Confounder);
  train_cols.push_back(column(out.train_idx, label_of));
  train_roles.push_back(ColumnRole::LabelAug);
  out.train_meta = make_metadata(train_cols, train_roles);

  std::vector<std::vector<double>> eval_cols;
  std::vector<ColumnRole> eval_roles;
  std::vector<double> eval_mean, eval_std;
  std::size_t k = 0;
  if (with_intercept) {
    eval_cols.push_back(std::vector<double>(out.eval_idx.size(), 1.0));
    eval_roles.push_back(ColumnRole::Intercept);
    eval_mean.push_back(out.train_meta.col_mean[k]);
    eval_std.push_back(out.train_meta.col_std[k]);
    ++k;
  }
  eval_cols.push_back(column(out.eval_idx, meta_of));
  eval_roles.push_back(ColumnRole::Confounder);
  eval_mean.push_back(out.train_meta.col_mean[k]);
  eval_std.push_back(out.train_meta.col_std[k]);
  out.eval_meta = make_metadata_with_constants(eval_cols, eval_roles, eval_mean, eval_std);

  return out;
}

void save_dataset(const Dataset& data, const DatasetSplit& split, const std::string& dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);

  {
    std::ofstream desc(dir + "/dataset.txt");
    require(desc.good(), ErrorCode::IoError, "cannot write " + dir + "/dataset.txt");
    desc << "n: " << data.samples.size() << "\n";
    desc << "n_per_group: " << data.n_per_group << "\n";
    desc << "seed: " << data.seed << "\n";
    desc << "image_hw: " << data.image_hw << "\n";
    desc << "train_indices:";
    for (std::size_t i : split.train_idx) desc << " " << i;
    desc << "\n";
    desc << "eval_indices:";
    for (std::size_t i : split.eval_idx) desc << " " << i;
    desc << "\n";
  }

  {
    std::ofstream blob(dir + "/images.f32", std::ios::binary);
    require(blob.good(), ErrorCode::IoError, "cannot write " + dir + "/images.f32");
    std::vector<float> row;
    for (const SyntheticSample& s : data.samples) {
      row.assign(s.image.values().begin(), s.image.values().end());
      blob.write(reinterpret_cast<const char*>(row.data()),
                 static_cast<std::streamsize>(row.size() * sizeof(float)));
    }
  }

  {
    std::ofstream csv(dir + "/samples.csv");
    require(csv.good(), ErrorCode::IoError, "cannot write " + dir + "/samples.csv");
    csv << "index,label,main_sigma2,metadata_sigma2\n";
    char buf[128];
    for (std::size_t i = 0; i < data.samples.size(); ++i) {
      const SyntheticSample& s = data.samples[i];
      std::snprintf(buf, sizeof(buf), "%zu,%d,%.17g,%.17g\n", i, s.label, s.main_sigma2,
                    s.metadata_sigma2);
      csv << buf;
    }
  }
}

namespace {

std::string descriptor_value(const std::string& text, const std::string& key) {
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.rfind(key + ":", 0) == 0) {
      return line.substr(key.size() + 1);
    }
  }
  fail(ErrorCode::ParseError, "descriptor is missing key '" + key + "'");
}

std::vector<std::size_t> parse_index_list(const std::string& text) {
  std::istringstream in(text);
  std::vector<std::size_t> out;
  std::size_t v;
  while (in >> v) out.push_back(v);
  return out;
}

}  // namespace

LoadedDataset load_dataset(const std::string& dir, bool with_intercept) {
  std::ifstream desc_file(dir + "/dataset.txt");
  require(desc_file.good(), ErrorCode::IoError, "cannot read " + dir + "/dataset.txt");
  std::stringstream desc_stream;
  desc_stream << desc_file.rdbuf();
  const std::string desc = desc_stream.str();

  LoadedDataset out;
  const std::size_t n = std::stoull(descriptor_value(desc, "n"));
  out.data.n_per_group = std::stoull(descriptor_value(desc, "n_per_group"));
  out.data.seed = std::stoull(descriptor_value(desc, "seed"));
  out.data.image_hw = std::stoull(descriptor_value(desc, "image_hw"));
  out.split.train_idx = parse_index_list(descriptor_value(desc, "train_indices"));
  out.split.eval_idx = parse_index_list(descriptor_value(desc, "eval_indices"));

  const std::size_t hw = out.data.image_hw;
  out.data.samples.resize(n);

  {
    std::ifstream blob(dir + "/images.f32", std::ios::binary);
    require(blob.good(), ErrorCode::IoError, "cannot read " + dir + "/images.f32");
    std::vector<float> row(hw * hw);
    for (std::size_t i = 0; i < n; ++i) {
      blob.read(reinterpret_cast<char*>(row.data()),
                static_cast<std::streamsize>(row.size() * sizeof(float)));
      require(blob.gcount() == static_cast<std::streamsize>(row.size() * sizeof(float)),
              ErrorCode::IoError, "image blob truncated");
      out.data.samples[i].image = Tensor({hw, hw});
      for (std::size_t j = 0; j < row.size(); ++j) {
        out.data.samples[i].image[j] = static_cast<double>(row[j]);
      }
    }
  }

  {
    std::ifstream csv(dir + "/samples.csv");
    require(csv.good(), ErrorCode::IoError, "cannot read " + dir + "/samples.csv");
    std::string line;
    std::getline(csv, line);  // header
    for (std::size_t i = 0; i < n; ++i) {
      require(static_cast<bool>(std::getline(csv, line)), ErrorCode::ParseError,
              "samples.csv truncated");
      std::size_t index;
      int label;
      double main_s2, meta_s2;
      require(std::sscanf(line.c_str(), "%zu,%d,%lg,%lg", &index, &label, &main_s2, &meta_s2) == 4,
              ErrorCode::ParseError, "bad samples.csv row: " + line);
      require(index == i, ErrorCode::ParseError, "samples.csv rows out of order");
      out.data.samples[i].label = label;
      out.data.samples[i].main_sigma2 = main_s2;
      out.data.samples[i].metadata_sigma2 = meta_s2;
    }
  }

  // Rebuild the metadata matrices exactly as split_dataset would.
  auto column = [&](const std::vector<std::size_t>& rows, auto getter) {
    std::vector<double> col(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) col[i] = getter(out.data.samples[rows[i]]);
    return col;
  };
  const auto meta_of = [](const SyntheticSample& s) { return s.metadata_sigma2; };
  const auto label_of = [](const SyntheticSample& s) { return static_cast<double>(s.label); };

  std::vector<std::vector<double>> train_cols;
  std::vector<ColumnRole> train_roles;
  if (with_intercept) {
    train_cols.push_back(std::vector<double>(out.split.train_idx.size(), 1.0));
    train_roles.push_back(ColumnRole::Intercept);
  }
  train_cols.push_back(column(out.split.train_idx, meta_of));
  train_roles.push_back(ColumnRole::Confounder);
  train_cols.push_back(column(out.split.train_idx, label_of));
  train_roles.push_back(ColumnRole::LabelAug);
  out.split.train_meta = make_metadata(train_cols, train_roles);

  std::vector<std::vector<double>> eval_cols;
  std::vector<ColumnRole> eval_roles;
  std::vector<double> eval_mean, eval_std;
  std::size_t k = 0;
  if (with_intercept) {
    eval_cols.push_back(std::vector<double>(out.split.eval_idx.size(), 1.0));
    eval_roles.push_back(ColumnRole::Intercept);
    eval_mean.push_back(out.split.train_meta.col_mean[k]);
    eval_std.push_back(out.split.train_meta.col_std[k]);
    ++k;
  }
  eval_cols.push_back(column(out.split.eval_idx, meta_of));
  eval_roles.push_back(ColumnRole::Confounder);
  eval_mean.push_back(out.split.train_meta.col_mean[k]);
  eval_std.push_back(out.split.train_meta.col_std[k]);
  out.split.eval_meta = make_metadata_with_constants(eval_cols, eval_roles, eval_mean, eval_std);

  return out;
}

}  // namespace cguard
