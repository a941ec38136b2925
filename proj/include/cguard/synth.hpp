#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cguard/linalg.hpp"
#include "cguard/tensor.hpp"

namespace cguard {

/// One synthetic image: Gaussian blobs in quadrants 2 and 4 carry the
/// group signal, the quadrant-3 blob carries the metadata variable, and
/// quadrant 1 is always zero.
struct SyntheticSample {
  Tensor image;  // 32×32 in [0,1]
  int label = 0;
  double main_sigma2 = 0.0;
  double metadata_sigma2 = 0.0;
};

struct Dataset {
  std::vector<SyntheticSample> samples;
  std::uint64_t seed = 0;
  std::size_t n_per_group = 0;
  std::size_t image_hw = 32;
};

struct DatasetSplit {
  std::vector<std::size_t> train_idx;
  std::vector<std::size_t> eval_idx;
  MetadataMatrix train_meta;  // [intercept?, z(metadata_sigma2), label]
  MetadataMatrix eval_meta;   // same minus LabelAug, train-set z constants
};

/// Peak-normalized isotropic blob exp(−(d² from quadrant center)/(2σ²))
/// on a 16×16 grid.
Tensor render_gaussian_quadrant(double sigma2);

/// Group 0 draws main and metadata variances from U[1,4), group 1 from
/// U[3,6); deterministic in (seed, n_per_group) with independent
/// per-sample substreams.
Dataset generate_dataset(std::uint64_t seed, std::size_t n_per_group = 1000);

/// Best achievable accuracy from the group signal alone: 5/6.
double bayes_ceiling();

/// Stratified split; training metadata carries the label column, eval
/// metadata replays the training z-score constants.
DatasetSplit split_dataset(const Dataset& data, double eval_fraction, std::uint64_t seed,
                           bool with_intercept = true);

/// Descriptor (text key:value), raw little-endian f32 image blob, and a
/// labels/metadata CSV.
void save_dataset(const Dataset& data, const DatasetSplit& split, const std::string& dir);

struct LoadedDataset {
  Dataset data;
  DatasetSplit split;
};
LoadedDataset load_dataset(const std::string& dir, bool with_intercept = true);

}  // namespace cguard
