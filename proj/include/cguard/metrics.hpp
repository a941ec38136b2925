#pragma once

#include <string>

#include "cguard/tensor.hpp"

namespace cguard {

/// Squared sample distance correlation between X (n×p) and Y (n×q):
/// double-centered pairwise-distance matrices, biased (divide-by-n²)
/// dcov² estimator. Returns 0 when either distance variance collapses.
double dcor2(const Tensor& x, const Tensor& y);

struct GroupedDcor {
  double group0 = 0.0;
  double group1 = 0.0;
  double mean = 0.0;
};

/// dcor² computed within each label group separately, plus the average
/// of the two values.
GroupedDcor grouped_dcor2(const Tensor& features, const Tensor& meta, const Tensor& labels);

/// Standard sample Pearson correlation.
double pearson(const Tensor& x, const Tensor& y);

/// Point-biserial correlation via the mean-difference formula
/// r = (ȳ₁−ȳ₀)/s_y · √(n₁n₀/n²); equals pearson on a 0/1 encoding.
double point_biserial(const Tensor& binary, const Tensor& y);

/// Fraction of samples whose thresholded logit (at 0) matches the label.
double accuracy(const Tensor& logits, const Tensor& labels);

struct MetricsReport {
  std::string method;
  std::size_t batch_size = 0;
  std::uint64_t seed = 0;
  double accuracy = 0.0;
  double dcor2_g1 = 0.0;  // label-0 group
  double dcor2_g2 = 0.0;  // label-1 group
  double dcor2_mean = 0.0;
  double pearson_meta = 0.0;  // |pearson(metadata, logits)| on the eval split
};

/// CSV row for the eval subcommand; fixed field order.
std::string metrics_csv_header();
std::string metrics_csv_row(const MetricsReport& report);

}  // namespace cguard
