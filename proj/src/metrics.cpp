#include "cguard/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <vector>

namespace cguard {

namespace {

// Pairwise Euclidean distances, then double centering in place.
std::vector<double> centered_distances(const Tensor& x) {
  const std::size_t n = x.dim(0);
  const std::size_t p = x.rank() == 1 ? 1 : x.dim(1);
  std::vector<double> d(n * n, 0.0);
  const auto ni = static_cast<std::ptrdiff_t>(n);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < ni; ++i) {
    const double* xi = x.data() + static_cast<std::size_t>(i) * p;
    for (std::size_t j = 0; j < n; ++j) {
      const double* xj = x.data() + j * p;
      double acc = 0.0;
      for (std::size_t k = 0; k < p; ++k) {
        const double dv = xi[k] - xj[k];
        acc += dv * dv;
      }
      d[static_cast<std::size_t>(i) * n + j] = std::sqrt(acc);
    }
  }

  std::vector<double> row_mean(n, 0.0), col_mean(n, 0.0);
  double grand = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      row_mean[i] += d[i * n + j];
      col_mean[j] += d[i * n + j];
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    grand += row_mean[i];
    row_mean[i] /= static_cast<double>(n);
  }
  grand /= static_cast<double>(n * n);
  for (std::size_t j = 0; j < n; ++j) col_mean[j] /= static_cast<double>(n);

  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      d[i * n + j] += grand - row_mean[i] - col_mean[j];
    }
  }
  return d;
}

void check_pair(const Tensor& x, const Tensor& y) {
  require(x.rank() <= 2 && y.rank() <= 2, ErrorCode::ShapeMismatch,
          "dcor2 expects vectors or n×p matrices");
  require(x.dim(0) == y.dim(0), ErrorCode::ShapeMismatch, "sample counts differ");
  require(x.dim(0) >= 4, ErrorCode::TooFewSamples, "dcor2 needs at least 4 samples");
}

}  // namespace

double dcor2(const Tensor& x, const Tensor& y) {
  check_pair(x, y);
  const std::size_t n = x.dim(0);
  const std::vector<double> a = centered_distances(x);
  const std::vector<double> b = centered_distances(y);

  double dcov = 0.0, dvar_x = 0.0, dvar_y = 0.0;
  for (std::size_t i = 0; i < n * n; ++i) {
    dcov += a[i] * b[i];
    dvar_x += a[i] * a[i];
    dvar_y += b[i] * b[i];
  }
  const double n2 = static_cast<double>(n) * static_cast<double>(n);
  dcov /= n2;
  dvar_x /= n2;
  dvar_y /= n2;
  if (dvar_x <= 1e-12 || dvar_y <= 1e-12) return 0.0;
  double r = dcov / std::sqrt(dvar_x * dvar_y);
  // Guard against rounding pushing the ratio a hair outside [0,1].
  if (r < 0.0) r = 0.0;
  if (r > 1.0) r = 1.0;
  return r;
}

GroupedDcor grouped_dcor2(const Tensor& features, const Tensor& meta, const Tensor& labels) {
  require(features.dim(0) == labels.size() && meta.dim(0) == labels.size(),
          ErrorCode::ShapeMismatch, "feature/metadata/label sample counts differ");
  const std::size_t p = features.rank() == 1 ? 1 : features.dim(1);
  const std::size_t q = meta.rank() == 1 ? 1 : meta.dim(1);

  GroupedDcor out;
  for (int label = 0; label < 2; ++label) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (static_cast<int>(labels[i]) == label) idx.push_back(i);
    }
    require(idx.size() > 4, ErrorCode::TooFewSamples,
            "group " + std::to_string(label) + " needs more than 4 samples");
    Tensor fx({idx.size(), p});
    Tensor fy({idx.size(), q});
    for (std::size_t i = 0; i < idx.size(); ++i) {
      for (std::size_t k = 0; k < p; ++k) fx(i, k) = features[idx[i] * p + k];
      for (std::size_t k = 0; k < q; ++k) fy(i, k) = meta[idx[i] * q + k];
    }
    const double v = dcor2(fx, fy);
    (label == 0 ? out.group0 : out.group1) = v;
  }
  out.mean = 0.5 * (out.group0 + out.group1);
  return out;
}

double pearson(const Tensor& x, const Tensor& y) {
  require(x.size() == y.size(), ErrorCode::ShapeMismatch, "length mismatch");
  const std::size_t n = x.size();
  require(n >= 2, ErrorCode::TooFewSamples, "pearson needs at least 2 samples");
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double dx = x[i] - mx;
    const double dy = y[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  require(sxx > 0.0 && syy > 0.0, ErrorCode::ConstantInput, "pearson on a constant input");
  return sxy / std::sqrt(sxx * syy);
}

double point_biserial(const Tensor& binary, const Tensor& y) {
  require(binary.size() == y.size(), ErrorCode::ShapeMismatch, "length mismatch");
  const std::size_t n = binary.size();
  double n1 = 0.0, sum1 = 0.0, sum0 = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double b = binary[i];
    require(b == 0.0 || b == 1.0, ErrorCode::InvalidArgument, "binary input must be 0/1");
    if (b == 1.0) {
      n1 += 1.0;
      sum1 += y[i];
    } else {
      sum0 += y[i];
    }
  }
  const double n0 = static_cast<double>(n) - n1;
  require(n0 > 0.0 && n1 > 0.0, ErrorCode::SingleClass, "both classes must be present");

  double mean = (sum0 + sum1) / static_cast<double>(n);
  double ss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = y[i] - mean;
    ss += d * d;
  }
  const double sd = std::sqrt(ss / static_cast<double>(n));
  require(sd > 0.0, ErrorCode::ConstantInput, "point_biserial on a constant input");
  const double m1 = sum1 / n1;
  const double m0 = sum0 / n0;
  return (m1 - m0) / sd * std::sqrt(n1 * n0 / (static_cast<double>(n) * static_cast<double>(n)));
}

double accuracy(const Tensor& logits, const Tensor& labels) {
  require(logits.dim(0) == labels.size(), ErrorCode::ShapeMismatch,
          "logit/label count mismatch");
  const std::size_t n = labels.size();
  std::size_t correct = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const int pred = logits[i] > 0.0 ? 1 : 0;
    if (pred == static_cast<int>(labels[i])) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(n);
}

std::string metrics_csv_header() {
  return "method,batch_size,seed,accuracy,dcor2_g1,dcor2_g2,dcor2_mean,pearson_meta";
}

std::string metrics_csv_row(const MetricsReport& r) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%s,%zu,%llu,%.10g,%.10g,%.10g,%.10g,%.10g", r.method.c_str(),
                r.batch_size, static_cast<unsigned long long>(r.seed), r.accuracy, r.dcor2_g1,
                r.dcor2_g2, r.dcor2_mean, r.pearson_meta);
  return buf;
}

}  // namespace cguard
