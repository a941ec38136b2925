#include "cguard/linalg.hpp"

#include <cmath>
#include <cstdlib>

namespace cguard {

bool MetadataMatrix::has_label_column() const {
  for (ColumnRole role : column_roles) {
    if (role == ColumnRole::LabelAug) return true;
  }
  return false;
}

std::size_t MetadataMatrix::label_column() const {
  for (std::size_t k = 0; k < column_roles.size(); ++k) {
    if (column_roles[k] == ColumnRole::LabelAug) return k;
  }
  fail(ErrorCode::InvalidArgument, "metadata has no LabelAug column");
}

MetadataMatrix MetadataMatrix::without_label_column() const {
  if (!has_label_column()) return *this;
  const std::size_t n = rows();
  const std::size_t k_all = cols();
  MetadataMatrix out;
  std::vector<std::size_t> keep;
  for (std::size_t k = 0; k < k_all; ++k) {
    if (column_roles[k] != ColumnRole::LabelAug) keep.push_back(k);
  }
  out.values = Tensor({n, keep.size()});
  for (std::size_t k = 0; k < keep.size(); ++k) {
    out.column_roles.push_back(column_roles[keep[k]]);
    out.col_mean.push_back(col_mean[keep[k]]);
    out.col_std.push_back(col_std[keep[k]]);
    for (std::size_t i = 0; i < n; ++i) out.values(i, k) = values(i, keep[k]);
  }
  return out;
}

MetadataMatrix MetadataMatrix::select_rows(const std::vector<std::size_t>& idx) const {
  MetadataMatrix out;
  out.column_roles = column_roles;
  out.col_mean = col_mean;
  out.col_std = col_std;
  out.values = Tensor({idx.size(), cols()});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    require(idx[i] < rows(), ErrorCode::ShapeMismatch, "row index out of range");
    for (std::size_t k = 0; k < cols(); ++k) out.values(i, k) = values(idx[i], k);
  }
  return out;
}

void MetadataMatrix::validate_training() const {
  const std::size_t n = rows();
  const std::size_t k_all = cols();
  require(column_roles.size() == k_all, ErrorCode::ShapeMismatch,
          "column role count does not match column count");
  int intercepts = 0;
  int labels = 0;
  for (std::size_t k = 0; k < k_all; ++k) {
    switch (column_roles[k]) {
      case ColumnRole::Intercept: {
        ++intercepts;
        for (std::size_t i = 0; i < n; ++i) {
          require(values(i, k) == 1.0, ErrorCode::InvalidArgument,
                  "intercept column must hold exactly 1.0");
        }
        break;
      }
      case ColumnRole::LabelAug: {
        ++labels;
        require(k + 1 == k_all, ErrorCode::InvalidArgument,
                "LabelAug column must be the last column");
        break;
      }
      case ColumnRole::Confounder: {
        double mean = 0.0;
        for (std::size_t i = 0; i < n; ++i) mean += values(i, k);
        mean /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
          const double d = values(i, k) - mean;
          var += d * d;
        }
        const double sd = std::sqrt(var / static_cast<double>(n));
        require(std::abs(mean) <= 1e-9, ErrorCode::InvalidArgument,
                "confounder column mean not within 1e-9 of 0");
        require(std::abs(sd - 1.0) <= 1e-9, ErrorCode::InvalidArgument,
                "confounder column std not within 1e-9 of 1");
        break;
      }
    }
  }
  require(intercepts <= 1, ErrorCode::InvalidArgument, "more than one intercept column");
  require(labels <= 1, ErrorCode::InvalidArgument, "more than one LabelAug column");
}

namespace {

MetadataMatrix build_metadata(const std::vector<std::vector<double>>& columns,
                              const std::vector<ColumnRole>& roles,
                              const std::vector<double>* mean_in,
                              const std::vector<double>* std_in) {
  require(!columns.empty(), ErrorCode::InvalidArgument, "metadata needs at least one column");
  require(columns.size() == roles.size(), ErrorCode::ShapeMismatch,
          "column/role count mismatch");
  const std::size_t n = columns[0].size();
  for (const auto& col : columns) {
    require(col.size() == n, ErrorCode::ShapeMismatch, "ragged metadata columns");
  }

  MetadataMatrix m;
  m.column_roles = roles;
  m.values = Tensor({n, columns.size()});
  m.col_mean.assign(columns.size(), 0.0);
  m.col_std.assign(columns.size(), 1.0);

  for (std::size_t k = 0; k < columns.size(); ++k) {
    double mean = 0.0, sd = 1.0;
    if (roles[k] == ColumnRole::Confounder) {
      if (mean_in) {
        mean = (*mean_in)[k];
        sd = (*std_in)[k];
      } else {
        for (double v : columns[k]) mean += v;
        mean /= static_cast<double>(n);
        double var = 0.0;
        for (double v : columns[k]) {
          const double d = v - mean;
          var += d * d;
        }
        sd = std::sqrt(var / static_cast<double>(n));
        require(sd > 0.0, ErrorCode::ConstantInput, "confounder column is constant");
      }
      m.col_mean[k] = mean;
      m.col_std[k] = sd;
      for (std::size_t i = 0; i < n; ++i) m.values(i, k) = (columns[k][i] - mean) / sd;
    } else {
      for (std::size_t i = 0; i < n; ++i) m.values(i, k) = columns[k][i];
    }
  }
  return m;
}

}  // namespace

MetadataMatrix make_metadata(const std::vector<std::vector<double>>& columns,
                             const std::vector<ColumnRole>& roles) {
  return build_metadata(columns, roles, nullptr, nullptr);
}

MetadataMatrix make_metadata_with_constants(const std::vector<std::vector<double>>& columns,
                                            const std::vector<ColumnRole>& roles,
                                            const std::vector<double>& col_mean,
                                            const std::vector<double>& col_std) {
  require(col_mean.size() == columns.size() && col_std.size() == columns.size(),
          ErrorCode::ShapeMismatch, "standardization constant count mismatch");
  return build_metadata(columns, roles, &col_mean, &col_std);
}

namespace detail {

bool lu_factor(std::vector<double>& a, std::vector<int>& piv, std::size_t n) {
  piv.resize(n);
  for (std::size_t i = 0; i < n; ++i) piv[i] = static_cast<int>(i);
  for (std::size_t col = 0; col < n; ++col) {
    std::size_t best = col;
    double best_abs = std::abs(a[col * n + col]);
    for (std::size_t r = col + 1; r < n; ++r) {
      const double v = std::abs(a[r * n + col]);
      if (v > best_abs) {
        best_abs = v;
        best = r;
      }
    }
    if (best_abs == 0.0 || !std::isfinite(best_abs)) return false;
    if (best != col) {
      for (std::size_t j = 0; j < n; ++j) std::swap(a[best * n + j], a[col * n + j]);
      std::swap(piv[best], piv[col]);
    }
    const double pivot = a[col * n + col];
    for (std::size_t r = col + 1; r < n; ++r) {
      const double factor = a[r * n + col] / pivot;
      a[r * n + col] = factor;
      for (std::size_t j = col + 1; j < n; ++j) a[r * n + j] -= factor * a[col * n + j];
    }
  }
  return true;
}

void lu_solve(const std::vector<double>& lu, const std::vector<int>& piv, std::size_t n,
              std::vector<double>& rhs) {
  std::vector<double> x(n);
  for (std::size_t i = 0; i < n; ++i) x[i] = rhs[piv[i]];
  for (std::size_t i = 1; i < n; ++i) {
    double acc = x[i];
    for (std::size_t j = 0; j < i; ++j) acc -= lu[i * n + j] * x[j];
    x[i] = acc;
  }
  for (std::size_t ii = n; ii-- > 0;) {
    double acc = x[ii];
    for (std::size_t j = ii + 1; j < n; ++j) acc -= lu[ii * n + j] * x[j];
    x[ii] = acc / lu[ii * n + ii];
  }
  rhs = x;
}

}  // namespace detail

GramInverse invert_gram(const MetadataMatrix& M, double ridge_eps) {
  const std::size_t n = M.rows();
  const std::size_t k = M.cols();
  require(n >= k, ErrorCode::InvalidArgument, "need at least as many rows as columns");
  require(ridge_eps >= 0.0, ErrorCode::InvalidArgument, "ridge_eps must be >= 0");

  // Gram = MᵀM + εI, accumulated in row order.
  std::vector<double> gram(k * k, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = M.values.data() + i * k;
    for (std::size_t a = 0; a < k; ++a) {
      for (std::size_t b = 0; b < k; ++b) gram[a * k + b] += row[a] * row[b];
    }
  }
  for (std::size_t a = 0; a < k; ++a) gram[a * k + a] += ridge_eps;

  double gram_norm = 0.0;  // infinity norm
  for (std::size_t a = 0; a < k; ++a) {
    double row_sum = 0.0;
    for (std::size_t b = 0; b < k; ++b) row_sum += std::abs(gram[a * k + b]);
    gram_norm = std::max(gram_norm, row_sum);
  }

  std::vector<double> lu = gram;
  std::vector<int> piv;
  if (!detail::lu_factor(lu, piv, k)) {
    fail(ErrorCode::SingularGram, "regularized Gram matrix is numerically singular");
  }

  Tensor inv({k, k});
  std::vector<double> rhs(k);
  for (std::size_t col = 0; col < k; ++col) {
    std::fill(rhs.begin(), rhs.end(), 0.0);
    rhs[col] = 1.0;
    detail::lu_solve(lu, piv, k, rhs);
    for (std::size_t r = 0; r < k; ++r) inv(r, col) = rhs[r];
  }

  double inv_norm = 0.0;
  for (std::size_t a = 0; a < k; ++a) {
    double row_sum = 0.0;
    for (std::size_t b = 0; b < k; ++b) row_sum += std::abs(inv(a, b));
    inv_norm = std::max(inv_norm, row_sum);
  }
  const double cond = gram_norm * inv_norm;
  if (!std::isfinite(cond) || cond > 1e12) {
    fail(ErrorCode::SingularGram, "Gram condition estimate beyond 1e12");
  }

  // The exact inverse is symmetric; the solve introduces tiny asymmetry.
  for (std::size_t a = 0; a < k; ++a) {
    for (std::size_t b = a + 1; b < k; ++b) {
      const double s = 0.5 * (inv(a, b) + inv(b, a));
      inv(a, b) = s;
      inv(b, a) = s;
    }
  }
  inv.ensure_finite("GramInverse");

  GramInverse out;
  out.matrix = std::move(inv);
  out.ridge_eps = ridge_eps;
  out.source_rows = n;
  return out;
}

Tensor solve_beta_full(const MetadataMatrix& M, const Tensor& f, const GramInverse& gram_inv) {
  const std::size_t n = M.rows();
  const std::size_t k = M.cols();
  require(f.size() == n, ErrorCode::ShapeMismatch, "feature vector length must equal row count");
  require(gram_inv.matrix.dim(0) == k, ErrorCode::ShapeMismatch,
          "GramInverse size does not match metadata columns");

  std::vector<double> mtf(k, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = M.values.data() + i * k;
    const double fi = f[i];
    for (std::size_t a = 0; a < k; ++a) mtf[a] += row[a] * fi;
  }
  Tensor beta({k});
  for (std::size_t a = 0; a < k; ++a) {
    double acc = 0.0;
    for (std::size_t b = 0; b < k; ++b) acc += gram_inv.matrix(a, b) * mtf[b];
    beta[a] = acc;
  }
  beta.ensure_finite("solve_beta_full");
  return beta;
}

Tensor batch_beta_estimate(const GramInverse& gram_inv, const Tensor& M_batch,
                           const Tensor& f_batch, std::size_t N) {
  require(M_batch.rank() == 2, ErrorCode::ShapeMismatch, "M_batch must be b×K");
  const std::size_t b = M_batch.dim(0);
  const std::size_t k = M_batch.dim(1);
  require(b >= 1, ErrorCode::InvalidArgument, "batch must be non-empty");
  require(f_batch.size() == b, ErrorCode::ShapeMismatch, "feature batch length mismatch");
  require(gram_inv.matrix.dim(0) == k, ErrorCode::ShapeMismatch,
          "GramInverse size does not match metadata columns");

  std::vector<double> acc(k, 0.0);
  for (std::size_t i = 0; i < b; ++i) {
    const double* row = M_batch.data() + i * k;
    const double fi = f_batch[i];
    for (std::size_t a = 0; a < k; ++a) acc[a] += row[a] * fi;
  }
  const double scale = static_cast<double>(N) / static_cast<double>(b);
  Tensor beta({k});
  for (std::size_t a = 0; a < k; ++a) {
    double v = 0.0;
    for (std::size_t c = 0; c < k; ++c) v += gram_inv.matrix(a, c) * acc[c];
    beta[a] = scale * v;
  }
  beta.ensure_finite("batch_beta_estimate");
  return beta;
}

Tensor batch_beta_estimate_channels(const GramInverse& gram_inv, const Tensor& M_batch,
                                    const Tensor& f_batch, std::size_t N) {
  require(M_batch.rank() == 2 && f_batch.rank() == 2, ErrorCode::ShapeMismatch,
          "expected b×K metadata and b×C features");
  const std::size_t b = M_batch.dim(0);
  const std::size_t k = M_batch.dim(1);
  const std::size_t channels = f_batch.dim(1);
  require(f_batch.dim(0) == b, ErrorCode::ShapeMismatch, "feature batch row mismatch");
  require(gram_inv.matrix.dim(0) == k, ErrorCode::ShapeMismatch,
          "GramInverse size does not match metadata columns");

  // acc[c][a] = Σᵢ m_{ia} f_{ic}
  std::vector<double> acc(channels * k, 0.0);
  for (std::size_t i = 0; i < b; ++i) {
    const double* row = M_batch.data() + i * k;
    const double* fr = f_batch.data() + i * channels;
    for (std::size_t c = 0; c < channels; ++c) {
      const double fi = fr[c];
      double* out = acc.data() + c * k;
      for (std::size_t a = 0; a < k; ++a) out[a] += row[a] * fi;
    }
  }
  const double scale = static_cast<double>(N) / static_cast<double>(b);
  Tensor beta({channels, k});
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t a = 0; a < k; ++a) {
      double v = 0.0;
      for (std::size_t d = 0; d < k; ++d) v += gram_inv.matrix(a, d) * acc[c * k + d];
      beta(c, a) = scale * v;
    }
  }
  beta.ensure_finite("batch_beta_estimate_channels");
  return beta;
}

}  // namespace cguard
