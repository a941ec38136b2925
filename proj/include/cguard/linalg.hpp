#pragma once

#include <cstddef>
#include <vector>

#include "cguard/tensor.hpp"

namespace cguard {

enum class ColumnRole { Intercept, Confounder, LabelAug };

/// N×K per-sample metadata with tagged column roles. Confounder columns
/// are z-scored on the training rows; the same transform is replayed on
/// held-out rows, so only training matrices satisfy the mean-0/std-1
/// invariant.
struct MetadataMatrix {
  Tensor values;  // N×K
  std::vector<ColumnRole> column_roles;
  std::vector<double> col_mean;  // standardization constants per column
  std::vector<double> col_std;

  std::size_t rows() const { return values.dim(0); }
  std::size_t cols() const { return values.dim(1); }

  bool has_label_column() const;
  std::size_t label_column() const;  // throws if absent

  /// Copy without the LabelAug column (inference-side form).
  MetadataMatrix without_label_column() const;

  /// Copy holding only the given rows.
  MetadataMatrix select_rows(const std::vector<std::size_t>& idx) const;

  /// Checks the training-side invariants: at most one all-ones intercept
  /// column, at most one LabelAug column (last if present), confounder
  /// columns z-scored within 1e-9.
  void validate_training() const;
};

/// Builds a metadata matrix from raw columns, z-scoring the confounder
/// columns in place and remembering the constants. Pass existing
/// constants to replay a training-set transform on held-out rows.
MetadataMatrix make_metadata(const std::vector<std::vector<double>>& columns,
                             const std::vector<ColumnRole>& roles);
MetadataMatrix make_metadata_with_constants(const std::vector<std::vector<double>>& columns,
                                            const std::vector<ColumnRole>& roles,
                                            const std::vector<double>& col_mean,
                                            const std::vector<double>& col_std);

/// (MᵀM + εI)⁻¹ held explicitly; K is small so the dense inverse is the
/// convenient currency for the batch-level β estimate.
struct GramInverse {
  Tensor matrix;  // K×K
  double ridge_eps = 0.0;
  std::size_t source_rows = 0;
};

/// Pivoted-factorization inverse of the regularized Gram matrix.
/// Throws SingularGram when the condition estimate exceeds 1e12.
GramInverse invert_gram(const MetadataMatrix& M, double ridge_eps);

/// Closed-form least squares: β = gram_inv · Mᵀ f.
Tensor solve_beta_full(const MetadataMatrix& M, const Tensor& f, const GramInverse& gram_inv);

/// Batch-level approximation β ≈ (N/b) · gram_inv · Σᵢ mᵢ fᵢ, where
/// gram_inv was computed on the full N-row training matrix.
Tensor batch_beta_estimate(const GramInverse& gram_inv, const Tensor& M_batch,
                           const Tensor& f_batch, std::size_t N);

/// Multi-channel form of batch_beta_estimate: features b×C in, β C×K out.
/// Column c equals batch_beta_estimate on feature column c.
Tensor batch_beta_estimate_channels(const GramInverse& gram_inv, const Tensor& M_batch,
                                    const Tensor& f_batch, std::size_t N);

namespace detail {
/// LU with partial pivoting; returns false if a pivot collapses.
bool lu_factor(std::vector<double>& a, std::vector<int>& piv, std::size_t n);
void lu_solve(const std::vector<double>& lu, const std::vector<int>& piv, std::size_t n,
              std::vector<double>& rhs);
}  // namespace detail

}  // namespace cguard
