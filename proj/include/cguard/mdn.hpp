#pragma once

#include <memory>
#include <utility>

#include "cguard/linalg.hpp"
#include "cguard/tensor.hpp"

namespace cguard {

enum class Mode { Train, Eval };

/// State of a closed-form metadata-normalization layer: the Gram inverse
/// of the full training metadata plus a running average of the per-batch
/// β estimates used at inference, BatchNorm-style.
struct MdnState {
  std::shared_ptr<const GramInverse> gram_inv;
  Tensor running_beta;  // C×K
  double momentum = 0.9;
  std::size_t seen_batches = 0;

  std::size_t channels() const { return running_beta.dim(0); }
  std::size_t meta_cols() const { return running_beta.dim(1); }
};

/// Trainable β for a penalty-method normalization layer, one row per
/// normalized feature channel.
struct PmdnParams {
  Tensor beta;  // C×K

  std::size_t channels() const { return beta.dim(0); }
  std::size_t meta_cols() const { return beta.dim(1); }
};

/// Train-mode residual r = f − M·β with β estimated from the batch
/// (per channel), plus the running-β update. f is b×C, M_batch is b×K.
Tensor mdn_forward_train(const Tensor& f, const Tensor& M_batch, MdnState& state, std::size_t N);

/// Eval-mode residual using running β. Columns tagged LabelAug (and the
/// matching β entries) are dropped; when M_eval already lacks the label
/// column its columns pair with the leading β entries.
Tensor mdn_forward_eval(const Tensor& f, const Tensor& M_eval,
                        const std::vector<ColumnRole>& eval_roles, const MdnState& state);

/// Residual r = f − M·β with the layer's own β. Train mode uses every
/// column; Eval mode drops LabelAug exactly like mdn_forward_eval.
Tensor pmdn_forward(const Tensor& f, const Tensor& M, const std::vector<ColumnRole>& roles,
                    const PmdnParams& params, Mode mode);

/// Metadata loss for one layer: mean over channels of the batch-mean
/// squared residual, and its gradient in β:
///   L* = (1/C) Σ_c (1/b)‖f_c − Mβ_c‖²,   dL*/dβ_c = −(2/b) Mᵀ(f_c − Mβ_c).
std::pair<double, Tensor> pmdn_loss(const Tensor& f, const Tensor& M, const PmdnParams& params);

/// Indices of metadata columns kept at inference (role != LabelAug),
/// paired with the β entries they select.
std::vector<std::size_t> inference_columns(const std::vector<ColumnRole>& roles);

}  // namespace cguard
