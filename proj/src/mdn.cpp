#include "cguard/mdn.hpp"

#include <cmath>

namespace cguard {

namespace {

void check_feature_batch(const Tensor& f, const Tensor& m) {
  require(f.rank() == 2 && m.rank() == 2, ErrorCode::ShapeMismatch,
          "expected b×C features and b×K metadata");
  require(f.dim(0) == m.dim(0), ErrorCode::ShapeMismatch,
          "feature and metadata batch sizes differ");
}

// r = f − M·βᵀ restricted to the given metadata/β column pairs.
Tensor residual(const Tensor& f, const Tensor& m, const Tensor& beta,
                const std::vector<std::size_t>& m_cols, const std::vector<std::size_t>& b_cols) {
  const std::size_t b = f.dim(0);
  const std::size_t channels = f.dim(1);
  Tensor r = f;
  for (std::size_t s = 0; s < b; ++s) {
    for (std::size_t c = 0; c < channels; ++c) {
      double fit = 0.0;
      for (std::size_t j = 0; j < m_cols.size(); ++j) {
        fit += m(s, m_cols[j]) * beta(c, b_cols[j]);
      }
      r(s, c) -= fit;
    }
  }
  return r;
}

std::vector<std::size_t> iota_cols(std::size_t k) {
  std::vector<std::size_t> cols(k);
  for (std::size_t i = 0; i < k; ++i) cols[i] = i;
  return cols;
}

}  // namespace

std::vector<std::size_t> inference_columns(const std::vector<ColumnRole>& roles) {
  std::vector<std::size_t> keep;
  for (std::size_t k = 0; k < roles.size(); ++k) {
    if (roles[k] != ColumnRole::LabelAug) keep.push_back(k);
  }
  return keep;
}

Tensor mdn_forward_train(const Tensor& f, const Tensor& M_batch, MdnState& state, std::size_t N) {
  check_feature_batch(f, M_batch);
  require(state.gram_inv != nullptr, ErrorCode::InvalidArgument, "MdnState has no GramInverse");
  require(M_batch.dim(1) == state.meta_cols(), ErrorCode::ShapeMismatch,
          "metadata column count does not match running β");
  require(f.dim(1) == state.channels(), ErrorCode::ShapeMismatch,
          "channel count does not match running β");

  const Tensor beta = batch_beta_estimate_channels(*state.gram_inv, M_batch, f, N);
  const auto cols = iota_cols(M_batch.dim(1));
  Tensor r = residual(f, M_batch, beta, cols, cols);

  const double momentum = state.momentum;
  for (std::size_t i = 0; i < beta.size(); ++i) {
    state.running_beta[i] = momentum * state.running_beta[i] + (1.0 - momentum) * beta[i];
  }
  state.seen_batches += 1;
  r.ensure_finite("MDN residual");
  return r;
}

Tensor mdn_forward_eval(const Tensor& f, const Tensor& M_eval,
                        const std::vector<ColumnRole>& eval_roles, const MdnState& state) {
  check_feature_batch(f, M_eval);
  require(state.seen_batches >= 1, ErrorCode::NeverTrained,
          "MDN layer evaluated before any training batch");
  require(eval_roles.size() == M_eval.dim(1), ErrorCode::ShapeMismatch,
          "role count does not match metadata columns");
  require(f.dim(1) == state.channels(), ErrorCode::ShapeMismatch,
          "channel count does not match running β");

  const auto m_cols = inference_columns(eval_roles);
  require(m_cols.size() <= state.meta_cols(), ErrorCode::ShapeMismatch,
          "more inference columns than trained β entries");
  // Trained with LabelAug last, so the kept columns pair with the leading
  // β entries whether or not the eval matrix still carries the column.
  std::vector<std::size_t> b_cols(m_cols.size());
  for (std::size_t j = 0; j < m_cols.size(); ++j) b_cols[j] = j;

  Tensor r = residual(f, M_eval, state.running_beta, m_cols, b_cols);
  r.ensure_finite("MDN residual");
  return r;
}

Tensor pmdn_forward(const Tensor& f, const Tensor& M, const std::vector<ColumnRole>& roles,
                    const PmdnParams& params, Mode mode) {
  check_feature_batch(f, M);
  require(roles.size() == M.dim(1), ErrorCode::ShapeMismatch,
          "role count does not match metadata columns");
  require(f.dim(1) == params.channels(), ErrorCode::ShapeMismatch,
          "channel count does not match β");

  std::vector<std::size_t> m_cols;
  std::vector<std::size_t> b_cols;
  if (mode == Mode::Train) {
    require(M.dim(1) == params.meta_cols(), ErrorCode::ShapeMismatch,
            "train-mode metadata column count does not match β");
    m_cols = iota_cols(M.dim(1));
    b_cols = m_cols;
  } else {
    m_cols = inference_columns(roles);
    require(m_cols.size() <= params.meta_cols(), ErrorCode::ShapeMismatch,
            "more inference columns than β entries");
    b_cols.resize(m_cols.size());
    for (std::size_t j = 0; j < m_cols.size(); ++j) b_cols[j] = j;
  }
  Tensor r = residual(f, M, params.beta, m_cols, b_cols);
  r.ensure_finite("PMDN residual");
  return r;
}

std::pair<double, Tensor> pmdn_loss(const Tensor& f, const Tensor& M, const PmdnParams& params) {
  check_feature_batch(f, M);
  require(M.dim(1) == params.meta_cols(), ErrorCode::ShapeMismatch,
          "metadata column count does not match β");
  require(f.dim(1) == params.channels(), ErrorCode::ShapeMismatch,
          "channel count does not match β");

  const std::size_t b = f.dim(0);
  const std::size_t channels = f.dim(1);
  const std::size_t k = M.dim(1);

  Tensor grad({channels, k});
  double total = 0.0;
  for (std::size_t c = 0; c < channels; ++c) {
    double sq = 0.0;
    std::vector<double> mtr(k, 0.0);  // Mᵀ(f_c − Mβ_c)
    for (std::size_t s = 0; s < b; ++s) {
      double res = f(s, c);
      const double* mrow = M.data() + s * k;
      for (std::size_t a = 0; a < k; ++a) res -= mrow[a] * params.beta(c, a);
      sq += res * res;
      for (std::size_t a = 0; a < k; ++a) mtr[a] += mrow[a] * res;
    }
    total += sq / static_cast<double>(b);
    for (std::size_t a = 0; a < k; ++a) {
      grad(c, a) = -2.0 * mtr[a] / static_cast<double>(b);
    }
  }
  total /= static_cast<double>(channels);
  require(std::isfinite(total), ErrorCode::NonFiniteLoss, "PMDN metadata loss is not finite");
  grad.ensure_finite("PMDN β gradient");
  return {total, std::move(grad)};
}

}  // namespace cguard
