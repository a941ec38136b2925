#include "cguard/layers.hpp"

#include <atomic>
#include <cmath>
#include <cstring>

#include "cguard/kernels.hpp"
#include "cguard/rng.hpp"

namespace cguard {

namespace {

constexpr double kNormEps = 1e-5;

std::atomic<std::uint64_t> g_next_network_id{1};

std::size_t tail_product(const std::vector<std::size_t>& shape, std::size_t from) {
  std::size_t p = 1;
  for (std::size_t i = from; i < shape.size(); ++i) p *= shape[i];
  return p;
}

// Splits an activation into (batch, channels, spatial) regardless of rank.
struct ChannelView {
  std::size_t batch;
  std::size_t channels;
  std::size_t spatial;
};

ChannelView channel_view(const Tensor& x) {
  require(x.rank() == 2 || x.rank() == 4, ErrorCode::ShapeMismatch,
          "expected b×F or b×C×H×W activation, got " + shape_to_string(x.shape()));
  if (x.rank() == 2) return {x.dim(0), x.dim(1), 1};
  return {x.dim(0), x.dim(1), x.dim(2) * x.dim(3)};
}

// Mean over the spatial extent, one scalar per (sample, channel).
Tensor pool_channels(const Tensor& x) {
  const ChannelView v = channel_view(x);
  Tensor pooled({v.batch, v.channels});
  const double inv = 1.0 / static_cast<double>(v.spatial);
  for (std::size_t s = 0; s < v.batch; ++s) {
    for (std::size_t c = 0; c < v.channels; ++c) {
      const double* p = x.data() + (s * v.channels + c) * v.spatial;
      double acc = 0.0;
      for (std::size_t i = 0; i < v.spatial; ++i) acc += p[i];
      pooled(s, c) = acc * inv;
    }
  }
  return pooled;
}

// out = x − fit[s,c] broadcast over the spatial extent.
Tensor broadcast_subtract(const Tensor& x, const Tensor& fit) {
  const ChannelView v = channel_view(x);
  Tensor out = x;
  const auto bi = static_cast<std::ptrdiff_t>(v.batch);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t s = 0; s < bi; ++s) {
    for (std::size_t c = 0; c < v.channels; ++c) {
      const double sub = fit(static_cast<std::size_t>(s), c);
      double* p = out.data() + (static_cast<std::size_t>(s) * v.channels + c) * v.spatial;
      for (std::size_t i = 0; i < v.spatial; ++i) p[i] -= sub;
    }
  }
  return out;
}

// fit[s,c] = Σ_j M(s, m_cols[j]) · beta(c, j_cols[j])
Tensor metadata_fit(const Tensor& m, const Tensor& beta, const std::vector<std::size_t>& m_cols,
                    const std::vector<std::size_t>& b_cols) {
  const std::size_t b = m.dim(0);
  const std::size_t channels = beta.dim(0);
  Tensor fit({b, channels});
  for (std::size_t s = 0; s < b; ++s) {
    for (std::size_t c = 0; c < channels; ++c) {
      double acc = 0.0;
      for (std::size_t j = 0; j < m_cols.size(); ++j) acc += m(s, m_cols[j]) * beta(c, b_cols[j]);
      fit(s, c) = acc;
    }
  }
  return fit;
}

// scale · M · G · Mᵀ · g, applied per channel column of g (b×C).
Tensor gram_projection(const Tensor& g, const Tensor& m, const GramInverse& gram, double scale) {
  const std::size_t b = m.dim(0);
  const std::size_t k = m.dim(1);
  const std::size_t channels = g.dim(1);
  // t1 = Mᵀ g  (K×C)
  Tensor t1({k, channels});
  for (std::size_t s = 0; s < b; ++s) {
    for (std::size_t a = 0; a < k; ++a) {
      const double mv = m(s, a);
      for (std::size_t c = 0; c < channels; ++c) t1(a, c) += mv * g(s, c);
    }
  }
  // t2 = G t1  (K×C)
  Tensor t2({k, channels});
  for (std::size_t a = 0; a < k; ++a) {
    for (std::size_t d = 0; d < k; ++d) {
      const double gv = gram.matrix(a, d);
      for (std::size_t c = 0; c < channels; ++c) t2(a, c) += gv * t1(d, c);
    }
  }
  // out = scale · M t2  (b×C)
  Tensor out({b, channels});
  for (std::size_t s = 0; s < b; ++s) {
    for (std::size_t a = 0; a < k; ++a) {
      const double mv = m(s, a) * scale;
      for (std::size_t c = 0; c < channels; ++c) out(s, c) += mv * t2(a, c);
    }
  }
  return out;
}

void check_meta(const Tensor& x, const MetaBatch* meta, const char* layer) {
  require(meta != nullptr, ErrorCode::InvalidArgument,
          std::string(layer) + " layer needs batch metadata");
  require(meta->values.rank() == 2 && meta->values.dim(0) == x.dim(0), ErrorCode::ShapeMismatch,
          std::string(layer) + " metadata rows do not match batch size");
  require(meta->roles.size() == meta->values.dim(1), ErrorCode::ShapeMismatch,
          std::string(layer) + " metadata roles do not match columns");
}

template <typename CacheT>
const CacheT& expect_cache(const LayerCache& cache, const char* layer) {
  const CacheT* c = std::get_if<CacheT>(&cache);
  require(c != nullptr, ErrorCode::TapeMismatch,
          std::string("tape slot does not belong to a ") + layer + " layer");
  return *c;
}

}  // namespace

const char* layer_kind_name(LayerKind kind) {
  switch (kind) {
    case LayerKind::Dense: return "dense";
    case LayerKind::Relu: return "relu";
    case LayerKind::Conv2d: return "conv2d";
    case LayerKind::Flatten: return "flatten";
    case LayerKind::LayerNorm: return "layernorm";
    case LayerKind::BatchNorm: return "batchnorm";
    case LayerKind::Mdn: return "mdn";
    case LayerKind::Pmdn: return "pmdn";
  }
  return "unknown";
}

MetaBatch MetaBatch::from_rows(const MetadataMatrix& m, const std::vector<std::size_t>& idx,
                               std::size_t dataset_rows) {
  MetaBatch out;
  out.roles = m.column_roles;
  out.dataset_rows = dataset_rows;
  out.values = Tensor({idx.size(), m.cols()});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    require(idx[i] < m.rows(), ErrorCode::ShapeMismatch, "metadata row index out of range");
    for (std::size_t k = 0; k < m.cols(); ++k) out.values(i, k) = m.values(idx[i], k);
  }
  return out;
}

MetaBatch MetaBatch::whole(const MetadataMatrix& m, std::size_t dataset_rows) {
  MetaBatch out;
  out.roles = m.column_roles;
  out.dataset_rows = dataset_rows;
  out.values = m.values;
  return out;
}

// ---------------------------------------------------------------- Dense

DenseLayer::DenseLayer(std::size_t in, std::size_t out)
    : in_(in),
      out_(out),
      weight_({in, out}),
      bias_({out}),
      dweight_({in, out}),
      dbias_({out}) {}

std::string DenseLayer::name() const {
  return "dense(" + std::to_string(in_) + "->" + std::to_string(out_) + ")";
}

std::vector<std::size_t> DenseLayer::output_shape(const std::vector<std::size_t>& in) const {
  require(in.size() == 1 && in[0] == in_, ErrorCode::ShapeMismatch,
          name() + " cannot consume " + shape_to_string(in));
  return {out_};
}

void DenseLayer::init_params(std::uint64_t seed) {
  Rng rng(seed);
  const double bound = std::sqrt(6.0 / static_cast<double>(in_));
  for (double& v : weight_.values()) v = rng.next_uniform(-bound, bound);
  bias_.fill(0.0);
}

Tensor DenseLayer::forward(const Tensor& x, const MetaBatch*, Mode mode, LayerCache& cache) {
  require(x.rank() == 2 && x.dim(1) == in_, ErrorCode::ShapeMismatch,
          name() + " got input " + shape_to_string(x.shape()));
  const std::size_t b = x.dim(0);
  Tensor y({b, out_});
  kernels::dense_forward(x.data(), weight_.data(), bias_.data(), y.data(), b, in_, out_);
  if (mode == Mode::Train) cache = DenseCache{x};
  return y;
}

Tensor DenseLayer::backward(const Tensor& grad_out, const LayerCache& cache) {
  const auto& c = expect_cache<DenseCache>(cache, "dense");
  const std::size_t b = c.input.dim(0);
  require(grad_out.rank() == 2 && grad_out.dim(0) == b && grad_out.dim(1) == out_,
          ErrorCode::ShapeMismatch, name() + " got gradient " + shape_to_string(grad_out.shape()));
  kernels::dense_backward_params(c.input.data(), grad_out.data(), dweight_.data(), dbias_.data(),
                                 b, in_, out_);
  Tensor dx({b, in_});
  kernels::dense_backward_input(grad_out.data(), weight_.data(), dx.data(), b, in_, out_);
  return dx;
}

void DenseLayer::collect_weights(std::vector<ParamRef>& out) {
  out.push_back({name() + ".weight", &weight_, &dweight_});
  out.push_back({name() + ".bias", &bias_, &dbias_});
}

// ----------------------------------------------------------------- ReLU

Tensor ReluLayer::forward(const Tensor& x, const MetaBatch*, Mode mode, LayerCache& cache) {
  Tensor y = x;
  double* p = y.data();
  const auto n = static_cast<std::ptrdiff_t>(y.size());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    if (p[i] < 0.0) p[i] = 0.0;
  }
  if (mode == Mode::Train) cache = ReluCache{x};
  return y;
}

Tensor ReluLayer::backward(const Tensor& grad_out, const LayerCache& cache) {
  const auto& c = expect_cache<ReluCache>(cache, "relu");
  require(grad_out.same_shape(c.input), ErrorCode::ShapeMismatch, "relu gradient shape mismatch");
  Tensor dx = grad_out;
  const double* xin = c.input.data();
  double* p = dx.data();
  const auto n = static_cast<std::ptrdiff_t>(dx.size());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    if (xin[i] <= 0.0) p[i] = 0.0;
  }
  return dx;
}

// ---------------------------------------------------------------- Conv2d

Conv2dLayer::Conv2dLayer(std::size_t in_ch, std::size_t out_ch)
    : in_ch_(in_ch),
      out_ch_(out_ch),
      weight_({out_ch, in_ch, 3, 3}),
      bias_({out_ch}),
      dweight_({out_ch, in_ch, 3, 3}),
      dbias_({out_ch}) {}

std::string Conv2dLayer::name() const {
  return "conv2d(" + std::to_string(in_ch_) + "->" + std::to_string(out_ch_) + ")";
}

std::vector<std::size_t> Conv2dLayer::output_shape(const std::vector<std::size_t>& in) const {
  require(in.size() == 3 && in[0] == in_ch_, ErrorCode::ShapeMismatch,
          name() + " cannot consume " + shape_to_string(in));
  return {out_ch_, in[1], in[2]};
}

void Conv2dLayer::init_params(std::uint64_t seed) {
  Rng rng(seed);
  const double bound = std::sqrt(6.0 / static_cast<double>(in_ch_ * 9));
  for (double& v : weight_.values()) v = rng.next_uniform(-bound, bound);
  bias_.fill(0.0);
}

Tensor Conv2dLayer::forward(const Tensor& x, const MetaBatch*, Mode mode, LayerCache& cache) {
  require(x.rank() == 4 && x.dim(1) == in_ch_, ErrorCode::ShapeMismatch,
          name() + " got input " + shape_to_string(x.shape()));
  const std::size_t b = x.dim(0), h = x.dim(2), w = x.dim(3);
  Tensor y({b, out_ch_, h, w});
  kernels::conv3x3_forward(x.data(), weight_.data(), bias_.data(), y.data(), b, in_ch_, out_ch_, h,
                           w);
  if (mode == Mode::Train) cache = ConvCache{x};
  return y;
}

Tensor Conv2dLayer::backward(const Tensor& grad_out, const LayerCache& cache) {
  const auto& c = expect_cache<ConvCache>(cache, "conv2d");
  const std::size_t b = c.input.dim(0), h = c.input.dim(2), w = c.input.dim(3);
  require(grad_out.rank() == 4 && grad_out.dim(0) == b && grad_out.dim(1) == out_ch_ &&
              grad_out.dim(2) == h && grad_out.dim(3) == w,
          ErrorCode::ShapeMismatch, name() + " got gradient " + shape_to_string(grad_out.shape()));
  kernels::conv3x3_backward_params(c.input.data(), grad_out.data(), dweight_.data(), dbias_.data(),
                                   b, in_ch_, out_ch_, h, w);
  Tensor dx({b, in_ch_, h, w});
  kernels::conv3x3_backward_input(grad_out.data(), weight_.data(), dx.data(), b, in_ch_, out_ch_,
                                  h, w);
  return dx;
}

void Conv2dLayer::collect_weights(std::vector<ParamRef>& out) {
  out.push_back({name() + ".weight", &weight_, &dweight_});
  out.push_back({name() + ".bias", &bias_, &dbias_});
}

// --------------------------------------------------------------- Flatten

std::vector<std::size_t> FlattenLayer::output_shape(const std::vector<std::size_t>& in) const {
  require(!in.empty(), ErrorCode::ShapeMismatch, "flatten needs a non-empty shape");
  return {tail_product(in, 0)};
}

Tensor FlattenLayer::forward(const Tensor& x, const MetaBatch*, Mode mode, LayerCache& cache) {
  require(x.rank() >= 2, ErrorCode::ShapeMismatch, "flatten needs a batched input");
  const std::size_t b = x.dim(0);
  Tensor y = x.reshaped({b, tail_product(x.shape(), 1)});
  if (mode == Mode::Train) cache = FlattenCache{x.shape()};
  return y;
}

Tensor FlattenLayer::backward(const Tensor& grad_out, const LayerCache& cache) {
  const auto& c = expect_cache<FlattenCache>(cache, "flatten");
  return grad_out.reshaped(c.in_shape);
}

// ------------------------------------------------------------- LayerNorm

LayerNormLayer::LayerNormLayer(std::size_t dim)
    : dim_(dim), gamma_({dim}), beta_({dim}), dgamma_({dim}), dbeta_({dim}) {
  gamma_.fill(1.0);
}

std::vector<std::size_t> LayerNormLayer::output_shape(const std::vector<std::size_t>& in) const {
  require(!in.empty() && in[0] == dim_, ErrorCode::ShapeMismatch,
          "layernorm(" + std::to_string(dim_) + ") cannot consume " + shape_to_string(in));
  return in;
}

Tensor LayerNormLayer::forward(const Tensor& x, const MetaBatch*, Mode mode, LayerCache& cache) {
  const ChannelView v = channel_view(x);
  require(v.channels == dim_, ErrorCode::ShapeMismatch, "layernorm channel mismatch");
  const std::size_t d = v.channels * v.spatial;
  Tensor xhat(x.shape());
  Tensor inv_std({v.batch});
  Tensor y(x.shape());
  const auto bi = static_cast<std::ptrdiff_t>(v.batch);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t s = 0; s < bi; ++s) {
    const double* xs = x.data() + static_cast<std::size_t>(s) * d;
    double* hs = xhat.data() + static_cast<std::size_t>(s) * d;
    double* ys = y.data() + static_cast<std::size_t>(s) * d;
    double mean = 0.0;
    for (std::size_t i = 0; i < d; ++i) mean += xs[i];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      const double dv = xs[i] - mean;
      var += dv * dv;
    }
    var /= static_cast<double>(d);
    const double istd = 1.0 / std::sqrt(var + kNormEps);
    inv_std[static_cast<std::size_t>(s)] = istd;
    for (std::size_t c = 0; c < v.channels; ++c) {
      const double g = gamma_[c], bta = beta_[c];
      for (std::size_t p = 0; p < v.spatial; ++p) {
        const std::size_t i = c * v.spatial + p;
        hs[i] = (xs[i] - mean) * istd;
        ys[i] = g * hs[i] + bta;
      }
    }
  }
  if (mode == Mode::Train) cache = LayerNormCache{std::move(xhat), std::move(inv_std)};
  return y;
}

Tensor LayerNormLayer::backward(const Tensor& grad_out, const LayerCache& cache) {
  const auto& c = expect_cache<LayerNormCache>(cache, "layernorm");
  const ChannelView v = channel_view(c.xhat);
  require(grad_out.same_shape(c.xhat), ErrorCode::ShapeMismatch,
          "layernorm gradient shape mismatch");
  const std::size_t d = v.channels * v.spatial;
  Tensor dx(grad_out.shape());
  dgamma_.fill(0.0);
  dbeta_.fill(0.0);
  const auto bi = static_cast<std::ptrdiff_t>(v.batch);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t s = 0; s < bi; ++s) {
    const double* gs = grad_out.data() + static_cast<std::size_t>(s) * d;
    const double* hs = c.xhat.data() + static_cast<std::size_t>(s) * d;
    double* dxs = dx.data() + static_cast<std::size_t>(s) * d;
    const double istd = c.inv_std[static_cast<std::size_t>(s)];
    double s1 = 0.0, s2 = 0.0;
    for (std::size_t ch = 0; ch < v.channels; ++ch) {
      const double g = gamma_[ch];
      for (std::size_t p = 0; p < v.spatial; ++p) {
        const std::size_t i = ch * v.spatial + p;
        const double dxh = gs[i] * g;
        s1 += dxh;
        s2 += dxh * hs[i];
      }
    }
    s1 /= static_cast<double>(d);
    s2 /= static_cast<double>(d);
    for (std::size_t ch = 0; ch < v.channels; ++ch) {
      const double g = gamma_[ch];
      for (std::size_t p = 0; p < v.spatial; ++p) {
        const std::size_t i = ch * v.spatial + p;
        dxs[i] = istd * (gs[i] * g - s1 - hs[i] * s2);
      }
    }
  }
  // Parameter gradients accumulate across samples in index order.
  for (std::size_t s = 0; s < v.batch; ++s) {
    const double* gs = grad_out.data() + s * d;
    const double* hs = c.xhat.data() + s * d;
    for (std::size_t ch = 0; ch < v.channels; ++ch) {
      double dg = 0.0, db = 0.0;
      for (std::size_t p = 0; p < v.spatial; ++p) {
        const std::size_t i = ch * v.spatial + p;
        dg += gs[i] * hs[i];
        db += gs[i];
      }
      dgamma_[ch] += dg;
      dbeta_[ch] += db;
    }
  }
  return dx;
}

void LayerNormLayer::collect_weights(std::vector<ParamRef>& out) {
  out.push_back({"layernorm.gamma", &gamma_, &dgamma_});
  out.push_back({"layernorm.beta", &beta_, &dbeta_});
}

// ------------------------------------------------------------- BatchNorm

BatchNormLayer::BatchNormLayer(std::size_t dim, double momentum)
    : dim_(dim),
      momentum_(momentum),
      gamma_({dim}),
      beta_({dim}),
      dgamma_({dim}),
      dbeta_({dim}),
      running_mean_({dim}),
      running_var_({dim}) {
  gamma_.fill(1.0);
  running_var_.fill(1.0);
}

std::vector<std::size_t> BatchNormLayer::output_shape(const std::vector<std::size_t>& in) const {
  require(!in.empty() && in[0] == dim_, ErrorCode::ShapeMismatch,
          "batchnorm(" + std::to_string(dim_) + ") cannot consume " + shape_to_string(in));
  return in;
}

Tensor BatchNormLayer::forward(const Tensor& x, const MetaBatch*, Mode mode, LayerCache& cache) {
  const ChannelView v = channel_view(x);
  require(v.channels == dim_, ErrorCode::ShapeMismatch, "batchnorm channel mismatch");
  Tensor y(x.shape());

  if (mode == Mode::Eval) {
    const auto bi = static_cast<std::ptrdiff_t>(v.batch);
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t s = 0; s < bi; ++s) {
      for (std::size_t c = 0; c < v.channels; ++c) {
        const double istd = 1.0 / std::sqrt(running_var_[c] + kNormEps);
        const double mean = running_mean_[c];
        const double g = gamma_[c], bta = beta_[c];
        const double* xs = x.data() + (static_cast<std::size_t>(s) * v.channels + c) * v.spatial;
        double* ys = y.data() + (static_cast<std::size_t>(s) * v.channels + c) * v.spatial;
        for (std::size_t p = 0; p < v.spatial; ++p) ys[p] = g * (xs[p] - mean) * istd + bta;
      }
    }
    return y;
  }

  const double m = static_cast<double>(v.batch * v.spatial);
  Tensor mean({v.channels});
  Tensor var({v.channels});
  for (std::size_t s = 0; s < v.batch; ++s) {
    for (std::size_t c = 0; c < v.channels; ++c) {
      const double* xs = x.data() + (s * v.channels + c) * v.spatial;
      double acc = 0.0;
      for (std::size_t p = 0; p < v.spatial; ++p) acc += xs[p];
      mean[c] += acc;
    }
  }
  for (std::size_t c = 0; c < v.channels; ++c) mean[c] /= m;
  for (std::size_t s = 0; s < v.batch; ++s) {
    for (std::size_t c = 0; c < v.channels; ++c) {
      const double* xs = x.data() + (s * v.channels + c) * v.spatial;
      const double mu = mean[c];
      double acc = 0.0;
      for (std::size_t p = 0; p < v.spatial; ++p) {
        const double dv = xs[p] - mu;
        acc += dv * dv;
      }
      var[c] += acc;
    }
  }
  for (std::size_t c = 0; c < v.channels; ++c) var[c] /= m;

  Tensor xhat(x.shape());
  Tensor inv_std({v.channels});
  for (std::size_t c = 0; c < v.channels; ++c) inv_std[c] = 1.0 / std::sqrt(var[c] + kNormEps);
  const auto bi = static_cast<std::ptrdiff_t>(v.batch);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t s = 0; s < bi; ++s) {
    for (std::size_t c = 0; c < v.channels; ++c) {
      const double istd = inv_std[c];
      const double mu = mean[c];
      const double g = gamma_[c], bta = beta_[c];
      const std::size_t base = (static_cast<std::size_t>(s) * v.channels + c) * v.spatial;
      const double* xs = x.data() + base;
      double* hs = xhat.data() + base;
      double* ys = y.data() + base;
      for (std::size_t p = 0; p < v.spatial; ++p) {
        hs[p] = (xs[p] - mu) * istd;
        ys[p] = g * hs[p] + bta;
      }
    }
  }
  for (std::size_t c = 0; c < v.channels; ++c) {
    running_mean_[c] = momentum_ * running_mean_[c] + (1.0 - momentum_) * mean[c];
    running_var_[c] = momentum_ * running_var_[c] + (1.0 - momentum_) * var[c];
  }
  cache = BatchNormCache{std::move(xhat), std::move(inv_std)};
  return y;
}

Tensor BatchNormLayer::backward(const Tensor& grad_out, const LayerCache& cache) {
  const auto& c = expect_cache<BatchNormCache>(cache, "batchnorm");
  const ChannelView v = channel_view(c.xhat);
  require(grad_out.same_shape(c.xhat), ErrorCode::ShapeMismatch,
          "batchnorm gradient shape mismatch");
  const double m = static_cast<double>(v.batch * v.spatial);

  std::vector<double> sum1(v.channels, 0.0), sum2(v.channels, 0.0);
  for (std::size_t s = 0; s < v.batch; ++s) {
    for (std::size_t ch = 0; ch < v.channels; ++ch) {
      const std::size_t base = (s * v.channels + ch) * v.spatial;
      const double* gs = grad_out.data() + base;
      const double* hs = c.xhat.data() + base;
      double a1 = 0.0, a2 = 0.0;
      for (std::size_t p = 0; p < v.spatial; ++p) {
        a1 += gs[p];
        a2 += gs[p] * hs[p];
      }
      sum1[ch] += a1;
      sum2[ch] += a2;
    }
  }
  for (std::size_t ch = 0; ch < v.channels; ++ch) {
    dbeta_[ch] = sum1[ch];
    dgamma_[ch] = sum2[ch];
  }

  Tensor dx(grad_out.shape());
  const auto bi = static_cast<std::ptrdiff_t>(v.batch);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t s = 0; s < bi; ++s) {
    for (std::size_t ch = 0; ch < v.channels; ++ch) {
      const std::size_t base = (static_cast<std::size_t>(s) * v.channels + ch) * v.spatial;
      const double* gs = grad_out.data() + base;
      const double* hs = c.xhat.data() + base;
      double* dxs = dx.data() + base;
      const double g = gamma_[ch];
      const double istd = c.inv_std[ch];
      const double k1 = sum1[ch] / m;
      const double k2 = sum2[ch] / m;
      for (std::size_t p = 0; p < v.spatial; ++p) {
        dxs[p] = g * istd * (gs[p] - k1 - hs[p] * k2);
      }
    }
  }
  return dx;
}

void BatchNormLayer::collect_weights(std::vector<ParamRef>& out) {
  out.push_back({"batchnorm.gamma", &gamma_, &dgamma_});
  out.push_back({"batchnorm.beta", &beta_, &dbeta_});
}

// ------------------------------------------------------------------ MDN

MdnLayer::MdnLayer(std::size_t channels, std::size_t meta_cols, double momentum)
    : channels_(channels) {
  state_.running_beta = Tensor({channels, meta_cols});
  state_.momentum = momentum;
}

Tensor MdnLayer::forward(const Tensor& x, const MetaBatch* meta, Mode mode, LayerCache& cache) {
  check_meta(x, meta, "mdn");
  const ChannelView v = channel_view(x);
  require(v.channels == channels_, ErrorCode::ShapeMismatch, "mdn channel mismatch");

  if (mode == Mode::Eval) {
    require(state_.seen_batches >= 1, ErrorCode::NeverTrained,
            "MDN layer evaluated before any training batch");
    if (x.rank() == 2) return mdn_forward_eval(x, meta->values, meta->roles, state_);
    const auto m_cols = inference_columns(meta->roles);
    std::vector<std::size_t> b_cols(m_cols.size());
    for (std::size_t j = 0; j < m_cols.size(); ++j) b_cols[j] = j;
    return broadcast_subtract(x, metadata_fit(meta->values, state_.running_beta, m_cols, b_cols));
  }

  require(state_.gram_inv != nullptr, ErrorCode::InvalidArgument,
          "MDN layer used before configure_mdn");
  const std::size_t n = meta->dataset_rows ? meta->dataset_rows : state_.gram_inv->source_rows;
  if (x.rank() == 2) {
    Tensor r = mdn_forward_train(x, meta->values, state_, n);
    cache = MdnCache{meta->values, n};
    return r;
  }
  const Tensor pooled = pool_channels(x);
  const Tensor beta = batch_beta_estimate_channels(*state_.gram_inv, meta->values, pooled, n);
  for (std::size_t i = 0; i < beta.size(); ++i) {
    state_.running_beta[i] =
        state_.momentum * state_.running_beta[i] + (1.0 - state_.momentum) * beta[i];
  }
  state_.seen_batches += 1;
  std::vector<std::size_t> all(meta->values.dim(1));
  for (std::size_t j = 0; j < all.size(); ++j) all[j] = j;
  cache = MdnCache{meta->values, n};
  return broadcast_subtract(x, metadata_fit(meta->values, beta, all, all));
}

Tensor MdnLayer::backward(const Tensor& grad_out, const LayerCache& cache) {
  const auto& c = expect_cache<MdnCache>(cache, "mdn");
  const ChannelView v = channel_view(grad_out);
  const std::size_t b = c.m_batch.dim(0);
  require(v.batch == b, ErrorCode::ShapeMismatch, "mdn gradient batch mismatch");
  const double nb = static_cast<double>(c.dataset_rows) / static_cast<double>(b);

  // The train residual is linear in the features:
  //   r = (I − (N/b)·M·G·Mᵀ) f  per channel, and the operator is symmetric.
  if (grad_out.rank() == 2) {
    const Tensor corr = gram_projection(grad_out, c.m_batch, *state_.gram_inv, nb);
    Tensor dx = grad_out;
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] -= corr[i];
    return dx;
  }
  // Pooled case: the correction spreads evenly over the spatial extent.
  Tensor gsum({v.batch, v.channels});
  for (std::size_t s = 0; s < v.batch; ++s) {
    for (std::size_t ch = 0; ch < v.channels; ++ch) {
      const double* gs = grad_out.data() + (s * v.channels + ch) * v.spatial;
      double acc = 0.0;
      for (std::size_t p = 0; p < v.spatial; ++p) acc += gs[p];
      gsum(s, ch) = acc;
    }
  }
  const Tensor corr =
      gram_projection(gsum, c.m_batch, *state_.gram_inv, nb / static_cast<double>(v.spatial));
  Tensor dx = grad_out;
  const auto bi = static_cast<std::ptrdiff_t>(v.batch);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t s = 0; s < bi; ++s) {
    for (std::size_t ch = 0; ch < v.channels; ++ch) {
      const double sub = corr(static_cast<std::size_t>(s), ch);
      double* dxs = dx.data() + (static_cast<std::size_t>(s) * v.channels + ch) * v.spatial;
      for (std::size_t p = 0; p < v.spatial; ++p) dxs[p] -= sub;
    }
  }
  return dx;
}

// ----------------------------------------------------------------- PMDN

PmdnLayer::PmdnLayer(std::size_t channels, std::size_t meta_cols) : channels_(channels) {
  params_.beta = Tensor({channels, meta_cols});
}

Tensor PmdnLayer::forward(const Tensor& x, const MetaBatch* meta, Mode mode, LayerCache& cache) {
  check_meta(x, meta, "pmdn");
  const ChannelView v = channel_view(x);
  require(v.channels == channels_, ErrorCode::ShapeMismatch, "pmdn channel mismatch");

  if (x.rank() == 2) {
    Tensor r = pmdn_forward(x, meta->values, meta->roles, params_, mode);
    if (mode == Mode::Train) cache = PmdnCache{x, meta->values};
    return r;
  }

  const Tensor pooled = pool_channels(x);
  std::vector<std::size_t> m_cols, b_cols;
  if (mode == Mode::Train) {
    require(meta->values.dim(1) == params_.meta_cols(), ErrorCode::ShapeMismatch,
            "pmdn metadata column count does not match β");
    m_cols.resize(meta->values.dim(1));
    for (std::size_t j = 0; j < m_cols.size(); ++j) m_cols[j] = j;
    b_cols = m_cols;
  } else {
    m_cols = inference_columns(meta->roles);
    require(m_cols.size() <= params_.meta_cols(), ErrorCode::ShapeMismatch,
            "more inference columns than β entries");
    b_cols.resize(m_cols.size());
    for (std::size_t j = 0; j < m_cols.size(); ++j) b_cols[j] = j;
  }
  Tensor out = broadcast_subtract(x, metadata_fit(meta->values, params_.beta, m_cols, b_cols));
  if (mode == Mode::Train) cache = PmdnCache{pooled, meta->values};
  return out;
}

Tensor PmdnLayer::backward(const Tensor& grad_out, const LayerCache& cache) {
  expect_cache<PmdnCache>(cache, "pmdn");
  // β is frozen during the task-loss pass; the residual map is then an
  // identity in the features.
  return grad_out;
}

// -------------------------------------------------------------- Network

Network::Network(const std::vector<LayerSpec>& specs, std::vector<std::size_t> input_shape,
                 std::size_t meta_cols, std::uint64_t seed)
    : input_shape_(std::move(input_shape)),
      meta_cols_(meta_cols),
      seed_(seed),
      instance_id_(g_next_network_id.fetch_add(1)) {
  require(!specs.empty(), ErrorCode::InvalidArgument, "network needs at least one layer");
  std::vector<std::size_t> shape = input_shape_;
  for (const LayerSpec& s : specs) {
    std::unique_ptr<Layer> layer;
    switch (s.kind) {
      case LayerKind::Dense: layer = std::make_unique<DenseLayer>(s.a, s.b); break;
      case LayerKind::Relu: layer = std::make_unique<ReluLayer>(); break;
      case LayerKind::Conv2d: layer = std::make_unique<Conv2dLayer>(s.a, s.b); break;
      case LayerKind::Flatten: layer = std::make_unique<FlattenLayer>(); break;
      case LayerKind::LayerNorm: layer = std::make_unique<LayerNormLayer>(s.a); break;
      case LayerKind::BatchNorm: layer = std::make_unique<BatchNormLayer>(s.a, s.momentum); break;
      case LayerKind::Mdn: layer = std::make_unique<MdnLayer>(s.a, meta_cols, s.momentum); break;
      case LayerKind::Pmdn: layer = std::make_unique<PmdnLayer>(s.a, meta_cols); break;
    }
    shape = layer->output_shape(shape);  // throws on bad composition
    out_shapes_.push_back(shape);
    layers_.push_back(std::move(layer));
  }
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    layers_[i]->init_params(mix_seed(seed_, i));
  }
}

Tensor Network::forward(const Tensor& x, const MetaBatch* meta, Mode mode, ForwardTape* tape,
                        std::size_t upto) const {
  require(x.rank() == input_shape_.size() + 1, ErrorCode::ShapeMismatch,
          "input rank does not match network input shape");
  for (std::size_t i = 0; i < input_shape_.size(); ++i) {
    require(x.dim(i + 1) == input_shape_[i], ErrorCode::ShapeMismatch,
            "input shape " + shape_to_string(x.shape()) + " does not match network input");
  }
  if (meta != nullptr) {
    require(meta->values.dim(0) == x.dim(0), ErrorCode::ShapeMismatch,
            "metadata rows do not match batch size");
  }
  if (tape != nullptr) {
    tape->mode = mode;
    tape->network_id = instance_id_;
    tape->slots.assign(layers_.size(), LayerCache{});
  }
  const std::size_t end = std::min(upto, layers_.size());
  Tensor cur = x;
  LayerCache scratch;
  for (std::size_t i = 0; i < end; ++i) {
    LayerCache& slot = tape != nullptr ? tape->slots[i] : scratch;
    // Running statistics make train-mode forward stateful; const-ness is
    // a promise about the eval path only.
    Layer* layer = const_cast<Layer*>(layers_[i].get());
    cur = layer->forward(cur, meta, mode, slot);
    cur.ensure_finite("layer " + std::to_string(i) + " (" + layers_[i]->name() + ") output");
    if (tape == nullptr) scratch = LayerCache{};
  }
  return cur;
}

Tensor Network::forward_features(const Tensor& x, const MetaBatch* meta) const {
  require(feature_probe_ != SIZE_MAX, ErrorCode::InvalidArgument, "no feature probe configured");
  return forward(x, meta, Mode::Eval, nullptr, feature_probe_ + 1);
}

Tensor Network::backward(const ForwardTape& tape, const Tensor& dlogits) {
  require(tape.network_id == instance_id_, ErrorCode::TapeMismatch,
          "tape belongs to a different network");
  require(tape.mode == Mode::Train, ErrorCode::TapeMismatch, "backward needs a train-mode tape");
  require(tape.slots.size() == layers_.size(), ErrorCode::TapeMismatch,
          "tape layer count mismatch");
  Tensor grad = dlogits;
  const auto& last_shape = out_shapes_.back();
  if (grad.rank() == 1 && last_shape.size() == 1 && last_shape[0] == 1) {
    grad = grad.reshaped({grad.size(), 1});
  }
  for (std::size_t i = layers_.size(); i-- > 0;) {
    grad = layers_[i]->backward(grad, tape.slots[i]);
  }
  return grad;
}

std::vector<ParamRef> Network::weight_params() {
  std::vector<ParamRef> out;
  for (auto& layer : layers_) layer->collect_weights(out);
  return out;
}

std::vector<PmdnLayer*> Network::pmdn_layers() {
  std::vector<PmdnLayer*> out;
  for (auto& layer : layers_) {
    if (auto* p = dynamic_cast<PmdnLayer*>(layer.get())) out.push_back(p);
  }
  return out;
}

std::vector<MdnLayer*> Network::mdn_layers() {
  std::vector<MdnLayer*> out;
  for (auto& layer : layers_) {
    if (auto* p = dynamic_cast<MdnLayer*>(layer.get())) out.push_back(p);
  }
  return out;
}

std::size_t Network::param_count() {
  std::size_t n = 0;
  for (const ParamRef& p : weight_params()) n += p.value->size();
  for (PmdnLayer* p : pmdn_layers()) n += p->params().beta.size();
  return n;
}

void Network::configure_mdn(std::shared_ptr<const GramInverse> gram) {
  for (MdnLayer* layer : mdn_layers()) layer->configure(gram);
}

void Network::set_feature_probe(std::size_t layer_index) {
  require(layer_index < layers_.size(), ErrorCode::InvalidArgument,
          "feature probe index out of range");
  feature_probe_ = layer_index;
}

const char* norm_mode_name(NormMode mode) {
  switch (mode) {
    case NormMode::None: return "baseline";
    case NormMode::BatchNorm: return "batchnorm";
    case NormMode::Mdn: return "mdn";
    case NormMode::Pmdn: return "pmdn";
  }
  return "unknown";
}

NormMode norm_mode_from_name(const std::string& name) {
  if (name == "baseline" || name == "none") return NormMode::None;
  if (name == "batchnorm") return NormMode::BatchNorm;
  if (name == "mdn") return NormMode::Mdn;
  if (name == "pmdn") return NormMode::Pmdn;
  fail(ErrorCode::InvalidArgument, "unknown method '" + name + "'");
}

std::vector<LayerSpec> baseline_cnn_specs(const BaselineCnnConfig& cfg) {
  std::vector<LayerSpec> specs;
  auto norm_slot = [&](std::size_t channels) {
    switch (cfg.norm) {
      case NormMode::None: break;
      case NormMode::BatchNorm: specs.push_back(LayerSpec::batch_norm(channels)); break;
      case NormMode::Mdn: specs.push_back(LayerSpec::mdn(channels)); break;
      case NormMode::Pmdn:
        specs.push_back(LayerSpec::layer_norm(channels));
        specs.push_back(LayerSpec::pmdn(channels));
        break;
    }
  };
  specs.push_back(LayerSpec::conv2d(1, cfg.conv1_filters));
  norm_slot(cfg.conv1_filters);
  specs.push_back(LayerSpec::relu());
  specs.push_back(LayerSpec::conv2d(cfg.conv1_filters, cfg.conv2_filters));
  norm_slot(cfg.conv2_filters);
  specs.push_back(LayerSpec::relu());
  specs.push_back(LayerSpec::flatten());
  specs.push_back(
      LayerSpec::dense(cfg.conv2_filters * cfg.image_hw * cfg.image_hw, cfg.fc_units));
  norm_slot(cfg.fc_units);
  specs.push_back(LayerSpec::relu());
  specs.push_back(LayerSpec::dense(cfg.fc_units, 1));
  return specs;
}

std::size_t baseline_probe_index(const BaselineCnnConfig& cfg) {
  // Index of the layer producing the post-normalization activations of
  // the first FC layer (its ReLU input).
  const std::size_t slot = cfg.norm == NormMode::None ? 0 : (cfg.norm == NormMode::Pmdn ? 2 : 1);
  const std::size_t per_conv_block = 2 + slot;  // conv, [norms], relu
  return 2 * per_conv_block + 1 + slot;         // + flatten, dense, [norms]
}

}  // namespace cguard
