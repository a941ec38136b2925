#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <variant>
#include <vector>

#include "cguard/mdn.hpp"
#include "cguard/tensor.hpp"

namespace cguard {

enum class LayerKind : std::uint8_t {
  Dense = 1,
  Relu = 2,
  Conv2d = 3,
  Flatten = 4,
  LayerNorm = 5,
  BatchNorm = 6,
  Mdn = 7,
  Pmdn = 8,
};

const char* layer_kind_name(LayerKind kind);

/// Declarative layer description; `a`/`b` meaning depends on the kind
/// (Dense: in/out, Conv2d: in_ch/out_ch, norms: dim, Mdn/Pmdn: channels).
struct LayerSpec {
  LayerKind kind;
  std::size_t a = 0;
  std::size_t b = 0;
  double momentum = 0.9;

  static LayerSpec dense(std::size_t in, std::size_t out) { return {LayerKind::Dense, in, out, 0.0}; }
  static LayerSpec relu() { return {LayerKind::Relu, 0, 0, 0.0}; }
  static LayerSpec conv2d(std::size_t in_ch, std::size_t out_ch) {
    return {LayerKind::Conv2d, in_ch, out_ch, 0.0};
  }
  static LayerSpec flatten() { return {LayerKind::Flatten, 0, 0, 0.0}; }
  static LayerSpec layer_norm(std::size_t dim) { return {LayerKind::LayerNorm, dim, 0, 0.0}; }
  static LayerSpec batch_norm(std::size_t dim, double momentum = 0.9) {
    return {LayerKind::BatchNorm, dim, 0, momentum};
  }
  static LayerSpec mdn(std::size_t channels, double momentum = 0.9) {
    return {LayerKind::Mdn, channels, 0, momentum};
  }
  static LayerSpec pmdn(std::size_t channels) { return {LayerKind::Pmdn, channels, 0, 0.0}; }
};

/// Metadata rows travelling with a batch. Training batches carry the
/// LabelAug column; eval batches may or may not (layers drop it by role).
struct MetaBatch {
  Tensor values;  // b×K
  std::vector<ColumnRole> roles;
  std::size_t dataset_rows = 0;  // N of the full training metadata

  static MetaBatch from_rows(const MetadataMatrix& m, const std::vector<std::size_t>& idx,
                             std::size_t dataset_rows);
  static MetaBatch whole(const MetadataMatrix& m, std::size_t dataset_rows);
};

struct ParamRef {
  std::string name;
  Tensor* value = nullptr;
  Tensor* grad = nullptr;
};

struct DenseCache {
  Tensor input;
};
struct ConvCache {
  Tensor input;
};
struct ReluCache {
  Tensor input;
};
struct FlattenCache {
  std::vector<std::size_t> in_shape;
};
struct LayerNormCache {
  Tensor xhat;
  Tensor inv_std;  // per sample
};
struct BatchNormCache {
  Tensor xhat;
  Tensor inv_std;  // per channel
};
struct MdnCache {
  Tensor m_batch;  // b×K
  std::size_t dataset_rows = 0;
};
struct PmdnCache {
  Tensor pooled;   // b×C features seen by the penalty loss
  Tensor m_batch;  // b×K
};

using LayerCache = std::variant<std::monostate, DenseCache, ConvCache, ReluCache, FlattenCache,
                                LayerNormCache, BatchNormCache, MdnCache, PmdnCache>;

/// Per-forward record of everything backward needs. Eval-mode tapes keep
/// the slots empty.
struct ForwardTape {
  Mode mode = Mode::Train;
  std::uint64_t network_id = 0;
  std::vector<LayerCache> slots;
  std::vector<std::size_t> batch_indices;
};

class Layer {
 public:
  virtual ~Layer() = default;

  virtual LayerSpec spec() const = 0;
  virtual std::string name() const = 0;
  virtual std::vector<std::size_t> output_shape(const std::vector<std::size_t>& in) const = 0;

  virtual Tensor forward(const Tensor& x, const MetaBatch* meta, Mode mode, LayerCache& cache) = 0;
  /// Consumes the cache written by a train-mode forward; fills this
  /// layer's parameter gradients and returns the input gradient.
  virtual Tensor backward(const Tensor& grad_out, const LayerCache& cache) = 0;

  /// Parameters updated by the task-loss optimizer (never PMDN β).
  virtual void collect_weights(std::vector<ParamRef>& out) { (void)out; }
  /// Persistent tensors in checkpoint order (params, running stats, β).
  virtual std::vector<Tensor*> state_tensors() { return {}; }

  virtual void init_params(std::uint64_t seed) { (void)seed; }
};

class DenseLayer final : public Layer {
 public:
  DenseLayer(std::size_t in, std::size_t out);
  LayerSpec spec() const override { return LayerSpec::dense(in_, out_); }
  std::string name() const override;
  std::vector<std::size_t> output_shape(const std::vector<std::size_t>& in) const override;
  Tensor forward(const Tensor& x, const MetaBatch* meta, Mode mode, LayerCache& cache) override;
  Tensor backward(const Tensor& grad_out, const LayerCache& cache) override;
  void collect_weights(std::vector<ParamRef>& out) override;
  std::vector<Tensor*> state_tensors() override { return {&weight_, &bias_}; }
  void init_params(std::uint64_t seed) override;

  Tensor& weight() { return weight_; }
  Tensor& bias() { return bias_; }

 private:
  std::size_t in_, out_;
  Tensor weight_, bias_;
  Tensor dweight_, dbias_;
};

class ReluLayer final : public Layer {
 public:
  LayerSpec spec() const override { return LayerSpec::relu(); }
  std::string name() const override { return "relu"; }
  std::vector<std::size_t> output_shape(const std::vector<std::size_t>& in) const override {
    return in;
  }
  Tensor forward(const Tensor& x, const MetaBatch* meta, Mode mode, LayerCache& cache) override;
  Tensor backward(const Tensor& grad_out, const LayerCache& cache) override;
};

class Conv2dLayer final : public Layer {
 public:
  Conv2dLayer(std::size_t in_ch, std::size_t out_ch);
  LayerSpec spec() const override { return LayerSpec::conv2d(in_ch_, out_ch_); }
  std::string name() const override;
  std::vector<std::size_t> output_shape(const std::vector<std::size_t>& in) const override;
  Tensor forward(const Tensor& x, const MetaBatch* meta, Mode mode, LayerCache& cache) override;
  Tensor backward(const Tensor& grad_out, const LayerCache& cache) override;
  void collect_weights(std::vector<ParamRef>& out) override;
  std::vector<Tensor*> state_tensors() override { return {&weight_, &bias_}; }
  void init_params(std::uint64_t seed) override;

 private:
  std::size_t in_ch_, out_ch_;
  Tensor weight_;  // [oc, ic, 3, 3]
  Tensor bias_;
  Tensor dweight_, dbias_;
};

class FlattenLayer final : public Layer {
 public:
  LayerSpec spec() const override { return LayerSpec::flatten(); }
  std::string name() const override { return "flatten"; }
  std::vector<std::size_t> output_shape(const std::vector<std::size_t>& in) const override;
  Tensor forward(const Tensor& x, const MetaBatch* meta, Mode mode, LayerCache& cache) override;
  Tensor backward(const Tensor& grad_out, const LayerCache& cache) override;
};

/// Per-sample normalization over all non-batch dims; affine scale/shift
/// per channel (4-D input) or per feature (2-D input).
class LayerNormLayer final : public Layer {
 public:
  explicit LayerNormLayer(std::size_t dim);
  LayerSpec spec() const override { return LayerSpec::layer_norm(dim_); }
  std::string name() const override { return "layernorm"; }
  std::vector<std::size_t> output_shape(const std::vector<std::size_t>& in) const override;
  Tensor forward(const Tensor& x, const MetaBatch* meta, Mode mode, LayerCache& cache) override;
  Tensor backward(const Tensor& grad_out, const LayerCache& cache) override;
  void collect_weights(std::vector<ParamRef>& out) override;
  std::vector<Tensor*> state_tensors() override { return {&gamma_, &beta_}; }

 private:
  std::size_t dim_;
  Tensor gamma_, beta_;
  Tensor dgamma_, dbeta_;
};

/// Per-channel batch statistics (over batch and spatial dims) with
/// running-average eval statistics.
class BatchNormLayer final : public Layer {
 public:
  BatchNormLayer(std::size_t dim, double momentum);
  LayerSpec spec() const override { return LayerSpec::batch_norm(dim_, momentum_); }
  std::string name() const override { return "batchnorm"; }
  std::vector<std::size_t> output_shape(const std::vector<std::size_t>& in) const override;
  Tensor forward(const Tensor& x, const MetaBatch* meta, Mode mode, LayerCache& cache) override;
  Tensor backward(const Tensor& grad_out, const LayerCache& cache) override;
  void collect_weights(std::vector<ParamRef>& out) override;
  std::vector<Tensor*> state_tensors() override {
    return {&gamma_, &beta_, &running_mean_, &running_var_};
  }

  const Tensor& running_mean() const { return running_mean_; }
  const Tensor& running_var() const { return running_var_; }

 private:
  std::size_t dim_;
  double momentum_;
  Tensor gamma_, beta_;
  Tensor dgamma_, dbeta_;
  Tensor running_mean_, running_var_;
};

/// Closed-form metadata normalization. Conv feature maps are pooled to
/// one scalar per channel for the β fit and the fitted M·β is
/// broadcast-subtracted per channel.
class MdnLayer final : public Layer {
 public:
  MdnLayer(std::size_t channels, std::size_t meta_cols, double momentum);
  LayerSpec spec() const override { return LayerSpec::mdn(channels_, state_.momentum); }
  std::string name() const override { return "mdn"; }
  std::vector<std::size_t> output_shape(const std::vector<std::size_t>& in) const override {
    return in;
  }
  Tensor forward(const Tensor& x, const MetaBatch* meta, Mode mode, LayerCache& cache) override;
  Tensor backward(const Tensor& grad_out, const LayerCache& cache) override;
  std::vector<Tensor*> state_tensors() override { return {&state_.running_beta}; }

  void configure(std::shared_ptr<const GramInverse> gram) { state_.gram_inv = std::move(gram); }
  MdnState& state() { return state_; }
  const MdnState& state() const { return state_; }

 private:
  std::size_t channels_;
  MdnState state_;
};

/// Penalty-method metadata normalization; β is trainable but updated only
/// by the metadata-loss phase, so backward passes gradient through to the
/// features unchanged and never into β.
class PmdnLayer final : public Layer {
 public:
  PmdnLayer(std::size_t channels, std::size_t meta_cols);
  LayerSpec spec() const override { return LayerSpec::pmdn(channels_); }
  std::string name() const override { return "pmdn"; }
  std::vector<std::size_t> output_shape(const std::vector<std::size_t>& in) const override {
    return in;
  }
  Tensor forward(const Tensor& x, const MetaBatch* meta, Mode mode, LayerCache& cache) override;
  Tensor backward(const Tensor& grad_out, const LayerCache& cache) override;
  std::vector<Tensor*> state_tensors() override { return {&params_.beta}; }

  PmdnParams& params() { return params_; }
  const PmdnParams& params() const { return params_; }

 private:
  std::size_t channels_;
  PmdnParams params_;
};

/// Ordered layer stack with hand-written forward/backward. Owned by one
/// trainer at a time; eval-mode forward on a const network is pure.
class Network {
 public:
  Network(const std::vector<LayerSpec>& specs, std::vector<std::size_t> input_shape,
          std::size_t meta_cols, std::uint64_t seed);

  Network(Network&&) = default;
  Network& operator=(Network&&) = default;

  std::size_t layer_count() const { return layers_.size(); }
  Layer& layer(std::size_t i) { return *layers_[i]; }
  const Layer& layer(std::size_t i) const { return *layers_[i]; }
  const std::vector<std::size_t>& input_shape() const { return input_shape_; }
  std::size_t meta_cols() const { return meta_cols_; }
  std::uint64_t seed() const { return seed_; }
  std::uint64_t instance_id() const { return instance_id_; }

  /// Runs layers [0, upto); upto defaults to all. Returns the last
  /// activation. Train mode fills the tape; Eval caches nothing.
  Tensor forward(const Tensor& x, const MetaBatch* meta, Mode mode, ForwardTape* tape,
                 std::size_t upto = SIZE_MAX) const;

  /// Activation of the feature-probe layer (Eval mode, no tape).
  Tensor forward_features(const Tensor& x, const MetaBatch* meta) const;

  /// Backpropagates dL/dlogits through the taped forward, filling every
  /// parameter gradient. PMDN β receives no gradient.
  Tensor backward(const ForwardTape& tape, const Tensor& dlogits);

  std::vector<ParamRef> weight_params();
  std::vector<PmdnLayer*> pmdn_layers();
  std::vector<MdnLayer*> mdn_layers();
  std::size_t param_count();

  /// Installs the shared Gram inverse on every MDN layer.
  void configure_mdn(std::shared_ptr<const GramInverse> gram);

  void set_feature_probe(std::size_t layer_index);
  std::size_t feature_probe() const { return feature_probe_; }

  const std::vector<std::vector<std::size_t>>& layer_output_shapes() const { return out_shapes_; }

 private:
  std::vector<std::unique_ptr<Layer>> layers_;
  std::vector<std::size_t> input_shape_;
  std::vector<std::vector<std::size_t>> out_shapes_;
  std::size_t meta_cols_ = 0;
  std::uint64_t seed_ = 0;
  std::uint64_t instance_id_ = 0;
  std::size_t feature_probe_ = SIZE_MAX;

  // Mutated by train-mode forwards (running stats); conceptually part of
  // training state rather than the pure function, mirroring BatchNorm.
  friend class Trainer;
};

enum class NormMode { None, BatchNorm, Mdn, Pmdn };

const char* norm_mode_name(NormMode mode);
NormMode norm_mode_from_name(const std::string& name);

struct BaselineCnnConfig {
  std::size_t image_hw = 32;
  std::size_t conv1_filters = 16;
  std::size_t conv2_filters = 32;
  std::size_t fc_units = 84;
  NormMode norm = NormMode::None;
};

/// The two-block CNN used by the synthetic experiment, with the chosen
/// normalization inserted after both convolutions and the first FC layer
/// (before the ReLUs); PMDN slots get a LayerNorm in front.
std::vector<LayerSpec> baseline_cnn_specs(const BaselineCnnConfig& cfg);

/// Layer index whose output feeds the dcor² probe (the post-norm
/// activations of the first FC layer).
std::size_t baseline_probe_index(const BaselineCnnConfig& cfg);

}  // namespace cguard
