#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <string>
#include <vector>

#include "cguard/error.hpp"

namespace cguard {

/// Dense row-major tensor of 64-bit floats. The only numeric currency
/// between layers; shape is explicit and data length always equals the
/// product of the dimensions.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<std::size_t> shape)
      : shape_(std::move(shape)), data_(checked_numel(shape_), 0.0) {}

  Tensor(std::vector<std::size_t> shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    require(data_.size() == checked_numel(shape_), ErrorCode::ShapeMismatch,
            "tensor data length does not match shape");
  }

  static Tensor zeros(std::vector<std::size_t> shape) { return Tensor(std::move(shape)); }

  static Tensor full(std::vector<std::size_t> shape, double value) {
    Tensor t(std::move(shape));
    for (double& v : t.data_) v = value;
    return t;
  }

  static Tensor scalar(double value) { return Tensor({1}, {value}); }

  static Tensor row_major(std::vector<std::size_t> shape, std::initializer_list<double> values) {
    return Tensor(std::move(shape), std::vector<double>(values));
  }

  static Tensor identity(std::size_t n) {
    Tensor t({n, n});
    for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0;
    return t;
  }

  const std::vector<std::size_t>& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double* data() noexcept { return data_.data(); }
  const double* data() const noexcept { return data_.data(); }
  std::vector<double>& values() noexcept { return data_; }
  const std::vector<double>& values() const noexcept { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double& operator()(std::size_t i) { return data_[i]; }
  double operator()(std::size_t i) const { return data_[i]; }

  double& operator()(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }

  double& operator()(std::size_t i, std::size_t j, std::size_t k) {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }
  double operator()(std::size_t i, std::size_t j, std::size_t k) const {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }

  double& operator()(std::size_t i, std::size_t j, std::size_t k, std::size_t l) {
    return data_[((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l];
  }
  double operator()(std::size_t i, std::size_t j, std::size_t k, std::size_t l) const {
    return data_[((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l];
  }

  /// Same data, new shape; element count must match.
  Tensor reshaped(std::vector<std::size_t> shape) const {
    require(checked_numel(shape) == data_.size(), ErrorCode::ShapeMismatch,
            "reshape changes element count");
    return Tensor(std::move(shape), data_);
  }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  void fill(double value) {
    for (double& v : data_) v = value;
  }

  bool all_finite() const noexcept;

  /// Throws NonFiniteActivation naming `what` if any entry is NaN/Inf.
  void ensure_finite(const std::string& what) const;

  static std::size_t checked_numel(const std::vector<std::size_t>& shape);

 private:
  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

std::string shape_to_string(const std::vector<std::size_t>& shape);

}  // namespace cguard
