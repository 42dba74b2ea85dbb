#pragma once

#include <cmath>
#include <cstddef>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "tracedet/errors.hpp"

namespace tracedet {

using real_t = double;

// Dense row-major tensor of doubles. Shapes are small and fixed, so values
// are copied freely; there is no view machinery.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<std::size_t> shape)
      : shape_(std::move(shape)), values_(count(shape_), 0.0) {}

  Tensor(std::vector<std::size_t> shape, std::vector<real_t> values)
      : shape_(std::move(shape)), values_(std::move(values)) {
    if (values_.size() != count(shape_)) {
      throw shape_error("Tensor: " + std::to_string(values_.size()) +
                        " values for shape " + shape_string(shape_));
    }
  }

  static Tensor zeros(std::vector<std::size_t> shape) { return Tensor(std::move(shape)); }

  static Tensor full(std::vector<std::size_t> shape, real_t v) {
    Tensor t(std::move(shape));
    for (auto& x : t.values_) x = v;
    return t;
  }

  static Tensor scalar(real_t v) { return Tensor({}, {v}); }

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return values_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }

  real_t* data() { return values_.data(); }
  const real_t* data() const { return values_.data(); }
  std::vector<real_t>& values() { return values_; }
  const std::vector<real_t>& values() const { return values_; }

  real_t& operator[](std::size_t i) { return values_[i]; }
  real_t operator[](std::size_t i) const { return values_[i]; }

  template <typename... Idx>
  real_t& at(Idx... idx) {
    return values_[flat_index({static_cast<std::size_t>(idx)...})];
  }

  template <typename... Idx>
  real_t at(Idx... idx) const {
    return values_[flat_index({static_cast<std::size_t>(idx)...})];
  }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  bool all_finite() const {
    for (real_t v : values_) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  real_t item() const {
    if (values_.size() != 1) throw shape_error("Tensor::item: tensor is not scalar");
    return values_[0];
  }

  static std::string shape_string(const std::vector<std::size_t>& shape) {
    std::ostringstream out;
    out << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) out << (i ? "," : "") << shape[i];
    out << "]";
    return out.str();
  }

  static std::size_t count(const std::vector<std::size_t>& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
  }

 private:
  std::size_t flat_index(std::initializer_list<std::size_t> idx) const {
    std::size_t flat = 0;
    std::size_t axis = 0;
    for (std::size_t i : idx) {
      flat = flat * shape_[axis] + i;
      ++axis;
    }
    return flat;
  }

  std::vector<std::size_t> shape_;
  std::vector<real_t> values_;
};

}  // namespace tracedet
