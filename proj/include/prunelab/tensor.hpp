#pragma once

#include <prunelab/error.hpp>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace prunelab {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_volume(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

// Dense row-major array of 32-bit reals.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, float fill = 0.0f) : shape_(std::move(shape)) {
    for (auto extent : shape_) {
      if (extent == 0) fail(ErrorKind::structural, "tensor extents must be positive, got " + shape_string(shape_));
    }
    data_.assign(shape_volume(shape_), fill);
  }

  Tensor(Shape shape, std::vector<float> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_volume(shape_) != data_.size()) {
      fail(ErrorKind::structural, "tensor data length " + std::to_string(data_.size()) +
                                      " does not match shape " + shape_string(shape_));
    }
  }

  static Tensor zeros_like(const Tensor& other) { return Tensor(other.shape_); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  float* data() noexcept { return data_.data(); }
  const float* data() const noexcept { return data_.data(); }
  std::span<float> values() noexcept { return data_; }
  std::span<const float> values() const noexcept { return data_; }

  float& operator[](std::size_t i) noexcept { return data_[i]; }
  float operator[](std::size_t i) const noexcept { return data_[i]; }

  // 4-d accessor for [N,C,H,W] style tensors.
  float& at(std::size_t a, std::size_t b, std::size_t c, std::size_t d) {
    return data_[((a * shape_[1] + b) * shape_[2] + c) * shape_[3] + d];
  }
  float at(std::size_t a, std::size_t b, std::size_t c, std::size_t d) const {
    return data_[((a * shape_[1] + b) * shape_[2] + c) * shape_[3] + d];
  }

  void fill(float v) { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const noexcept {
    for (float v : data_) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<float> data_;
};

// Non-finite checks run in debug builds and whenever PRUNELAB_CHECK_FINITE is defined (tests do).
#if !defined(NDEBUG) || defined(PRUNELAB_CHECK_FINITE)
inline constexpr bool kCheckFinite = true;
#else
inline constexpr bool kCheckFinite = false;
#endif

inline void check_finite(const Tensor& t, const char* where) {
  if constexpr (kCheckFinite) {
    if (!t.all_finite()) fail(ErrorKind::numeric, std::string("non-finite value produced by ") + where);
  }
}

inline void require_shape(const Tensor& t, const Shape& expected, const std::string& what) {
  if (t.shape() != expected) {
    fail(ErrorKind::structural,
         what + ": expected shape " + shape_string(expected) + ", got " + shape_string(t.shape()));
  }
}

}  // namespace prunelab
