#pragma once

// Shared helpers for the test suites: seeded random tensors and finite-difference oracles.

#include <prunelab/tensor.hpp>

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

namespace prunelab::testing {

inline Tensor random_tensor(const Shape& shape, std::uint64_t seed, float scale = 1.0f) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> dist(0.0f, scale);
  Tensor t(shape);
  for (auto& v : t.values()) v = dist(rng);
  return t;
}

// ||a - b|| / max(||a||, ||b||), the norm-wise relative error used by every gradient check.
inline double relative_error(const Tensor& a, const Tensor& b) {
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - b[i];
    diff += d * d;
    na += static_cast<double>(a[i]) * a[i];
    nb += static_cast<double>(b[i]) * b[i];
  }
  const double denom = std::max({std::sqrt(na), std::sqrt(nb), 1e-12});
  return std::sqrt(diff) / denom;
}

// Projection objective sum(out * weights) evaluated in double.
inline double project(const Tensor& out, const Tensor& weights) {
  double s = 0.0;
  for (std::size_t i = 0; i < out.size(); ++i) s += static_cast<double>(out[i]) * weights[i];
  return s;
}

// Central differences of a scalar function with respect to every element of `x`.
inline Tensor numeric_gradient(Tensor& x, const std::function<double()>& objective, float h = 1e-3f) {
  Tensor grad(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const float saved = x[i];
    x[i] = saved + h;
    const double plus = objective();
    x[i] = saved - h;
    const double minus = objective();
    x[i] = saved;
    grad[i] = static_cast<float>((plus - minus) / (2.0 * h));
  }
  return grad;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(static_cast<double>(a[i]) - b[i]));
  return m;
}

}  // namespace prunelab::testing
