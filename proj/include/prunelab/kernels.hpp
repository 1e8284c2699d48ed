#pragma once

#include <prunelab/error.hpp>
#include <prunelab/tensor.hpp>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <limits>
#include <span>
#include <string>
#include <thread>
#include <vector>

namespace prunelab {

enum class Mode { train, eval };

// Worker count for intra-kernel parallelism, read once from PRUNELAB_THREADS (default 1).
inline int kernel_threads() {
  static const int threads = [] {
    const char* env = std::getenv("PRUNELAB_THREADS");
    int n = env ? std::atoi(env) : 1;
    return std::max(1, n);
  }();
  return threads;
}

namespace detail {

// Static partition of [0, count) into contiguous chunks. The chunk layout depends only on
// (count, threads), so per-chunk partial sums reduced in chunk order are reproducible.
template <class Fn>
void parallel_chunks(std::size_t count, Fn&& fn) {
  const std::size_t threads = std::min<std::size_t>(static_cast<std::size_t>(kernel_threads()), count);
  if (threads <= 1) {
    fn(std::size_t{0}, std::size_t{0}, count);
    return;
  }
  std::vector<std::jthread> workers;
  workers.reserve(threads);
  for (std::size_t t = 0; t < threads; ++t) {
    workers.emplace_back([&fn, t, threads, count] { fn(t, t * count / threads, (t + 1) * count / threads); });
  }
}

inline std::size_t chunk_count(std::size_t count) {
  return std::max<std::size_t>(1, std::min<std::size_t>(static_cast<std::size_t>(kernel_threads()), count));
}

}  // namespace detail

// ---------------------------------------------------------------------------------------------
// Convolution (bias-free cross-correlation, square odd kernel)

struct ConvParams {
  Tensor weight;  // [out_channels, in_channels, k, k]
  int stride = 1;
  int padding = 0;

  std::size_t out_channels() const { return weight.dim(0); }
  std::size_t in_channels() const { return weight.dim(1); }
  std::size_t kernel_size() const { return weight.dim(2); }
};

inline ConvParams make_conv(std::size_t out_channels, std::size_t in_channels, std::size_t k, int stride) {
  if (k % 2 == 0) fail(ErrorKind::config, "convolution kernel size must be odd, got " + std::to_string(k));
  if (stride != 1 && stride != 2) fail(ErrorKind::config, "convolution stride must be 1 or 2");
  return ConvParams{Tensor({out_channels, in_channels, k, k}), stride, static_cast<int>(k / 2)};
}

inline std::size_t conv_output_extent(std::size_t extent, std::size_t k, int stride, int padding) {
  return (extent + 2 * static_cast<std::size_t>(padding) - k) / static_cast<std::size_t>(stride) + 1;
}

namespace detail {

struct ConvGeometry {
  std::size_t n, cin, h, w, cout, k, stride, pad, ho, wo;
  std::size_t patch() const { return cin * k * k; }
  std::size_t pixels() const { return ho * wo; }
};

inline ConvGeometry conv_geometry(const Tensor& input, const ConvParams& p, const char* layer) {
  if (input.rank() != 4) {
    fail(ErrorKind::structural, std::string(layer) + ": conv input must be 4-d, got " + shape_string(input.shape()));
  }
  if (p.weight.rank() != 4 || p.weight.dim(2) != p.weight.dim(3)) {
    fail(ErrorKind::structural, std::string(layer) + ": conv weight must be [out,in,k,k]");
  }
  ConvGeometry g{};
  g.n = input.dim(0);
  g.cin = input.dim(1);
  g.h = input.dim(2);
  g.w = input.dim(3);
  g.cout = p.out_channels();
  g.k = p.kernel_size();
  g.stride = static_cast<std::size_t>(p.stride);
  g.pad = static_cast<std::size_t>(p.padding);
  if (g.cin != p.in_channels()) {
    fail(ErrorKind::structural, std::string(layer) + ": input has " + std::to_string(g.cin) +
                                    " channels but weight expects " + std::to_string(p.in_channels()));
  }
  if (g.h + 2 * g.pad < g.k || g.w + 2 * g.pad < g.k) {
    fail(ErrorKind::structural, std::string(layer) + ": spatial extent smaller than kernel");
  }
  g.ho = conv_output_extent(g.h, g.k, p.stride, p.padding);
  g.wo = conv_output_extent(g.w, g.k, p.stride, p.padding);
  return g;
}

inline void im2col(const float* x, const ConvGeometry& g, float* col) {
  const std::size_t pixels = g.pixels();
  for (std::size_t c = 0; c < g.cin; ++c) {
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        float* row = col + ((c * g.k + ky) * g.k + kx) * pixels;
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
          float* dst = row + oy * g.wo;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) {
            std::fill(dst, dst + g.wo, 0.0f);
            continue;
          }
          const float* src = x + (c * g.h + static_cast<std::size_t>(iy)) * g.w;
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const std::ptrdiff_t ix =
                static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
            dst[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) ? 0.0f : src[ix];
          }
        }
      }
    }
  }
}

inline void col2im_add(const double* col, const ConvGeometry& g, double* x) {
  const std::size_t pixels = g.pixels();
  for (std::size_t c = 0; c < g.cin; ++c) {
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        const double* row = col + ((c * g.k + ky) * g.k + kx) * pixels;
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
          double* dst = x + (c * g.h + static_cast<std::size_t>(iy)) * g.w;
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const std::ptrdiff_t ix =
                static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
            if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(g.w)) dst[ix] += row[oy * g.wo + ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

inline Tensor conv2d_forward(const Tensor& input, const ConvParams& params, const char* layer = "conv") {
  const auto g = detail::conv_geometry(input, params, layer);
  Tensor out({g.n, g.cout, g.ho, g.wo});
  const std::size_t patch = g.patch();
  const std::size_t pixels = g.pixels();
  const float* w = params.weight.data();

  detail::parallel_chunks(g.n, [&](std::size_t, std::size_t begin, std::size_t end) {
    std::vector<float> col(patch * pixels);
    std::vector<double> acc(pixels);
    for (std::size_t n = begin; n < end; ++n) {
      detail::im2col(input.data() + n * g.cin * g.h * g.w, g, col.data());
      float* dst = out.data() + n * g.cout * pixels;
      for (std::size_t co = 0; co < g.cout; ++co) {
        std::fill(acc.begin(), acc.end(), 0.0);
        const float* wrow = w + co * patch;
        for (std::size_t kk = 0; kk < patch; ++kk) {
          const double wk = wrow[kk];
          const float* src = col.data() + kk * pixels;
          for (std::size_t p = 0; p < pixels; ++p) acc[p] += wk * src[p];
        }
        for (std::size_t p = 0; p < pixels; ++p) dst[co * pixels + p] = static_cast<float>(acc[p]);
      }
    }
  });
  check_finite(out, layer);
  return out;
}

struct ConvGrads {
  Tensor grad_input;
  Tensor grad_weight;
};

inline ConvGrads conv2d_backward(const Tensor& input, const ConvParams& params, const Tensor& grad_out,
                                 const char* layer = "conv") {
  const auto g = detail::conv_geometry(input, params, layer);
  require_shape(grad_out, {g.n, g.cout, g.ho, g.wo}, std::string(layer) + " grad_out");
  const std::size_t patch = g.patch();
  const std::size_t pixels = g.pixels();
  const std::size_t in_volume = g.cin * g.h * g.w;
  const float* w = params.weight.data();

  ConvGrads grads{Tensor(input.shape()), Tensor(params.weight.shape())};
  const std::size_t chunks = detail::chunk_count(g.n);
  std::vector<std::vector<double>> partial_gw(chunks, std::vector<double>(g.cout * patch, 0.0));

  detail::parallel_chunks(g.n, [&](std::size_t chunk, std::size_t begin, std::size_t end) {
    std::vector<float> col(patch * pixels);
    std::vector<double> gcol(patch * pixels);
    std::vector<double> gx(in_volume);
    auto& gw = partial_gw[chunk];
    for (std::size_t n = begin; n < end; ++n) {
      detail::im2col(input.data() + n * in_volume, g, col.data());
      const float* go = grad_out.data() + n * g.cout * pixels;
      std::fill(gcol.begin(), gcol.end(), 0.0);
      for (std::size_t co = 0; co < g.cout; ++co) {
        const float* gorow = go + co * pixels;
        const float* wrow = w + co * patch;
        double* gwrow = gw.data() + co * patch;
        for (std::size_t kk = 0; kk < patch; ++kk) {
          const float* src = col.data() + kk * pixels;
          double dot = 0.0;
          for (std::size_t p = 0; p < pixels; ++p) dot += static_cast<double>(gorow[p]) * src[p];
          gwrow[kk] += dot;
          const double wk = wrow[kk];
          double* dst = gcol.data() + kk * pixels;
          for (std::size_t p = 0; p < pixels; ++p) dst[p] += wk * gorow[p];
        }
      }
      std::fill(gx.begin(), gx.end(), 0.0);
      detail::col2im_add(gcol.data(), g, gx.data());
      float* gi = grads.grad_input.data() + n * in_volume;
      for (std::size_t i = 0; i < in_volume; ++i) gi[i] = static_cast<float>(gx[i]);
    }
  });

  for (std::size_t i = 0; i < g.cout * patch; ++i) {
    double sum = 0.0;
    for (std::size_t c = 0; c < chunks; ++c) sum += partial_gw[c][i];
    grads.grad_weight[i] = static_cast<float>(sum);
  }
  check_finite(grads.grad_input, layer);
  check_finite(grads.grad_weight, layer);
  return grads;
}

// ---------------------------------------------------------------------------------------------
// Batch normalization

struct BatchNormParams {
  Tensor gamma;
  Tensor beta;
  Tensor running_mean;
  Tensor running_var;
  float momentum = 0.1f;
  float eps = 1e-5f;

  std::size_t channels() const { return gamma.size(); }
};

inline BatchNormParams make_batchnorm(std::size_t channels, float momentum = 0.1f, float eps = 1e-5f) {
  return BatchNormParams{Tensor({channels}, 1.0f), Tensor({channels}, 0.0f), Tensor({channels}, 0.0f),
                         Tensor({channels}, 1.0f), momentum, eps};
}

// Per-channel batch statistics; variance is the biased (population) estimate.
struct BatchStats {
  std::vector<double> mean;
  std::vector<double> var;
};

namespace detail {

inline void check_bn_input(const Tensor& x, const BatchNormParams& p, const char* layer) {
  if (x.rank() != 4) fail(ErrorKind::structural, std::string(layer) + ": batchnorm input must be 4-d");
  if (x.dim(1) != p.channels()) {
    fail(ErrorKind::structural, std::string(layer) + ": input has " + std::to_string(x.dim(1)) +
                                    " channels but batchnorm has " + std::to_string(p.channels()));
  }
}

}  // namespace detail

inline BatchStats batch_statistics(const Tensor& x) {
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  const double count = static_cast<double>(n * hw);
  BatchStats stats{std::vector<double>(c, 0.0), std::vector<double>(c, 0.0)};
  for (std::size_t ch = 0; ch < c; ++ch) {
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const float* src = x.data() + (i * c + ch) * hw;
      for (std::size_t j = 0; j < hw; ++j) sum += src[j];
    }
    const double mean = sum / count;
    double sq = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const float* src = x.data() + (i * c + ch) * hw;
      for (std::size_t j = 0; j < hw; ++j) {
        const double d = src[j] - mean;
        sq += d * d;
      }
    }
    stats.mean[ch] = mean;
    stats.var[ch] = sq / count;
  }
  return stats;
}

// Pure forward: never touches running statistics. In train mode the batch statistics used are
// written to `stats_out` when provided.
inline Tensor batchnorm_forward(const Tensor& x, const BatchNormParams& p, Mode mode, BatchStats* stats_out,
                                const char* layer = "batchnorm") {
  detail::check_bn_input(x, p, layer);
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  BatchStats stats;
  if (mode == Mode::train) {
    if (n * hw < 2) fail(ErrorKind::structural, std::string(layer) + ": train-mode batchnorm needs N*H*W >= 2");
    stats = batch_statistics(x);
  } else {
    stats.mean.assign(p.running_mean.values().begin(), p.running_mean.values().end());
    stats.var.assign(p.running_var.values().begin(), p.running_var.values().end());
  }
  Tensor out(x.shape());
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double inv_std = 1.0 / std::sqrt(stats.var[ch] + p.eps);
    const double scale = p.gamma[ch] * inv_std;
    const double shift = p.beta[ch] - stats.mean[ch] * scale;
    for (std::size_t i = 0; i < n; ++i) {
      const float* src = x.data() + (i * c + ch) * hw;
      float* dst = out.data() + (i * c + ch) * hw;
      for (std::size_t j = 0; j < hw; ++j) dst[j] = static_cast<float>(src[j] * scale + shift);
    }
  }
  check_finite(out, layer);
  if (stats_out) *stats_out = std::move(stats);
  return out;
}

// Exponential moving average: running <- (1 - momentum) * running + momentum * batch.
inline void update_running_stats(BatchNormParams& p, const BatchStats& stats) {
  const double m = p.momentum;
  for (std::size_t ch = 0; ch < p.channels(); ++ch) {
    p.running_mean[ch] = static_cast<float>((1.0 - m) * p.running_mean[ch] + m * stats.mean[ch]);
    p.running_var[ch] = static_cast<float>((1.0 - m) * p.running_var[ch] + m * stats.var[ch]);
  }
}

// Stateful forward: in train mode also updates the running statistics of `p`.
inline Tensor batchnorm_forward(const Tensor& x, BatchNormParams& p, Mode mode) {
  BatchStats stats;
  Tensor out = batchnorm_forward(x, std::as_const(p), mode, &stats);
  if (mode == Mode::train) update_running_stats(p, stats);
  return out;
}

struct BatchNormGrads {
  Tensor grad_input;
  Tensor grad_gamma;
  Tensor grad_beta;
};

inline BatchNormGrads batchnorm_backward(const Tensor& x, const BatchNormParams& p, const Tensor& grad_out,
                                         Mode mode = Mode::train, const char* layer = "batchnorm") {
  detail::check_bn_input(x, p, layer);
  require_shape(grad_out, x.shape(), std::string(layer) + " grad_out");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  const double count = static_cast<double>(n * hw);
  BatchStats stats;
  if (mode == Mode::train) {
    stats = batch_statistics(x);
  } else {
    stats.mean.assign(p.running_mean.values().begin(), p.running_mean.values().end());
    stats.var.assign(p.running_var.values().begin(), p.running_var.values().end());
  }

  BatchNormGrads grads{Tensor(x.shape()), Tensor({c}), Tensor({c})};
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double mean = stats.mean[ch];
    const double inv_std = 1.0 / std::sqrt(stats.var[ch] + p.eps);
    double sum_g = 0.0, sum_g_xhat = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const float* src = x.data() + (i * c + ch) * hw;
      const float* go = grad_out.data() + (i * c + ch) * hw;
      for (std::size_t j = 0; j < hw; ++j) {
        sum_g += go[j];
        sum_g_xhat += go[j] * ((src[j] - mean) * inv_std);
      }
    }
    grads.grad_beta[ch] = static_cast<float>(sum_g);
    grads.grad_gamma[ch] = static_cast<float>(sum_g_xhat);
    const double gamma = p.gamma[ch];
    for (std::size_t i = 0; i < n; ++i) {
      const float* src = x.data() + (i * c + ch) * hw;
      const float* go = grad_out.data() + (i * c + ch) * hw;
      float* gi = grads.grad_input.data() + (i * c + ch) * hw;
      for (std::size_t j = 0; j < hw; ++j) {
        if (mode == Mode::train) {
          const double xhat = (src[j] - mean) * inv_std;
          gi[j] = static_cast<float>(gamma * inv_std / count * (count * go[j] - sum_g - xhat * sum_g_xhat));
        } else {
          gi[j] = static_cast<float>(gamma * inv_std * go[j]);
        }
      }
    }
  }
  check_finite(grads.grad_input, layer);
  return grads;
}

// ---------------------------------------------------------------------------------------------
// ReLU, global average pooling, linear, softmax cross-entropy

inline Tensor relu_forward(const Tensor& x) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] > 0.0f ? x[i] : 0.0f;
  return out;
}

inline Tensor relu_backward(const Tensor& input, const Tensor& grad_out) {
  require_shape(grad_out, input.shape(), "relu grad_out");
  Tensor gi(input.shape());
  for (std::size_t i = 0; i < input.size(); ++i) gi[i] = input[i] > 0.0f ? grad_out[i] : 0.0f;
  return gi;
}

inline Tensor global_avg_pool_forward(const Tensor& x) {
  if (x.rank() != 4) fail(ErrorKind::structural, "global_avg_pool input must be 4-d");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor out({n, c});
  for (std::size_t i = 0; i < n * c; ++i) {
    double sum = 0.0;
    for (std::size_t j = 0; j < hw; ++j) sum += x[i * hw + j];
    out[i] = static_cast<float>(sum / static_cast<double>(hw));
  }
  return out;
}

inline Tensor global_avg_pool_backward(const Shape& input_shape, const Tensor& grad_out) {
  const std::size_t n = input_shape.at(0), c = input_shape.at(1), hw = input_shape.at(2) * input_shape.at(3);
  require_shape(grad_out, {n, c}, "global_avg_pool grad_out");
  Tensor gi(input_shape);
  for (std::size_t i = 0; i < n * c; ++i) {
    const float v = static_cast<float>(grad_out[i] / static_cast<double>(hw));
    std::fill(gi.data() + i * hw, gi.data() + (i + 1) * hw, v);
  }
  return gi;
}

struct LinearParams {
  Tensor weight;  // [out, in]
  Tensor bias;    // [out]

  std::size_t in_features() const { return weight.dim(1); }
  std::size_t out_features() const { return weight.dim(0); }
};

inline LinearParams make_linear(std::size_t out_features, std::size_t in_features) {
  return LinearParams{Tensor({out_features, in_features}), Tensor({out_features})};
}

inline Tensor linear_forward(const Tensor& x, const LinearParams& p) {
  if (x.rank() != 2 || x.dim(1) != p.in_features()) {
    fail(ErrorKind::structural, "linear: input " + shape_string(x.shape()) + " incompatible with " +
                                    std::to_string(p.in_features()) + " input features");
  }
  const std::size_t n = x.dim(0), in = p.in_features(), out_f = p.out_features();
  Tensor out({n, out_f});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t o = 0; o < out_f; ++o) {
      double acc = p.bias[o];
      for (std::size_t k = 0; k < in; ++k) acc += static_cast<double>(x[i * in + k]) * p.weight[o * in + k];
      out[i * out_f + o] = static_cast<float>(acc);
    }
  }
  check_finite(out, "linear");
  return out;
}

struct LinearGrads {
  Tensor grad_input;
  Tensor grad_weight;
  Tensor grad_bias;
};

inline LinearGrads linear_backward(const Tensor& x, const LinearParams& p, const Tensor& grad_out) {
  const std::size_t n = x.dim(0), in = p.in_features(), out_f = p.out_features();
  require_shape(grad_out, {n, out_f}, "linear grad_out");
  LinearGrads grads{Tensor(x.shape()), Tensor(p.weight.shape()), Tensor(p.bias.shape())};
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < in; ++k) {
      double acc = 0.0;
      for (std::size_t o = 0; o < out_f; ++o) acc += static_cast<double>(grad_out[i * out_f + o]) * p.weight[o * in + k];
      grads.grad_input[i * in + k] = static_cast<float>(acc);
    }
  }
  for (std::size_t o = 0; o < out_f; ++o) {
    double gb = 0.0;
    for (std::size_t i = 0; i < n; ++i) gb += grad_out[i * out_f + o];
    grads.grad_bias[o] = static_cast<float>(gb);
    for (std::size_t k = 0; k < in; ++k) {
      double gw = 0.0;
      for (std::size_t i = 0; i < n; ++i) gw += static_cast<double>(grad_out[i * out_f + o]) * x[i * in + k];
      grads.grad_weight[o * in + k] = static_cast<float>(gw);
    }
  }
  return grads;
}

struct LossResult {
  double loss = 0.0;   // mean over the batch
  Tensor grad_logits;  // d(mean loss)/d(logits)
};

inline LossResult softmax_cross_entropy(const Tensor& logits, std::span<const int> labels) {
  if (logits.rank() != 2) fail(ErrorKind::structural, "softmax_cross_entropy expects [N,K] logits");
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  if (labels.size() != n) {
    fail(ErrorKind::data, "label count " + std::to_string(labels.size()) + " != batch size " + std::to_string(n));
  }
  LossResult result{0.0, Tensor(logits.shape())};
  std::vector<double> probs(k);
  for (std::size_t i = 0; i < n; ++i) {
    const int label = labels[i];
    if (label < 0 || static_cast<std::size_t>(label) >= k) {
      fail(ErrorKind::data, "label " + std::to_string(label) + " outside [0," + std::to_string(k) + ")");
    }
    const float* row = logits.data() + i * k;
    const double max_logit = *std::max_element(row, row + k);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      probs[j] = std::exp(static_cast<double>(row[j]) - max_logit);
      z += probs[j];
    }
    result.loss += std::log(z) - (row[label] - max_logit);
    for (std::size_t j = 0; j < k; ++j) {
      const double target = (j == static_cast<std::size_t>(label)) ? 1.0 : 0.0;
      result.grad_logits[i * k + j] = static_cast<float>((probs[j] / z - target) / static_cast<double>(n));
    }
  }
  result.loss /= static_cast<double>(n);
  return result;
}

inline void add_inplace(Tensor& dst, const Tensor& src) {
  require_shape(src, dst.shape(), "add");
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace prunelab
