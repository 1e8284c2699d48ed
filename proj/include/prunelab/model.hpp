#pragma once

#include <prunelab/error.hpp>
#include <prunelab/kernels.hpp>
#include <prunelab/tensor.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <compare>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace prunelab {

// ---------------------------------------------------------------------------------------------
// Architecture description

struct GroupSpec {
  std::size_t block_count = 1;
  std::size_t width = 16;
  int stride = 1;  // stride of the first block in the group

  friend bool operator==(const GroupSpec&, const GroupSpec&) = default;
};

struct ArchitectureConfig {
  std::string name = "custom";
  std::array<std::size_t, 3> input_shape{3, 32, 32};  // channels, height, width
  std::size_t num_classes = 10;
  std::size_t stem_width = 16;
  std::vector<GroupSpec> groups;

  friend bool operator==(const ArchitectureConfig&, const ArchitectureConfig&) = default;

  // 3 groups of 9 two-conv residual blocks (CIFAR ResNet-56).
  static ArchitectureConfig resnet56(std::size_t num_classes = 100) {
    return ArchitectureConfig{"ResNet-56", {3, 32, 32}, num_classes, 16, {{9, 16, 1}, {9, 32, 2}, {9, 64, 2}}};
  }

  // Desk-scale three-block network used for fast end-to-end runs.
  static ArchitectureConfig resnet8(std::size_t num_classes = 4, std::size_t image = 16) {
    return ArchitectureConfig{"ResNet-8", {3, image, image}, num_classes, 8, {{1, 8, 1}, {1, 16, 2}, {1, 16, 2}}};
  }

  void check() const {
    if (input_shape[0] == 0 || input_shape[1] == 0 || input_shape[2] == 0) {
      fail(ErrorKind::config, "architecture input_shape extents must be positive");
    }
    if (num_classes == 0) fail(ErrorKind::config, "architecture num_classes must be positive");
    if (stem_width == 0) fail(ErrorKind::config, "architecture stem_width must be positive");
    if (groups.empty()) fail(ErrorKind::config, "architecture needs at least one group");
    std::size_t width = stem_width;
    std::size_t h = input_shape[1], w = input_shape[2];
    for (std::size_t g = 0; g < groups.size(); ++g) {
      const auto& spec = groups[g];
      const std::string where = "architecture group " + std::to_string(g);
      if (spec.block_count == 0) fail(ErrorKind::config, where + ": block_count must be positive");
      if (spec.width == 0) fail(ErrorKind::config, where + ": width must be positive");
      if (spec.stride != 1 && spec.stride != 2) fail(ErrorKind::config, where + ": stride must be 1 or 2");
      if (spec.width < width) fail(ErrorKind::config, where + ": width may not shrink across groups");
      if (spec.stride == 2) {
        if (h < 2 || w < 2) fail(ErrorKind::config, where + ": spatial extent too small to downsample");
        h = (h + 1) / 2;
        w = (w + 1) / 2;
      }
      width = spec.width;
    }
  }
};

// ---------------------------------------------------------------------------------------------
// Blocks and the model graph

// Stable identity of a residual block: (group, position at build time). Never reused.
struct BlockId {
  int group = 0;
  int position = 0;

  auto operator<=>(const BlockId&) const = default;

  std::string str() const { return "g" + std::to_string(group) + ".b" + std::to_string(position); }

  static BlockId parse(const std::string& text) {
    BlockId id;
    char dot = 0, b = 0;
    if (text.size() < 4 || text[0] != 'g' ||
        std::sscanf(text.c_str(), "g%d%c%c%d", &id.group, &dot, &b, &id.position) != 4 || dot != '.' || b != 'b') {
      fail(ErrorKind::format, "malformed block id '" + text + "'");
    }
    return id;
  }
};

enum class ShortcutKind { identity, pad_downsample };

struct ResidualBlock {
  BlockId id;
  ConvParams conv1;
  BatchNormParams bn1;
  ConvParams conv2;
  BatchNormParams bn2;
  ShortcutKind shortcut = ShortcutKind::identity;
  std::size_t mid_channels = 0;  // conv1 output width; the only width channel pruning touches
  bool is_prunable = true;

  std::size_t in_channels() const { return conv1.in_channels(); }
  std::size_t out_channels() const { return conv2.out_channels(); }
  int stride() const { return conv1.stride; }
};

struct ModelGraph {
  ArchitectureConfig config;
  ConvParams stem_conv;
  BatchNormParams stem_bn;
  std::vector<ResidualBlock> blocks;
  LinearParams head;
  std::uint64_t step = 0;
  std::uint64_t epoch = 0;
  std::uint64_t revision = 0;  // bumped by every structural surgery
  std::vector<BlockId> retired;

  const ResidualBlock* find_block(const BlockId& id) const {
    for (const auto& b : blocks) {
      if (b.id == id) return &b;
    }
    return nullptr;
  }
  ResidualBlock* find_block(const BlockId& id) {
    return const_cast<ResidualBlock*>(std::as_const(*this).find_block(id));
  }

  std::size_t prunable_block_count() const {
    return static_cast<std::size_t>(std::count_if(blocks.begin(), blocks.end(), [](const auto& b) { return b.is_prunable; }));
  }
};

inline ModelGraph build_model(const ArchitectureConfig& config, std::uint64_t init_seed) {
  config.check();
  std::mt19937_64 rng(init_seed);
  auto kaiming = [&rng](ConvParams& conv) {
    const double fan_in = static_cast<double>(conv.in_channels() * conv.kernel_size() * conv.kernel_size());
    std::normal_distribution<float> dist(0.0f, static_cast<float>(std::sqrt(2.0 / fan_in)));
    for (auto& v : conv.weight.values()) v = dist(rng);
  };

  ModelGraph model;
  model.config = config;
  model.stem_conv = make_conv(config.stem_width, config.input_shape[0], 3, 1);
  kaiming(model.stem_conv);
  model.stem_bn = make_batchnorm(config.stem_width);

  std::size_t in_width = config.stem_width;
  for (std::size_t g = 0; g < config.groups.size(); ++g) {
    const auto& spec = config.groups[g];
    for (std::size_t pos = 0; pos < spec.block_count; ++pos) {
      ResidualBlock block;
      block.id = BlockId{static_cast<int>(g), static_cast<int>(pos)};
      const int stride = pos == 0 ? spec.stride : 1;
      block.conv1 = make_conv(spec.width, in_width, 3, stride);
      block.bn1 = make_batchnorm(spec.width);
      block.conv2 = make_conv(spec.width, spec.width, 3, 1);
      block.bn2 = make_batchnorm(spec.width);
      kaiming(block.conv1);
      kaiming(block.conv2);
      block.mid_channels = spec.width;
      const bool downsample = stride != 1 || in_width != spec.width;
      block.shortcut = downsample ? ShortcutKind::pad_downsample : ShortcutKind::identity;
      block.is_prunable = !downsample;
      model.blocks.push_back(std::move(block));
      in_width = spec.width;
    }
  }

  model.head = make_linear(config.num_classes, in_width);
  const float bound = static_cast<float>(1.0 / std::sqrt(static_cast<double>(in_width)));
  std::uniform_real_distribution<float> head_dist(-bound, bound);
  for (auto& v : model.head.weight.values()) v = head_dist(rng);
  return model;
}

// ---------------------------------------------------------------------------------------------
// Parameter enumeration

enum class ParamKind { conv_weight, bn_gamma, bn_beta, bn_running_mean, bn_running_var, linear_weight, linear_bias };

inline bool is_trainable(ParamKind kind) {
  return kind != ParamKind::bn_running_mean && kind != ParamKind::bn_running_var;
}

namespace detail {

template <class Conv, class Fn>
void visit_conv(const std::string& prefix, Conv& conv, Fn& fn) {
  fn(prefix + ".weight", conv.weight, ParamKind::conv_weight);
}

template <class Bn, class Fn>
void visit_bn(const std::string& prefix, Bn& bn, Fn& fn, bool buffers) {
  fn(prefix + ".gamma", bn.gamma, ParamKind::bn_gamma);
  fn(prefix + ".beta", bn.beta, ParamKind::bn_beta);
  if (buffers) {
    fn(prefix + ".running_mean", bn.running_mean, ParamKind::bn_running_mean);
    fn(prefix + ".running_var", bn.running_var, ParamKind::bn_running_var);
  }
}

template <class Model, class Fn>
void visit_model(Model& model, Fn& fn, bool buffers) {
  visit_conv("stem.conv", model.stem_conv, fn);
  visit_bn("stem.bn", model.stem_bn, fn, buffers);
  for (auto& block : model.blocks) {
    const std::string p = block.id.str();
    visit_conv(p + ".conv1", block.conv1, fn);
    visit_bn(p + ".bn1", block.bn1, fn, buffers);
    visit_conv(p + ".conv2", block.conv2, fn);
    visit_bn(p + ".bn2", block.bn2, fn, buffers);
  }
  fn(std::string("head.weight"), model.head.weight, ParamKind::linear_weight);
  fn(std::string("head.bias"), model.head.bias, ParamKind::linear_bias);
}

}  // namespace detail

// Visits trainable tensors in canonical order: fn(name, tensor, kind).
template <class Model, class Fn>
void for_each_parameter(Model& model, Fn&& fn) {
  detail::visit_model(model, fn, false);
}

// Visits trainable tensors and batch-norm running statistics in canonical order.
template <class Model, class Fn>
void for_each_tensor(Model& model, Fn&& fn) {
  detail::visit_model(model, fn, true);
}

// FNV-1a over every stored tensor; used to check that read-only operations stay read-only.
inline std::uint64_t parameter_checksum(const ModelGraph& model) {
  std::uint64_t h = 1469598103934665603ull;
  for_each_tensor(model, [&h](const std::string&, const Tensor& t, ParamKind) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(t.data());
    for (std::size_t i = 0; i < t.size() * sizeof(float); ++i) {
      h ^= bytes[i];
      h *= 1099511628211ull;
    }
  });
  return h;
}

// ---------------------------------------------------------------------------------------------
// Forward / backward

// Post-bn1 feature maps per block from the most recent captured forward pass.
struct ActivationCache {
  std::uint64_t revision = 0;
  std::map<BlockId, Tensor> post_bn1;

  bool valid_for(const ModelGraph& model) const { return revision == model.revision; }
};

struct ForwardResult {
  Tensor logits;
  std::optional<ActivationCache> activations;
};

struct BlockTrace {
  Tensor input, conv1_out, bn1_out, relu1_out, conv2_out, sum;
  BatchStats bn1_stats, bn2_stats;
};

struct ForwardTrace {
  Tensor input, stem_conv_out, stem_bn_out;
  BatchStats stem_stats;
  std::vector<BlockTrace> blocks;
  Tensor features;  // input to global pooling
  Tensor pooled;
};

namespace detail {

inline Tensor shortcut_forward(const Tensor& x, const ResidualBlock& block) {
  if (block.shortcut == ShortcutKind::identity) return x;
  const std::size_t n = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t s = static_cast<std::size_t>(block.stride());
  const std::size_t ho = (h + s - 1) / s, wo = (w + s - 1) / s;
  Tensor out({n, block.out_channels(), ho, wo});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < cin; ++c)
      for (std::size_t y = 0; y < ho; ++y)
        for (std::size_t x_ = 0; x_ < wo; ++x_) out.at(i, c, y, x_) = x.at(i, c, y * s, x_ * s);
  return out;
}

inline Tensor shortcut_backward(const Shape& input_shape, const Tensor& grad, const ResidualBlock& block) {
  if (block.shortcut == ShortcutKind::identity) return grad;
  Tensor gi(input_shape);
  const std::size_t s = static_cast<std::size_t>(block.stride());
  for (std::size_t i = 0; i < input_shape[0]; ++i)
    for (std::size_t c = 0; c < input_shape[1]; ++c)
      for (std::size_t y = 0; y < grad.dim(2); ++y)
        for (std::size_t x_ = 0; x_ < grad.dim(3); ++x_) gi.at(i, c, y * s, x_ * s) = grad.at(i, c, y, x_);
  return gi;
}

inline void check_batch(const ModelGraph& model, const Tensor& batch) {
  const auto& in = model.config.input_shape;
  if (batch.rank() != 4 || batch.dim(1) != in[0] || batch.dim(2) != in[1] || batch.dim(3) != in[2]) {
    fail(ErrorKind::structural, "input batch " + shape_string(batch.shape()) + " does not match model input [N," +
                                    std::to_string(in[0]) + "," + std::to_string(in[1]) + "," +
                                    std::to_string(in[2]) + "]");
  }
}

inline Tensor run_forward(const ModelGraph& model, const Tensor& batch, Mode mode, ForwardTrace* trace,
                          ActivationCache* capture) {
  check_batch(model, batch);
  BatchStats stats;
  Tensor stem_conv = conv2d_forward(batch, model.stem_conv, "stem.conv");
  Tensor stem_bn = batchnorm_forward(stem_conv, model.stem_bn, mode, &stats, "stem.bn");
  Tensor x = relu_forward(stem_bn);
  if (trace) {
    trace->input = batch;
    trace->stem_conv_out = std::move(stem_conv);
    trace->stem_bn_out = std::move(stem_bn);
    trace->stem_stats = std::move(stats);
    trace->blocks.clear();
    trace->blocks.reserve(model.blocks.size());
  }

  for (const auto& block : model.blocks) {
    const std::string name = block.id.str();
    BlockTrace bt;
    bt.conv1_out = conv2d_forward(x, block.conv1, (name + ".conv1").c_str());
    bt.bn1_out = batchnorm_forward(bt.conv1_out, block.bn1, mode, &bt.bn1_stats, (name + ".bn1").c_str());
    if (capture) capture->post_bn1[block.id] = bt.bn1_out;
    bt.relu1_out = relu_forward(bt.bn1_out);
    bt.conv2_out = conv2d_forward(bt.relu1_out, block.conv2, (name + ".conv2").c_str());
    bt.sum = batchnorm_forward(bt.conv2_out, block.bn2, mode, &bt.bn2_stats, (name + ".bn2").c_str());
    const Tensor shortcut = shortcut_forward(x, block);
    if (shortcut.shape() != bt.sum.shape()) {
      fail(ErrorKind::structural, name + ": residual branch " + shape_string(bt.sum.shape()) +
                                      " does not match shortcut " + shape_string(shortcut.shape()));
    }
    add_inplace(bt.sum, shortcut);
    Tensor out = relu_forward(bt.sum);
    if (trace) {
      bt.input = std::move(x);
      trace->blocks.push_back(std::move(bt));
    }
    x = std::move(out);
  }

  Tensor pooled = global_avg_pool_forward(x);
  Tensor logits = linear_forward(pooled, model.head);
  if (trace) {
    trace->features = std::move(x);
    trace->pooled = std::move(pooled);
  }
  return logits;
}

inline void apply_running_stats(ModelGraph& model, const ForwardTrace& trace) {
  update_running_stats(model.stem_bn, trace.stem_stats);
  for (std::size_t i = 0; i < model.blocks.size(); ++i) {
    update_running_stats(model.blocks[i].bn1, trace.blocks[i].bn1_stats);
    update_running_stats(model.blocks[i].bn2, trace.blocks[i].bn2_stats);
  }
}

}  // namespace detail

// Read-only forward pass. Train mode normalizes with batch statistics but leaves running stats untouched.
inline ForwardResult forward(const ModelGraph& model, const Tensor& batch, Mode mode = Mode::eval,
                             bool capture = false) {
  ForwardResult result;
  if (capture) {
    result.activations.emplace();
    result.activations->revision = model.revision;
  }
  result.logits =
      detail::run_forward(model, batch, mode, nullptr, capture ? &*result.activations : nullptr);
  return result;
}

// Train-mode forward that also advances the batch-norm running statistics.
inline Tensor train_forward(ModelGraph& model, const Tensor& batch) {
  ForwardTrace trace;
  Tensor logits = detail::run_forward(model, batch, Mode::train, &trace, nullptr);
  detail::apply_running_stats(model, trace);
  return logits;
}

struct NamedTensor {
  std::string name;
  Tensor value;
  ParamKind kind;
};

// Gradients of the mean cross-entropy, aligned with for_each_parameter order.
struct GradientSet {
  double loss = 0.0;
  std::vector<NamedTensor> grads;

  const Tensor& at(const std::string& name) const {
    for (const auto& g : grads) {
      if (g.name == name) return g.value;
    }
    fail(ErrorKind::structural, "no gradient for parameter " + name);
  }
};

namespace detail {

inline GradientSet run_backward(const ModelGraph& model, const ForwardTrace& trace, const Tensor& logits,
                                std::span<const int> labels, Mode mode) {
  LossResult loss = softmax_cross_entropy(logits, labels);

  LinearGrads head = linear_backward(trace.pooled, model.head, loss.grad_logits);
  Tensor g = global_avg_pool_backward(trace.features.shape(), head.grad_input);

  struct BlockGrads {
    Tensor w1, g1, b1, w2, g2, b2;
  };
  std::vector<BlockGrads> block_grads(model.blocks.size());
  for (std::size_t bi = model.blocks.size(); bi-- > 0;) {
    const auto& block = model.blocks[bi];
    const auto& bt = trace.blocks[bi];
    const std::string name = block.id.str();
    Tensor g_sum = relu_backward(bt.sum, g);
    Tensor g_short = shortcut_backward(bt.input.shape(), g_sum, block);
    BatchNormGrads bn2 = batchnorm_backward(bt.conv2_out, block.bn2, g_sum, mode, (name + ".bn2").c_str());
    ConvGrads c2 = conv2d_backward(bt.relu1_out, block.conv2, bn2.grad_input, (name + ".conv2").c_str());
    Tensor g_b1 = relu_backward(bt.bn1_out, c2.grad_input);
    BatchNormGrads bn1 = batchnorm_backward(bt.conv1_out, block.bn1, g_b1, mode, (name + ".bn1").c_str());
    ConvGrads c1 = conv2d_backward(bt.input, block.conv1, bn1.grad_input, (name + ".conv1").c_str());
    g = std::move(c1.grad_input);
    add_inplace(g, g_short);
    block_grads[bi] = BlockGrads{std::move(c1.grad_weight), std::move(bn1.grad_gamma), std::move(bn1.grad_beta),
                                 std::move(c2.grad_weight), std::move(bn2.grad_gamma), std::move(bn2.grad_beta)};
  }

  // stem: conv -> bn -> relu
  Tensor g_stem = relu_backward(trace.stem_bn_out, g);
  BatchNormGrads stem_bn = batchnorm_backward(trace.stem_conv_out, model.stem_bn, g_stem, mode, "stem.bn");
  ConvGrads stem_conv = conv2d_backward(trace.input, model.stem_conv, stem_bn.grad_input, "stem.conv");

  GradientSet out;
  out.loss = loss.loss;
  out.grads.push_back({"stem.conv.weight", std::move(stem_conv.grad_weight), ParamKind::conv_weight});
  out.grads.push_back({"stem.bn.gamma", std::move(stem_bn.grad_gamma), ParamKind::bn_gamma});
  out.grads.push_back({"stem.bn.beta", std::move(stem_bn.grad_beta), ParamKind::bn_beta});
  for (std::size_t bi = 0; bi < model.blocks.size(); ++bi) {
    const std::string p = model.blocks[bi].id.str();
    auto& bg = block_grads[bi];
    out.grads.push_back({p + ".conv1.weight", std::move(bg.w1), ParamKind::conv_weight});
    out.grads.push_back({p + ".bn1.gamma", std::move(bg.g1), ParamKind::bn_gamma});
    out.grads.push_back({p + ".bn1.beta", std::move(bg.b1), ParamKind::bn_beta});
    out.grads.push_back({p + ".conv2.weight", std::move(bg.w2), ParamKind::conv_weight});
    out.grads.push_back({p + ".bn2.gamma", std::move(bg.g2), ParamKind::bn_gamma});
    out.grads.push_back({p + ".bn2.beta", std::move(bg.b2), ParamKind::bn_beta});
  }
  out.grads.push_back({"head.weight", std::move(head.grad_weight), ParamKind::linear_weight});
  out.grads.push_back({"head.bias", std::move(head.grad_bias), ParamKind::linear_bias});
  return out;
}

}  // namespace detail

// Gradients of the mean loss without touching the model (running stats included).
inline GradientSet compute_gradients(const ModelGraph& model, const Tensor& batch, std::span<const int> labels,
                                     Mode mode) {
  ForwardTrace trace;
  Tensor logits = detail::run_forward(model, batch, mode, &trace, nullptr);
  return detail::run_backward(model, trace, logits, labels, mode);
}

// Training-step gradients: train-mode statistics, running stats advanced once.
inline GradientSet backward(ModelGraph& model, const Tensor& batch, std::span<const int> labels) {
  ForwardTrace trace;
  Tensor logits = detail::run_forward(model, batch, Mode::train, &trace, nullptr);
  GradientSet grads = detail::run_backward(model, trace, logits, labels, Mode::train);
  detail::apply_running_stats(model, trace);
  return grads;
}

inline double evaluate_loss(const ModelGraph& model, const Tensor& batch, std::span<const int> labels, Mode mode) {
  return softmax_cross_entropy(forward(model, batch, mode).logits, labels).loss;
}

// ---------------------------------------------------------------------------------------------
// Validation

struct Violation {
  std::string where;
  std::string message;
};

inline std::vector<Violation> validate(const ModelGraph& model) {
  std::vector<Violation> out;
  auto report = [&out](std::string where, std::string message) { out.push_back({std::move(where), std::move(message)}); };
  auto check_conv = [&](const std::string& where, const ConvParams& conv) {
    if (conv.weight.rank() != 4 || conv.weight.dim(2) != conv.weight.dim(3)) {
      report(where, "weight must be [out,in,k,k], got " + shape_string(conv.weight.shape()));
      return false;
    }
    if (conv.kernel_size() % 2 == 0) report(where, "kernel size must be odd");
    if (conv.stride != 1 && conv.stride != 2) report(where, "stride must be 1 or 2");
    if (conv.padding != static_cast<int>(conv.kernel_size() / 2)) report(where, "padding must be k/2");
    if (!conv.weight.all_finite()) report(where, "non-finite weight");
    return true;
  };
  auto check_bn = [&](const std::string& where, const BatchNormParams& bn, std::size_t channels) {
    const std::size_t c = bn.gamma.size();
    if (c != channels) {
      report(where, "has " + std::to_string(c) + " channels, expected " + std::to_string(channels));
    }
    if (bn.beta.size() != c || bn.running_mean.size() != c || bn.running_var.size() != c) {
      report(where, "gamma, beta and running statistics differ in length");
    }
    for (float v : bn.running_var.values()) {
      if (!(v >= 0.0f)) {
        report(where, "running_var must be nonnegative");
        break;
      }
    }
    if (!(bn.momentum > 0.0f && bn.momentum < 1.0f)) report(where, "momentum must lie in (0,1)");
    if (!(bn.eps > 0.0f)) report(where, "eps must be positive");
    if (!bn.gamma.all_finite() || !bn.beta.all_finite() || !bn.running_mean.all_finite() ||
        !bn.running_var.all_finite()) {
      report(where, "non-finite batchnorm parameter");
    }
  };

  const auto& cfg = model.config;
  std::size_t width = cfg.stem_width;
  if (check_conv("stem.conv", model.stem_conv)) {
    if (model.stem_conv.in_channels() != cfg.input_shape[0]) {
      report("stem.conv", "in_channels " + std::to_string(model.stem_conv.in_channels()) +
                              " != input channels " + std::to_string(cfg.input_shape[0]));
    }
    width = model.stem_conv.out_channels();
  }
  check_bn("stem.bn", model.stem_bn, width);

  std::vector<BlockId> seen;
  for (const auto& block : model.blocks) {
    const std::string name = block.id.str();
    if (std::find(seen.begin(), seen.end(), block.id) != seen.end()) report(name, "duplicate block id");
    if (std::find(model.retired.begin(), model.retired.end(), block.id) != model.retired.end()) {
      report(name, "block id was retired by an earlier removal");
    }
    seen.push_back(block.id);
    if (block.id.group < 0 || static_cast<std::size_t>(block.id.group) >= cfg.groups.size()) {
      report(name, "group index outside architecture");
    }
    const bool c1 = check_conv(name + ".conv1", block.conv1);
    const bool c2 = check_conv(name + ".conv2", block.conv2);
    if (!c1 || !c2) continue;
    if (block.conv1.in_channels() != width) {
      report(name, "conv1.in_channels (" + std::to_string(block.conv1.in_channels()) + ") != block input width (" +
                       std::to_string(width) + ")");
    }
    if (block.conv1.out_channels() != block.mid_channels) {
      report(name, "conv1.out_channels (" + std::to_string(block.conv1.out_channels()) + ") != mid_channels (" +
                       std::to_string(block.mid_channels) + ")");
    }
    if (block.conv2.in_channels() != block.mid_channels) {
      report(name, "conv2.in_channels (" + std::to_string(block.conv2.in_channels()) + ") != mid_channels (" +
                       std::to_string(block.mid_channels) + ")");
    }
    if (block.mid_channels == 0) report(name, "mid_channels must be positive");
    check_bn(name + ".bn1", block.bn1, block.mid_channels);
    check_bn(name + ".bn2", block.bn2, block.conv2.out_channels());
    if (block.conv2.stride != 1) report(name, "conv2 stride must be 1");
    const std::size_t out = block.conv2.out_channels();
    const bool shape_change = block.conv1.stride != 1 || out != width;
    if (block.shortcut == ShortcutKind::identity) {
      if (shape_change) report(name, "identity shortcut on a block that changes stride or width");
    } else {
      if (!shape_change) report(name, "pad_downsample shortcut on a shape-preserving block");
      if (out < width) report(name, "pad_downsample cannot shrink channels");
      if (block.is_prunable) report(name, "pad_downsample block must not be prunable");
    }
    if (block.shortcut == ShortcutKind::identity && !block.is_prunable) {
      report(name, "identity-shortcut block must be prunable");
    }
    width = out;
  }

  if (model.head.weight.rank() != 2 || model.head.in_features() != width) {
    report("head", "in_features does not match last block width " + std::to_string(width));
  } else if (model.head.out_features() != cfg.num_classes) {
    report("head", "out_features " + std::to_string(model.head.out_features()) + " != num_classes " +
                       std::to_string(cfg.num_classes));
  }
  if (model.head.bias.size() != model.head.out_features()) report("head", "bias length mismatch");
  return out;
}

inline void require_valid(const ModelGraph& model, const std::string& context) {
  const auto violations = validate(model);
  if (violations.empty()) return;
  std::string msg = context + ": " + std::to_string(violations.size()) + " violation(s)";
  for (const auto& v : violations) msg += "; " + v.where + ": " + v.message;
  fail(ErrorKind::structural, msg);
}

// ---------------------------------------------------------------------------------------------
// Surgery

// Keeps the listed mid channels of a block: conv1 rows, bn1 entries, conv2 input columns.
inline void shrink_channels(ModelGraph& model, const BlockId& id, std::span<const std::size_t> keep) {
  ResidualBlock* block = model.find_block(id);
  if (!block) fail(ErrorKind::plan, "unknown block " + id.str());
  if (keep.empty()) fail(ErrorKind::pruning, "empty keep set would destroy block " + id.str());
  for (std::size_t i = 0; i < keep.size(); ++i) {
    if (keep[i] >= block->mid_channels) {
      fail(ErrorKind::plan, "keep index " + std::to_string(keep[i]) + " out of range for block " + id.str());
    }
    if (i > 0 && keep[i] <= keep[i - 1]) {
      fail(ErrorKind::plan, "keep indices for block " + id.str() + " must be strictly increasing");
    }
  }
  const std::size_t m = keep.size();
  const std::size_t cin = block->conv1.in_channels(), cout = block->conv2.out_channels();
  const std::size_t kk = block->conv1.kernel_size() * block->conv1.kernel_size();
  const std::size_t k = block->conv1.kernel_size(), k2 = block->conv2.kernel_size(), kk2 = k2 * k2;

  Tensor w1({m, cin, k, k});
  for (std::size_t i = 0; i < m; ++i) {
    std::copy_n(block->conv1.weight.data() + keep[i] * cin * kk, cin * kk, w1.data() + i * cin * kk);
  }
  Tensor w2({cout, m, k2, k2});
  for (std::size_t o = 0; o < cout; ++o) {
    for (std::size_t i = 0; i < m; ++i) {
      std::copy_n(block->conv2.weight.data() + (o * block->mid_channels + keep[i]) * kk2, kk2,
                  w2.data() + (o * m + i) * kk2);
    }
  }
  auto select = [&](const Tensor& t) {
    Tensor r({m});
    for (std::size_t i = 0; i < m; ++i) r[i] = t[keep[i]];
    return r;
  };
  block->bn1.gamma = select(block->bn1.gamma);
  block->bn1.beta = select(block->bn1.beta);
  block->bn1.running_mean = select(block->bn1.running_mean);
  block->bn1.running_var = select(block->bn1.running_var);
  block->conv1.weight = std::move(w1);
  block->conv2.weight = std::move(w2);
  block->mid_channels = m;
  ++model.revision;
}

inline void remove_block(ModelGraph& model, const BlockId& id) {
  auto it = std::find_if(model.blocks.begin(), model.blocks.end(), [&](const auto& b) { return b.id == id; });
  if (it == model.blocks.end()) fail(ErrorKind::plan, "unknown block " + id.str());
  if (!it->is_prunable || it->shortcut != ShortcutKind::identity) {
    fail(ErrorKind::pruning, "block " + id.str() + " not eligible for layer pruning");
  }
  model.blocks.erase(it);
  model.retired.push_back(id);
  ++model.revision;
}

}  // namespace prunelab
