#pragma once

#include <prunelab/error.hpp>
#include <prunelab/model.hpp>
#include <prunelab/tensor.hpp>

#include <map>
#include <string>

namespace prunelab {

struct OptimizerState {
  float learning_rate = 0.05f;
  float momentum_coeff = 0.9f;
  float weight_decay = 5e-4f;
  float bn_l1_strength = 0.0f;  // L1 subgradient added to every BN gamma
  std::map<std::string, Tensor> velocity;

  void check() const {
    if (!(learning_rate >= 0.0f)) fail(ErrorKind::config, "learning_rate must be nonnegative");
    if (!(momentum_coeff >= 0.0f && momentum_coeff < 1.0f)) fail(ErrorKind::config, "momentum must lie in [0,1)");
    if (!(weight_decay >= 0.0f)) fail(ErrorKind::config, "weight_decay must be nonnegative");
    if (!(bn_l1_strength >= 0.0f)) fail(ErrorKind::config, "bn_l1_strength must be nonnegative");
  }
};

inline float sign_subgradient(float v) { return v > 0.0f ? 1.0f : (v < 0.0f ? -1.0f : 0.0f); }

// One parameter tensor: v <- mu*v + g + wd*w (+ l1*sign(w) for BN scales); w <- w - lr*v.
inline void sgd_update(Tensor& weight, const Tensor& grad, Tensor& velocity, const OptimizerState& state,
                       bool is_bn_gamma) {
  require_shape(grad, weight.shape(), "sgd gradient");
  require_shape(velocity, weight.shape(), "sgd velocity");
  const float l1 = is_bn_gamma ? state.bn_l1_strength : 0.0f;
  for (std::size_t i = 0; i < weight.size(); ++i) {
    const float w = weight[i];
    const float g = grad[i] + state.weight_decay * w + l1 * sign_subgradient(w);
    velocity[i] = state.momentum_coeff * velocity[i] + g;
    weight[i] = w - state.learning_rate * velocity[i];
  }
}

// Drops velocity buffers for parameters that no longer exist or whose shape changed.
inline void sync_velocity(const ModelGraph& model, OptimizerState& state) {
  std::map<std::string, Tensor> kept;
  for_each_parameter(model, [&](const std::string& name, const Tensor& w, ParamKind) {
    auto it = state.velocity.find(name);
    if (it != state.velocity.end() && it->second.shape() == w.shape()) {
      kept.emplace(name, std::move(it->second));
    } else {
      kept.emplace(name, Tensor(w.shape()));
    }
  });
  state.velocity = std::move(kept);
}

inline void sgd_step(ModelGraph& model, const GradientSet& grads, OptimizerState& state) {
  sync_velocity(model, state);
  std::size_t index = 0;
  for_each_parameter(model, [&](const std::string& name, Tensor& w, ParamKind kind) {
    if (index >= grads.grads.size() || grads.grads[index].name != name) {
      fail(ErrorKind::structural, "gradient set is not aligned with parameter " + name);
    }
    sgd_update(w, grads.grads[index].value, state.velocity.at(name), state, kind == ParamKind::bn_gamma);
    ++index;
  });
  if (index != grads.grads.size()) fail(ErrorKind::structural, "gradient set has extra entries");
  ++model.step;
}

}  // namespace prunelab
