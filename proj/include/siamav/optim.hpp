#pragma once

// Adam with decoupled weight decay, global-norm gradient clipping and the
// step-decay learning-rate schedule.

#include <cmath>
#include <string>
#include <vector>

#include "siamav/nn.hpp"

namespace siamav {

struct AdamConfig {
  double beta1 = 0.95;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 5e-7;
};

// lr(e) = base * rate^(floor((e - start) / step) + 1) for e >= start.
struct Schedule {
  double base_lr = 1e-4;
  std::size_t decay_start_epoch = 10;
  double decay_rate = 0.5;
  std::size_t decay_step = 5;
  double head_lr_multiplier = 1.0;

  void validate() const {
    if (!(base_lr > 0.0)) throw ConfigError("base learning rate must be positive");
    if (decay_step == 0) throw ConfigError("decay step must be positive");
    if (!(decay_rate > 0.0)) throw ConfigError("decay rate must be positive");
    if (!(head_lr_multiplier > 0.0)) throw ConfigError("head lr multiplier must be positive");
  }

  double lr(std::size_t epoch) const {
    if (epoch < decay_start_epoch) return base_lr;
    const auto k = (epoch - decay_start_epoch) / decay_step + 1;
    return base_lr * std::pow(decay_rate, static_cast<double>(k));
  }
};

// Per-parameter moments in parameter order; `lr_scale` multiplies the step
// size of individual parameters (used for the classifier head).
template <Scalar T>
class Adam {
 public:
  Adam() = default;
  Adam(const nn::ParamList<T>& params, AdamConfig cfg) : cfg_(cfg) {
    for (const auto& p : params) {
      names_.push_back(p.name);
      m_.emplace_back(p.value.numel(), T(0));
      v_.emplace_back(p.value.numel(), T(0));
      lr_scale_.push_back(1.0);
    }
  }

  const AdamConfig& config() const { return cfg_; }
  std::size_t step_count() const { return step_; }
  void set_step_count(std::size_t s) { step_ = s; }
  const std::vector<std::string>& names() const { return names_; }
  std::vector<T>& first_moment(std::size_t i) { return m_.at(i); }
  std::vector<T>& second_moment(std::size_t i) { return v_.at(i); }
  const std::vector<T>& first_moment(std::size_t i) const { return m_.at(i); }
  const std::vector<T>& second_moment(std::size_t i) const { return v_.at(i); }
  void set_lr_scale(std::size_t i, double s) { lr_scale_.at(i) = s; }
  double lr_scale(std::size_t i) const { return lr_scale_.at(i); }

  // One bias-corrected update. Throws NonFiniteError before touching any
  // parameter if a gradient is NaN or infinite.
  void step(nn::ParamList<T>& params, double lr) {
    check(params);
    for (const auto& p : params) {
      const auto g = p.value.grad();
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (!std::isfinite(static_cast<double>(g[i]))) {
          throw NonFiniteError("non-finite gradient in parameter '" + p.name + "' at element " + std::to_string(i));
        }
      }
    }
    ++step_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    const T b1 = static_cast<T>(cfg_.beta1), b2 = static_cast<T>(cfg_.beta2);
    for (std::size_t k = 0; k < params.size(); ++k) {
      auto w = params[k].value.mutable_data();
      const auto g = params[k].value.grad();
      auto& m = m_[k];
      auto& v = v_[k];
      const T a = static_cast<T>(lr * lr_scale_[k]);
      const T wd = static_cast<T>(cfg_.weight_decay);
      const T c1 = static_cast<T>(bc1), c2 = static_cast<T>(bc2), eps = static_cast<T>(cfg_.eps);
      for (std::size_t i = 0; i < w.size(); ++i) {
        m[i] = b1 * m[i] + (T(1) - b1) * g[i];
        v[i] = b2 * v[i] + (T(1) - b2) * g[i] * g[i];
        const T mhat = m[i] / c1;
        const T vhat = v[i] / c2;
        w[i] -= a * (mhat / (std::sqrt(vhat) + eps) + wd * w[i]);
      }
    }
  }

 private:
  void check(const nn::ParamList<T>& params) const {
    if (params.size() != names_.size()) throw ContractError("optimizer and parameter lists differ in length");
    for (std::size_t k = 0; k < params.size(); ++k) {
      if (params[k].name != names_[k] || params[k].value.numel() != m_[k].size()) {
        throw ContractError("optimizer state does not match parameter '" + params[k].name + "'");
      }
    }
  }

  AdamConfig cfg_;
  std::vector<std::string> names_;
  std::vector<std::vector<T>> m_, v_;
  std::vector<double> lr_scale_;
  std::size_t step_ = 0;
};

// Scales all gradients so their global L2 norm is at most max_norm. Returns the
// norm before clipping.
template <Scalar T>
double clip_grad_norm(nn::ParamList<T>& params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params)
    for (T g : p.value.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const T s = static_cast<T>(max_norm / norm);
    for (auto& p : params)
      for (auto& g : p.value.mutable_grad()) g *= s;
  }
  return norm;
}

template <Scalar T>
void zero_grads(nn::ParamList<T>& params) {
  for (auto& p : params) p.value.zero_grad();
}

}  // namespace siamav
