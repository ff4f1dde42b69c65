#pragma once

// AdamW with decoupled weight decay, plus warmup-cosine learning-rate
// schedule and global gradient-norm utilities.

#include <cmath>
#include <vector>

#include "maep/autograd.h"

namespace maep {

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

template <typename T>
class AdamW {
 public:
  AdamW() = default;
  AdamW(std::vector<ag::Var<T>> params, AdamWConfig cfg)
      : cfg_(cfg), params_(std::move(params)) {
    for (const auto& p : params_) {
      m_.emplace_back(Tensor<T>::zeros(p.shape()));
      v_.emplace_back(Tensor<T>::zeros(p.shape()));
    }
  }

  std::int64_t step_count() const { return t_; }
  const AdamWConfig& config() const { return cfg_; }
  std::vector<ag::Var<T>>& params() { return params_; }
  std::vector<Tensor<T>>& moments_m() { return m_; }
  std::vector<Tensor<T>>& moments_v() { return v_; }
  void set_step_count(std::int64_t t) { t_ = t; }

  double grad_norm() const {
    double sq = 0.0;
    for (const auto& p : params_) {
      if (!p.has_grad()) continue;
      const Tensor<T>& g = const_cast<ag::Var<T>&>(p).grad();
      sq += tops::dot(g, g);
    }
    return std::sqrt(sq);
  }

  // returns the pre-clip norm
  double clip_grad_norm(double max_norm) {
    const double norm = grad_norm();
    if (max_norm > 0.0 && norm > max_norm) {
      const T s = static_cast<T>(max_norm / norm);
      for (auto& p : params_)
        if (p.has_grad()) {
          Tensor<T>& g = p.grad();
          kernels::table<T>().scale(s, g.data(), g.data(),
                                    static_cast<std::size_t>(g.numel()));
        }
    }
    return norm;
  }

  void step(double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      ag::Var<T>& p = params_[i];
      if (!p.has_grad()) continue;
      Tensor<T>& g = p.grad();
      Tensor<T>& m = m_[i];
      Tensor<T>& v = v_[i];
      Tensor<T>& w = p.value();
      const T b1 = static_cast<T>(cfg_.beta1), b2 = static_cast<T>(cfg_.beta2);
      for (std::int64_t j = 0; j < w.numel(); ++j) {
        m[j] = b1 * m[j] + (T(1) - b1) * g[j];
        v[j] = b2 * v[j] + (T(1) - b2) * g[j] * g[j];
        const double mhat = static_cast<double>(m[j]) / bc1;
        const double vhat = static_cast<double>(v[j]) / bc2;
        const double upd = mhat / (std::sqrt(vhat) + cfg_.eps) +
                           cfg_.weight_decay * static_cast<double>(w[j]);
        w[j] = static_cast<T>(static_cast<double>(w[j]) - lr * upd);
      }
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

 private:
  AdamWConfig cfg_;
  std::vector<ag::Var<T>> params_;
  std::vector<Tensor<T>> m_, v_;
  std::int64_t t_ = 0;
};

enum class LrSchedule { CONSTANT, COSINE };

inline double scheduled_lr(double base_lr, LrSchedule kind, std::int64_t step,
                           std::int64_t total_steps, std::int64_t warmup_steps) {
  const double s = static_cast<double>(step);
  if (warmup_steps > 0 && step < warmup_steps)
    return base_lr * (s + 1.0) / static_cast<double>(warmup_steps);
  if (kind == LrSchedule::CONSTANT) return base_lr;
  const double w = static_cast<double>(warmup_steps);
  const double total = static_cast<double>(std::max<std::int64_t>(
      total_steps - warmup_steps, 1));
  const double progress = std::min(1.0, (s - w) / total);
  return 0.5 * base_lr * (1.0 + std::cos(progress * M_PI));
}

}  // namespace maep
