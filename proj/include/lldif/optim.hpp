#pragma once

#include <cmath>
#include <vector>

#include "lldif/autodiff.hpp"

namespace lldif {

/// Adam with optional L2-style weight decay (decay added to the gradient).
class Adam {
 public:
  Adam(std::vector<VarPtr> params, double lr, double weight_decay = 0.0,
       double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : params_(std::move(params)),
        lr_(lr),
        wd_(weight_decay),
        beta1_(beta1),
        beta2_(beta2),
        eps_(eps) {
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (const auto& p : params_) {
      m_.emplace_back(p->value.shape());
      v_.emplace_back(p->value.shape());
    }
  }

  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }
  long step_count() const { return t_; }

  void zero_grad() {
    for (const auto& p : params_) p->zero_grad();
  }

  void step() {
    ++t_;
    double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (size_t k = 0; k < params_.size(); ++k) {
      Var& p = *params_[k];
      if (p.grad.numel() != p.value.numel()) continue;  // no grad this step
      Tensor& m = m_[k];
      Tensor& v = v_[k];
      for (long i = 0; i < p.value.numel(); ++i) {
        double g = p.grad[i] + wd_ * p.value[i];
        m[i] = beta1_ * m[i] + (1.0 - beta1_) * g;
        v[i] = beta2_ * v[i] + (1.0 - beta2_) * g * g;
        double mhat = m[i] / bc1;
        double vhat = v[i] / bc2;
        p.value[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
      }
    }
  }

 private:
  std::vector<VarPtr> params_;
  std::vector<Tensor> m_, v_;
  double lr_, wd_, beta1_, beta2_, eps_;
  long t_ = 0;
};

/// Cosine decay from lr0 to lr0*floor_frac over total steps.
inline double cosine_lr(double lr0, long step, long total, double floor_frac = 0.0) {
  if (total <= 0) return lr0;
  double s = std::min(1.0, static_cast<double>(step) / static_cast<double>(total));
  double w = 0.5 * (1.0 + std::cos(M_PI * s));
  return lr0 * (floor_frac + (1.0 - floor_frac) * w);
}

}  // namespace lldif
