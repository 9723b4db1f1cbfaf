#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "lldif/autodiff.hpp"
#include "lldif/config.hpp"
#include "lldif/nn.hpp"
#include "lldif/rng.hpp"

namespace lldif {

// Diffusion over the C-dimensional expression prior. The forward process is
// the usual variance-preserving q(z_t | z_0); the reverse chain is a short,
// deterministic (no added noise) sequence of denoiser steps conditioned on
// the stage-2 prior vector.

class BetaSchedule {
 public:
  explicit BetaSchedule(std::vector<double> betas) : betas_(std::move(betas)) {
    check(!betas_.empty(), "schedule: needs at least one step");
    alpha_bar_.resize(betas_.size() + 1);
    alpha_bar_[0] = 1.0;
    for (size_t i = 0; i < betas_.size(); ++i) {
      check(betas_[i] > 0.0 && betas_[i] < 1.0, "schedule: beta out of (0,1)");
      alpha_bar_[i + 1] = alpha_bar_[i] * (1.0 - betas_[i]);
      check(alpha_bar_[i + 1] < alpha_bar_[i], "schedule: alpha_bar must strictly decrease");
    }
  }

  int T() const { return static_cast<int>(betas_.size()); }
  double beta(int t) const {  // t in 1..T
    check(t >= 1 && t <= T(), "schedule: step out of range");
    return betas_[static_cast<size_t>(t - 1)];
  }
  double alpha(int t) const { return 1.0 - beta(t); }
  double alpha_bar(int t) const {  // t in 0..T
    check(t >= 0 && t <= T(), "schedule: step out of range");
    return alpha_bar_[static_cast<size_t>(t)];
  }
  const std::vector<double>& betas() const { return betas_; }

 private:
  std::vector<double> betas_;
  std::vector<double> alpha_bar_;
};

inline BetaSchedule make_schedule(int T, double beta_start, double beta_end) {
  check(T >= 1, "schedule: T must be >= 1");
  check(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0,
        "schedule: need 0 < beta_start <= beta_end < 1");
  std::vector<double> betas(static_cast<size_t>(T));
  for (int t = 0; t < T; ++t)
    betas[static_cast<size_t>(t)] =
        T == 1 ? beta_start
               : beta_start + (beta_end - beta_start) * t / static_cast<double>(T - 1);
  return BetaSchedule(std::move(betas));
}

// Linear schedule chosen so that alpha_bar(T) lands at ~0.005: with only a
// handful of steps the signal still has to be nearly destroyed by step T.
inline BetaSchedule default_schedule(int T) {
  check(T >= 1, "schedule: T must be >= 1");
  const double target = 0.005;
  if (T == 1) return BetaSchedule({1.0 - target});
  auto bar_T = [T](double be) {
    double bar = 1.0;
    for (int t = 0; t < T; ++t)
      bar *= 1.0 - (0.1 + (be - 0.1) * t / static_cast<double>(T - 1));
    return bar;
  };
  double lo = 0.1, hi = 1.0 - 1e-9;
  check(bar_T(hi) <= target, "schedule: T too small to reach target");
  for (int i = 0; i < 200; ++i) {
    double mid = 0.5 * (lo + hi);
    if (bar_T(mid) <= target)
      hi = mid;
    else
      lo = mid;
  }
  return make_schedule(T, 0.1, hi);
}

/// z_t = sqrt(alpha_bar_t) z0 + sqrt(1 - alpha_bar_t) * noise.
inline Tensor q_sample(const Tensor& z0, int t, const Tensor& noise, const BetaSchedule& sched) {
  check(z0.same_shape(noise), "q_sample: noise shape mismatch");
  double ab = sched.alpha_bar(t);
  double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
  Tensor out = z0;
  for (long i = 0; i < out.numel(); ++i) out[i] = a * z0[i] + b * noise[i];
  return out;
}

constexpr int kTimeEmbedDim = 32;

inline Tensor time_embedding(int t, int dim = kTimeEmbedDim) {
  check(dim >= 2 && dim % 2 == 0, "time embedding: dim must be even");
  Tensor out({dim});
  int half = dim / 2;
  for (int i = 0; i < half; ++i) {
    double freq = std::exp(-std::log(10000.0) * i / static_cast<double>(half));
    out[i] = std::sin(t * freq);
    out[half + i] = std::cos(t * freq);
  }
  return out;
}

// Noise-prediction MLP over [z_t, t-embedding, conditioning vector].
class Denoiser {
 public:
  Denoiser() = default;
  Denoiser(const ModelConfig& cfg, Rng& rng) : epd_dim_(cfg.epd_dim) {
    int in = 2 * cfg.epd_dim + kTimeEmbedDim;
    int hidden = 4 * cfg.epd_dim;
    l1_ = Linear(rng, in, hidden);
    l2_ = Linear(rng, hidden, hidden);
    l3_ = Linear(rng, hidden, hidden);
    l4_ = Linear(rng, hidden, cfg.epd_dim);
  }

  VarPtr forward(const VarPtr& z_t, int t, const VarPtr& cond) const {
    check(z_t->value.rank() == 1 && z_t->value.dim(0) == epd_dim_, "denoiser: z_t must be {C}");
    check(cond->value.same_shape(z_t->value), "denoiser: conditioning must be {C}");
    VarPtr inp = concat_vec({z_t, make_const(time_embedding(t)), cond});
    VarPtr h = gelu(l1_(inp));
    h = gelu(l2_(h));
    h = gelu(l3_(h));
    return l4_(h);
  }

  void register_params(ParamRegistry& reg, const std::string& prefix) const {
    l1_.register_params(reg, prefix + ".l1");
    l2_.register_params(reg, prefix + ".l2");
    l3_.register_params(reg, prefix + ".l3");
    l4_.register_params(reg, prefix + ".l4");
  }

 private:
  int epd_dim_ = 0;
  Linear l1_, l2_, l3_, l4_;
};

/// One deterministic reverse update: z_{t-1} = (z_t - coef * eps) / sqrt(alpha_t).
/// variant "paper" uses coef = (1 - alpha_t) / sqrt(1 - alpha_t);
/// variant "ddpm_bar" uses coef = (1 - alpha_t) / sqrt(1 - alpha_bar_t).
inline VarPtr reverse_step(const VarPtr& z_t, const VarPtr& eps, int t, const BetaSchedule& sched,
                           const std::string& variant) {
  double a = sched.alpha(t);
  double coef;
  if (variant == "paper") {
    coef = (1.0 - a) / std::sqrt(1.0 - a);
  } else if (variant == "ddpm_bar") {
    coef = (1.0 - a) / std::sqrt(1.0 - sched.alpha_bar(t));
  } else {
    throw Error("reverse_step: unknown variant: " + variant);
  }
  return scale(sub(z_t, scale(eps, coef)), 1.0 / std::sqrt(a));
}

using DenoiseFn = std::function<VarPtr(const VarPtr& z_t, int t, const VarPtr& cond)>;

/// Runs the full reverse chain from z_T down to z_0.
inline VarPtr run_reverse_chain(const VarPtr& z_T, const VarPtr& cond, const BetaSchedule& sched,
                                const std::string& variant, const DenoiseFn& denoise) {
  VarPtr z = z_T;
  for (int t = sched.T(); t >= 1; --t) z = reverse_step(z, denoise(z, t, cond), t, sched, variant);
  return z;
}

constexpr double kKlEps = 1e-12;

/// KL(softmax(z) || softmax(z_hat)), composed from graph ops so it backprops.
inline VarPtr kl_loss(const VarPtr& z, const VarPtr& z_hat) {
  check(z->value.rank() == 1 && z->value.same_shape(z_hat->value), "kl_loss: shape mismatch");
  VarPtr p = softmax(z);
  VarPtr q = softmax(z_hat);
  return sum(mul(p, sub(log_eps(p, kKlEps), log_eps(q, kKlEps))));
}

inline VarPtr total_loss(const VarPtr& ce, const VarPtr& kl) { return add(ce, kl); }

}  // namespace lldif
