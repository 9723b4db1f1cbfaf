#pragma once

#include <string>
#include <utility>
#include <vector>

#include "lldif/autodiff.hpp"
#include "lldif/rng.hpp"

namespace lldif {

// Thin module layer on top of the autodiff graph. Modules own their
// parameters as VarPtrs and register them under hierarchical dotted names so
// optimizers and checkpoints see a stable, ordered view.

class ParamRegistry {
 public:
  void add(std::string name, VarPtr p) {
    for (const auto& [n, _] : items_) check(n != name, "duplicate param name: " + name);
    items_.emplace_back(std::move(name), std::move(p));
  }
  void merge(const std::string& prefix, const ParamRegistry& other) {
    for (const auto& [n, p] : other.items_) add(prefix + "." + n, p);
  }
  const std::vector<std::pair<std::string, VarPtr>>& items() const { return items_; }
  std::vector<VarPtr> params() const {
    std::vector<VarPtr> out;
    out.reserve(items_.size());
    for (const auto& [_, p] : items_) out.push_back(p);
    return out;
  }
  long total_size() const {
    long n = 0;
    for (const auto& [_, p] : items_) n += p->value.numel();
    return n;
  }
  void zero_grad() const {
    for (const auto& [_, p] : items_) p->zero_grad();
  }
  VarPtr find(const std::string& name) const {
    for (const auto& [n, p] : items_)
      if (n == name) return p;
    return nullptr;
  }

 private:
  std::vector<std::pair<std::string, VarPtr>> items_;
};

inline Tensor uniform_init(Rng& rng, std::vector<int> shape, double bound) {
  Tensor t(std::move(shape));
  for (long i = 0; i < t.numel(); ++i) t[i] = rng.uniform(-bound, bound);
  return t;
}

struct Linear {
  VarPtr W, b;  // W {out, in}

  Linear() = default;
  Linear(Rng& rng, int in, int out, bool bias = true) {
    double bound = 1.0 / std::sqrt(static_cast<double>(in));
    W = make_param(uniform_init(rng, {out, in}, bound));
    if (bias) b = make_param(Tensor({out}));
  }
  VarPtr operator()(const VarPtr& x) const { return linear(x, W, b); }
  void register_params(ParamRegistry& reg, const std::string& prefix) const {
    reg.add(prefix + ".W", W);
    if (b) reg.add(prefix + ".b", b);
  }
};

struct Conv2d {
  VarPtr W, b;  // W {out, in, k, k}
  int stride = 1, pad = 0;

  Conv2d() = default;
  Conv2d(Rng& rng, int cin, int cout, int k, int stride_, int pad_, bool bias = true)
      : stride(stride_), pad(pad_) {
    double bound = 1.0 / std::sqrt(static_cast<double>(cin) * k * k);
    W = make_param(uniform_init(rng, {cout, cin, k, k}, bound));
    if (bias) b = make_param(Tensor({cout}));
  }
  VarPtr operator()(const VarPtr& x) const { return conv2d(x, W, b, stride, pad); }
  void register_params(ParamRegistry& reg, const std::string& prefix) const {
    reg.add(prefix + ".W", W);
    if (b) reg.add(prefix + ".b", b);
  }
};

struct Depthwise3x3 {
  VarPtr W;  // {C, 3, 3}

  Depthwise3x3() = default;
  Depthwise3x3(Rng& rng, int c) {
    double bound = 1.0 / 3.0;  // 1/sqrt(k*k)
    W = make_param(uniform_init(rng, {c, 3, 3}, bound));
  }
  VarPtr operator()(const VarPtr& x) const { return depthwise3x3(x, W); }
  void register_params(ParamRegistry& reg, const std::string& prefix) const {
    reg.add(prefix + ".W", W);
  }
};

/// Layernorm over the last dim with learnable gain and shift.
struct LayerNorm {
  VarPtr gamma, beta;

  LayerNorm() = default;
  explicit LayerNorm(int d) {
    gamma = make_param(Tensor::full({d}, 1.0));
    beta = make_param(Tensor({d}));
  }
  VarPtr operator()(const VarPtr& x) const {
    VarPtr xn = layernorm_rows(x);
    int rank = x->value.rank();
    int d = gamma->value.dim(0);
    if (rank == 1) return add(mul(xn, gamma), beta);
    // broadcast gain/shift across rows
    int n = x->value.dim(0);
    std::vector<VarPtr> grows(n, gamma), brows(n, beta);
    (void)d;
    return add(mul(xn, stack_rows(grows)), stack_rows(brows));
  }
  void register_params(ParamRegistry& reg, const std::string& prefix) const {
    reg.add(prefix + ".gamma", gamma);
    reg.add(prefix + ".beta", beta);
  }
};

/// Two-layer MLP with GELU, hidden = mult * d.
struct Mlp {
  Linear fc1, fc2;

  Mlp() = default;
  Mlp(Rng& rng, int d, int mult = 2) : fc1(rng, d, mult * d), fc2(rng, mult * d, d) {}
  VarPtr operator()(const VarPtr& x) const { return fc2(gelu(fc1(x))); }
  void register_params(ParamRegistry& reg, const std::string& prefix) const {
    fc1.register_params(reg, prefix + ".fc1");
    fc2.register_params(reg, prefix + ".fc2");
  }
};

}  // namespace lldif
