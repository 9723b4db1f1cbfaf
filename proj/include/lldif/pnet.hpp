#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "lldif/autodiff.hpp"
#include "lldif/config.hpp"
#include "lldif/nn.hpp"

namespace lldif {

// Stage-1 prior network: refines the label prediction by cross-attending to
// the generic feature embedding (query from label_pred, key/value from feat),
// then projects to the C-dimensional expression prior Z.

class CrossAttentionLayer {
 public:
  CrossAttentionLayer() = default;
  CrossAttentionLayer(Rng& rng, int dim, int heads)
      : dim_(dim),
        heads_(heads),
        wq_(rng, dim, dim),
        wk_(rng, dim, dim),
        wv_(rng, dim, dim),
        wo_(rng, dim, dim) {
    check(dim % heads == 0, "cross-attention: dim must divide by heads");
  }

  VarPtr forward(const VarPtr& query, const VarPtr& kv) const {
    const int dh = dim_ / heads_;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    VarPtr q = wq_(query);
    VarPtr k = wk_(kv);
    VarPtr v = wv_(kv);
    std::vector<VarPtr> head_outs;
    head_outs.reserve(static_cast<size_t>(heads_));
    for (int h = 0; h < heads_; ++h) {
      VarPtr qh = slice_cols(q, h * dh, (h + 1) * dh);
      VarPtr kh = slice_cols(k, h * dh, (h + 1) * dh);
      VarPtr vh = slice_cols(v, h * dh, (h + 1) * dh);
      VarPtr logit = scale(sum(mul(qh, kh)), inv_sqrt);  // {1}: one key token
      VarPtr attn = softmax(logit);                      // degenerate but kept in-graph
      head_outs.push_back(scale_by(vh, attn));
    }
    VarPtr merged = concat_vec(head_outs);
    return add(query, wo_(merged));
  }

  void register_params(ParamRegistry& reg, const std::string& prefix) const {
    wq_.register_params(reg, prefix + ".wq");
    wk_.register_params(reg, prefix + ".wk");
    wv_.register_params(reg, prefix + ".wv");
    wo_.register_params(reg, prefix + ".wo");
  }

 private:
  int dim_ = 0;
  int heads_ = 0;
  Linear wq_, wk_, wv_, wo_;
};

class PnetS1 {
 public:
  PnetS1(const ModelConfig& cfg, Rng& rng, int layers = 2, int heads = 4)
      : out_(rng, cfg.embed_dim, cfg.epd_dim) {
    check(layers >= 1, "pnet_s1: needs at least one layer");
    for (int i = 0; i < layers; ++i) layers_.emplace_back(rng, cfg.embed_dim, heads);
  }

  // feat and label_pred are {D_e}; result is the expression prior Z {C}.
  VarPtr forward(const VarPtr& feat, const VarPtr& label_pred) const {
    check(feat->value.same_shape(label_pred->value), "pnet_s1: embedding shape mismatch");
    VarPtr h = label_pred;
    for (const auto& layer : layers_) h = layer.forward(h, feat);
    return out_(h);
  }

  void register_params(ParamRegistry& reg, const std::string& prefix) const {
    for (size_t i = 0; i < layers_.size(); ++i)
      layers_[i].register_params(reg, prefix + ".layer" + std::to_string(i));
    out_.register_params(reg, prefix + ".out");
  }

 private:
  std::vector<CrossAttentionLayer> layers_;
  Linear out_;
};

// Stage-2 prior network: a small conv net over the degraded image producing
// the conditioning vector that guides the denoiser (and, without diffusion,
// stands in for the prior directly).

class ResBlock {
 public:
  ResBlock() = default;
  ResBlock(Rng& rng, int c)
      : c1_(rng, c, c, 3, 1, 1), c2_(rng, c, c, 3, 1, 1) {}

  VarPtr operator()(const VarPtr& x) const {
    return add(x, c2_(gelu(c1_(x))));
  }

  void register_params(ParamRegistry& reg, const std::string& prefix) const {
    c1_.register_params(reg, prefix + ".c1");
    c2_.register_params(reg, prefix + ".c2");
  }

 private:
  Conv2d c1_, c2_;
};

class PnetS2 {
 public:
  PnetS2(const ModelConfig& cfg, Rng& rng) {
    const auto& w = cfg.pnet_s2_widths;
    check(w.size() == 3, "pnet_s2: expects three conv widths");
    downs_.emplace_back(rng, 3, w[0], 3, 2, 1);
    downs_.emplace_back(rng, w[0], w[1], 3, 2, 1);
    downs_.emplace_back(rng, w[1], w[2], 3, 2, 1);
    for (int c : w) blocks_.emplace_back(rng, c);
    out_ = Linear(rng, w[2], cfg.epd_dim);
  }

  VarPtr forward(const VarPtr& image) const {
    check(image->value.rank() == 3 && image->value.dim(0) == 3,
          "pnet_s2: input must be {3,H,W}");
    VarPtr h = image;
    for (size_t i = 0; i < downs_.size(); ++i) {
      h = gelu(downs_[i](h));
      h = blocks_[i](h);
    }
    return out_(global_avgpool(h));
  }

  void register_params(ParamRegistry& reg, const std::string& prefix) const {
    for (size_t i = 0; i < downs_.size(); ++i) {
      downs_[i].register_params(reg, prefix + ".down" + std::to_string(i));
      blocks_[i].register_params(reg, prefix + ".block" + std::to_string(i));
    }
    out_.register_params(reg, prefix + ".out");
  }

  Linear& out() { return out_; }

 private:
  std::vector<Conv2d> downs_;
  std::vector<ResBlock> blocks_;
  Linear out_;
};

}  // namespace lldif
