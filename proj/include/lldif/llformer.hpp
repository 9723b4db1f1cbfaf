#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "lldif/autodiff.hpp"
#include "lldif/config.hpp"
#include "lldif/nn.hpp"

namespace lldif {

// Restoration-style recognition backbone. A U-Net of transformer blocks
// (channel attention + gated convolutions), modulated at every block by the
// expression prior Z, runs in parallel with a landmark branch that
// cross-attends landmark tokens into windows of the image features. Per-scale
// outputs of both branches are fused and classified.

// Per-channel scale/shift derived from Z: F' = (W1 Z) * LN(F) + (W2 Z).
class EpdModulation {
 public:
  EpdModulation() = default;
  EpdModulation(Rng& rng, int epd_dim, int c) : w1_(rng, epd_dim, c), w2_(rng, epd_dim, c) {}

  VarPtr operator()(const VarPtr& f, const VarPtr& z) const {
    int h = f->value.dim(1), w = f->value.dim(2);
    VarPtr s = broadcast_channels(w1_(z), h, w);
    VarPtr t = broadcast_channels(w2_(z), h, w);
    return add(mul(s, layernorm_channels(f)), t);
  }

  void register_params(ParamRegistry& reg, const std::string& prefix) const {
    w1_.register_params(reg, prefix + ".w1");
    w2_.register_params(reg, prefix + ".w2");
  }

 private:
  Linear w1_, w2_;
};

// Channel attention: a C x C attention matrix over flattened spatial maps,
// with a learnable temperature (stored as log so it stays positive).
class DMNet {
 public:
  DMNet() = default;
  DMNet(Rng& rng, int c)
      : q_(rng, c, c, 1, 1, 0, false),
        k_(rng, c, c, 1, 1, 0, false),
        v_(rng, c, c, 1, 1, 0, false),
        proj_(rng, c, c, 1, 1, 0, false),
        log_alpha_(make_param(Tensor::full({1}, 0.5 * std::log(static_cast<double>(c))))) {}

  VarPtr operator()(const VarPtr& fp, const VarPtr& f) const {
    int c = f->value.dim(0), h = f->value.dim(1), w = f->value.dim(2);
    int hw = h * w;
    VarPtr km = reshape(k_(fp), {c, hw});
    VarPtr qm = reshape(q_(fp), {c, hw});
    VarPtr vm = reshape(v_(fp), {c, hw});
    VarPtr logits = scale_by(matmul(km, transpose(qm)), exp_op(neg(log_alpha_)));
    VarPtr attn = softmax(logits);  // rows sum to one
    VarPtr out = reshape(matmul(attn, vm), {c, h, w});
    return add(proj_(out), f);
  }

  const VarPtr& log_alpha() const { return log_alpha_; }
  Conv2d& value_proj() { return v_; }
  Conv2d& out_proj() { return proj_; }

  void register_params(ParamRegistry& reg, const std::string& prefix) const {
    q_.register_params(reg, prefix + ".q");
    k_.register_params(reg, prefix + ".k");
    v_.register_params(reg, prefix + ".v");
    proj_.register_params(reg, prefix + ".proj");
    reg.add(prefix + ".log_alpha", log_alpha_);
  }

 private:
  Conv2d q_, k_, v_, proj_;
  VarPtr log_alpha_;
};

// Gated convolution: GELU(dw1(pw1(F'))) * dw2(pw2(F')) + F, all bias-free.
class DGNet {
 public:
  DGNet() = default;
  DGNet(Rng& rng, int c)
      : pw1_(rng, c, c, 1, 1, 0, false),
        pw2_(rng, c, c, 1, 1, 0, false),
        dw1_(rng, c),
        dw2_(rng, c) {}

  VarPtr operator()(const VarPtr& fp, const VarPtr& f) const {
    VarPtr gate = gelu(dw1_(pw1_(fp)));
    VarPtr val = dw2_(pw2_(fp));
    return add(mul(gate, val), f);
  }

  Conv2d& gate_proj() { return pw1_; }
  Conv2d& value_proj() { return pw2_; }

  void register_params(ParamRegistry& reg, const std::string& prefix) const {
    pw1_.register_params(reg, prefix + ".pw1");
    pw2_.register_params(reg, prefix + ".pw2");
    dw1_.register_params(reg, prefix + ".dw1");
    dw2_.register_params(reg, prefix + ".dw2");
  }

 private:
  Conv2d pw1_, pw2_;
  Depthwise3x3 dw1_, dw2_;
};

class DTBlock {
 public:
  DTBlock() = default;
  DTBlock(Rng& rng, int epd_dim, int c)
      : mod1_(rng, epd_dim, c), mod2_(rng, epd_dim, c), dm_(rng, c), dg_(rng, c) {}

  VarPtr operator()(const VarPtr& f, const VarPtr& z) const {
    VarPtr fa = dm_(mod1_(f, z), f);
    VarPtr fb = dg_(mod2_(fa, z), fa);
    return fb;
  }

  EpdModulation& mod1() { return mod1_; }
  DMNet& dmnet() { return dm_; }
  DGNet& dgnet() { return dg_; }

  void register_params(ParamRegistry& reg, const std::string& prefix) const {
    mod1_.register_params(reg, prefix + ".mod1");
    mod2_.register_params(reg, prefix + ".mod2");
    dm_.register_params(reg, prefix + ".dm");
    dg_.register_params(reg, prefix + ".dg");
  }

 private:
  EpdModulation mod1_, mod2_;
  DMNet dm_;
  DGNet dg_;
};

// U-Net over DTBlocks. Returns one feature map per scale; the finest scale
// comes from the last decoder block, the coarsest from the bottleneck.
class DTNet {
 public:
  DTNet() = default;
  DTNet(const ModelConfig& cfg, Rng& rng) : n_scales_(cfg.n_scales) {
    const auto& ch = cfg.channels;
    stem_ = Conv2d(rng, 3, ch[0], 3, 1, 1);
    for (int s = 0; s + 1 < n_scales_; ++s) {
      enc_.emplace_back(rng, cfg.epd_dim, ch[s]);
      down_.emplace_back(rng, ch[s], ch[s + 1], 3, 2, 1);
    }
    bottleneck_ = DTBlock(rng, cfg.epd_dim, ch[n_scales_ - 1]);
    for (int s = n_scales_ - 2; s >= 0; --s) {
      up_.emplace_back(rng, ch[s + 1], ch[s], 3, 1, 1);
      skip_fuse_.emplace_back(rng, 2 * ch[s], ch[s], 1, 1, 0);
      dec_.emplace_back(rng, cfg.epd_dim, ch[s]);
    }
  }

  // image {3,H,W}, z {C} -> features[s] with channels[s] at H/2^s.
  std::vector<VarPtr> operator()(const VarPtr& image, const VarPtr& z) const {
    std::vector<VarPtr> skips;
    VarPtr h = stem_(image);
    for (int s = 0; s + 1 < n_scales_; ++s) {
      h = enc_[static_cast<size_t>(s)](h, z);
      skips.push_back(h);
      h = down_[static_cast<size_t>(s)](h);
    }
    h = bottleneck_(h, z);
    std::vector<VarPtr> feats(static_cast<size_t>(n_scales_));
    feats[static_cast<size_t>(n_scales_ - 1)] = h;
    for (int i = 0; i < n_scales_ - 1; ++i) {
      int s = n_scales_ - 2 - i;
      h = up_[static_cast<size_t>(i)](upsample2x(h));
      h = skip_fuse_[static_cast<size_t>(i)](concat_channels(h, skips[static_cast<size_t>(s)]));
      h = dec_[static_cast<size_t>(i)](h, z);
      feats[static_cast<size_t>(s)] = h;
    }
    return feats;
  }

  DTBlock& bottleneck() { return bottleneck_; }
  std::vector<DTBlock>& enc_blocks() { return enc_; }
  std::vector<DTBlock>& dec_blocks() { return dec_; }

  void register_params(ParamRegistry& reg, const std::string& prefix) const {
    stem_.register_params(reg, prefix + ".stem");
    for (size_t s = 0; s < enc_.size(); ++s) {
      enc_[s].register_params(reg, prefix + ".enc" + std::to_string(s));
      down_[s].register_params(reg, prefix + ".down" + std::to_string(s));
    }
    bottleneck_.register_params(reg, prefix + ".bottleneck");
    for (size_t i = 0; i < dec_.size(); ++i) {
      up_[i].register_params(reg, prefix + ".up" + std::to_string(i));
      skip_fuse_[i].register_params(reg, prefix + ".skip_fuse" + std::to_string(i));
      dec_[i].register_params(reg, prefix + ".dec" + std::to_string(i));
    }
  }

 private:
  int n_scales_ = 0;
  Conv2d stem_;
  std::vector<DTBlock> enc_;
  std::vector<Conv2d> down_;
  DTBlock bottleneck_;
  std::vector<Conv2d> up_;
  std::vector<Conv2d> skip_fuse_;
  std::vector<DTBlock> dec_;
};

namespace detail {

// Token indices of each window x window tile of an h x w grid, in
// (tile row-major, within-tile row-major) order, plus the inverse map.
struct WindowIndex {
  std::vector<std::vector<int>> windows;
  std::vector<int> inverse;  // token order -> position in concatenated windows
};

inline WindowIndex make_window_index(int h, int w, int m) {
  check(h % m == 0 && w % m == 0, "windows: feature map not divisible by window");
  WindowIndex wi;
  wi.inverse.assign(static_cast<size_t>(h) * w, 0);
  int flat = 0;
  for (int bi = 0; bi < h / m; ++bi)
    for (int bj = 0; bj < w / m; ++bj) {
      std::vector<int> ids;
      ids.reserve(static_cast<size_t>(m) * m);
      for (int r = 0; r < m; ++r)
        for (int c = 0; c < m; ++c) {
          int t = (bi * m + r) * w + (bj * m + c);
          ids.push_back(t);
          wi.inverse[static_cast<size_t>(t)] = flat++;
        }
      wi.windows.push_back(std::move(ids));
    }
  return wi;
}

}  // namespace detail

/// Multi-head cross attention of M query tokens into each window of a token
/// grid. q {M, D}; k, v {HW, D}; result {HW, D} in token order (window w, slot
/// r holds the attention output for query slot r against window w's keys).
/// pos_bias {M, M} is added to every head's logits.
inline VarPtr cross_window_attention(const VarPtr& q, const VarPtr& k, const VarPtr& v,
                                     const detail::WindowIndex& wi, const VarPtr& pos_bias,
                                     int heads) {
  int d = q->value.dim(1);
  check(k->value.dim(1) == d && v->value.dim(1) == d, "window attention: dim mismatch");
  check(d % heads == 0, "window attention: dim must divide by heads");
  const int dh = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<VarPtr> win_outs;
  win_outs.reserve(wi.windows.size());
  for (const auto& ids : wi.windows) {
    check(static_cast<int>(ids.size()) == q->value.dim(0), "window attention: window/query size mismatch");
    VarPtr kw = gather_rows(k, ids);
    VarPtr vw = gather_rows(v, ids);
    std::vector<VarPtr> head_outs;
    head_outs.reserve(static_cast<size_t>(heads));
    for (int hh = 0; hh < heads; ++hh) {
      VarPtr qh = slice_cols(q, hh * dh, (hh + 1) * dh);
      VarPtr kh = slice_cols(kw, hh * dh, (hh + 1) * dh);
      VarPtr vh = slice_cols(vw, hh * dh, (hh + 1) * dh);
      VarPtr logits = add(scale(matmul(qh, transpose(kh)), inv_sqrt), pos_bias);
      head_outs.push_back(matmul(softmax(logits), vh));
    }
    win_outs.push_back(concat_cols(head_outs));
  }
  return gather_rows(concat_rows(win_outs), wi.inverse);
}

// Landmark branch: pooled landmark tokens cross-attend into every spatial
// window of the image features at each scale.
class DLNet {
 public:
  DLNet() = default;
  DLNet(const ModelConfig& cfg, Rng& rng)
      : n_scales_(cfg.n_scales), window_(cfg.window), heads_(cfg.heads) {
    const auto& ch = cfg.channels;
    img_stem_ = Conv2d(rng, 3, ch[0], 3, 1, 1);
    for (int s = 0; s + 1 < n_scales_; ++s)
      img_down_.emplace_back(rng, ch[s], ch[s + 1], 3, 2, 1);
    lm_stem_ = Conv2d(rng, cfg.landmark_count, ch[0], 3, 1, 1);
    const int m2 = window_ * window_;
    for (int s = 0; s < n_scales_; ++s) {
      int d = ch[s];
      pool_proj_.emplace_back(rng, ch[0], d, 1, 1, 0);
      wq_.emplace_back(rng, d, d);
      wk_.emplace_back(rng, d, d);
      wv_.emplace_back(rng, d, d);
      wo_.emplace_back(rng, d, d);
      pos_bias_.push_back(make_param(Tensor({m2, m2})));
      ln_.emplace_back(d);
      mlp_.emplace_back(rng, d);
    }
  }

  std::vector<VarPtr> operator()(const VarPtr& image, const VarPtr& landmarks) const {
    std::vector<VarPtr> img_feats;
    VarPtr h = gelu(img_stem_(image));
    img_feats.push_back(h);
    for (int s = 0; s + 1 < n_scales_; ++s) {
      h = gelu(img_down_[static_cast<size_t>(s)](h));
      img_feats.push_back(h);
    }
    VarPtr lm = gelu(lm_stem_(landmarks));

    std::vector<VarPtr> outs;
    for (int s = 0; s < n_scales_; ++s) {
      const auto su = static_cast<size_t>(s);
      const VarPtr& is = img_feats[su];
      int ih = is->value.dim(1), iw = is->value.dim(2);
      VarPtr lm_tok = chw_to_tokens(pool_proj_[su](avgpool_to(lm, window_, window_)));
      VarPtr x = chw_to_tokens(is);  // {ih*iw, d}
      VarPtr q = wq_[su](lm_tok);    // {M, d}
      VarPtr k = wk_[su](x);
      VarPtr v = wv_[su](x);
      auto wi = detail::make_window_index(ih, iw, window_);
      VarPtr attn = cross_window_attention(q, k, v, wi, pos_bias_[su], heads_);
      VarPtr xp = add(x, wo_[su](attn));
      VarPtr xpp = add(xp, mlp_[su](ln_[su](xp)));
      outs.push_back(tokens_to_chw(xpp, ih, iw));
    }
    return outs;
  }

  Linear& out_proj(int s) { return wo_[static_cast<size_t>(s)]; }
  Mlp& mlp(int s) { return mlp_[static_cast<size_t>(s)]; }
  const VarPtr& pos_bias(int s) const { return pos_bias_[static_cast<size_t>(s)]; }
  Conv2d& img_stem() { return img_stem_; }
  std::vector<Conv2d>& img_downs() { return img_down_; }

  void register_params(ParamRegistry& reg, const std::string& prefix) const {
    img_stem_.register_params(reg, prefix + ".img_stem");
    for (size_t s = 0; s < img_down_.size(); ++s)
      img_down_[s].register_params(reg, prefix + ".img_down" + std::to_string(s));
    lm_stem_.register_params(reg, prefix + ".lm_stem");
    for (size_t s = 0; s < wq_.size(); ++s) {
      std::string p = prefix + ".scale" + std::to_string(s);
      pool_proj_[s].register_params(reg, p + ".pool_proj");
      wq_[s].register_params(reg, p + ".wq");
      wk_[s].register_params(reg, p + ".wk");
      wv_[s].register_params(reg, p + ".wv");
      wo_[s].register_params(reg, p + ".wo");
      reg.add(p + ".pos_bias", pos_bias_[s]);
      ln_[s].register_params(reg, p + ".ln");
      mlp_[s].register_params(reg, p + ".mlp");
    }
  }

 private:
  int n_scales_ = 0, window_ = 0, heads_ = 0;
  Conv2d img_stem_;
  std::vector<Conv2d> img_down_;
  Conv2d lm_stem_;
  std::vector<Conv2d> pool_proj_;
  std::vector<Linear> wq_, wk_, wv_, wo_;
  std::vector<VarPtr> pos_bias_;
  std::vector<LayerNorm> ln_;
  std::vector<Mlp> mlp_;
};

// Fuses the two branches per scale, pools each fused map to one token, and
// runs a small self-attention encoder over the scale tokens before the head.
class FuseClassifier {
 public:
  FuseClassifier() = default;
  FuseClassifier(const ModelConfig& cfg, Rng& rng)
      : n_scales_(cfg.n_scales),
        heads_(cfg.heads),
        fuse_dim_(cfg.channels.back()),
        wq_(rng, fuse_dim_, fuse_dim_),
        wk_(rng, fuse_dim_, fuse_dim_),
        wv_(rng, fuse_dim_, fuse_dim_),
        wo_(rng, fuse_dim_, fuse_dim_),
        ln_(fuse_dim_),
        mlp_(rng, fuse_dim_),
        head_(rng, fuse_dim_, cfg.n_classes) {
    for (int s = 0; s < n_scales_; ++s)
      fuse_.emplace_back(rng, 2 * cfg.channels[static_cast<size_t>(s)], fuse_dim_, 1, 1, 0);
  }

  struct Output {
    VarPtr logits;  // {n_classes}
    VarPtr pooled;  // {fuse_dim} pre-classifier embedding
  };

  Output operator()(const std::vector<VarPtr>& backbone, const std::vector<VarPtr>& landmark) const {
    check(static_cast<int>(backbone.size()) == n_scales_ &&
              static_cast<int>(landmark.size()) == n_scales_,
          "fuse: expected one feature map per scale from both branches");
    std::vector<VarPtr> tokens;
    for (int s = 0; s < n_scales_; ++s) {
      const auto su = static_cast<size_t>(s);
      check(backbone[su]->value.same_shape(landmark[su]->value), "fuse: branch shape mismatch");
      tokens.push_back(global_avgpool(fuse_[su](concat_channels(backbone[su], landmark[su]))));
    }
    VarPtr x = stack_rows(tokens);  // {S, fuse_dim}
    const int dh = fuse_dim_ / heads_;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    VarPtr q = wq_(x), k = wk_(x), v = wv_(x);
    std::vector<VarPtr> head_outs;
    for (int hh = 0; hh < heads_; ++hh) {
      VarPtr qh = slice_cols(q, hh * dh, (hh + 1) * dh);
      VarPtr kh = slice_cols(k, hh * dh, (hh + 1) * dh);
      VarPtr vh = slice_cols(v, hh * dh, (hh + 1) * dh);
      VarPtr logits = scale(matmul(qh, transpose(kh)), inv_sqrt);
      head_outs.push_back(matmul(softmax(logits), vh));
    }
    VarPtr xp = add(x, wo_(concat_cols(head_outs)));
    VarPtr xpp = add(xp, mlp_(ln_(xp)));
    Output out;
    out.pooled = mean_rows(xpp);
    out.logits = head_(out.pooled);
    return out;
  }

  Linear& head() { return head_; }

  void register_params(ParamRegistry& reg, const std::string& prefix) const {
    for (size_t s = 0; s < fuse_.size(); ++s)
      fuse_[s].register_params(reg, prefix + ".fuse" + std::to_string(s));
    wq_.register_params(reg, prefix + ".wq");
    wk_.register_params(reg, prefix + ".wk");
    wv_.register_params(reg, prefix + ".wv");
    wo_.register_params(reg, prefix + ".wo");
    ln_.register_params(reg, prefix + ".ln");
    mlp_.register_params(reg, prefix + ".mlp");
    head_.register_params(reg, prefix + ".head");
  }

 private:
  int n_scales_ = 0, heads_ = 0, fuse_dim_ = 0;
  std::vector<Conv2d> fuse_;
  Linear wq_, wk_, wv_, wo_;
  LayerNorm ln_;
  Mlp mlp_;
  Linear head_;
};

class LLformer {
 public:
  LLformer() = default;
  LLformer(const ModelConfig& cfg, Rng& rng)
      : cfg_(cfg), dtnet_(cfg, rng), dlnet_(cfg, rng), fuse_(cfg, rng) {}

  FuseClassifier::Output forward(const VarPtr& image, const VarPtr& landmarks,
                                 const VarPtr& z) const {
    check(image->value.rank() == 3 && image->value.dim(0) == 3 &&
              image->value.dim(1) == cfg_.resolution && image->value.dim(2) == cfg_.resolution,
          "llformer: image must be {3," + std::to_string(cfg_.resolution) + "," +
              std::to_string(cfg_.resolution) + "}");
    check(landmarks->value.rank() == 3 &&
              landmarks->value.dim(0) == cfg_.landmark_count &&
              landmarks->value.dim(1) == cfg_.resolution,
          "llformer: landmark heatmaps must be {K,H,W} matching the image");
    check(z->value.rank() == 1 && z->value.dim(0) == cfg_.epd_dim,
          "llformer: prior must be {C}");
    std::vector<VarPtr> fb = dtnet_(image, z);
    std::vector<VarPtr> fl = dlnet_(image, landmarks);
    return fuse_(fb, fl);
  }

  const ModelConfig& config() const { return cfg_; }
  DTNet& dtnet() { return dtnet_; }
  DLNet& dlnet() { return dlnet_; }
  FuseClassifier& fuse() { return fuse_; }

  void register_params(ParamRegistry& reg, const std::string& prefix) const {
    dtnet_.register_params(reg, prefix + ".dtnet");
    dlnet_.register_params(reg, prefix + ".dlnet");
    fuse_.register_params(reg, prefix + ".fuse");
  }

 private:
  ModelConfig cfg_;
  DTNet dtnet_;
  DLNet dlnet_;
  FuseClassifier fuse_;
};

// Cross-entropy over a batch of single-sample logit vectors.
inline VarPtr ce_loss(const std::vector<VarPtr>& logits, const std::vector<int>& labels,
                      Reduction red) {
  check(!logits.empty() && logits.size() == labels.size(), "ce_loss: batch mismatch");
  return cross_entropy_with_logits(stack_rows(logits), labels, red);
}

}  // namespace lldif
