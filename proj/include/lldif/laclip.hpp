#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "lldif/autodiff.hpp"
#include "lldif/config.hpp"
#include "lldif/nn.hpp"
#include "lldif/text.hpp"

namespace lldif {

// Contrastive image/text model. The image encoder produces two unit-norm
// embeddings per image (a generic feature and a label-oriented prediction);
// the text encoder embeds captions onto the same sphere. Training aligns
// feature<->caption and label_pred<->caption with a symmetric InfoNCE loss
// under a learnable temperature.

struct ImageEmbeddings {
  VarPtr feat;        // {D_e}, unit norm
  VarPtr label_pred;  // {D_e}, unit norm
};

class ImageEncoder {
 public:
  ImageEncoder(const ModelConfig& cfg, Rng& rng)
      : cfg_(cfg),
        c1_(rng, 3, cfg.backbone_widths.at(0), 3, 2, 1),
        c2_(rng, cfg.backbone_widths.at(0), cfg.backbone_widths.at(1), 3, 2, 1),
        c3_(rng, cfg.backbone_widths.at(1), cfg.backbone_widths.at(2), 3, 2, 1),
        trunk_(rng, cfg.backbone_widths.at(2), cfg.backbone_widths.at(2)),
        feat_head_(rng, cfg.backbone_widths.at(2), cfg.embed_dim),
        label_head_(rng, cfg.backbone_widths.at(2), cfg.embed_dim) {
    check(cfg.backbone_widths.size() == 3, "image encoder: expects three conv widths");
  }

  ImageEmbeddings forward(const VarPtr& image) const {
    check(image->value.rank() == 3 && image->value.dim(0) == 3,
          "image encoder: input must be {3,H,W}");
    VarPtr h = gelu(c1_(image));
    h = gelu(c2_(h));
    h = gelu(c3_(h));
    h = global_avgpool(h);
    h = gelu(trunk_(h));
    ImageEmbeddings out;
    out.feat = l2_normalize(feat_head_(h));
    out.label_pred = l2_normalize(label_head_(h));
    return out;
  }

  void register_params(ParamRegistry& reg, const std::string& prefix) const {
    c1_.register_params(reg, prefix + ".c1");
    c2_.register_params(reg, prefix + ".c2");
    c3_.register_params(reg, prefix + ".c3");
    trunk_.register_params(reg, prefix + ".trunk");
    feat_head_.register_params(reg, prefix + ".feat_head");
    label_head_.register_params(reg, prefix + ".label_head");
  }

 private:
  ModelConfig cfg_;
  Conv2d c1_, c2_, c3_;
  Linear trunk_, feat_head_, label_head_;
};

class TextEncoder {
 public:
  TextEncoder(const ModelConfig& cfg, const Vocabulary& vocab, Rng& rng)
      : vocab_(vocab),
        table_(make_param(rng.uniform_tensor({vocab.size(), cfg.embed_dim}, -0.1, 0.1))),
        proj_(rng, cfg.embed_dim, cfg.embed_dim) {}

  VarPtr forward(const std::string& caption) const {
    std::vector<int> ids = vocab_.tokenize(caption);
    VarPtr tok = gather_rows(table_, ids);
    VarPtr pooled = mean_rows(tok);
    return l2_normalize(proj_(pooled));
  }

  const Vocabulary& vocab() const { return vocab_; }

  void register_params(ParamRegistry& reg, const std::string& prefix) const {
    reg.add(prefix + ".table", table_);
    proj_.register_params(reg, prefix + ".proj");
  }

 private:
  Vocabulary vocab_;
  VarPtr table_;
  Linear proj_;
};

// One direction of the symmetric InfoNCE term: rows of A must match the
// same-index rows of B. Both CE directions (A->B and B->A) are averaged.
inline VarPtr info_nce_term(const std::vector<VarPtr>& a, const std::vector<VarPtr>& b,
                            const VarPtr& log_inv_temp) {
  check(a.size() == b.size() && a.size() >= 2, "alignment: needs a batch of at least 2 pairs");
  const long n = static_cast<long>(a.size());
  VarPtr am = stack_rows(a);
  VarPtr bm = stack_rows(b);
  VarPtr logits = scale_by(matmul(am, transpose(bm)), exp_op(log_inv_temp));
  std::vector<int> diag(static_cast<size_t>(n));
  for (long i = 0; i < n; ++i) diag[static_cast<size_t>(i)] = static_cast<int>(i);
  VarPtr ab = cross_entropy_with_logits(logits, diag, Reduction::kMean);
  VarPtr ba = cross_entropy_with_logits(transpose(logits), diag, Reduction::kMean);
  return scale(add(ab, ba), 0.5);
}

class LaClip {
 public:
  LaClip(const ModelConfig& cfg, Rng& rng)
      : cfg_(cfg),
        image_(cfg, rng),
        text_(cfg, Vocabulary(), rng),
        log_inv_temp_(make_param(Tensor::full({1}, std::log(1.0 / 0.07)))) {}

  const ImageEncoder& image() const { return image_; }
  const TextEncoder& text() const { return text_; }
  const VarPtr& log_inv_temp() const { return log_inv_temp_; }
  const ModelConfig& config() const { return cfg_; }

  ImageEmbeddings encode_image(const Tensor& image) const {
    return image_.forward(make_const(image));
  }

  // Both alignment terms: feature embeddings against their own captions, and
  // label predictions against the canonical caption of the ground-truth class.
  VarPtr alignment_loss(const std::vector<ImageEmbeddings>& embs,
                        const std::vector<int>& labels) const {
    check(embs.size() == labels.size(), "alignment: batch size mismatch");
    std::vector<VarPtr> feats, preds, caps;
    feats.reserve(embs.size());
    for (size_t i = 0; i < embs.size(); ++i) {
      feats.push_back(embs[i].feat);
      preds.push_back(embs[i].label_pred);
      const int lab = labels[i];
      check(lab >= 0 && lab < kNumClasses, "alignment: label out of range");
      caps.push_back(text_.forward(caption_for_class(kClassNames[static_cast<size_t>(lab)])));
    }
    VarPtr t1 = info_nce_term(feats, caps, log_inv_temp_);
    VarPtr t2 = info_nce_term(preds, caps, log_inv_temp_);
    return add(t1, t2);
  }

  void register_params(ParamRegistry& reg, const std::string& prefix) const {
    image_.register_params(reg, prefix + ".image");
    text_.register_params(reg, prefix + ".text");
    reg.add(prefix + ".log_inv_temp", log_inv_temp_);
  }

 private:
  ModelConfig cfg_;
  ImageEncoder image_;
  TextEncoder text_;
  VarPtr log_inv_temp_;
};

}  // namespace lldif
