#pragma once

#include <algorithm>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "lldif/checkpoint.hpp"
#include "lldif/config.hpp"
#include "lldif/data.hpp"
#include "lldif/diffusion.hpp"
#include "lldif/laclip.hpp"
#include "lldif/llformer.hpp"
#include "lldif/pnet.hpp"

namespace lldif {

// Model bundles for the two stages, plus the label-free inference paths.
// Stage 1 learns the expression prior from the image itself; stage 2 recovers
// it from a degraded image alone (optionally through the diffusion chain) and
// never sees a ground-truth label at inference time.

struct Prediction {
  int label = -1;
  double confidence = 0.0;
  Tensor probs;   // {n_classes}
  Tensor epd;     // prior vector fed to the classifier
  Tensor pooled;  // penultimate embedding
};

namespace detail {

inline Prediction finish_prediction(const FuseClassifier::Output& out, const Tensor& epd) {
  Prediction p;
  p.epd = epd;
  p.pooled = out.pooled->value;
  p.probs = softmax(out.logits)->value;
  for (long i = 0; i < p.probs.numel(); ++i)
    if (p.label < 0 || p.probs[i] > p.confidence) {
      p.label = static_cast<int>(i);
      p.confidence = p.probs[i];
    }
  return p;
}

}  // namespace detail

class Stage1Model {
 public:
  Stage1Model(const ModelConfig& c, unsigned long seed)
      : cfg_(c),
        init_rng_(mix_seed(seed, fnv1a64("stage1"))),
        laclip_(c, init_rng_),
        pnet_(c, init_rng_),
        llformer_(c, init_rng_) {
    cfg_.validate();
    laclip_.register_params(reg_, "laclip");
    pnet_.register_params(reg_, "pnet_s1");
    llformer_.register_params(reg_, "llformer");
  }

  struct Forward {
    ImageEmbeddings emb;
    VarPtr z;
    FuseClassifier::Output out;
  };

  Forward forward(const Tensor& image, const Tensor& landmarks) const {
    Forward f;
    f.emb = laclip_.encode_image(image);
    f.z = pnet_.forward(f.emb.feat, f.emb.label_pred);
    f.out = llformer_.forward(make_const(image), make_const(landmarks), f.z);
    return f;
  }

  /// Expression prior of one image, detached from the graph.
  Tensor prior(const Tensor& image) const {
    NoGradGuard ng;
    ImageEmbeddings emb = laclip_.encode_image(image);
    return pnet_.forward(emb.feat, emb.label_pred)->value;
  }

  Prediction predict(const Sample& s) const {
    NoGradGuard ng;
    Forward f = forward(s.image, s.landmarks);
    return detail::finish_prediction(f.out, f.z->value);
  }

  const ModelConfig& config() const { return cfg_; }
  const ParamRegistry& params() const { return reg_; }
  LaClip& laclip() { return laclip_; }
  const LaClip& laclip() const { return laclip_; }
  PnetS1& pnet() { return pnet_; }
  LLformer& llformer() { return llformer_; }
  const LLformer& llformer() const { return llformer_; }

 private:
  ModelConfig cfg_;
  Rng init_rng_;
  LaClip laclip_;
  PnetS1 pnet_;
  LLformer llformer_;
  ParamRegistry reg_;
};

struct Stage2Options {
  bool use_diffusion = true;
  bool insert_noise = true;
  std::string loss = "total";  // "total" | "ce"

  void validate() const {
    check(loss == "total" || loss == "ce", "stage2: loss must be total or ce");
    check(use_diffusion || !insert_noise, "stage2: insert_noise requires diffusion");
  }

  nlohmann::json to_json() const {
    return {{"use_diffusion", use_diffusion}, {"insert_noise", insert_noise}, {"loss", loss}};
  }
};

class Stage2Model {
 public:
  Stage2Model(const ModelConfig& c, unsigned long seed, const Stage2Options& opt)
      : cfg_(c),
        opt_(opt),
        init_rng_(mix_seed(seed, fnv1a64("stage2"))),
        laclip_(c, init_rng_),
        pnet_s1_(c, init_rng_),
        llformer_(c, init_rng_),
        pnet_s2_(c, init_rng_) {
    cfg_.validate();
    opt_.validate();
    if (opt_.use_diffusion) {
      denoiser_.emplace(cfg_, init_rng_);
      schedule_.emplace(default_schedule(cfg_.T));
    }
    laclip_.register_params(frozen_, "laclip");
    pnet_s1_.register_params(frozen_, "pnet_s1");
    llformer_.register_params(trainable_, "llformer");
    pnet_s2_.register_params(trainable_, "pnet_s2");
    if (denoiser_) denoiser_->register_params(trainable_, "denoiser");
  }

  /// Adopts stage-1 weights: the frozen prior extractor exactly, and the
  /// restorer as the starting point for joint fine-tuning.
  void init_from_stage1(const Checkpoint& ck) {
    check(ck.meta.value("stage", 0) == 1, "stage2: expected a stage-1 checkpoint");
    ModelConfig other = ModelConfig::from_json(ck.meta.at("config"));
    check(other.fingerprint() == cfg_.fingerprint(),
          "stage2: stage-1 checkpoint fingerprint does not match this config");
    load_into(ck, frozen_);
    ParamRegistry llreg;
    llformer_.register_params(llreg, "llformer");
    load_into(ck, llreg);
  }

  /// Same adoption directly from an in-memory stage-1 model.
  void init_from_stage1(const Stage1Model& m) {
    check(m.config().fingerprint() == cfg_.fingerprint(),
          "stage2: stage-1 model fingerprint does not match this config");
    auto copy_from = [&m](const std::pair<std::string, VarPtr>& entry) {
      VarPtr src = m.params().find(entry.first);
      check(src != nullptr, "stage2: stage-1 model missing parameter " + entry.first);
      check(src->value.same_shape(entry.second->value),
            "stage2: shape mismatch for " + entry.first);
      entry.second->value = src->value;
    };
    for (const auto& entry : frozen_.items()) copy_from(entry);
    for (const auto& entry : trainable_.items())
      if (entry.first.rfind("llformer.", 0) == 0) copy_from(entry);
  }

  /// Prior target from the clear counterpart, via the frozen stage-1 nets.
  Tensor prior_target(const Tensor& clear_image) const {
    NoGradGuard ng;
    ImageEmbeddings emb = laclip_.encode_image(clear_image);
    return pnet_s1_.forward(emb.feat, emb.label_pred)->value;
  }

  VarPtr conditioning(const Tensor& image) const {
    return pnet_s2_.forward(make_const(image));
  }

  /// Runs the restoration chain (or the direct path when diffusion is off).
  /// z_start overrides the chain's starting point when given.
  VarPtr restore_prior(const VarPtr& x_s2, const VarPtr& z_start = nullptr) const {
    if (!opt_.use_diffusion) return x_s2;
    VarPtr z0 = z_start ? z_start : x_s2;
    auto fn = [this](const VarPtr& z_t, int t, const VarPtr& cond) {
      return denoiser_->forward(z_t, t, cond);
    };
    return run_reverse_chain(z0, x_s2, *schedule_, cfg_.variant, fn);
  }

  /// Label-free inference: degraded image + landmarks in, class posterior out.
  Prediction predict(const Sample& s, unsigned long seed) const {
    NoGradGuard ng;
    VarPtr x_s2 = conditioning(s.image);
    VarPtr z_start;
    if (opt_.use_diffusion && opt_.insert_noise) {
      Rng r(mix_seed(seed, fnv1a64(s.path)));
      z_start = make_const(r.normal_tensor({cfg_.epd_dim}));
    }
    VarPtr zhat = restore_prior(x_s2, z_start);
    auto out = llformer_.forward(make_const(s.image), make_const(s.landmarks), zhat);
    return detail::finish_prediction(out, zhat->value);
  }

  const ModelConfig& config() const { return cfg_; }
  const Stage2Options& options() const { return opt_; }
  const ParamRegistry& trainable() const { return trainable_; }
  const ParamRegistry& frozen() const { return frozen_; }
  bool has_denoiser() const { return denoiser_.has_value(); }
  bool has_schedule() const { return schedule_.has_value(); }
  const BetaSchedule& schedule() const {
    check(schedule_.has_value(), "stage2: no schedule (diffusion disabled)");
    return *schedule_;
  }
  void set_schedule(BetaSchedule s) {
    check(opt_.use_diffusion, "stage2: cannot set a schedule with diffusion disabled");
    schedule_.emplace(std::move(s));
  }
  const Denoiser& denoiser() const {
    check(denoiser_.has_value(), "stage2: no denoiser (diffusion disabled)");
    return *denoiser_;
  }
  LLformer& llformer() { return llformer_; }
  PnetS2& pnet_s2() { return pnet_s2_; }

 private:
  ModelConfig cfg_;
  Stage2Options opt_;
  Rng init_rng_;
  LaClip laclip_;
  PnetS1 pnet_s1_;
  LLformer llformer_;
  PnetS2 pnet_s2_;
  std::optional<Denoiser> denoiser_;
  std::optional<BetaSchedule> schedule_;
  ParamRegistry frozen_;
  ParamRegistry trainable_;
};

// ---------------------------------------------------------------------------
// checkpoint glue

inline void save_stage1(const std::string& path, const Stage1Model& m, nlohmann::json extra) {
  nlohmann::json meta = {{"stage", 1}, {"config", m.config().to_json()}};
  if (!extra.is_null()) meta["train"] = std::move(extra);
  save_checkpoint(path, std::move(meta), m.params());
}

inline Stage1Model load_stage1(const std::string& path) {
  Checkpoint ck = load_checkpoint(path);
  check(ck.meta.value("stage", 0) == 1, "checkpoint: not a stage-1 checkpoint: " + path);
  Stage1Model m(ModelConfig::from_json(ck.meta.at("config")), 0);
  load_into(ck, m.params());
  return m;
}

inline void save_stage2(const std::string& path, const Stage2Model& m, nlohmann::json extra) {
  nlohmann::json meta = {{"stage", 2},
                         {"config", m.config().to_json()},
                         {"options", m.options().to_json()}};
  if (m.has_schedule()) meta["betas"] = m.schedule().betas();
  if (!extra.is_null()) meta["train"] = std::move(extra);
  // inference needs only the trainable nets; the frozen stage-1 extractor is
  // a training-time device and is deliberately not serialized here
  save_checkpoint(path, std::move(meta), m.trainable());
}

inline Stage2Model load_stage2(const std::string& path) {
  Checkpoint ck = load_checkpoint(path);
  check(ck.meta.value("stage", 0) == 2, "checkpoint: not a stage-2 checkpoint: " + path);
  Stage2Options opt;
  const auto& j = ck.meta.at("options");
  opt.use_diffusion = j.at("use_diffusion");
  opt.insert_noise = j.at("insert_noise");
  opt.loss = j.at("loss");
  Stage2Model m(ModelConfig::from_json(ck.meta.at("config")), 0, opt);
  if (ck.meta.contains("betas"))
    m.set_schedule(BetaSchedule(ck.meta.at("betas").get<std::vector<double>>()));
  load_into(ck, m.trainable());
  return m;
}

// ---------------------------------------------------------------------------
// sample pairing for stage-2 training (degraded input, clear prior target)

struct PairedSample {
  const Sample* low = nullptr;
  const Sample* clear = nullptr;
};

namespace detail {

inline std::string pair_key(const Sample& s) {
  std::string base = s.path;
  size_t slash = base.find_last_of('/');
  if (slash != std::string::npos) base = base.substr(slash + 1);
  return s.split + "/" + std::to_string(s.label) + "/" + base;
}

}  // namespace detail

/// Matches degraded samples with their clear counterparts by split, class,
/// and file name. An empty clear list self-pairs (prior from the same image).
inline std::vector<PairedSample> pair_samples(const std::vector<const Sample*>& low,
                                              const std::vector<const Sample*>& clear) {
  std::vector<PairedSample> out;
  out.reserve(low.size());
  if (clear.empty()) {
    for (const Sample* s : low) out.push_back({s, s});
    return out;
  }
  std::map<std::string, const Sample*> index;
  for (const Sample* s : clear) index[detail::pair_key(*s)] = s;
  for (const Sample* s : low) {
    auto it = index.find(detail::pair_key(*s));
    check(it != index.end(), "pairing: no clear counterpart for " + s->path);
    out.push_back({s, it->second});
  }
  return out;
}

}  // namespace lldif
