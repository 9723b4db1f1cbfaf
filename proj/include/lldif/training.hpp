#pragma once

#include <cmath>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "lldif/optim.hpp"
#include "lldif/pipeline.hpp"

namespace lldif {

struct TrainConfig {
  int epochs = 200;
  int batch_size = 64;
  int max_steps = 0;  // 0 = run all epochs; otherwise hard step cap
  double lr = 3.5e-4;
  double weight_decay = 1e-4;
  std::string lr_schedule = "constant";  // constant | cosine
  unsigned long seed = 7;
  int log_every = 1;

  /// Small-model settings sized for the synthetic toy sets.
  static TrainConfig desk_stage1() {
    TrainConfig c;
    c.epochs = 40;
    c.batch_size = 8;
    c.max_steps = 300;
    c.lr = 3e-3;
    c.weight_decay = 1e-5;
    return c;
  }

  static TrainConfig desk_stage2() {
    TrainConfig c;
    c.epochs = 12;
    c.batch_size = 8;
    c.lr = 1e-3;
    c.weight_decay = 1e-5;
    return c;
  }

  void validate() const {
    check(epochs >= 1, "train: epochs must be >= 1");
    check(batch_size >= 1, "train: batch_size must be >= 1");
    check(max_steps >= 0, "train: max_steps must be >= 0");
    check(lr > 0.0, "train: lr must be positive");
    check(weight_decay >= 0.0, "train: weight_decay must be >= 0");
    check(lr_schedule == "constant" || lr_schedule == "cosine",
          "train: lr_schedule must be constant or cosine");
  }

  nlohmann::json to_json() const {
    return {{"epochs", epochs},         {"batch_size", batch_size},
            {"max_steps", max_steps},   {"lr", lr},
            {"weight_decay", weight_decay}, {"lr_schedule", lr_schedule},
            {"seed", seed},             {"log_every", log_every}};
  }
};

struct StepLog {
  int step = 0;
  int epoch = 0;
  double lr = 0.0;
  double loss = 0.0;
  double ce = 0.0;
  double aux = 0.0;  // alignment loss (stage 1) or KL (stage 2)
};

struct TrainResult {
  int stage = 0;
  std::string aux_name;  // "align" | "kl"
  std::vector<StepLog> logs;
  std::vector<double> epoch_loss_mean;
  std::vector<double> epoch_aux_mean;
  int steps = 0;

  nlohmann::json summary() const {
    nlohmann::json j = {{"stage", stage},
                        {"steps", steps},
                        {"epochs_run", static_cast<int>(epoch_loss_mean.size())},
                        {"epoch_loss_mean", epoch_loss_mean},
                        {"epoch_" + aux_name + "_mean", epoch_aux_mean}};
    if (!epoch_loss_mean.empty()) j["final_epoch_loss"] = epoch_loss_mean.back();
    return j;
  }

  void write_jsonl(const std::string& path) const {
    std::ofstream out(path);
    check(out.good(), "train log: cannot open " + path);
    for (const auto& s : logs) {
      nlohmann::json j = {{"step", s.step}, {"epoch", s.epoch}, {"lr", s.lr},
                          {"loss", s.loss}, {"ce", s.ce},       {aux_name, s.aux}};
      out << j.dump() << "\n";
    }
  }
};

namespace detail {

inline double scalar_of(const VarPtr& v) { return v->value[0]; }

[[noreturn]] inline void non_finite_abort(const std::string& where, int step, double loss,
                                          const ParamRegistry& reg) {
  std::string bad = "(all parameters finite)";
  for (const auto& [name, p] : reg.items())
    if (!p->value.all_finite()) {
      bad = name;
      break;
    }
  throw Error(where + ": non-finite loss " + std::to_string(loss) + " at step " +
              std::to_string(step) + "; first non-finite parameter: " + bad);
}

struct EpochAccum {
  double loss = 0.0, aux = 0.0;
  long n = 0;
  void add(double l, double a) {
    loss += l;
    aux += a;
    ++n;
  }
  void flush(TrainResult& res) {
    if (n == 0) return;
    res.epoch_loss_mean.push_back(loss / static_cast<double>(n));
    res.epoch_aux_mean.push_back(aux / static_cast<double>(n));
    *this = EpochAccum{};
  }
};

inline long planned_steps(const TrainConfig& cfg, size_t n_samples) {
  long per_epoch = static_cast<long>((n_samples + cfg.batch_size - 1) / cfg.batch_size);
  long total = per_epoch * cfg.epochs;
  if (cfg.max_steps > 0) total = std::min<long>(total, cfg.max_steps);
  return total;
}

}  // namespace detail

/// Joint stage-1 training: classifier cross-entropy plus the image/text
/// alignment loss, backpropagated through the prior network into the encoder.
inline TrainResult train_stage1(Stage1Model& model, const std::vector<const Sample*>& train,
                                const TrainConfig& cfg) {
  cfg.validate();
  check(!train.empty(), "train_stage1: empty dataset");
  Adam opt(model.params().params(), cfg.lr, cfg.weight_decay);
  long total = detail::planned_steps(cfg, train.size());

  TrainResult res;
  res.stage = 1;
  res.aux_name = "align";
  std::vector<int> order(train.size());
  std::iota(order.begin(), order.end(), 0);

  int step = 0;
  bool done = false;
  detail::EpochAccum acc;
  for (int epoch = 0; epoch < cfg.epochs && !done; ++epoch) {
    Rng shuffle_rng(mix_seed(cfg.seed, static_cast<unsigned long>(epoch)));
    shuffle_rng.shuffle(order);
    for (size_t b = 0; b < order.size() && !done; b += static_cast<size_t>(cfg.batch_size)) {
      size_t e = std::min(order.size(), b + static_cast<size_t>(cfg.batch_size));
      std::vector<ImageEmbeddings> embs;
      std::vector<VarPtr> logits;
      std::vector<int> labels;
      for (size_t i = b; i < e; ++i) {
        const Sample& s = *train[order[i]];
        Stage1Model::Forward f = model.forward(s.image, s.landmarks);
        embs.push_back(f.emb);
        logits.push_back(f.out.logits);
        labels.push_back(s.label);
      }
      VarPtr ce = ce_loss(logits, labels, Reduction::kMean);
      VarPtr loss = ce;
      double align_val = 0.0;
      if (labels.size() >= 2) {  // the contrastive term needs in-batch negatives
        VarPtr align = model.laclip().alignment_loss(embs, labels);
        align_val = detail::scalar_of(align);
        loss = add(ce, align);
      }
      double loss_val = detail::scalar_of(loss);
      if (!std::isfinite(loss_val))
        detail::non_finite_abort("train_stage1", step, loss_val, model.params());

      opt.zero_grad();
      backward(loss);
      double lr_t = cfg.lr_schedule == "cosine" ? cosine_lr(cfg.lr, step, total) : cfg.lr;
      opt.set_lr(lr_t);
      opt.step();
      ++step;

      acc.add(loss_val, align_val);
      if (cfg.log_every > 0 && (step % cfg.log_every == 0 || step == 1))
        res.logs.push_back({step, epoch, lr_t, loss_val, detail::scalar_of(ce), align_val});
      if (cfg.max_steps > 0 && step >= cfg.max_steps) done = true;
    }
    acc.flush(res);
  }
  res.steps = step;
  return res;
}

/// Stage-2 training: the prior extractor stays frozen and supplies the target
/// Z; the conditioning network, denoiser, and restorer train jointly.
inline TrainResult train_stage2(Stage2Model& model, const std::vector<PairedSample>& train,
                                const TrainConfig& cfg) {
  cfg.validate();
  check(!train.empty(), "train_stage2: empty dataset");
  const Stage2Options& opt_flags = model.options();
  Adam opt(model.trainable().params(), cfg.lr, cfg.weight_decay);
  long total = detail::planned_steps(cfg, train.size());

  TrainResult res;
  res.stage = 2;
  res.aux_name = "kl";
  std::vector<int> order(train.size());
  std::iota(order.begin(), order.end(), 0);

  int step = 0;
  bool done = false;
  detail::EpochAccum acc;
  for (int epoch = 0; epoch < cfg.epochs && !done; ++epoch) {
    Rng shuffle_rng(mix_seed(cfg.seed, static_cast<unsigned long>(epoch)));
    shuffle_rng.shuffle(order);
    for (size_t b = 0; b < order.size() && !done; b += static_cast<size_t>(cfg.batch_size)) {
      size_t e = std::min(order.size(), b + static_cast<size_t>(cfg.batch_size));
      std::vector<VarPtr> logits;
      std::vector<int> labels;
      VarPtr kl_sum;
      for (size_t i = b; i < e; ++i) {
        const PairedSample& pr = train[order[i]];
        Tensor z1 = model.prior_target(pr.clear->image);
        VarPtr x_s2 = model.conditioning(pr.low->image);
        VarPtr z_start;
        if (opt_flags.use_diffusion && opt_flags.insert_noise) {
          Rng nrng(mix_seed(mix_seed(cfg.seed, fnv1a64(pr.low->path)),
                            static_cast<unsigned long>(epoch)));
          Tensor eps = nrng.normal_tensor(z1.shape());
          z_start = make_const(q_sample(z1, model.schedule().T(), eps, model.schedule()));
        }
        VarPtr zhat = model.restore_prior(x_s2, z_start);
        auto out = model.llformer().forward(make_const(pr.low->image),
                                            make_const(pr.low->landmarks), zhat);
        logits.push_back(out.logits);
        labels.push_back(pr.low->label);
        VarPtr kl = kl_loss(make_const(z1), zhat);
        kl_sum = kl_sum ? add(kl_sum, kl) : kl;
      }
      VarPtr ce = ce_loss(logits, labels, Reduction::kMean);
      VarPtr kl_mean = scale(kl_sum, 1.0 / static_cast<double>(labels.size()));
      VarPtr loss = opt_flags.loss == "total" ? total_loss(ce, kl_mean) : ce;
      double loss_val = detail::scalar_of(loss);
      if (!std::isfinite(loss_val))
        detail::non_finite_abort("train_stage2", step, loss_val, model.trainable());

      opt.zero_grad();
      backward(loss);
      double lr_t = cfg.lr_schedule == "cosine" ? cosine_lr(cfg.lr, step, total) : cfg.lr;
      opt.set_lr(lr_t);
      opt.step();
      ++step;

      double kl_val = detail::scalar_of(kl_mean);
      acc.add(loss_val, kl_val);
      if (cfg.log_every > 0 && (step % cfg.log_every == 0 || step == 1))
        res.logs.push_back({step, epoch, lr_t, loss_val, detail::scalar_of(ce), kl_val});
      if (cfg.max_steps > 0 && step >= cfg.max_steps) done = true;
    }
    acc.flush(res);
  }
  res.steps = step;
  return res;
}

}  // namespace lldif
