#pragma once

#include <chrono>
#include <cstdio>
#include <functional>
#include <string>
#include <vector>

#include "lldif/pipeline.hpp"
#include "lldif/training.hpp"

namespace lldif {

using PredictFn = std::function<Prediction(const Sample&)>;

inline PredictFn make_predict_fn(const Stage1Model& m) {
  return [&m](const Sample& s) { return m.predict(s); };
}

inline PredictFn make_predict_fn(const Stage2Model& m, unsigned long seed) {
  return [&m, seed](const Sample& s) { return m.predict(s, seed); };
}

struct EvalReport {
  int n_classes = 0;
  long total = 0;
  double accuracy = 0.0;
  std::vector<long> class_count;
  std::vector<double> class_accuracy;
  std::vector<std::vector<long>> confusion;  // [true][predicted]
  // mean max-softmax confidence over correctly classified samples, per subset
  double conf_correct_clear = 0.0;
  long n_correct_clear = 0;
  double conf_correct_low = 0.0;
  long n_correct_low = 0;

  nlohmann::json to_json() const {
    return {{"n_classes", n_classes},
            {"total", total},
            {"accuracy", accuracy},
            {"class_count", class_count},
            {"class_accuracy", class_accuracy},
            {"confusion", confusion},
            {"confidence_correct", {{"clear", {{"mean", conf_correct_clear}, {"n", n_correct_clear}}},
                                    {"low_light", {{"mean", conf_correct_low}, {"n", n_correct_low}}}}}};
  }

  std::string format_table(const std::vector<std::string>& class_names) const {
    std::string out;
    char buf[160];
    std::snprintf(buf, sizeof buf, "accuracy %.4f over %ld samples\n", accuracy, total);
    out += buf;
    if (n_correct_clear > 0) {
      std::snprintf(buf, sizeof buf, "mean confidence (correct, clear): %.4f  n=%ld\n",
                    conf_correct_clear, n_correct_clear);
      out += buf;
    }
    if (n_correct_low > 0) {
      std::snprintf(buf, sizeof buf, "mean confidence (correct, low-light): %.4f  n=%ld\n",
                    conf_correct_low, n_correct_low);
      out += buf;
    }
    for (int c = 0; c < n_classes; ++c) {
      std::string name = c < static_cast<int>(class_names.size()) ? class_names[c]
                                                                  : "class" + std::to_string(c);
      std::snprintf(buf, sizeof buf, "  %-10s acc %.4f  n=%ld |", name.c_str(),
                    class_accuracy[c], class_count[c]);
      out += buf;
      for (int p = 0; p < n_classes; ++p) {
        std::snprintf(buf, sizeof buf, " %4ld", confusion[c][p]);
        out += buf;
      }
      out += "\n";
    }
    return out;
  }
};

/// Side-effect-free accuracy/confusion/confidence evaluation.
inline EvalReport evaluate(const PredictFn& fn, const std::vector<const Sample*>& samples,
                           int n_classes) {
  check(n_classes >= 2, "evaluate: need at least 2 classes");
  check(!samples.empty(), "evaluate: empty sample list");
  EvalReport r;
  r.n_classes = n_classes;
  r.class_count.assign(n_classes, 0);
  r.class_accuracy.assign(n_classes, 0.0);
  r.confusion.assign(n_classes, std::vector<long>(n_classes, 0));
  long correct = 0;
  for (const Sample* sp : samples) {
    const Sample& s = *sp;
    check(s.label >= 0 && s.label < n_classes,
          "evaluate: sample label " + std::to_string(s.label) +
              " outside the model's class range " + std::to_string(n_classes));
    Prediction p = fn(s);
    check(p.probs.numel() == n_classes,
          "evaluate: model emits " + std::to_string(p.probs.numel()) + " classes, dataset has " +
              std::to_string(n_classes));
    r.confusion[s.label][p.label] += 1;
    r.class_count[s.label] += 1;
    ++r.total;
    if (p.label == s.label) {
      ++correct;
      if (s.low_light) {
        r.conf_correct_low += p.confidence;
        ++r.n_correct_low;
      } else {
        r.conf_correct_clear += p.confidence;
        ++r.n_correct_clear;
      }
    }
  }
  r.accuracy = static_cast<double>(correct) / static_cast<double>(r.total);
  for (int c = 0; c < n_classes; ++c)
    if (r.class_count[c] > 0)
      r.class_accuracy[c] =
          static_cast<double>(r.confusion[c][c]) / static_cast<double>(r.class_count[c]);
  if (r.n_correct_clear > 0) r.conf_correct_clear /= static_cast<double>(r.n_correct_clear);
  if (r.n_correct_low > 0) r.conf_correct_low /= static_cast<double>(r.n_correct_low);
  return r;
}

// ---------------------------------------------------------------------------
// embedding export (for external projection tools)

struct EmbeddingExport {
  Tensor embeddings;  // {N, D}
  Tensor labels;      // {N}
  Tensor low_flags;   // {N}, 1.0 where the input is low-light
};

inline EmbeddingExport export_embeddings(const PredictFn& fn,
                                         const std::vector<const Sample*>& samples,
                                         const std::string& layer) {
  check(layer == "epd" || layer == "penultimate",
        "export_embeddings: layer must be epd or penultimate, got " + layer);
  check(!samples.empty(), "export_embeddings: empty sample list");
  EmbeddingExport out;
  int n = static_cast<int>(samples.size());
  out.labels = Tensor({n});
  out.low_flags = Tensor({n});
  for (int i = 0; i < n; ++i) {
    Prediction p = fn(*samples[i]);
    const Tensor& emb = layer == "epd" ? p.epd : p.pooled;
    check(emb.rank() == 1, "export_embeddings: embedding must be a vector");
    if (i == 0) out.embeddings = Tensor({n, static_cast<int>(emb.numel())});
    check(emb.numel() == out.embeddings.dim(1), "export_embeddings: inconsistent widths");
    for (long j = 0; j < emb.numel(); ++j) out.embeddings.at(i, static_cast<int>(j)) = emb[j];
    out.labels[i] = samples[i]->label;
    out.low_flags[i] = samples[i]->low_light ? 1.0 : 0.0;
  }
  return out;
}

// ---------------------------------------------------------------------------
// diffusion-iteration sweep

struct SweepRow {
  int T = 0;
  EvalReport report;
  double seconds = 0.0;
  EmbeddingExport epd;  // restored priors at this T, for projection plots
};

namespace detail {

struct ScheduleRestore {
  Stage2Model& m;
  std::vector<double> betas;
  explicit ScheduleRestore(Stage2Model& model) : m(model), betas(model.schedule().betas()) {}
  ~ScheduleRestore() { m.set_schedule(BetaSchedule(betas)); }
};

}  // namespace detail

/// Re-runs inference at each requested chain length with a matched schedule.
inline std::vector<SweepRow> iteration_sweep(Stage2Model& model,
                                             const std::vector<const Sample*>& samples,
                                             const std::vector<int>& T_list, unsigned long seed,
                                             int n_classes) {
  check(model.has_schedule(), "sweep: the model was trained without diffusion");
  check(!T_list.empty(), "sweep: empty T list");
  for (int T : T_list) check(T > 0, "sweep: T must be positive, got " + std::to_string(T));

  std::vector<SweepRow> rows;
  detail::ScheduleRestore restore(model);
  for (int T : T_list) {
    if (model.schedule().T() != T) model.set_schedule(default_schedule(T));
    auto t0 = std::chrono::steady_clock::now();
    PredictFn fn = make_predict_fn(model, seed);
    SweepRow row;
    row.T = T;
    row.report = evaluate(fn, samples, n_classes);
    row.epd = export_embeddings(fn, samples, "epd");
    row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    rows.push_back(std::move(row));
    model.set_schedule(BetaSchedule(restore.betas));
  }
  return rows;
}

// ---------------------------------------------------------------------------
// component ablation grid

struct AblationRow {
  std::string id;
  bool diffusion = false;
  std::string loss;  // "ce" | "total"
  bool insert_noise = false;
  double accuracy = 0.0;
  bool denoiser_constructed = false;
  double paper_reference_accuracy = 0.0;  // full-scale result, context only
  double train_seconds = 0.0;
};

struct AblationGrid {
  std::vector<AblationRow> rows;

  nlohmann::json to_json() const {
    nlohmann::json out = nlohmann::json::array();
    for (const auto& r : rows)
      out.push_back({{"id", r.id},
                     {"diffusion", r.diffusion},
                     {"loss", r.loss},
                     {"insert_noise", r.insert_noise},
                     {"accuracy", r.accuracy},
                     {"denoiser_constructed", r.denoiser_constructed},
                     {"paper_reference_accuracy", r.paper_reference_accuracy},
                     {"train_seconds", r.train_seconds}});
    return {{"rows", out},
            {"note", "paper_reference_accuracy is the published full-scale number, shown for "
                     "context only; desk-scale runs are not expected to match it"}};
  }

  std::string format_table() const {
    std::string out = "variant  diffusion  loss   insert  accuracy  reference\n";
    char buf[120];
    for (const auto& r : rows) {
      std::snprintf(buf, sizeof buf, "%-8s %-10s %-6s %-7s %8.4f  %9.2f\n", r.id.c_str(),
                    r.diffusion ? "yes" : "no", r.loss.c_str(), r.insert_noise ? "yes" : "no",
                    r.accuracy, r.paper_reference_accuracy);
      out += buf;
    }
    out += "(reference column: published full-scale accuracy, context only)\n";
    return out;
  }
};

/// The four component-toggle variants, each trained from the same stage-1
/// model and scored on the same evaluation split.
inline AblationGrid ablation_run(const Stage1Model& s1, const std::vector<PairedSample>& train,
                                 const std::vector<const Sample*>& eval_samples,
                                 const TrainConfig& tcfg) {
  struct VariantSpec {
    const char* id;
    Stage2Options opt;
    double paper_ref;
  };
  const VariantSpec variants[] = {
      {"V1", {false, false, "ce"}, 89.46},
      {"V2", {true, true, "total"}, 91.67},
      {"V3", {true, false, "ce"}, 92.16},
      {"V4", {true, true, "ce"}, 92.97},
  };

  AblationGrid grid;
  const ModelConfig& cfg = s1.config();
  for (const auto& v : variants) {
    auto t0 = std::chrono::steady_clock::now();
    Stage2Model m(cfg, mix_seed(tcfg.seed, fnv1a64(v.id)), v.opt);
    m.init_from_stage1(s1);
    train_stage2(m, train, tcfg);
    EvalReport rep = evaluate(make_predict_fn(m, tcfg.seed), eval_samples, cfg.n_classes);
    AblationRow row;
    row.id = v.id;
    row.diffusion = v.opt.use_diffusion;
    row.loss = v.opt.loss;
    row.insert_noise = v.opt.insert_noise;
    row.accuracy = rep.accuracy;
    row.denoiser_constructed = m.has_denoiser();
    row.paper_reference_accuracy = v.paper_ref;
    row.train_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    grid.rows.push_back(std::move(row));
  }
  return grid;
}

}  // namespace lldif
