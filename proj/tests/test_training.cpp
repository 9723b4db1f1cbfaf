#include <unistd.h>

#include <catch2/catch.hpp>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>

#include "lldif/training.hpp"

using namespace lldif;

namespace {

ModelConfig tiny_cfg() {
  ModelConfig c = ModelConfig::desk();
  c.resolution = 16;
  return c;
}

Dataset tiny_toy() {
  SynthConfig sc;
  sc.n_classes = 2;
  sc.n_per_class = 4;
  sc.resolution = 16;
  sc.seed = 5;
  return synth_toy_dataset(sc);
}

TrainConfig fast_cfg(int epochs) {
  TrainConfig tc;
  tc.epochs = epochs;
  tc.batch_size = 4;
  tc.lr = 3e-3;
  tc.weight_decay = 0.0;
  tc.seed = 17;
  return tc;
}

/// The same per-batch objective train_stage1 optimizes, for spot re-evaluation.
double stage1_batch_loss(Stage1Model& m, const std::vector<const Sample*>& batch) {
  NoGradGuard ng;
  std::vector<ImageEmbeddings> embs;
  std::vector<VarPtr> logits;
  std::vector<int> labels;
  for (const Sample* s : batch) {
    auto f = m.forward(s->image, s->landmarks);
    embs.push_back(f.emb);
    logits.push_back(f.out.logits);
    labels.push_back(s->label);
  }
  VarPtr loss = ce_loss(logits, labels, Reduction::kMean);
  if (labels.size() >= 2) loss = add(loss, m.laclip().alignment_loss(embs, labels));
  return loss->value[0];
}

}  // namespace

TEST_CASE("stage-1 training reduces the joint loss on a toy set", "[training]") {
  Dataset ds = tiny_toy();
  Stage1Model m(tiny_cfg(), 31);
  TrainResult res = train_stage1(m, ds.split("train"), fast_cfg(6));

  REQUIRE(res.stage == 1);
  REQUIRE(res.steps == 12);
  REQUIRE(res.epoch_loss_mean.size() == 6);
  CHECK(res.epoch_loss_mean.back() < 0.8 * res.epoch_loss_mean.front());
  CHECK(res.logs.size() == 12);
  CHECK(res.logs.front().step == 1);
  CHECK(res.logs.back().step == 12);
  for (const auto& l : res.logs) CHECK(std::isfinite(l.loss));
}

TEST_CASE("identical seed and config give identical loss trajectories", "[training]") {
  Dataset ds = tiny_toy();
  auto run = [&ds]() {
    Stage1Model m(tiny_cfg(), 31);
    return train_stage1(m, ds.split("train"), fast_cfg(3));
  };
  TrainResult a = run();
  TrainResult b = run();
  REQUIRE(a.logs.size() == b.logs.size());
  for (size_t i = 0; i < a.logs.size(); ++i) {
    CHECK(a.logs[i].loss == b.logs[i].loss);
    CHECK(a.logs[i].ce == b.logs[i].ce);
    CHECK(a.logs[i].aux == b.logs[i].aux);
  }
}

TEST_CASE("training rejects empty datasets", "[training]") {
  Stage1Model m1(tiny_cfg(), 1);
  CHECK_THROWS_WITH(train_stage1(m1, {}, fast_cfg(1)), Catch::Contains("empty"));
  Stage2Model m2(tiny_cfg(), 1, Stage2Options{});
  CHECK_THROWS_WITH(train_stage2(m2, {}, fast_cfg(1)), Catch::Contains("empty"));
}

TEST_CASE("non-finite loss aborts with a diagnostic", "[training]") {
  Dataset ds = tiny_toy();
  Stage1Model m(tiny_cfg(), 31);
  m.params().params()[0]->value[0] = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_WITH(train_stage1(m, ds.split("train"), fast_cfg(1)),
                    Catch::Contains("non-finite"));
}

TEST_CASE("max_steps caps the run mid-epoch", "[training]") {
  Dataset ds = tiny_toy();
  Stage1Model m(tiny_cfg(), 31);
  TrainConfig tc = fast_cfg(10);
  tc.max_steps = 3;
  TrainResult res = train_stage1(m, ds.split("train"), tc);
  CHECK(res.steps == 3);
}

TEST_CASE("a saved stage-1 model reproduces its loss after reload", "[training]") {
  Dataset ds = tiny_toy();
  auto train_ptrs = ds.split("train");
  Stage1Model m(tiny_cfg(), 31);
  TrainConfig tc = fast_cfg(1);
  tc.max_steps = 1;
  train_stage1(m, train_ptrs, tc);

  double loss_before = stage1_batch_loss(m, train_ptrs);
  auto path = std::filesystem::temp_directory_path() /
              ("lldif_train_rt_" + std::to_string(::getpid()) + ".ckpt");
  save_stage1(path.string(), m, nullptr);
  Stage1Model back = load_stage1(path.string());
  std::filesystem::remove(path);
  CHECK(stage1_batch_loss(back, train_ptrs) == loss_before);
}

TEST_CASE("stage-2 training reduces KL and leaves stage 1 bit-frozen", "[training]") {
  Dataset ds = tiny_toy();
  auto train_ptrs = ds.split("train");
  Stage1Model s1(tiny_cfg(), 31);
  train_stage1(s1, train_ptrs, fast_cfg(2));

  Stage2Model s2(tiny_cfg(), 77, Stage2Options{});
  s2.init_from_stage1(s1);
  std::vector<Tensor> frozen_before;
  for (const auto& [_, p] : s2.frozen().items()) frozen_before.push_back(p->value);

  auto pairs = pair_samples(train_ptrs, {});
  TrainResult res = train_stage2(s2, pairs, fast_cfg(5));

  REQUIRE(res.stage == 2);
  REQUIRE(res.aux_name == "kl");
  REQUIRE(res.epoch_aux_mean.size() == 5);
  CHECK(res.epoch_aux_mean.back() < res.epoch_aux_mean.front());
  for (const auto& v : res.epoch_aux_mean) CHECK(v >= 0.0);

  size_t i = 0;
  for (const auto& [_, p] : s2.frozen().items())
    CHECK(p->value.max_abs_diff(frozen_before[i++]) == 0.0);
}

TEST_CASE("stage-2 determinism matches across reruns", "[training]") {
  Dataset ds = tiny_toy();
  auto train_ptrs = ds.split("train");
  auto run = [&]() {
    Stage1Model s1(tiny_cfg(), 31);
    Stage2Model s2(tiny_cfg(), 77, Stage2Options{});
    s2.init_from_stage1(s1);
    return train_stage2(s2, pair_samples(train_ptrs, {}), fast_cfg(2));
  };
  TrainResult a = run();
  TrainResult b = run();
  REQUIRE(a.logs.size() == b.logs.size());
  for (size_t i = 0; i < a.logs.size(); ++i) CHECK(a.logs[i].loss == b.logs[i].loss);
}

TEST_CASE("variant flags shape the stage-2 graph", "[training]") {
  Dataset ds = tiny_toy();
  auto pairs = pair_samples(ds.split("train"), {});

  SECTION("no-diffusion variant constructs no chain components") {
    Stage2Options opt;
    opt.use_diffusion = false;
    opt.insert_noise = false;
    opt.loss = "ce";
    Stage2Model m(tiny_cfg(), 3, opt);
    CHECK_FALSE(m.has_denoiser());
    CHECK_FALSE(m.has_schedule());
    bool denoiser_param = false;
    for (const auto& [name, _] : m.trainable().items())
      if (name.rfind("denoiser.", 0) == 0) denoiser_param = true;
    CHECK_FALSE(denoiser_param);
    TrainResult res = train_stage2(m, pairs, fast_cfg(1));
    CHECK(res.steps == 2);
  }
  SECTION("insert_noise without diffusion is rejected") {
    Stage2Options opt;
    opt.use_diffusion = false;
    opt.insert_noise = true;
    CHECK_THROWS_AS(Stage2Model(tiny_cfg(), 3, opt), Error);
  }
  SECTION("unknown loss name is rejected") {
    Stage2Options opt;
    opt.loss = "mse";
    CHECK_THROWS_AS(Stage2Model(tiny_cfg(), 3, opt), Error);
  }
  SECTION("ce-only runs still track KL as a metric") {
    Stage2Options opt;
    opt.insert_noise = false;
    opt.loss = "ce";
    Stage2Model m(tiny_cfg(), 3, opt);
    TrainResult res = train_stage2(m, pairs, fast_cfg(1));
    for (const auto& l : res.logs) {
      CHECK(l.aux >= 0.0);
      CHECK(l.loss == l.ce);
    }
  }
}

TEST_CASE("stage-2 inference consumes no ground-truth label", "[training]") {
  Dataset ds = tiny_toy();
  Stage2Model m(tiny_cfg(), 9, Stage2Options{});
  Sample s = ds.samples[0];
  s.label = -999;  // poison: any label read would trip range checks downstream

  Prediction p = m.predict(s, 123);
  REQUIRE(p.probs.numel() == tiny_cfg().n_classes);
  double sum = 0.0;
  for (long i = 0; i < p.probs.numel(); ++i) sum += p.probs[i];
  CHECK(sum == Approx(1.0).margin(1e-9));
  CHECK(p.label >= 0);
  CHECK(p.label < tiny_cfg().n_classes);
  CHECK(p.confidence == Approx(p.probs[p.label]));
  CHECK(p.epd.numel() == tiny_cfg().epd_dim);

  SECTION("fixed seed reproduces the prediction bitwise") {
    Prediction q = m.predict(s, 123);
    CHECK(q.probs.max_abs_diff(p.probs) == 0.0);
    CHECK(q.epd.max_abs_diff(p.epd) == 0.0);
  }
  SECTION("the inserted-noise start varies with the seed") {
    Prediction q = m.predict(s, 124);
    CHECK(q.epd.max_abs_diff(p.epd) > 0.0);
  }
}

TEST_CASE("training logs serialize as JSON lines", "[training]") {
  Dataset ds = tiny_toy();
  Stage1Model m(tiny_cfg(), 31);
  TrainResult res = train_stage1(m, ds.split("train"), fast_cfg(1));
  auto path = std::filesystem::temp_directory_path() /
              ("lldif_log_" + std::to_string(::getpid()) + ".jsonl");
  res.write_jsonl(path.string());

  std::ifstream in(path);
  std::string line;
  int lines = 0;
  while (std::getline(in, line)) {
    auto j = nlohmann::json::parse(line);
    CHECK(j.contains("step"));
    CHECK(j.contains("loss"));
    CHECK(j.contains("align"));
    CHECK(j.contains("lr"));
    ++lines;
  }
  std::filesystem::remove(path);
  CHECK(lines == static_cast<int>(res.logs.size()));

  nlohmann::json summary = res.summary();
  CHECK(summary.at("stage") == 1);
  CHECK(summary.at("steps") == res.steps);
  CHECK(summary.contains("epoch_align_mean"));
}
