#include <catch2/catch.hpp>
#include <cmath>

#include "lldif/eval.hpp"

using namespace lldif;

namespace {

ModelConfig tiny_cfg() {
  ModelConfig c = ModelConfig::desk();
  c.resolution = 16;
  return c;
}

Dataset balanced_toy(int n_classes, int per_class) {
  SynthConfig sc;
  sc.n_classes = n_classes;
  sc.n_per_class = per_class;
  sc.resolution = 16;
  sc.seed = 9;
  return synth_toy_dataset(sc);
}

Prediction fixed_prediction(int n_classes, int label, double conf) {
  Prediction p;
  p.label = label;
  p.confidence = conf;
  p.probs = Tensor({n_classes});
  for (int i = 0; i < n_classes; ++i)
    p.probs[i] = i == label ? conf : (1.0 - conf) / (n_classes - 1);
  p.epd = Tensor({4});
  p.pooled = Tensor({4});
  return p;
}

}  // namespace

TEST_CASE("a perfect classifier scores 1.0 with a diagonal confusion matrix", "[eval]") {
  Dataset ds = balanced_toy(3, 4);
  PredictFn oracle = [](const Sample& s) { return fixed_prediction(3, s.label, 0.9); };
  EvalReport r = evaluate(oracle, ds.split("train"), 3);

  CHECK(r.accuracy == 1.0);
  CHECK(r.total == 12);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) CHECK(r.confusion[i][j] == (i == j ? 4 : 0));
  CHECK(r.conf_correct_clear == Approx(0.9));
  CHECK(r.n_correct_clear == 12);
  CHECK(r.n_correct_low == 0);
}

TEST_CASE("a uniform classifier scores chance on a balanced set", "[eval]") {
  Dataset ds = balanced_toy(7, 6);
  PredictFn uniform = [](const Sample&) { return fixed_prediction(7, 0, 1.0 / 7.0); };
  EvalReport r = evaluate(uniform, ds.split("train"), 7);
  CHECK(r.accuracy == Approx(1.0 / 7.0));
}

TEST_CASE("report accuracy matches a recount of its own confusion matrix", "[eval]") {
  Dataset ds = balanced_toy(4, 5);
  Rng rng(123);
  PredictFn noisy = [&rng](const Sample& s) {
    int guess = rng.uniform() < 0.5 ? s.label : rng.uniform_int(0, 4);
    return fixed_prediction(4, guess, 0.7);
  };
  EvalReport r = evaluate(noisy, ds.split("train"), 4);

  long trace = 0, total = 0, mass = 0;
  for (int i = 0; i < 4; ++i) {
    long row = 0;
    for (int j = 0; j < 4; ++j) {
      row += r.confusion[i][j];
      mass += r.confusion[i][j];
    }
    trace += r.confusion[i][i];
    CHECK(row == r.class_count[i]);
    total += r.class_count[i];
  }
  CHECK(mass == r.total);
  CHECK(total == r.total);
  CHECK(r.accuracy == Approx(static_cast<double>(trace) / static_cast<double>(r.total)));
  for (int i = 0; i < 4; ++i)
    CHECK(r.class_accuracy[i] ==
          Approx(static_cast<double>(r.confusion[i][i]) / static_cast<double>(r.class_count[i])));
}

TEST_CASE("confidence means split by the low-light flag", "[eval]") {
  Dataset ds = balanced_toy(2, 4);
  std::vector<Sample> copy(ds.samples);
  for (size_t i = 0; i < copy.size(); i += 2) copy[i].low_light = true;
  std::vector<const Sample*> ptrs;
  for (const auto& s : copy) ptrs.push_back(&s);

  PredictFn oracle = [](const Sample& s) {
    return fixed_prediction(2, s.label, s.low_light ? 0.6 : 0.8);
  };
  EvalReport r = evaluate(oracle, ptrs, 2);
  CHECK(r.n_correct_low == 4);
  CHECK(r.n_correct_clear == 4);
  CHECK(r.conf_correct_low == Approx(0.6));
  CHECK(r.conf_correct_clear == Approx(0.8));

  nlohmann::json j = r.to_json();
  CHECK(j.at("confidence_correct").at("low_light").at("mean") == Approx(0.6));
  CHECK(j.at("accuracy") == 1.0);

  std::string table =
      r.format_table({kClassNames.begin(), kClassNames.begin() + 2});
  CHECK(table.find("low-light") != std::string::npos);
}

TEST_CASE("evaluate rejects mismatched class counts", "[eval]") {
  Dataset ds = balanced_toy(3, 2);
  PredictFn wrong_width = [](const Sample&) { return fixed_prediction(5, 0, 0.5); };
  CHECK_THROWS_WITH(evaluate(wrong_width, ds.split("train"), 3), Catch::Contains("classes"));

  std::vector<Sample> copy(ds.samples);
  copy[0].label = 6;
  std::vector<const Sample*> ptrs;
  for (const auto& s : copy) ptrs.push_back(&s);
  PredictFn fine = [](const Sample&) { return fixed_prediction(3, 0, 0.5); };
  CHECK_THROWS_WITH(evaluate(fine, ptrs, 3), Catch::Contains("class range"));
  CHECK_THROWS_AS(evaluate(fine, {}, 3), Error);
}

TEST_CASE("embedding export is row-aligned and reproducible", "[eval]") {
  Dataset ds = balanced_toy(2, 3);
  auto ptrs = ds.split("train");
  Stage1Model m(tiny_cfg(), 41);
  PredictFn fn = make_predict_fn(m);

  EmbeddingExport epd = export_embeddings(fn, ptrs, "epd");
  REQUIRE(epd.embeddings.rank() == 2);
  CHECK(epd.embeddings.dim(0) == 6);
  CHECK(epd.embeddings.dim(1) == tiny_cfg().epd_dim);
  CHECK(epd.labels.numel() == 6);
  CHECK(epd.low_flags.numel() == 6);
  for (long i = 0; i < epd.labels.numel(); ++i) {
    CHECK(epd.labels[i] >= 0.0);
    CHECK(epd.labels[i] < tiny_cfg().n_classes);
    CHECK(epd.labels[i] == ptrs[static_cast<size_t>(i)]->label);
  }

  EmbeddingExport pen = export_embeddings(fn, ptrs, "penultimate");
  CHECK(pen.embeddings.dim(1) == tiny_cfg().channels.back());
  CHECK(pen.embeddings.max_abs_diff(pen.embeddings) == 0.0);
  bool differs = !epd.embeddings.same_shape(pen.embeddings) ||
                 epd.embeddings.max_abs_diff(pen.embeddings) > 0.0;
  CHECK(differs);

  EmbeddingExport again = export_embeddings(fn, ptrs, "epd");
  CHECK(again.embeddings.max_abs_diff(epd.embeddings) == 0.0);

  CHECK_THROWS_WITH(export_embeddings(fn, ptrs, "logits"), Catch::Contains("layer"));
}

TEST_CASE("iteration sweep validates input and matches single-point evaluation", "[eval]") {
  Dataset ds = balanced_toy(2, 3);
  auto ptrs = ds.split("train");
  Stage2Model m(tiny_cfg(), 51, Stage2Options{});

  int nc = tiny_cfg().n_classes;
  CHECK_THROWS_WITH(iteration_sweep(m, ptrs, {4, 0}, 7, nc), Catch::Contains("positive"));
  CHECK_THROWS_AS(iteration_sweep(m, ptrs, {}, 7, nc), Error);

  SECTION("T equal to the trained chain length reproduces evaluate exactly") {
    auto rows = iteration_sweep(m, ptrs, {4}, 7, nc);
    REQUIRE(rows.size() == 1);
    CHECK(rows[0].T == 4);
    EvalReport direct = evaluate(make_predict_fn(m, 7), ptrs, nc);
    CHECK(rows[0].report.accuracy == direct.accuracy);
    CHECK(rows[0].report.confusion == direct.confusion);
    CHECK(rows[0].epd.embeddings.dim(0) == 6);
  }
  SECTION("one row per requested T, deterministic across reruns") {
    auto rows = iteration_sweep(m, ptrs, {1, 2, 4}, 7, nc);
    REQUIRE(rows.size() == 3);
    CHECK(rows[0].T == 1);
    CHECK(rows[2].T == 4);
    // the sweep must leave the model's own schedule untouched
    CHECK(m.schedule().T() == 4);
    auto again = iteration_sweep(m, ptrs, {1, 2, 4}, 7, nc);
    for (size_t i = 0; i < rows.size(); ++i) {
      CHECK(rows[i].report.accuracy == again[i].report.accuracy);
      CHECK(rows[i].epd.embeddings.max_abs_diff(again[i].epd.embeddings) == 0.0);
    }
  }
  SECTION("a no-diffusion model cannot sweep") {
    Stage2Options v1;
    v1.use_diffusion = false;
    v1.insert_noise = false;
    v1.loss = "ce";
    Stage2Model plain(tiny_cfg(), 5, v1);
    CHECK_THROWS_WITH(iteration_sweep(plain, ptrs, {1}, 7, nc), Catch::Contains("diffusion"));
  }
}

TEST_CASE("ablation grid mirrors the four component-toggle rows", "[eval]") {
  Dataset ds = balanced_toy(2, 3);
  auto ptrs = ds.split("train");
  Stage1Model s1(tiny_cfg(), 61);
  TrainConfig tc;
  tc.epochs = 1;
  tc.batch_size = 3;
  tc.lr = 1e-3;
  tc.seed = 3;

  AblationGrid grid = ablation_run(s1, pair_samples(ptrs, {}), ptrs, tc);
  REQUIRE(grid.rows.size() == 4);

  const auto& v1 = grid.rows[0];
  CHECK(v1.id == "V1");
  CHECK_FALSE(v1.diffusion);
  CHECK(v1.loss == "ce");
  CHECK_FALSE(v1.insert_noise);
  CHECK_FALSE(v1.denoiser_constructed);
  CHECK(v1.paper_reference_accuracy == Approx(89.46));

  const auto& v2 = grid.rows[1];
  CHECK((v2.diffusion && v2.insert_noise && v2.loss == "total"));
  CHECK(v2.denoiser_constructed);
  CHECK(v2.paper_reference_accuracy == Approx(91.67));

  const auto& v3 = grid.rows[2];
  CHECK((v3.diffusion && !v3.insert_noise && v3.loss == "ce"));
  CHECK(v3.paper_reference_accuracy == Approx(92.16));

  const auto& v4 = grid.rows[3];
  CHECK((v4.diffusion && v4.insert_noise && v4.loss == "ce"));
  CHECK(v4.paper_reference_accuracy == Approx(92.97));

  for (const auto& row : grid.rows) {
    CHECK(row.accuracy >= 0.0);
    CHECK(row.accuracy <= 1.0);
  }

  nlohmann::json j = grid.to_json();
  REQUIRE(j.at("rows").size() == 4);
  CHECK(j.at("note").get<std::string>().find("context only") != std::string::npos);
  std::string table = grid.format_table();
  CHECK(table.find("V1") != std::string::npos);
  CHECK(table.find("reference") != std::string::npos);
}
