#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "lldif/array_file.hpp"
#include "lldif/degrade.hpp"
#include "lldif/image_io.hpp"
#include "lldif/rng.hpp"
#include "lldif/text.hpp"

namespace lldif {

inline constexpr int kNumLandmarks = 5;

struct Sample {
  Tensor image;      // {3, H, W} in [0,1]
  Tensor landmarks;  // {K, H, W}, each channel peaking at exactly 1
  int label = 0;     // index into kClassNames
  std::string caption;
  std::string split;  // train | test
  bool low_light = false;
  std::string path;
};

struct DatasetManifest {
  std::vector<std::string> classes;  // class names present, load order
  std::map<std::string, std::map<std::string, int>> counts;  // split -> class -> n
  int resolution = 0;
  int landmark_count = kNumLandmarks;
  bool landmarks_synthetic = false;
  bool low_light = false;

  int total(const std::string& split) const {
    int n = 0;
    auto it = counts.find(split);
    if (it != counts.end())
      for (const auto& [_, c] : it->second) n += c;
    return n;
  }
  nlohmann::json to_json() const {
    return {{"classes", classes},        {"counts", counts},
            {"resolution", resolution},  {"landmark_count", landmark_count},
            {"landmarks", landmarks_synthetic ? "synthetic" : "files"},
            {"low_light", low_light}};
  }
};

struct Dataset {
  std::vector<Sample> samples;
  DatasetManifest manifest;

  std::vector<const Sample*> split(const std::string& name) const {
    std::vector<const Sample*> out;
    for (const auto& s : samples)
      if (s.split == name) out.push_back(&s);
    return out;
  }
};

inline void validate_sample(const Sample& s) {
  check(s.label >= 0 && s.label < kNumClasses, "data: label out of range");
  check(s.image.rank() == 3 && s.image.dim(0) == 3, "data: image must be {3,H,W}");
  check(s.landmarks.rank() == 3, "data: landmarks must be {K,H,W}");
  check(s.landmarks.dim(1) == s.image.dim(1) && s.landmarks.dim(2) == s.image.dim(2),
        "data: landmark/image resolution mismatch");
  int k = s.landmarks.dim(0);
  long hw = static_cast<long>(s.image.dim(1)) * s.image.dim(2);
  for (int c = 0; c < k; ++c) {
    double mx = 0.0;
    for (long i = 0; i < hw; ++i) {
      double v = s.landmarks[c * hw + i];
      check(v >= 0.0, "data: negative landmark heatmap value");
      mx = std::max(mx, v);
    }
    check(mx == 1.0, "data: landmark heatmap channel " + std::to_string(c) +
                         " does not peak at 1");
  }
}

/// Five-point face template (eyes, nose tip, mouth corners) as Gaussian
/// heatmaps with peak exactly 1 at the nearest pixel.
inline Tensor synthetic_landmarks(int h, int w) {
  static constexpr double kPoints[kNumLandmarks][2] = {
      {0.30, 0.35}, {0.70, 0.35}, {0.50, 0.55}, {0.35, 0.75}, {0.65, 0.75}};
  double sigma = std::max(1.0, std::min(h, w) / 16.0);
  Tensor out({kNumLandmarks, h, w});
  for (int k = 0; k < kNumLandmarks; ++k) {
    int pi = static_cast<int>(std::lround(kPoints[k][1] * (h - 1)));
    int pj = static_cast<int>(std::lround(kPoints[k][0] * (w - 1)));
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) {
        double d2 = static_cast<double>((i - pi) * (i - pi) + (j - pj) * (j - pj));
        out.at3(k, i, j) = std::exp(-d2 / (2.0 * sigma * sigma));
      }
  }
  return out;
}

inline Tensor peak_normalize(Tensor heatmaps, const std::string& origin) {
  check(heatmaps.rank() == 3, "data: landmark array must be {K,H,W} in " + origin);
  long hw = static_cast<long>(heatmaps.dim(1)) * heatmaps.dim(2);
  for (int c = 0; c < heatmaps.dim(0); ++c) {
    double mx = 0.0;
    for (long i = 0; i < hw; ++i) mx = std::max(mx, heatmaps[c * hw + i]);
    check(mx > 1e-12, "data: all-zero landmark heatmap channel in " + origin);
    for (long i = 0; i < hw; ++i) {
      double v = heatmaps[c * hw + i] / mx;
      heatmaps[c * hw + i] = std::clamp(v, 0.0, 1.0);
    }
  }
  return heatmaps;
}

inline Tensor resize_heatmaps(const Tensor& hm, int h, int w) {
  int k = hm.dim(0), sh = hm.dim(1), sw = hm.dim(2);
  if (sh == h && sw == w) return hm;
  Tensor out({k, h, w});
  for (int c = 0; c < k; ++c) {
    cv::Mat src(sh, sw, CV_64FC1);
    for (int i = 0; i < sh; ++i)
      for (int j = 0; j < sw; ++j) src.at<double>(i, j) = hm.at3(c, i, j);
    cv::Mat dst;
    cv::resize(src, dst, cv::Size(w, h), 0, 0, cv::INTER_LINEAR);
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) out.at3(c, i, j) = std::max(0.0, dst.at<double>(i, j));
  }
  return peak_normalize(std::move(out), "resized heatmaps");
}

struct LoadOptions {
  int resolution = 0;  // 0 keeps native resolution (must then be uniform)
  int landmark_count = kNumLandmarks;
  std::optional<bool> low_light;  // default: auto-detect via degrade manifest
};

namespace detail {

inline std::optional<Tensor> load_landmark_entry(const std::filesystem::path& lm_dir,
                                                 const std::string& stem, int k) {
  namespace fs = std::filesystem;
  fs::path arr = lm_dir / (stem + ".arr");
  if (fs::exists(arr)) return load_array(arr.string());
  fs::path first = lm_dir / (stem + "_lm0.png");
  if (!fs::exists(first)) return std::nullopt;
  std::vector<Tensor> channels;
  for (int c = 0; c < k; ++c) {
    fs::path p = lm_dir / (stem + "_lm" + std::to_string(c) + ".png");
    check(fs::exists(p), "data: missing landmark channel file " + p.string());
    channels.push_back(load_image_gray(p.string()));
  }
  int h = channels[0].dim(0), w = channels[0].dim(1);
  Tensor out({k, h, w});
  for (int c = 0; c < k; ++c) {
    check(channels[static_cast<size_t>(c)].dim(0) == h &&
              channels[static_cast<size_t>(c)].dim(1) == w,
          "data: landmark channel size mismatch for " + stem);
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) out.at3(c, i, j) = channels[static_cast<size_t>(c)].at(i, j);
  }
  return out;
}

}  // namespace detail

/// Loads `root/{train,test}/{class}/*.png|jpg` with optional heatmaps under
/// `root/landmarks/...`. Class directories must use the canonical expression
/// names. Ordering is deterministic: split, then class, then filename, all
/// lexicographic.
inline Dataset load_dataset(const std::string& root_dir, const LoadOptions& opts = {}) {
  namespace fs = std::filesystem;
  fs::path root(root_dir);
  check(fs::is_directory(root), "data: dataset root missing: " + root_dir);
  bool has_lm_root = fs::is_directory(root / "landmarks");
  bool low_light =
      opts.low_light.value_or(fs::exists(root / "manifest.jsonl"));

  Dataset ds;
  ds.manifest.landmark_count = opts.landmark_count;
  ds.manifest.landmarks_synthetic = !has_lm_root;
  ds.manifest.low_light = low_light;
  std::vector<std::string> missing_landmarks;

  for (const char* split : {"train", "test"}) {
    fs::path split_dir = root / split;
    for (const auto& cls_dir : detail::list_dirs_sorted(split_dir)) {
      std::string cls = cls_dir.filename().string();
      if (cls == "landmarks") continue;
      int label;
      try {
        label = class_index(cls);
      } catch (const Error&) {
        throw Error("data: unknown class directory: " + cls_dir.string());
      }
      if (std::find(ds.manifest.classes.begin(), ds.manifest.classes.end(), cls) ==
          ds.manifest.classes.end())
        ds.manifest.classes.push_back(cls);
      for (const auto& img_path : detail::list_images_sorted(cls_dir)) {
        Sample s;
        s.path = img_path.string();
        s.image = load_image(s.path);
        s.label = label;
        s.caption = caption_for_class(cls);
        s.split = split;
        s.low_light = low_light;
        std::string stem = img_path.stem().string();
        if (has_lm_root) {
          auto lm = detail::load_landmark_entry(root / "landmarks" / split / cls, stem,
                                                opts.landmark_count);
          if (!lm) {
            missing_landmarks.push_back((fs::path(split) / cls / stem).string());
            continue;
          }
          check(lm->dim(0) == opts.landmark_count,
                "data: landmark channel count mismatch for " + stem);
          s.landmarks = peak_normalize(std::move(*lm), s.path);
        }
        ds.samples.push_back(std::move(s));
        ++ds.manifest.counts[split][cls];
      }
    }
  }
  if (!missing_landmarks.empty()) {
    std::string msg = "data: images without landmark files:";
    for (const auto& m : missing_landmarks) msg += " " + m;
    throw Error(msg);
  }
  check(!ds.samples.empty(), "data: no samples under " + root_dir);

  int res = opts.resolution;
  if (res == 0) {
    res = ds.samples.front().image.dim(1);
    for (const auto& s : ds.samples)
      check(s.image.dim(1) == res && s.image.dim(2) == res,
            "data: mixed resolutions; pass an explicit target resolution");
  }
  ds.manifest.resolution = res;
  for (auto& s : ds.samples) {
    if (s.image.dim(1) != res || s.image.dim(2) != res) s.image = resize_image(s.image, res, res);
    if (s.landmarks.numel() == 0) {
      check(opts.landmark_count == kNumLandmarks,
            "data: synthetic landmarks support exactly 5 points");
      s.landmarks = synthetic_landmarks(res, res);
    } else if (s.landmarks.dim(1) != res || s.landmarks.dim(2) != res) {
      s.landmarks = resize_heatmaps(s.landmarks, res, res);
    }
    validate_sample(s);
  }
  return ds;
}

// ---------------------------------------------------------------------------
// synthetic toy data

struct SynthConfig {
  int n_classes = 2;
  int n_per_class = 32;
  int resolution = 32;
  uint64_t seed = 7;
  int test_per_class = 0;
  int min_window = 4;  // smallest attention window the images must support
};

namespace detail {

inline double toy_pattern(int cls, int i, int j, int res, double jx, double jy,
                          double jscale) {
  double ci = res * (0.5 + 0.15 * jy), cj = res * (0.5 + 0.15 * jx);
  double r = std::sqrt((i - ci) * (i - ci) + (j - cj) * (j - cj));
  int band = std::max(2, res / 4);
  switch (cls) {
    case 0:  // filled disk
      return r < res * (0.25 + 0.05 * jscale) ? 0.95 : 0.15;
    case 1:  // horizontal stripes
      return ((i + static_cast<int>(jy * band)) / band) % 2 ? 0.9 : 0.1;
    case 2:  // vertical stripes
      return ((j + static_cast<int>(jx * band)) / band) % 2 ? 0.9 : 0.1;
    case 3:  // checkerboard
      return (((i + static_cast<int>(jy * band)) / band +
               (j + static_cast<int>(jx * band)) / band) %
              2)
                 ? 0.9
                 : 0.1;
    case 4:  // diagonal gradient
      return static_cast<double>(i + j) / (2.0 * (res - 1));
    case 5:  // ring
      return (r > res * 0.18 && r < res * 0.32) ? 0.95 : 0.12;
    default:  // opposing corner blocks
      return ((i < res / 3 && j < res / 3) || (i >= 2 * res / 3 && j >= 2 * res / 3))
                 ? 0.9
                 : 0.1;
  }
}

}  // namespace detail

/// Procedural class-separable images: one geometric motif per class with
/// per-sample position jitter, channel tint and pixel noise.
inline Dataset synth_toy_dataset(const SynthConfig& cfg) {
  check(cfg.n_classes >= 2, "data: toy dataset needs at least 2 classes");
  check(cfg.n_classes <= kNumClasses, "data: toy dataset supports at most 7 classes");
  check(cfg.n_per_class >= 1 && cfg.test_per_class >= 0, "data: bad toy counts");
  check(cfg.resolution >= cfg.min_window,
        "data: resolution below the attention window size");

  Dataset ds;
  ds.manifest.resolution = cfg.resolution;
  ds.manifest.landmarks_synthetic = true;
  Tensor lm = synthetic_landmarks(cfg.resolution, cfg.resolution);
  int total_per_class = cfg.n_per_class + cfg.test_per_class;
  for (int cls = 0; cls < cfg.n_classes; ++cls) {
    ds.manifest.classes.push_back(kClassNames[static_cast<size_t>(cls)]);
    for (int n = 0; n < total_per_class; ++n) {
      Rng rng(mix_seed(cfg.seed, static_cast<uint64_t>(cls) * 100003u +
                                     static_cast<uint64_t>(n)));
      double jx = rng.uniform(-1.0, 1.0), jy = rng.uniform(-1.0, 1.0);
      double jscale = rng.uniform(-1.0, 1.0);
      double tint[3] = {rng.uniform(0.75, 1.0), rng.uniform(0.75, 1.0),
                        rng.uniform(0.75, 1.0)};
      Sample s;
      s.image = Tensor({3, cfg.resolution, cfg.resolution});
      for (int i = 0; i < cfg.resolution; ++i)
        for (int j = 0; j < cfg.resolution; ++j) {
          double base = detail::toy_pattern(cls, i, j, cfg.resolution, jx, jy, jscale);
          for (int c = 0; c < 3; ++c) {
            double v = base * tint[c] + rng.uniform(-0.04, 0.04);
            s.image.at3(c, i, j) = std::clamp(v, 0.0, 1.0);
          }
        }
      s.landmarks = lm;
      s.label = cls;
      s.caption = caption_for_class(kClassNames[static_cast<size_t>(cls)]);
      s.split = n < cfg.n_per_class ? "train" : "test";
      s.path = "synth://" + kClassNames[static_cast<size_t>(cls)] + "/" +
               std::to_string(n);
      validate_sample(s);
      ++ds.manifest.counts[s.split][kClassNames[static_cast<size_t>(cls)]];
      ds.samples.push_back(std::move(s));
    }
  }
  return ds;
}

/// Writes a dataset in the directory layout load_dataset expects, including
/// landmark array files and a manifest.json.
inline void write_dataset(const Dataset& ds, const std::string& root_dir) {
  namespace fs = std::filesystem;
  fs::path root(root_dir);
  std::map<std::string, int> seq;
  for (const auto& s : ds.samples) {
    const std::string& cls = kClassNames[static_cast<size_t>(s.label)];
    fs::path img_dir = root / s.split / cls;
    fs::path lm_dir = root / "landmarks" / s.split / cls;
    fs::create_directories(img_dir);
    fs::create_directories(lm_dir);
    char name[16];
    std::snprintf(name, sizeof(name), "%04d", seq[s.split + "/" + cls]++);
    save_image((img_dir / (std::string(name) + ".png")).string(), s.image);
    save_array((lm_dir / (std::string(name) + ".arr")).string(), s.landmarks);
  }
  std::ofstream mf(root / "manifest.json");
  check(mf.good(), "data: cannot write manifest under " + root_dir);
  mf << ds.manifest.to_json().dump(2) << "\n";
}

}  // namespace lldif
