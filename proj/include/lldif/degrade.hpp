#pragma once

#include <array>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "lldif/image_io.hpp"
#include "lldif/rng.hpp"
#include "lldif/tensor.hpp"

namespace lldif {

// Low-light synthesis: a fixed four-stage tone pipeline, applied per pixel in
// linear [0,1] intensity.
//
//   1. exposure      v <- v * 2^ev
//   2. white balance v <- v * wb[channel]
//      (clip to [0,1])
//   3. highlights    for v > 3/4 with t = (v - 3/4)/(1/4):
//                      v <- 3/4 + (1/4) * (t + h*(t^3 - t^4/2)),  h in [-1,0]
//   4. shadows       for v < 1/4 with u = (1/4 - v)/(1/4):
//                      v <- 1/4 - (1/4) * (u - s*(u^3 - u^4/2)),  s in [-1,0]
//      (clip to [0,1])
//
// Both tone curves are identity at the quartile boundary with slope 1, so the
// full map is C1 and monotone before the final clip. Neutral parameters must
// reproduce the input bit-exactly, hence the explicit skips below.

struct DegradeParams {
  double exposure_ev = 0.0;
  std::array<double, 3> white_balance = {1.0, 1.0, 1.0};
  double highlights = 0.0;  // [-1, 0]
  double shadows = 0.0;     // [-1, 0]
  uint64_t seed = 0;

  static DegradeParams neutral() { return {}; }
  static DegradeParams default_lowlight() {
    DegradeParams p;
    p.exposure_ev = -2.0;
    p.white_balance = {1.0, 0.92, 0.85};
    p.highlights = -0.3;
    p.shadows = -0.4;
    return p;
  }

  void validate() const {
    check(exposure_ev <= 0.0, "degrade: exposure_ev must be <= 0");
    for (double g : white_balance) check(g > 0.0, "degrade: white balance gains must be > 0");
    check(highlights >= -1.0 && highlights <= 0.0, "degrade: highlights outside [-1,0]");
    check(shadows >= -1.0 && shadows <= 0.0, "degrade: shadows outside [-1,0]");
  }
};

inline double highlight_curve(double v, double h) {
  if (h == 0.0 || v <= 0.75) return v;
  double t = (v - 0.75) * 4.0;
  return 0.75 + 0.25 * (t + h * (t * t * t - 0.5 * t * t * t * t));
}

inline double shadow_curve(double v, double s) {
  if (s == 0.0 || v >= 0.25) return v;
  double u = (0.25 - v) * 4.0;
  return 0.25 - 0.25 * (u - s * (u * u * u - 0.5 * u * u * u * u));
}

inline Tensor apply_lowlight(const Tensor& image, const DegradeParams& params) {
  check(image.rank() == 3 && image.dim(0) == 3, "degrade: {3,H,W} image expected");
  check(image.numel() > 0, "degrade: empty image");
  params.validate();
  for (long i = 0; i < image.numel(); ++i) {
    check(std::isfinite(image[i]), "degrade: non-finite pixel value");
    check(image[i] >= 0.0 && image[i] <= 1.0, "degrade: pixel outside [0,1]");
  }
  double exposure = std::exp2(params.exposure_ev);
  Tensor out = image;
  long hw = static_cast<long>(image.dim(1)) * image.dim(2);
  for (int c = 0; c < 3; ++c) {
    double gain = exposure * params.white_balance[static_cast<size_t>(c)];
    double* px = out.data() + c * hw;
    for (long i = 0; i < hw; ++i) {
      double v = px[i];
      if (gain != 1.0) v = std::clamp(v * gain, 0.0, 1.0);
      v = highlight_curve(v, params.highlights);
      v = shadow_curve(v, params.shadows);
      px[i] = std::clamp(v, 0.0, 1.0);
    }
  }
  return out;
}

struct Histogram {
  std::array<long, 256> bins{};
  double mean_intensity = 0.0;
};

/// Bins the per-pixel mean intensity (average of the three channels); bin i
/// covers [i/256, (i+1)/256), last bin right-closed.
inline Histogram histogram(const Tensor& image) {
  check(image.rank() == 3 && image.dim(0) == 3, "degrade: {3,H,W} image expected");
  long hw = static_cast<long>(image.dim(1)) * image.dim(2);
  check(hw > 0, "degrade: empty image");
  Histogram hist;
  double total = 0.0;
  for (long i = 0; i < hw; ++i) {
    double v = (image[i] + image[hw + i] + image[2 * hw + i]) / 3.0;
    int bin = std::min(255, static_cast<int>(v * 256.0));
    ++hist.bins[static_cast<size_t>(bin)];
    total += image[i] + image[hw + i] + image[2 * hw + i];
  }
  hist.mean_intensity = total / static_cast<double>(3 * hw);
  return hist;
}

struct DegradeManifestEntry {
  std::string src, dst, status;  // status: ok | skipped
  uint64_t seed = 0;
};

struct DegradeManifest {
  std::vector<DegradeManifestEntry> entries;
  long ok = 0, skipped = 0;
};

namespace detail {

inline bool has_image_ext(const std::filesystem::path& p) {
  std::string e = p.extension().string();
  for (char& c : e) c = static_cast<char>(std::tolower(c));
  return e == ".png" || e == ".jpg" || e == ".jpeg";
}

inline std::vector<std::filesystem::path> list_images_sorted(
    const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> out;
  if (!std::filesystem::is_directory(dir)) return out;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.is_regular_file() && has_image_ext(e.path())) out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

inline std::vector<std::filesystem::path> list_dirs_sorted(
    const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> out;
  if (!std::filesystem::is_directory(dir)) return out;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.is_directory()) out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace detail

/// Applies the low-light pipeline to every image under src/{train,test}/{class}
/// mirroring the layout into dst. Landmark files are copied unchanged. Emits
/// dst/manifest.jsonl (one record per image) and dst/histograms.json with
/// aggregate before/after brightness histograms.
inline DegradeManifest degrade_dataset(const std::string& src_dir,
                                       const std::string& dst_dir,
                                       const DegradeParams& params) {
  namespace fs = std::filesystem;
  params.validate();
  fs::path src(src_dir), dst(dst_dir);
  check(fs::is_directory(src), "degrade: source directory missing: " + src_dir);

  DegradeManifest manifest;
  std::array<double, 256> agg_src{}, agg_out{};
  double mean_src = 0.0, mean_out = 0.0;
  fs::create_directories(dst);
  std::ofstream mf(dst / "manifest.jsonl");
  check(mf.good(), "degrade: cannot write manifest under " + dst_dir);

  for (const char* split : {"train", "test"}) {
    fs::path split_dir = src / split;
    for (const auto& cls : detail::list_dirs_sorted(split_dir)) {
      fs::path out_cls = dst / split / cls.filename();
      fs::create_directories(out_cls);
      for (const auto& img_path : detail::list_images_sorted(cls)) {
        fs::path rel = fs::path(split) / cls.filename() / img_path.filename();
        DegradeManifestEntry entry;
        entry.src = img_path.string();
        entry.seed = mix_seed(params.seed, fnv1a64(rel.string()));
        fs::path out_path = out_cls / img_path.stem();
        out_path += ".png";
        entry.dst = out_path.string();
        try {
          Tensor img = load_image(entry.src);
          Tensor low = apply_lowlight(img, params);
          save_image(entry.dst, low);
          Histogram hs = histogram(img), ho = histogram(low);
          long hw = img.dim(1) * static_cast<long>(img.dim(2));
          for (int b = 0; b < 256; ++b) {
            agg_src[static_cast<size_t>(b)] += static_cast<double>(hs.bins[static_cast<size_t>(b)]) / hw;
            agg_out[static_cast<size_t>(b)] += static_cast<double>(ho.bins[static_cast<size_t>(b)]) / hw;
          }
          mean_src += hs.mean_intensity;
          mean_out += ho.mean_intensity;
          entry.status = "ok";
          ++manifest.ok;
        } catch (const std::exception&) {
          entry.status = "skipped";
          ++manifest.skipped;
        }
        nlohmann::json rec{
            {"src", entry.src},
            {"dst", entry.dst},
            {"status", entry.status},
            {"params",
             {{"exposure_ev", params.exposure_ev},
              {"white_balance", params.white_balance},
              {"highlights", params.highlights},
              {"shadows", params.shadows},
              {"seed", entry.seed}}}};
        mf << rec.dump() << "\n";
        manifest.entries.push_back(std::move(entry));
      }
    }
  }
  check(!manifest.entries.empty(), "degrade: no images found under " + src_dir);

  if (fs::is_directory(src / "landmarks"))
    fs::copy(src / "landmarks", dst / "landmarks",
             fs::copy_options::recursive | fs::copy_options::overwrite_existing);

  if (manifest.ok > 0) {
    for (auto& v : agg_src) v /= static_cast<double>(manifest.ok);
    for (auto& v : agg_out) v /= static_cast<double>(manifest.ok);
    mean_src /= static_cast<double>(manifest.ok);
    mean_out /= static_cast<double>(manifest.ok);
  }
  nlohmann::json hist_json{
      {"count", manifest.ok},
      {"source", {{"bins_mean", agg_src}, {"mean_intensity", mean_src}}},
      {"degraded", {{"bins_mean", agg_out}, {"mean_intensity", mean_out}}}};
  std::ofstream hf(dst / "histograms.json");
  hf << hist_json.dump(2) << "\n";
  return manifest;
}

}  // namespace lldif
