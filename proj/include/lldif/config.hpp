#pragma once

#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "lldif/tensor.hpp"
#include "lldif/text.hpp"

namespace lldif {

// Architecture hyperparameters shared by both stages. The fingerprint is the
// compatibility contract between checkpoints: stage 2 refuses to start from a
// stage-1 checkpoint whose fingerprint differs.

struct ModelConfig {
  int resolution = 128;
  int epd_dim = 128;   // C: EPD / conditioning vector width
  int embed_dim = 64;  // D_e: image/text embedding width
  int n_scales = 3;
  std::vector<int> channels = {16, 32, 64};      // per U-Net scale
  std::vector<int> backbone_widths = {16, 32, 64};  // image-encoder conv widths
  std::vector<int> pnet_s2_widths = {16, 32, 64};
  int window = 4;  // DLNet window side; M = window^2
  int heads = 2;
  int n_classes = kNumClasses;
  int landmark_count = 5;
  int T = 4;
  std::string variant = "paper";  // reverse-step coefficient: paper | ddpm_bar

  static ModelConfig paper_scale() { return {}; }

  static ModelConfig desk() {
    ModelConfig c;
    c.resolution = 32;
    c.epd_dim = 32;
    c.embed_dim = 32;
    c.channels = {8, 16, 32};
    c.backbone_widths = {8, 16, 32};
    c.pnet_s2_widths = {8, 16, 32};
    return c;
  }

  void validate() const {
    check(resolution > 0 && epd_dim > 0 && embed_dim > 0, "config: bad dimensions");
    check(n_scales >= 1 && static_cast<int>(channels.size()) == n_scales,
          "config: channels must list one width per scale");
    check(window >= 1 && heads >= 1, "config: bad window/heads");
    check(n_classes >= 2 && n_classes <= kNumClasses, "config: bad class count");
    check(T >= 1, "config: T must be >= 1");
    check(variant == "paper" || variant == "ddpm_bar", "config: unknown variant");
    int r = resolution;
    for (int s = 0; s < n_scales; ++s) {
      check(r % window == 0, "config: scale " + std::to_string(s) +
                                 " resolution not divisible by window");
      check(r % 2 == 0 || s == n_scales - 1, "config: resolution not divisible across scales");
      r /= 2;
    }
    for (int c : channels) check(c % heads == 0, "config: channels must divide by heads");
  }

  nlohmann::json fingerprint() const {
    return {{"resolution", resolution},
            {"epd_dim", epd_dim},
            {"embed_dim", embed_dim},
            {"n_scales", n_scales},
            {"channels", channels},
            {"backbone_widths", backbone_widths},
            {"pnet_s2_widths", pnet_s2_widths},
            {"window", window},
            {"heads", heads},
            {"n_classes", n_classes},
            {"landmark_count", landmark_count}};
  }

  nlohmann::json to_json() const {
    nlohmann::json j = fingerprint();
    j["T"] = T;
    j["variant"] = variant;
    return j;
  }

  static ModelConfig from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.resolution = j.at("resolution");
    c.epd_dim = j.at("epd_dim");
    c.embed_dim = j.at("embed_dim");
    c.n_scales = j.at("n_scales");
    c.channels = j.at("channels").get<std::vector<int>>();
    c.backbone_widths = j.at("backbone_widths").get<std::vector<int>>();
    c.pnet_s2_widths = j.at("pnet_s2_widths").get<std::vector<int>>();
    c.window = j.at("window");
    c.heads = j.at("heads");
    c.n_classes = j.at("n_classes");
    c.landmark_count = j.at("landmark_count");
    if (j.contains("T")) c.T = j.at("T");
    if (j.contains("variant")) c.variant = j.at("variant");
    c.validate();
    return c;
  }
};

}  // namespace lldif
