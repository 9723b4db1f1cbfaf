#pragma once

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>
#include <string>

#include "lldif/tensor.hpp"

namespace lldif {

// Images move through the pipeline as {3, H, W} RGB tensors in [0,1].

inline Tensor image_from_mat(const cv::Mat& bgr) {
  check(!bgr.empty(), "image: empty matrix");
  cv::Mat m;
  if (bgr.channels() == 1)
    cv::cvtColor(bgr, m, cv::COLOR_GRAY2BGR);
  else if (bgr.channels() == 4)
    cv::cvtColor(bgr, m, cv::COLOR_BGRA2BGR);
  else
    m = bgr;
  Tensor out({3, m.rows, m.cols});
  for (int i = 0; i < m.rows; ++i) {
    const cv::Vec3b* row = m.ptr<cv::Vec3b>(i);
    for (int j = 0; j < m.cols; ++j) {
      out.at3(0, i, j) = row[j][2] / 255.0;  // R
      out.at3(1, i, j) = row[j][1] / 255.0;
      out.at3(2, i, j) = row[j][0] / 255.0;
    }
  }
  return out;
}

inline Tensor load_image(const std::string& path) {
  cv::Mat m = cv::imread(path, cv::IMREAD_COLOR);
  check(!m.empty(), "image: cannot read " + path);
  return image_from_mat(m);
}

inline cv::Mat image_to_mat(const Tensor& img) {
  check(img.rank() == 3 && img.dim(0) == 3, "image: {3,H,W} tensor expected");
  int h = img.dim(1), w = img.dim(2);
  cv::Mat m(h, w, CV_8UC3);
  auto q = [](double v) {
    return static_cast<uchar>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
  };
  for (int i = 0; i < h; ++i) {
    cv::Vec3b* row = m.ptr<cv::Vec3b>(i);
    for (int j = 0; j < w; ++j) {
      row[j][2] = q(img.at3(0, i, j));
      row[j][1] = q(img.at3(1, i, j));
      row[j][0] = q(img.at3(2, i, j));
    }
  }
  return m;
}

inline void save_image(const std::string& path, const Tensor& img) {
  check(cv::imwrite(path, image_to_mat(img)), "image: cannot write " + path);
}

/// Single-channel load in [0,1], for landmark heatmap files.
inline Tensor load_image_gray(const std::string& path) {
  cv::Mat m = cv::imread(path, cv::IMREAD_GRAYSCALE);
  check(!m.empty(), "image: cannot read " + path);
  Tensor out({m.rows, m.cols});
  for (int i = 0; i < m.rows; ++i)
    for (int j = 0; j < m.cols; ++j) out.at(i, j) = m.at<uchar>(i, j) / 255.0;
  return out;
}

inline Tensor resize_image(const Tensor& img, int h, int w) {
  check(img.rank() == 3 && img.dim(0) == 3, "image: {3,H,W} tensor expected");
  int sh = img.dim(1), sw = img.dim(2);
  cv::Mat src(sh, sw, CV_64FC3);
  for (int i = 0; i < sh; ++i) {
    cv::Vec3d* row = src.ptr<cv::Vec3d>(i);
    for (int j = 0; j < sw; ++j)
      row[j] = {img.at3(0, i, j), img.at3(1, i, j), img.at3(2, i, j)};
  }
  cv::Mat dst;
  cv::resize(src, dst, cv::Size(w, h), 0, 0, cv::INTER_AREA);
  Tensor out({3, h, w});
  for (int i = 0; i < h; ++i) {
    const cv::Vec3d* row = dst.ptr<cv::Vec3d>(i);
    for (int j = 0; j < w; ++j) {
      out.at3(0, i, j) = std::clamp(row[j][0], 0.0, 1.0);
      out.at3(1, i, j) = std::clamp(row[j][1], 0.0, 1.0);
      out.at3(2, i, j) = std::clamp(row[j][2], 0.0, 1.0);
    }
  }
  return out;
}

}  // namespace lldif
