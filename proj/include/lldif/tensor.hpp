#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace lldif {

struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

inline void check(bool cond, const std::string& msg) {
  if (!cond) throw Error(msg);
}

using MatrixRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<MatrixRM>;
using ConstMatMap = Eigen::Map<const MatrixRM>;

/// Dense row-major tensor of doubles. Rank 1..4 is what the models use;
/// a scalar is represented as shape {1}.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
    data_.assign(static_cast<size_t>(count(shape_)), 0.0);
  }
  Tensor(std::vector<int> shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    check(static_cast<long>(data_.size()) == count(shape_),
          "tensor: data size does not match shape");
  }

  static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }
  static Tensor full(std::vector<int> shape, double v) {
    Tensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), v);
    return t;
  }
  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  const std::vector<int>& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_.at(static_cast<size_t>(i)); }
  long numel() const { return static_cast<long>(data_.size()); }
  bool empty() const { return data_.empty(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& vec() { return data_; }
  const std::vector<double>& vec() const { return data_; }

  double& operator[](long i) { return data_[static_cast<size_t>(i)]; }
  double operator[](long i) const { return data_[static_cast<size_t>(i)]; }

  // 2-D accessor, shape {n, m}
  double& at(int i, int j) { return data_[static_cast<size_t>(i) * shape_[1] + j]; }
  double at(int i, int j) const { return data_[static_cast<size_t>(i) * shape_[1] + j]; }
  // 3-D accessor, shape {c, h, w}
  double& at3(int c, int h, int w) {
    return data_[(static_cast<size_t>(c) * shape_[1] + h) * shape_[2] + w];
  }
  double at3(int c, int h, int w) const {
    return data_[(static_cast<size_t>(c) * shape_[1] + h) * shape_[2] + w];
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  double item() const {
    check(numel() == 1, "tensor: item() on non-scalar");
    return data_[0];
  }

  bool all_finite() const {
    for (double v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  double min() const { return *std::min_element(data_.begin(), data_.end()); }
  double max() const { return *std::max_element(data_.begin(), data_.end()); }
  double sum() const { return std::accumulate(data_.begin(), data_.end(), 0.0); }
  double mean() const { return numel() ? sum() / static_cast<double>(numel()) : 0.0; }
  double max_abs_diff(const Tensor& o) const {
    check(same_shape(o), "tensor: shape mismatch in max_abs_diff");
    double m = 0.0;
    for (long i = 0; i < numel(); ++i) m = std::max(m, std::abs(data_[i] - o.data_[i]));
    return m;
  }

  /// Rank-2 Eigen view (row-major).
  MatMap mat() {
    check(rank() == 2, "tensor: mat() needs rank 2");
    return MatMap(data(), shape_[0], shape_[1]);
  }
  ConstMatMap mat() const {
    check(rank() == 2, "tensor: mat() needs rank 2");
    return ConstMatMap(data(), shape_[0], shape_[1]);
  }
  /// Any tensor viewed as a {rows, cols} matrix without copying.
  MatMap as_mat(int rows, int cols) {
    check(static_cast<long>(rows) * cols == numel(), "tensor: as_mat size mismatch");
    return MatMap(data(), rows, cols);
  }
  ConstMatMap as_mat(int rows, int cols) const {
    check(static_cast<long>(rows) * cols == numel(), "tensor: as_mat size mismatch");
    return ConstMatMap(data(), rows, cols);
  }

  Tensor reshaped(std::vector<int> new_shape) const {
    check(count(new_shape) == numel(), "tensor: reshape changes element count");
    return Tensor(std::move(new_shape), data_);
  }

  std::string shape_str() const {
    std::ostringstream os;
    os << '{';
    for (size_t i = 0; i < shape_.size(); ++i) os << (i ? "," : "") << shape_[i];
    os << '}';
    return os.str();
  }

  static long count(const std::vector<int>& shape) {
    long n = 1;
    for (int d : shape) {
      check(d >= 0, "tensor: negative dimension");
      n *= d;
    }
    return shape.empty() ? 0 : n;
  }

 private:
  std::vector<int> shape_;
  std::vector<double> data_;
};

inline Tensor operator+(const Tensor& a, const Tensor& b) {
  check(a.same_shape(b), "tensor: shape mismatch in +");
  Tensor r = a;
  for (long i = 0; i < r.numel(); ++i) r[i] += b[i];
  return r;
}

inline Tensor operator-(const Tensor& a, const Tensor& b) {
  check(a.same_shape(b), "tensor: shape mismatch in -");
  Tensor r = a;
  for (long i = 0; i < r.numel(); ++i) r[i] -= b[i];
  return r;
}

inline Tensor operator*(const Tensor& a, double s) {
  Tensor r = a;
  for (long i = 0; i < r.numel(); ++i) r[i] *= s;
  return r;
}

}  // namespace lldif
