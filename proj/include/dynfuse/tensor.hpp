#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace dynfuse {

// Rank-4 dense array of doubles in row-major order. The Tag distinguishes
// activations (n, c, h, w) from convolution kernels (o, i, kh, kw) so the two
// cannot be swapped by accident.
template <class Tag>
class Dense4 {
 public:
  using Shape = std::array<int, 4>;

  Dense4() = default;
  explicit Dense4(Shape shape, double fill = 0.0) : shape_(shape) {
    for (int d : shape_) {
      if (d < 1) {
        throw std::invalid_argument("Dense4: every dimension must be >= 1, got " +
                                    to_string(shape_));
      }
    }
    data_.assign(count(shape_), fill);
  }
  Dense4(Shape shape, std::vector<double> data) : Dense4(shape) {
    if (data.size() != data_.size()) {
      throw std::invalid_argument("Dense4: data length " + std::to_string(data.size()) +
                                  " does not match shape " + to_string(shape_));
    }
    data_ = std::move(data);
  }

  const Shape& shape() const { return shape_; }
  int dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::vector<double>& vec() { return data_; }
  const std::vector<double>& vec() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  std::size_t index(int a, int b, int c, int d) const {
    return ((static_cast<std::size_t>(a) * shape_[1] + b) * shape_[2] + c) * shape_[3] + d;
  }
  double& at(int a, int b, int c, int d) { return data_[index(a, b, c, d)]; }
  double at(int a, int b, int c, int d) const { return data_[index(a, b, c, d)]; }

  // Contiguous plane [a, b, :, :].
  std::span<double> plane(int a, int b) {
    return std::span<double>(data_).subspan(index(a, b, 0, 0),
                                            static_cast<std::size_t>(shape_[2]) * shape_[3]);
  }
  std::span<const double> plane(int a, int b) const {
    return std::span<const double>(data_).subspan(
        index(a, b, 0, 0), static_cast<std::size_t>(shape_[2]) * shape_[3]);
  }

  static std::size_t count(const Shape& s) {
    return static_cast<std::size_t>(s[0]) * s[1] * s[2] * s[3];
  }
  static std::string to_string(const Shape& s) {
    return "(" + std::to_string(s[0]) + "," + std::to_string(s[1]) + "," +
           std::to_string(s[2]) + "," + std::to_string(s[3]) + ")";
  }

  friend bool operator==(const Dense4& a, const Dense4& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_{0, 0, 0, 0};
  std::vector<double> data_;
};

struct ActivationTag {};
struct KernelTag {};

/// Activations and feature maps: (batch, channels, height, width).
using Tensor = Dense4<ActivationTag>;
/// Convolution weights: (out_channels, in_channels, kernel_h, kernel_w).
using Kernel4D = Dense4<KernelTag>;

// Row-major matrix used by the fully connected layers.
class Matrix {
 public:
  Matrix() = default;
  Matrix(int rows, int cols, double fill = 0.0) : rows_(rows), cols_(cols) {
    if (rows < 1 || cols < 1) throw std::invalid_argument("Matrix: dimensions must be >= 1");
    data_.assign(static_cast<std::size_t>(rows) * cols, fill);
  }

  int rows() const { return rows_; }
  int cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  double& operator()(int r, int c) { return data_[static_cast<std::size_t>(r) * cols_ + c]; }
  double operator()(int r, int c) const { return data_[static_cast<std::size_t>(r) * cols_ + c]; }
  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::vector<double>& vec() { return data_; }
  const std::vector<double>& vec() const { return data_; }
  std::span<const double> row(int r) const {
    return std::span<const double>(data_).subspan(static_cast<std::size_t>(r) * cols_,
                                                  static_cast<std::size_t>(cols_));
  }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  int rows_ = 0;
  int cols_ = 0;
  std::vector<double> data_;
};

bool all_finite(std::span<const double> v);

// Elementwise helpers shared by the layers and the optimizer.
void axpy(double alpha, std::span<const double> x, std::span<double> y);
void scale(double alpha, std::span<double> x);
double max_abs_diff(std::span<const double> a, std::span<const double> b);

}  // namespace dynfuse
