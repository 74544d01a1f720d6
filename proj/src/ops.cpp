#include "dynfuse/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace dynfuse {
namespace {

thread_local std::uint64_t g_conv_invocations = 0;

void check_conv_geometry(const Tensor& input, const Kernel4D& kernel, int stride) {
  if (stride < 1) throw std::invalid_argument("conv2d: stride must be positive");
  if (input.dim(1) != kernel.dim(1)) {
    throw std::invalid_argument("conv2d: input has " + std::to_string(input.dim(1)) +
                                " channels but kernel expects " + std::to_string(kernel.dim(1)));
  }
  if (input.dim(2) < kernel.dim(2) || input.dim(3) < kernel.dim(3)) {
    throw std::invalid_argument("conv2d: kernel " + Kernel4D::to_string(kernel.shape()) +
                                " larger than input " + Tensor::to_string(input.shape()));
  }
}

}  // namespace

std::uint64_t conv_invocations() { return g_conv_invocations; }

int conv_output_size(int in, int k, int stride) { return (in - k) / stride + 1; }

Tensor conv2d_forward(const Tensor& input, const Kernel4D& kernel, int stride) {
  check_conv_geometry(input, kernel, stride);
  const int n = input.dim(0), ci = input.dim(1), ih = input.dim(2), iw = input.dim(3);
  const int co = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
  const int oh = conv_output_size(ih, kh, stride), ow = conv_output_size(iw, kw, stride);
  Tensor out({n, co, oh, ow});
  for (int b = 0; b < n; ++b) {
    for (int o = 0; o < co; ++o) {
      double* dst = out.plane(b, o).data();
      for (int i = 0; i < ci; ++i) {
        const double* src = input.plane(b, i).data();
        for (int ky = 0; ky < kh; ++ky) {
          for (int kx = 0; kx < kw; ++kx) {
            const double k = kernel.at(o, i, ky, kx);
            for (int y = 0; y < oh; ++y) {
              const double* row = src + static_cast<std::size_t>(y * stride + ky) * iw + kx;
              double* drow = dst + static_cast<std::size_t>(y) * ow;
              for (int x = 0; x < ow; ++x) drow[x] += k * row[x * stride];
            }
          }
        }
      }
    }
  }
  g_conv_invocations += static_cast<std::uint64_t>(n);
  return out;
}

ConvGrads conv2d_backward(const Tensor& grad_out, const Tensor& input, const Kernel4D& kernel,
                          int stride) {
  check_conv_geometry(input, kernel, stride);
  const int n = input.dim(0), ci = input.dim(1), ih = input.dim(2), iw = input.dim(3);
  const int co = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
  const int oh = conv_output_size(ih, kh, stride), ow = conv_output_size(iw, kw, stride);
  const Tensor::Shape expected{n, co, oh, ow};
  if (grad_out.shape() != expected) {
    throw std::invalid_argument("conv2d_backward: grad_out shape " +
                                Tensor::to_string(grad_out.shape()) + " expected " +
                                Tensor::to_string(expected));
  }
  ConvGrads g{Tensor(input.shape()), Kernel4D(kernel.shape())};
  for (int b = 0; b < n; ++b) {
    for (int o = 0; o < co; ++o) {
      const double* go = grad_out.plane(b, o).data();
      for (int i = 0; i < ci; ++i) {
        const double* src = input.plane(b, i).data();
        double* gi = g.grad_input.plane(b, i).data();
        for (int ky = 0; ky < kh; ++ky) {
          for (int kx = 0; kx < kw; ++kx) {
            const double k = kernel.at(o, i, ky, kx);
            double acc = 0.0;
            for (int y = 0; y < oh; ++y) {
              const std::size_t off = static_cast<std::size_t>(y * stride + ky) * iw + kx;
              const double* row = src + off;
              double* grow = gi + off;
              const double* gorow = go + static_cast<std::size_t>(y) * ow;
              for (int x = 0; x < ow; ++x) {
                acc += gorow[x] * row[x * stride];
                grow[x * stride] += k * gorow[x];
              }
            }
            g.grad_kernel.at(o, i, ky, kx) += acc;
          }
        }
      }
    }
  }
  return g;
}

Tensor relu(const Tensor& x) {
  Tensor y = x;
  for (double& v : y.data()) if (v < 0.0) v = 0.0;  // NaN propagates
  return y;
}

Tensor relu_backward(const Tensor& grad_out, const Tensor& x) {
  if (grad_out.shape() != x.shape()) throw std::invalid_argument("relu_backward: shape mismatch");
  Tensor g(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) g[i] = x[i] > 0.0 ? grad_out[i] : 0.0;
  return g;
}

Tensor global_avg_pool(const Tensor& x) {
  Tensor y({x.dim(0), x.dim(1), 1, 1});
  const double inv = 1.0 / (static_cast<double>(x.dim(2)) * x.dim(3));
  for (int b = 0; b < x.dim(0); ++b) {
    for (int c = 0; c < x.dim(1); ++c) {
      double s = 0.0;
      for (double v : x.plane(b, c)) s += v;
      y.at(b, c, 0, 0) = s * inv;
    }
  }
  return y;
}

Tensor global_avg_pool_backward(const Tensor& grad_out, const Tensor::Shape& input_shape) {
  if (grad_out.dim(0) != input_shape[0] || grad_out.dim(1) != input_shape[1]) {
    throw std::invalid_argument("global_avg_pool_backward: shape mismatch");
  }
  Tensor g(input_shape);
  const double inv = 1.0 / (static_cast<double>(input_shape[2]) * input_shape[3]);
  for (int b = 0; b < input_shape[0]; ++b) {
    for (int c = 0; c < input_shape[1]; ++c) {
      const double v = grad_out.at(b, c, 0, 0) * inv;
      for (double& e : g.plane(b, c)) e = v;
    }
  }
  return g;
}

std::vector<double> fully_connected(std::span<const double> x, const Matrix& weights,
                                    std::span<const double> bias) {
  if (static_cast<int>(x.size()) != weights.cols()) {
    throw std::invalid_argument("fully_connected: input length " + std::to_string(x.size()) +
                                " != weight columns " + std::to_string(weights.cols()));
  }
  if (static_cast<int>(bias.size()) != weights.rows()) {
    throw std::invalid_argument("fully_connected: bias length mismatch");
  }
  std::vector<double> y(bias.begin(), bias.end());
  for (int r = 0; r < weights.rows(); ++r) {
    const auto w = weights.row(r);
    double acc = 0.0;
    for (std::size_t c = 0; c < x.size(); ++c) acc += w[c] * x[c];
    y[static_cast<std::size_t>(r)] += acc;
  }
  return y;
}

FcGrads fully_connected_backward(std::span<const double> grad_y, std::span<const double> x,
                                 const Matrix& weights) {
  if (static_cast<int>(grad_y.size()) != weights.rows() ||
      static_cast<int>(x.size()) != weights.cols()) {
    throw std::invalid_argument("fully_connected_backward: dimension mismatch");
  }
  FcGrads g{std::vector<double>(x.size(), 0.0), Matrix(weights.rows(), weights.cols()),
            std::vector<double>(grad_y.begin(), grad_y.end())};
  for (int r = 0; r < weights.rows(); ++r) {
    const double gy = grad_y[static_cast<std::size_t>(r)];
    if (gy == 0.0) continue;
    const auto w = weights.row(r);
    for (std::size_t c = 0; c < x.size(); ++c) {
      g.grad_x[c] += gy * w[c];
      g.grad_weights(r, static_cast<int>(c)) = gy * x[c];
    }
  }
  return g;
}

std::vector<double> softmax(std::span<const double> x) {
  if (x.empty()) return {};
  const double m = *std::max_element(x.begin(), x.end());
  std::vector<double> y(x.size());
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    y[i] = std::exp(x[i] - m);
    s += y[i];
  }
  for (double& v : y) v /= s;
  return y;
}

std::vector<double> softmax_backward(std::span<const double> grad_y, std::span<const double> y) {
  if (grad_y.size() != y.size()) throw std::invalid_argument("softmax_backward: length mismatch");
  double dot = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) dot += grad_y[i] * y[i];
  std::vector<double> g(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) g[i] = y[i] * (grad_y[i] - dot);
  return g;
}

MaxPoolResult maxpool2d(const Tensor& x, int size, int stride) {
  if (size < 1 || stride < 1) throw std::invalid_argument("maxpool2d: size and stride must be >= 1");
  if (size > x.dim(2) || size > x.dim(3)) {
    throw std::invalid_argument("maxpool2d: window " + std::to_string(size) +
                                " larger than input " + Tensor::to_string(x.shape()));
  }
  const int oh = conv_output_size(x.dim(2), size, stride);
  const int ow = conv_output_size(x.dim(3), size, stride);
  MaxPoolResult r{Tensor({x.dim(0), x.dim(1), oh, ow}), {}};
  r.argmax.resize(r.output.size());
  std::size_t k = 0;
  for (int b = 0; b < x.dim(0); ++b) {
    for (int c = 0; c < x.dim(1); ++c) {
      for (int y = 0; y < oh; ++y) {
        for (int xx = 0; xx < ow; ++xx, ++k) {
          std::size_t best_i = x.index(b, c, y * stride, xx * stride);
          double best = x[best_i];
          for (int dy = 0; dy < size; ++dy) {
            for (int dx = 0; dx < size; ++dx) {
              const std::size_t i = x.index(b, c, y * stride + dy, xx * stride + dx);
              if (x[i] > best || (std::isnan(x[i]) && !std::isnan(best))) {
                best = x[i];
                best_i = i;
              }
            }
          }
          r.output[k] = best;
          r.argmax[k] = best_i;
        }
      }
    }
  }
  return r;
}

Tensor maxpool2d_backward(const Tensor& grad_out, const MaxPoolResult& forward,
                          const Tensor::Shape& input_shape) {
  if (grad_out.shape() != forward.output.shape()) {
    throw std::invalid_argument("maxpool2d_backward: shape mismatch");
  }
  Tensor g(input_shape);
  for (std::size_t k = 0; k < grad_out.size(); ++k) g[forward.argmax[k]] += grad_out[k];
  return g;
}

Tensor center_crop(const Tensor& x, int h, int w) {
  if (h > x.dim(2) || w > x.dim(3) || h < 1 || w < 1) {
    throw std::invalid_argument("center_crop: target larger than input");
  }
  const int oy = (x.dim(2) - h) / 2, ox = (x.dim(3) - w) / 2;
  Tensor y({x.dim(0), x.dim(1), h, w});
  for (int b = 0; b < x.dim(0); ++b)
    for (int c = 0; c < x.dim(1); ++c)
      for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) y.at(b, c, i, j) = x.at(b, c, i + oy, j + ox);
  return y;
}

Tensor center_crop_backward(const Tensor& grad_out, const Tensor::Shape& input_shape) {
  const int h = grad_out.dim(2), w = grad_out.dim(3);
  const int oy = (input_shape[2] - h) / 2, ox = (input_shape[3] - w) / 2;
  Tensor g(input_shape);
  for (int b = 0; b < grad_out.dim(0); ++b)
    for (int c = 0; c < grad_out.dim(1); ++c)
      for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) g.at(b, c, i + oy, j + ox) = grad_out.at(b, c, i, j);
  return g;
}

Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw std::invalid_argument("add: shape mismatch");
  Tensor y = a;
  axpy(1.0, b.data(), y.data());
  return y;
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3)) {
    throw std::invalid_argument("concat_channels: shapes " + Tensor::to_string(a.shape()) +
                                " and " + Tensor::to_string(b.shape()) + " differ");
  }
  Tensor y({a.dim(0), a.dim(1) + b.dim(1), a.dim(2), a.dim(3)});
  for (int n = 0; n < a.dim(0); ++n) {
    for (int c = 0; c < a.dim(1); ++c) std::ranges::copy(a.plane(n, c), y.plane(n, c).begin());
    for (int c = 0; c < b.dim(1); ++c)
      std::ranges::copy(b.plane(n, c), y.plane(n, a.dim(1) + c).begin());
  }
  return y;
}

Tensor slice_channels(const Tensor& x, int begin, int end) {
  if (begin < 0 || end > x.dim(1) || begin >= end) {
    throw std::invalid_argument("slice_channels: bad range");
  }
  Tensor y({x.dim(0), end - begin, x.dim(2), x.dim(3)});
  for (int n = 0; n < x.dim(0); ++n)
    for (int c = begin; c < end; ++c) std::ranges::copy(x.plane(n, c), y.plane(n, c - begin).begin());
  return y;
}

}  // namespace dynfuse
