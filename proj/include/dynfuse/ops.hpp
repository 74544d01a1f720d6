#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "dynfuse/tensor.hpp"

namespace dynfuse {

// Valid (unpadded) cross-correlation:
//   out[n,o,y,x] = sum_{i,ky,kx} kernel[o,i,ky,kx] * input[n,i,y*s+ky,x*s+kx]
Tensor conv2d_forward(const Tensor& input, const Kernel4D& kernel, int stride);

struct ConvGrads {
  Tensor grad_input;
  Kernel4D grad_kernel;
};

ConvGrads conv2d_backward(const Tensor& grad_out, const Tensor& input, const Kernel4D& kernel,
                          int stride);

// Number of single-image convolutions performed by conv2d_forward on the
// calling thread (a batch of n images counts as n). Layers take the delta
// around their forward pass to report how many convolutions they ran.
std::uint64_t conv_invocations();

int conv_output_size(int in, int k, int stride);

Tensor relu(const Tensor& x);
// Gradient passes where x > 0; the subgradient at 0 is 0.
Tensor relu_backward(const Tensor& grad_out, const Tensor& x);

// (n, c, h, w) -> (n, c, 1, 1) spatial mean.
Tensor global_avg_pool(const Tensor& x);
Tensor global_avg_pool_backward(const Tensor& grad_out, const Tensor::Shape& input_shape);

// y = weights * x + bias, weights is (out, in).
std::vector<double> fully_connected(std::span<const double> x, const Matrix& weights,
                                    std::span<const double> bias);

struct FcGrads {
  std::vector<double> grad_x;
  Matrix grad_weights;
  std::vector<double> grad_bias;
};

FcGrads fully_connected_backward(std::span<const double> grad_y, std::span<const double> x,
                                 const Matrix& weights);

// Max-subtracted softmax.
std::vector<double> softmax(std::span<const double> x);
// Vector-Jacobian product given the softmax output y.
std::vector<double> softmax_backward(std::span<const double> grad_y, std::span<const double> y);

struct MaxPoolResult {
  Tensor output;
  // Flat input index chosen for every output element (first max on ties).
  std::vector<std::size_t> argmax;
};

MaxPoolResult maxpool2d(const Tensor& x, int size, int stride);
Tensor maxpool2d_backward(const Tensor& grad_out, const MaxPoolResult& forward,
                          const Tensor::Shape& input_shape);

// Center crop of the spatial dims to (h, w); offsets are floor((H-h)/2).
Tensor center_crop(const Tensor& x, int h, int w);
Tensor center_crop_backward(const Tensor& grad_out, const Tensor::Shape& input_shape);

Tensor add(const Tensor& a, const Tensor& b);

// Concatenate along the channel axis; all other dims must agree.
Tensor concat_channels(const Tensor& a, const Tensor& b);
Tensor slice_channels(const Tensor& x, int begin, int end);

}  // namespace dynfuse
