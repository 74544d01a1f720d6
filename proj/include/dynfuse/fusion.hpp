#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "dynfuse/tensor.hpp"

namespace dynfuse {

enum class FusionVariant { kBaseline, kMANet, kIVFuse, kDFNet };

std::string to_string(FusionVariant v);
FusionVariant parse_variant(const std::string& name);

// Mixing coefficients of one dynamic fusion layer for one sample:
//   RGB kernel     = a * W_rgb   + b * W_share
//   thermal kernel = c * W_share + d * W_t
// with a + b = 1, c + d = 1 and every entry strictly inside (0, 1).
struct FusionWeights {
  double a = 0.5;
  double b = 0.5;
  double c = 0.5;
  double d = 0.5;

  bool on_simplex(double tol = 1e-12) const;
  friend bool operator==(const FusionWeights&, const FusionWeights&) = default;
};

// GAP -> FC -> ReLU -> FC -> Softmax attention producing two mixing weights.
struct AttentionParams {
  Matrix fc1;                     // (hidden, c_in)
  std::vector<double> fc1_bias;   // hidden
  Matrix fc2;                     // (2, hidden)
  std::vector<double> fc2_bias;   // 2

  int in_channels() const { return fc1.cols(); }
  int hidden() const { return fc1.rows(); }
  bool empty() const { return fc1.size() == 0; }
};

// fc1 ~ U(-fc1_range, fc1_range) (<= 0 selects sqrt(6 / c_in)), fc1 bias
// zero, fc2 and its bias zero so the initial mixing weights are exactly
// (0.5, 0.5).
AttentionParams make_attention(int c_in, int hidden, std::mt19937_64& rng,
                               double fc1_range = 0.0);

// Forward intermediates of the attention path for one sample, kept for the
// backward pass.
struct AttentionTrace {
  std::vector<double> pooled;
  std::vector<double> hidden_pre;
  std::vector<double> hidden;
  std::vector<double> logits;
  std::vector<double> weights;  // softmax output, length 2
};

AttentionTrace attention_forward(const Tensor& sample, const AttentionParams& p);

// Per-sample (w1, w2) on the 2-simplex for every item in the batch.
std::vector<std::array<double, 2>> attention_weights(const Tensor& f, const AttentionParams& p);

struct AttentionGrads {
  AttentionParams params;   // gradients w.r.t. each parameter
  Tensor grad_input;        // gradient w.r.t. the sample (through GAP)
};

AttentionGrads attention_backward(std::span<const double> grad_weights, const Tensor& sample,
                                  const AttentionParams& p, const AttentionTrace& trace);

Kernel4D merge_kernels(const Kernel4D& w_a, const Kernel4D& w_b, double alpha, double beta);

// Parameters of one two-stream layer. Which members are populated depends on
// the variant:
//   baseline: w_rgb, w_t
//   manet:    w_rgb, w_share (spatial size may differ), w_t
//   ivfuse:   w_rgb and w_t hold the non-shared output channels, w_share the
//             shared ones (may be empty); spatial sizes may differ
//   dfnet:    w_rgb, w_share, w_t of identical shape plus both attentions
struct KernelBank {
  Kernel4D w_rgb;
  Kernel4D w_share;
  Kernel4D w_t;
  AttentionParams attention_rgb;
  AttentionParams attention_t;
};

// Geometry and variant of one fusion layer.
struct FusionLayerConfig {
  FusionVariant variant = FusionVariant::kDFNet;
  int c_in = 3;
  int c_out = 8;
  int k = 3;
  int stride = 1;
  int shared_k = 0;    // manet/ivfuse shared-kernel size; 0 means k
  int shared_out = 0;  // ivfuse shared output channels
  int c_hidden = 64;   // dfnet attention width

  int effective_shared_k() const { return shared_k > 0 ? shared_k : k; }
};

// Random bank for the given geometry. Kernels ~ N(0, kernel_std), with
// kernel_std <= 0 selecting He scaling sqrt(2 / (c_in * k * k)).
KernelBank make_kernel_bank(const FusionLayerConfig& cfg, std::mt19937_64& rng,
                            double kernel_std = 0.0);

struct LayerOutput {
  Tensor out_rgb;
  Tensor out_t;
  std::vector<FusionWeights> weights;  // one per sample; empty unless dfnet
  int conv_count = 0;                  // single-image convolutions per sample
};

struct LayerOptions {
  // Use these coefficients instead of evaluating the attention.
  std::optional<FusionWeights> pinned_weights;
  // Treat the attention output as a constant in the backward pass.
  bool detach_attention = false;
};

// Everything the backward pass of any variant needs.
struct LayerCache {
  FusionVariant variant = FusionVariant::kBaseline;
  int stride = 1;
  bool valid = false;
  bool attention_live = false;
  Tensor f_rgb;
  Tensor f_t;
  Tensor pre_rgb;   // pre-activation (baseline/ivfuse/dfnet) or non-shared path (manet)
  Tensor pre_t;
  Tensor pre_share_rgb;  // manet shared path pre-activations (before crop)
  Tensor pre_share_t;
  std::vector<Kernel4D> merged_rgb;  // dfnet, per sample
  std::vector<Kernel4D> merged_t;
  std::vector<AttentionTrace> trace_rgb;
  std::vector<AttentionTrace> trace_t;
  std::vector<FusionWeights> weights;
};

struct LayerGrads {
  KernelBank params;  // same layout as the bank; attention empty when unused
  Tensor grad_rgb;
  Tensor grad_t;
};

LayerOutput baseline_layer_forward(const Tensor& f_rgb, const Tensor& f_t, const Kernel4D& w_rgb,
                                   const Kernel4D& w_t, int stride, LayerCache* cache = nullptr);

LayerOutput ma_layer_forward(const Tensor& f_rgb, const Tensor& f_t, const Kernel4D& w_rgb,
                             const Kernel4D& w_share, const Kernel4D& w_t, int stride,
                             LayerCache* cache = nullptr);

LayerOutput ivfuse_layer_forward(const Tensor& f_rgb, const Tensor& f_t,
                                 const Kernel4D& w_rgb_part, const Kernel4D& w_share_part,
                                 const Kernel4D& w_t_part, int stride,
                                 LayerCache* cache = nullptr);

LayerOutput df_layer_forward(const Tensor& f_rgb, const Tensor& f_t, const KernelBank& bank,
                             int stride, const LayerOptions& options = {},
                             LayerCache* cache = nullptr);

LayerGrads df_layer_backward(const Tensor& grad_out_rgb, const Tensor& grad_out_t,
                             const LayerCache& cache, const KernelBank& bank);

// Dispatches on cfg.variant.
LayerOutput fusion_layer_forward(const FusionLayerConfig& cfg, const KernelBank& bank,
                                 const Tensor& f_rgb, const Tensor& f_t,
                                 const LayerOptions& options = {}, LayerCache* cache = nullptr);

LayerGrads fusion_layer_backward(const FusionLayerConfig& cfg, const KernelBank& bank,
                                 const Tensor& grad_out_rgb, const Tensor& grad_out_t,
                                 const LayerCache& cache);

// Output spatial size of a layer for an input of size `in`.
int fusion_layer_output_size(const FusionLayerConfig& cfg, int in);

// IVFuse combined kernel: `first` and `second` stacked along the output
// channels, the smaller spatial kernel zero-padded (centered) to the larger.
Kernel4D stack_output_channels(const Kernel4D& first, const Kernel4D& second);

// Flat parameter access used by the optimizer, serialization and the
// finite-difference checks. Order: w_rgb, w_share, w_t, attention_rgb
// (fc1, fc1_bias, fc2, fc2_bias), attention_t (same).
std::vector<std::span<double>> parameter_views(KernelBank& bank);
std::vector<std::span<const double>> parameter_views(const KernelBank& bank);
// Zero-filled bank with the same layout.
KernelBank zeros_like(const KernelBank& bank);

// Kernel-bank blob: see serialize.hpp for the byte layout.
std::string encode_kernel_banks(const std::vector<KernelBank>& banks);
std::vector<KernelBank> decode_kernel_banks(const std::string& bytes);

}  // namespace dynfuse
