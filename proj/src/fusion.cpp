#include "dynfuse/fusion.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "dynfuse/ops.hpp"
#include "dynfuse/serialize.hpp"

namespace dynfuse {
namespace {

Tensor take_sample(const Tensor& x, int b) {
  Tensor s({1, x.dim(1), x.dim(2), x.dim(3)});
  const std::size_t len = s.size();
  std::copy_n(x.data().begin() + static_cast<std::ptrdiff_t>(len * b), len, s.data().begin());
  return s;
}

void put_sample(Tensor& x, int b, const Tensor& s) {
  std::ranges::copy(s.data(), x.data().begin() + static_cast<std::ptrdiff_t>(s.size() * b));
}

double dot(std::span<const double> a, std::span<const double> b) {
  return std::inner_product(a.begin(), a.end(), b.begin(), 0.0);
}

void accumulate(AttentionParams& into, const AttentionParams& g) {
  axpy(1.0, g.fc1.data(), into.fc1.data());
  axpy(1.0, g.fc1_bias, into.fc1_bias);
  axpy(1.0, g.fc2.data(), into.fc2.data());
  axpy(1.0, g.fc2_bias, into.fc2_bias);
}

AttentionParams zeros_like(const AttentionParams& p) {
  if (p.empty()) return {};
  return {Matrix(p.fc1.rows(), p.fc1.cols()), std::vector<double>(p.fc1_bias.size(), 0.0),
          Matrix(p.fc2.rows(), p.fc2.cols()), std::vector<double>(p.fc2_bias.size(), 0.0)};
}

Kernel4D zeros_like(const Kernel4D& k) { return k.empty() ? Kernel4D{} : Kernel4D(k.shape()); }

void fill_normal(std::span<double> v, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  for (double& x : v) x = dist(rng);
}

Kernel4D random_kernel(int o, int i, int kh, int kw, double stddev, std::mt19937_64& rng) {
  Kernel4D k({o, i, kh, kw});
  const double s = stddev > 0.0 ? stddev : std::sqrt(2.0 / (static_cast<double>(i) * kh * kw));
  fill_normal(k.data(), s, rng);
  return k;
}

int conv_count_since(std::uint64_t start, int batch) {
  return static_cast<int>((conv_invocations() - start) / static_cast<std::uint64_t>(batch));
}

void check_branches(const Tensor& f_rgb, const Tensor& f_t) {
  if (f_rgb.dim(0) != f_t.dim(0) || f_rgb.dim(2) != f_t.dim(2) || f_rgb.dim(3) != f_t.dim(3)) {
    throw std::invalid_argument("fusion layer: branch shapes " + Tensor::to_string(f_rgb.shape()) +
                                " and " + Tensor::to_string(f_t.shape()) + " differ");
  }
}

void check_cache(const LayerCache& cache, FusionVariant variant, const Tensor& g_rgb,
                 const Tensor& g_t) {
  if (!cache.valid) throw std::logic_error("fusion layer backward: missing forward cache");
  if (cache.variant != variant) {
    throw std::logic_error("fusion layer backward: cache was produced by the " +
                           to_string(cache.variant) + " variant");
  }
  if (g_rgb.dim(0) != cache.f_rgb.dim(0) || g_t.dim(0) != cache.f_t.dim(0)) {
    throw std::logic_error("fusion layer backward: stale cache (batch size changed)");
  }
}

// Crops a padded kernel gradient back to the (smaller) original size.
Kernel4D unpad_kernel(const Kernel4D& padded, int o_begin, const Kernel4D::Shape& shape) {
  Kernel4D k(shape);
  const int oy = (padded.dim(2) - shape[2]) / 2, ox = (padded.dim(3) - shape[3]) / 2;
  for (int o = 0; o < shape[0]; ++o)
    for (int i = 0; i < shape[1]; ++i)
      for (int y = 0; y < shape[2]; ++y)
        for (int x = 0; x < shape[3]; ++x) k.at(o, i, y, x) = padded.at(o_begin + o, i, y + oy, x + ox);
  return k;
}

}  // namespace

std::string to_string(FusionVariant v) {
  switch (v) {
    case FusionVariant::kBaseline: return "baseline";
    case FusionVariant::kMANet: return "manet";
    case FusionVariant::kIVFuse: return "ivfuse";
    case FusionVariant::kDFNet: return "dfnet";
  }
  return "unknown";
}

FusionVariant parse_variant(const std::string& name) {
  if (name == "baseline") return FusionVariant::kBaseline;
  if (name == "manet") return FusionVariant::kMANet;
  if (name == "ivfuse") return FusionVariant::kIVFuse;
  if (name == "dfnet") return FusionVariant::kDFNet;
  throw std::invalid_argument("unknown fusion variant '" + name + "'");
}

bool FusionWeights::on_simplex(double tol) const {
  const auto open = [](double v) { return v > 0.0 && v < 1.0; };
  return open(a) && open(b) && open(c) && open(d) && std::abs(a + b - 1.0) <= tol &&
         std::abs(c + d - 1.0) <= tol;
}

AttentionParams make_attention(int c_in, int hidden, std::mt19937_64& rng, double fc1_range) {
  AttentionParams p{Matrix(hidden, c_in), std::vector<double>(static_cast<std::size_t>(hidden), 0.0),
                    Matrix(2, hidden), std::vector<double>(2, 0.0)};
  if (fc1_range <= 0.0) fc1_range = std::sqrt(6.0 / c_in);
  std::uniform_real_distribution<double> u(-fc1_range, fc1_range);
  for (double& v : p.fc1.data()) v = u(rng);
  return p;
}

AttentionTrace attention_forward(const Tensor& sample, const AttentionParams& p) {
  if (sample.dim(1) != p.in_channels()) {
    throw std::invalid_argument("attention: input has " + std::to_string(sample.dim(1)) +
                                " channels, attention expects " + std::to_string(p.in_channels()));
  }
  AttentionTrace t;
  const Tensor pooled = global_avg_pool(sample);
  t.pooled.assign(pooled.data().begin(), pooled.data().end());
  t.hidden_pre = fully_connected(t.pooled, p.fc1, p.fc1_bias);
  t.hidden = t.hidden_pre;
  for (double& v : t.hidden) if (v < 0.0) v = 0.0;
  t.logits = fully_connected(t.hidden, p.fc2, p.fc2_bias);
  t.weights = softmax(t.logits);
  return t;
}

std::vector<std::array<double, 2>> attention_weights(const Tensor& f, const AttentionParams& p) {
  std::vector<std::array<double, 2>> out;
  out.reserve(static_cast<std::size_t>(f.dim(0)));
  for (int b = 0; b < f.dim(0); ++b) {
    const auto t = attention_forward(take_sample(f, b), p);
    out.push_back({t.weights[0], t.weights[1]});
  }
  return out;
}

AttentionGrads attention_backward(std::span<const double> grad_weights, const Tensor& sample,
                                  const AttentionParams& p, const AttentionTrace& trace) {
  AttentionGrads g;
  const auto g_logits = softmax_backward(grad_weights, trace.weights);
  auto fc2 = fully_connected_backward(g_logits, trace.hidden, p.fc2);
  std::vector<double> g_hidden_pre(fc2.grad_x.size());
  for (std::size_t i = 0; i < g_hidden_pre.size(); ++i) {
    g_hidden_pre[i] = trace.hidden_pre[i] > 0.0 ? fc2.grad_x[i] : 0.0;
  }
  auto fc1 = fully_connected_backward(g_hidden_pre, trace.pooled, p.fc1);
  g.params = {std::move(fc1.grad_weights), std::move(fc1.grad_bias), std::move(fc2.grad_weights),
              std::move(fc2.grad_bias)};
  Tensor g_pooled({1, sample.dim(1), 1, 1}, std::move(fc1.grad_x));
  g.grad_input = global_avg_pool_backward(g_pooled, sample.shape());
  return g;
}

Kernel4D merge_kernels(const Kernel4D& w_a, const Kernel4D& w_b, double alpha, double beta) {
  if (w_a.shape() != w_b.shape()) {
    throw std::invalid_argument("merge_kernels: shapes " + Kernel4D::to_string(w_a.shape()) +
                                " and " + Kernel4D::to_string(w_b.shape()) + " differ");
  }
  Kernel4D out(w_a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = alpha * w_a[i] + beta * w_b[i];
  return out;
}

Kernel4D stack_output_channels(const Kernel4D& first, const Kernel4D& second) {
  if (second.empty()) return first;
  if (first.empty()) return second;
  if (first.dim(1) != second.dim(1)) {
    throw std::invalid_argument("stack_output_channels: input channel counts differ");
  }
  const int kh = std::max(first.dim(2), second.dim(2));
  const int kw = std::max(first.dim(3), second.dim(3));
  for (const Kernel4D* k : {&first, &second}) {
    if ((kh - k->dim(2)) % 2 != 0 || (kw - k->dim(3)) % 2 != 0) {
      throw std::invalid_argument("stack_output_channels: kernel sizes cannot be centered");
    }
  }
  Kernel4D out({first.dim(0) + second.dim(0), first.dim(1), kh, kw});
  int o_base = 0;
  for (const Kernel4D* k : {&first, &second}) {
    const int oy = (kh - k->dim(2)) / 2, ox = (kw - k->dim(3)) / 2;
    for (int o = 0; o < k->dim(0); ++o)
      for (int i = 0; i < k->dim(1); ++i)
        for (int y = 0; y < k->dim(2); ++y)
          for (int x = 0; x < k->dim(3); ++x) out.at(o_base + o, i, y + oy, x + ox) = k->at(o, i, y, x);
    o_base += k->dim(0);
  }
  return out;
}

KernelBank make_kernel_bank(const FusionLayerConfig& cfg, std::mt19937_64& rng, double kernel_std) {
  KernelBank bank;
  const int sk = cfg.effective_shared_k();
  switch (cfg.variant) {
    case FusionVariant::kBaseline:
      bank.w_rgb = random_kernel(cfg.c_out, cfg.c_in, cfg.k, cfg.k, kernel_std, rng);
      bank.w_t = random_kernel(cfg.c_out, cfg.c_in, cfg.k, cfg.k, kernel_std, rng);
      break;
    case FusionVariant::kMANet:
      bank.w_rgb = random_kernel(cfg.c_out, cfg.c_in, cfg.k, cfg.k, kernel_std, rng);
      bank.w_share = random_kernel(cfg.c_out, cfg.c_in, sk, sk, kernel_std, rng);
      bank.w_t = random_kernel(cfg.c_out, cfg.c_in, cfg.k, cfg.k, kernel_std, rng);
      break;
    case FusionVariant::kIVFuse: {
      if (cfg.shared_out < 0 || cfg.shared_out >= cfg.c_out) {
        throw std::invalid_argument("ivfuse: shared_out must lie in [0, c_out)");
      }
      const int own = cfg.c_out - cfg.shared_out;
      bank.w_rgb = random_kernel(own, cfg.c_in, cfg.k, cfg.k, kernel_std, rng);
      if (cfg.shared_out > 0) {
        bank.w_share = random_kernel(cfg.shared_out, cfg.c_in, sk, sk, kernel_std, rng);
      }
      bank.w_t = random_kernel(own, cfg.c_in, cfg.k, cfg.k, kernel_std, rng);
      break;
    }
    case FusionVariant::kDFNet:
      bank.w_rgb = random_kernel(cfg.c_out, cfg.c_in, cfg.k, cfg.k, kernel_std, rng);
      bank.w_share = random_kernel(cfg.c_out, cfg.c_in, cfg.k, cfg.k, kernel_std, rng);
      bank.w_t = random_kernel(cfg.c_out, cfg.c_in, cfg.k, cfg.k, kernel_std, rng);
      bank.attention_rgb = make_attention(cfg.c_in, cfg.c_hidden, rng);
      bank.attention_t = make_attention(cfg.c_in, cfg.c_hidden, rng);
      break;
  }
  return bank;
}

LayerOutput baseline_layer_forward(const Tensor& f_rgb, const Tensor& f_t, const Kernel4D& w_rgb,
                                   const Kernel4D& w_t, int stride, LayerCache* cache) {
  check_branches(f_rgb, f_t);
  const auto start = conv_invocations();
  Tensor pre_rgb = conv2d_forward(f_rgb, w_rgb, stride);
  Tensor pre_t = conv2d_forward(f_t, w_t, stride);
  LayerOutput out{relu(pre_rgb), relu(pre_t), {}, conv_count_since(start, f_rgb.dim(0))};
  if (cache) {
    *cache = LayerCache{};
    cache->variant = FusionVariant::kBaseline;
    cache->stride = stride;
    cache->f_rgb = f_rgb;
    cache->f_t = f_t;
    cache->pre_rgb = std::move(pre_rgb);
    cache->pre_t = std::move(pre_t);
    cache->valid = true;
  }
  return out;
}

LayerOutput ma_layer_forward(const Tensor& f_rgb, const Tensor& f_t, const Kernel4D& w_rgb,
                             const Kernel4D& w_share, const Kernel4D& w_t, int stride,
                             LayerCache* cache) {
  check_branches(f_rgb, f_t);
  if (w_rgb.dim(0) != w_share.dim(0) || w_t.dim(0) != w_share.dim(0)) {
    throw std::invalid_argument("ma layer: shared and non-shared outputs have different channel "
                                "counts and cannot be summed");
  }
  const auto start = conv_invocations();
  Tensor own_rgb = conv2d_forward(f_rgb, w_rgb, stride);
  Tensor share_rgb = conv2d_forward(f_rgb, w_share, stride);
  Tensor share_t = conv2d_forward(f_t, w_share, stride);
  Tensor own_t = conv2d_forward(f_t, w_t, stride);
  const int h = std::min(own_rgb.dim(2), share_rgb.dim(2));
  const int w = std::min(own_rgb.dim(3), share_rgb.dim(3));
  LayerOutput out;
  out.out_rgb = add(center_crop(relu(own_rgb), h, w), center_crop(relu(share_rgb), h, w));
  out.out_t = add(center_crop(relu(share_t), h, w), center_crop(relu(own_t), h, w));
  out.conv_count = conv_count_since(start, f_rgb.dim(0));
  if (cache) {
    *cache = LayerCache{};
    cache->variant = FusionVariant::kMANet;
    cache->stride = stride;
    cache->f_rgb = f_rgb;
    cache->f_t = f_t;
    cache->pre_rgb = std::move(own_rgb);
    cache->pre_t = std::move(own_t);
    cache->pre_share_rgb = std::move(share_rgb);
    cache->pre_share_t = std::move(share_t);
    cache->valid = true;
  }
  return out;
}

LayerOutput ivfuse_layer_forward(const Tensor& f_rgb, const Tensor& f_t,
                                 const Kernel4D& w_rgb_part, const Kernel4D& w_share_part,
                                 const Kernel4D& w_t_part, int stride, LayerCache* cache) {
  check_branches(f_rgb, f_t);
  if (w_rgb_part.shape() != w_t_part.shape()) {
    throw std::invalid_argument("ivfuse layer: non-shared parts of the two branches differ");
  }
  if (!w_share_part.empty() && w_share_part.dim(1) != w_rgb_part.dim(1)) {
    throw std::invalid_argument("ivfuse layer: shared part has inconsistent input channels");
  }
  const Kernel4D k_rgb = stack_output_channels(w_rgb_part, w_share_part);
  const Kernel4D k_t = stack_output_channels(w_share_part, w_t_part);
  const auto start = conv_invocations();
  Tensor pre_rgb = conv2d_forward(f_rgb, k_rgb, stride);
  Tensor pre_t = conv2d_forward(f_t, k_t, stride);
  LayerOutput out{relu(pre_rgb), relu(pre_t), {}, conv_count_since(start, f_rgb.dim(0))};
  if (cache) {
    *cache = LayerCache{};
    cache->variant = FusionVariant::kIVFuse;
    cache->stride = stride;
    cache->f_rgb = f_rgb;
    cache->f_t = f_t;
    cache->pre_rgb = std::move(pre_rgb);
    cache->pre_t = std::move(pre_t);
    cache->merged_rgb = {k_rgb};
    cache->merged_t = {k_t};
    cache->valid = true;
  }
  return out;
}

LayerOutput df_layer_forward(const Tensor& f_rgb, const Tensor& f_t, const KernelBank& bank,
                             int stride, const LayerOptions& options, LayerCache* cache) {
  check_branches(f_rgb, f_t);
  if (bank.w_rgb.shape() != bank.w_share.shape() || bank.w_t.shape() != bank.w_share.shape()) {
    throw std::invalid_argument("df layer: W_rgb, W_share and W_t must have identical shapes");
  }
  const int n = f_rgb.dim(0);
  const bool use_attention = !options.pinned_weights.has_value();
  LayerCache local;
  LayerCache& c = cache ? *cache : local;
  c = LayerCache{};
  c.variant = FusionVariant::kDFNet;
  c.stride = stride;
  c.attention_live = use_attention && !options.detach_attention;

  const auto start = conv_invocations();
  Tensor pre_rgb, pre_t;
  for (int b = 0; b < n; ++b) {
    const Tensor s_rgb = take_sample(f_rgb, b);
    const Tensor s_t = take_sample(f_t, b);
    FusionWeights w;
    if (use_attention) {
      auto tr = attention_forward(s_rgb, bank.attention_rgb);
      auto tt = attention_forward(s_t, bank.attention_t);
      w = {tr.weights[0], tr.weights[1], tt.weights[0], tt.weights[1]};
      c.trace_rgb.push_back(std::move(tr));
      c.trace_t.push_back(std::move(tt));
    } else {
      w = *options.pinned_weights;
    }
    Kernel4D k_rgb = merge_kernels(bank.w_rgb, bank.w_share, w.a, w.b);
    Kernel4D k_t = merge_kernels(bank.w_share, bank.w_t, w.c, w.d);
    const Tensor z_rgb = conv2d_forward(s_rgb, k_rgb, stride);
    const Tensor z_t = conv2d_forward(s_t, k_t, stride);
    if (b == 0) {
      pre_rgb = Tensor({n, z_rgb.dim(1), z_rgb.dim(2), z_rgb.dim(3)});
      pre_t = Tensor({n, z_t.dim(1), z_t.dim(2), z_t.dim(3)});
    }
    put_sample(pre_rgb, b, z_rgb);
    put_sample(pre_t, b, z_t);
    c.merged_rgb.push_back(std::move(k_rgb));
    c.merged_t.push_back(std::move(k_t));
    c.weights.push_back(w);
  }
  LayerOutput out{relu(pre_rgb), relu(pre_t), c.weights, conv_count_since(start, n)};
  if (cache) {
    c.f_rgb = f_rgb;
    c.f_t = f_t;
    c.pre_rgb = std::move(pre_rgb);
    c.pre_t = std::move(pre_t);
    c.valid = true;
  }
  return out;
}

LayerGrads df_layer_backward(const Tensor& grad_out_rgb, const Tensor& grad_out_t,
                             const LayerCache& cache, const KernelBank& bank) {
  check_cache(cache, FusionVariant::kDFNet, grad_out_rgb, grad_out_t);
  LayerGrads g{zeros_like(bank), Tensor(cache.f_rgb.shape()), Tensor(cache.f_t.shape())};
  const Tensor gz_rgb = relu_backward(grad_out_rgb, cache.pre_rgb);
  const Tensor gz_t = relu_backward(grad_out_t, cache.pre_t);
  for (int b = 0; b < cache.f_rgb.dim(0); ++b) {
    const FusionWeights& w = cache.weights[static_cast<std::size_t>(b)];
    const Tensor s_rgb = take_sample(cache.f_rgb, b);
    const Tensor s_t = take_sample(cache.f_t, b);

    auto cg_rgb = conv2d_backward(take_sample(gz_rgb, b), s_rgb,
                                  cache.merged_rgb[static_cast<std::size_t>(b)], cache.stride);
    axpy(w.a, cg_rgb.grad_kernel.data(), g.params.w_rgb.data());
    axpy(w.b, cg_rgb.grad_kernel.data(), g.params.w_share.data());

    auto cg_t = conv2d_backward(take_sample(gz_t, b), s_t,
                                cache.merged_t[static_cast<std::size_t>(b)], cache.stride);
    axpy(w.c, cg_t.grad_kernel.data(), g.params.w_share.data());
    axpy(w.d, cg_t.grad_kernel.data(), g.params.w_t.data());

    if (cache.attention_live) {
      const std::array<double, 2> gw_rgb{dot(cg_rgb.grad_kernel.data(), bank.w_rgb.data()),
                                         dot(cg_rgb.grad_kernel.data(), bank.w_share.data())};
      auto ag = attention_backward(gw_rgb, s_rgb, bank.attention_rgb,
                                   cache.trace_rgb[static_cast<std::size_t>(b)]);
      accumulate(g.params.attention_rgb, ag.params);
      axpy(1.0, ag.grad_input.data(), cg_rgb.grad_input.data());

      const std::array<double, 2> gw_t{dot(cg_t.grad_kernel.data(), bank.w_share.data()),
                                       dot(cg_t.grad_kernel.data(), bank.w_t.data())};
      auto at = attention_backward(gw_t, s_t, bank.attention_t,
                                   cache.trace_t[static_cast<std::size_t>(b)]);
      accumulate(g.params.attention_t, at.params);
      axpy(1.0, at.grad_input.data(), cg_t.grad_input.data());
    }
    put_sample(g.grad_rgb, b, cg_rgb.grad_input);
    put_sample(g.grad_t, b, cg_t.grad_input);
  }
  return g;
}

LayerOutput fusion_layer_forward(const FusionLayerConfig& cfg, const KernelBank& bank,
                                 const Tensor& f_rgb, const Tensor& f_t,
                                 const LayerOptions& options, LayerCache* cache) {
  switch (cfg.variant) {
    case FusionVariant::kBaseline:
      return baseline_layer_forward(f_rgb, f_t, bank.w_rgb, bank.w_t, cfg.stride, cache);
    case FusionVariant::kMANet:
      return ma_layer_forward(f_rgb, f_t, bank.w_rgb, bank.w_share, bank.w_t, cfg.stride, cache);
    case FusionVariant::kIVFuse:
      return ivfuse_layer_forward(f_rgb, f_t, bank.w_rgb, bank.w_share, bank.w_t, cfg.stride,
                                  cache);
    case FusionVariant::kDFNet:
      return df_layer_forward(f_rgb, f_t, bank, cfg.stride, options, cache);
  }
  throw std::logic_error("unreachable");
}

LayerGrads fusion_layer_backward(const FusionLayerConfig& cfg, const KernelBank& bank,
                                 const Tensor& grad_out_rgb, const Tensor& grad_out_t,
                                 const LayerCache& cache) {
  if (cfg.variant == FusionVariant::kDFNet) {
    return df_layer_backward(grad_out_rgb, grad_out_t, cache, bank);
  }
  check_cache(cache, cfg.variant, grad_out_rgb, grad_out_t);
  LayerGrads g{zeros_like(bank), {}, {}};
  const int stride = cache.stride;

  if (cfg.variant == FusionVariant::kBaseline) {
    auto r = conv2d_backward(relu_backward(grad_out_rgb, cache.pre_rgb), cache.f_rgb, bank.w_rgb,
                             stride);
    auto t = conv2d_backward(relu_backward(grad_out_t, cache.pre_t), cache.f_t, bank.w_t, stride);
    g.params.w_rgb = std::move(r.grad_kernel);
    g.params.w_t = std::move(t.grad_kernel);
    g.grad_rgb = std::move(r.grad_input);
    g.grad_t = std::move(t.grad_input);
    return g;
  }

  if (cfg.variant == FusionVariant::kMANet) {
    // Each activated map was cropped before the sum; route the gradient back
    // through the crop, the activation and its convolution.
    const auto branch = [&](const Tensor& grad_out, const Tensor& pre, const Tensor& f,
                            const Kernel4D& kernel) {
      const Tensor g_pre = relu_backward(center_crop_backward(grad_out, pre.shape()), pre);
      return conv2d_backward(g_pre, f, kernel, stride);
    };
    auto own_rgb = branch(grad_out_rgb, cache.pre_rgb, cache.f_rgb, bank.w_rgb);
    auto share_rgb = branch(grad_out_rgb, cache.pre_share_rgb, cache.f_rgb, bank.w_share);
    auto share_t = branch(grad_out_t, cache.pre_share_t, cache.f_t, bank.w_share);
    auto own_t = branch(grad_out_t, cache.pre_t, cache.f_t, bank.w_t);
    g.params.w_rgb = std::move(own_rgb.grad_kernel);
    g.params.w_t = std::move(own_t.grad_kernel);
    g.params.w_share = std::move(share_rgb.grad_kernel);
    axpy(1.0, share_t.grad_kernel.data(), g.params.w_share.data());
    g.grad_rgb = add(own_rgb.grad_input, share_rgb.grad_input);
    g.grad_t = add(own_t.grad_input, share_t.grad_input);
    return g;
  }

  // IVFuse: gradients of the stacked kernels are split back into parts.
  auto r = conv2d_backward(relu_backward(grad_out_rgb, cache.pre_rgb), cache.f_rgb,
                           cache.merged_rgb.front(), stride);
  auto t = conv2d_backward(relu_backward(grad_out_t, cache.pre_t), cache.f_t,
                           cache.merged_t.front(), stride);
  const int own = bank.w_rgb.dim(0);
  const int shared = bank.w_share.empty() ? 0 : bank.w_share.dim(0);
  g.params.w_rgb = unpad_kernel(r.grad_kernel, 0, bank.w_rgb.shape());
  g.params.w_t = unpad_kernel(t.grad_kernel, shared, bank.w_t.shape());
  if (shared > 0) {
    g.params.w_share = unpad_kernel(r.grad_kernel, own, bank.w_share.shape());
    axpy(1.0, unpad_kernel(t.grad_kernel, 0, bank.w_share.shape()).data(),
         g.params.w_share.data());
  }
  g.grad_rgb = std::move(r.grad_input);
  g.grad_t = std::move(t.grad_input);
  return g;
}

int fusion_layer_output_size(const FusionLayerConfig& cfg, int in) {
  const int own = conv_output_size(in, cfg.k, cfg.stride);
  const int shared = conv_output_size(in, cfg.effective_shared_k(), cfg.stride);
  switch (cfg.variant) {
    case FusionVariant::kMANet: return std::min(own, shared);
    case FusionVariant::kIVFuse:
      return cfg.shared_out > 0 ? conv_output_size(in, std::max(cfg.k, cfg.effective_shared_k()),
                                                   cfg.stride)
                                : own;
    default: return own;
  }
}

std::vector<std::span<double>> parameter_views(KernelBank& bank) {
  return {bank.w_rgb.data(),
          bank.w_share.data(),
          bank.w_t.data(),
          bank.attention_rgb.fc1.data(),
          bank.attention_rgb.fc1_bias,
          bank.attention_rgb.fc2.data(),
          bank.attention_rgb.fc2_bias,
          bank.attention_t.fc1.data(),
          bank.attention_t.fc1_bias,
          bank.attention_t.fc2.data(),
          bank.attention_t.fc2_bias};
}

std::vector<std::span<const double>> parameter_views(const KernelBank& bank) {
  auto& mut = const_cast<KernelBank&>(bank);
  std::vector<std::span<const double>> out;
  for (auto s : parameter_views(mut)) out.emplace_back(s);
  return out;
}

KernelBank zeros_like(const KernelBank& bank) {
  return {zeros_like(bank.w_rgb), zeros_like(bank.w_share), zeros_like(bank.w_t),
          zeros_like(bank.attention_rgb), zeros_like(bank.attention_t)};
}

namespace {

BlobTensor to_blob(const Kernel4D& k) {
  if (k.empty()) return {{0}, {}};
  return {{k.dim(0), k.dim(1), k.dim(2), k.dim(3)}, k.vec()};
}
BlobTensor to_blob(const Matrix& m) {
  if (m.size() == 0) return {{0}, {}};
  return {{m.rows(), m.cols()}, m.vec()};
}
BlobTensor to_blob(const std::vector<double>& v) {
  return {{static_cast<std::int32_t>(v.size())}, v};
}

Kernel4D kernel_from_blob(const BlobTensor& t) {
  if (t.values.empty()) return {};
  if (t.shape.size() != 4) throw std::runtime_error("kernel bank blob: kernel must be rank 4");
  return Kernel4D({t.shape[0], t.shape[1], t.shape[2], t.shape[3]}, t.values);
}
Matrix matrix_from_blob(const BlobTensor& t) {
  if (t.values.empty()) return {};
  if (t.shape.size() != 2) throw std::runtime_error("kernel bank blob: matrix must be rank 2");
  Matrix m(t.shape[0], t.shape[1]);
  m.vec() = t.values;
  return m;
}

}  // namespace

std::string encode_kernel_banks(const std::vector<KernelBank>& banks) {
  std::vector<BlobLayer> layers;
  for (const auto& b : banks) {
    layers.push_back({to_blob(b.w_rgb), to_blob(b.w_share), to_blob(b.w_t),
                      to_blob(b.attention_rgb.fc1), to_blob(b.attention_rgb.fc1_bias),
                      to_blob(b.attention_rgb.fc2), to_blob(b.attention_rgb.fc2_bias),
                      to_blob(b.attention_t.fc1), to_blob(b.attention_t.fc1_bias),
                      to_blob(b.attention_t.fc2), to_blob(b.attention_t.fc2_bias)});
  }
  return encode_blob(kKernelBankMagic, layers);
}

std::vector<KernelBank> decode_kernel_banks(const std::string& bytes) {
  std::vector<KernelBank> banks;
  for (const auto& layer : decode_blob(kKernelBankMagic, bytes)) {
    if (layer.size() != 11) throw std::runtime_error("kernel bank blob: expected 11 tensors per layer");
    KernelBank b;
    b.w_rgb = kernel_from_blob(layer[0]);
    b.w_share = kernel_from_blob(layer[1]);
    b.w_t = kernel_from_blob(layer[2]);
    b.attention_rgb = {matrix_from_blob(layer[3]), layer[4].values, matrix_from_blob(layer[5]),
                       layer[6].values};
    b.attention_t = {matrix_from_blob(layer[7]), layer[8].values, matrix_from_blob(layer[9]),
                     layer[10].values};
    banks.push_back(std::move(b));
  }
  return banks;
}

}  // namespace dynfuse
