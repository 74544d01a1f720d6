#include "dynfuse/network.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <numeric>
#include <random>
#include <utility>

#include <json.hpp>

#include "dynfuse/ops.hpp"
#include "dynfuse/parallel.hpp"
#include "dynfuse/serialize.hpp"

namespace dynfuse {
namespace {

using nlohmann::json;

Matrix he_matrix(int rows, int cols, double stddev, std::mt19937_64& rng) {
  Matrix m(rows, cols);
  std::normal_distribution<double> dist(0.0, stddev);
  for (double& v : m.data()) v = dist(rng);
  return m;
}

}  // namespace

NetworkConfig NetworkConfig::reference(FusionVariant variant) {
  NetworkConfig c;
  c.input_size = 107;
  c.layers = {FusionLayerConfig{variant, 3, 96, 7, 2, 3, 24, 64},
              FusionLayerConfig{variant, 96, 256, 5, 2, 1, 64, 64},
              FusionLayerConfig{variant, 256, 512, 3, 1, 1, 128, 64}};
  c.pool_size = 3;
  c.pool_stride = 2;
  c.fc_hidden = 512;
  return c;
}

NetworkConfig NetworkConfig::miniature(FusionVariant variant, int input_size) {
  NetworkConfig c;
  c.input_size = input_size;
  c.layers = {FusionLayerConfig{variant, 3, 8, 3, 1, 1, 2, 16},
              FusionLayerConfig{variant, 8, 16, 3, 2, 1, 4, 16},
              FusionLayerConfig{variant, 16, 32, 3, 1, 1, 8, 16}};
  c.pool_size = 2;
  c.pool_stride = 2;
  c.fc_hidden = 64;
  return c;
}

NetworkConfig NetworkConfig::tiny(FusionVariant variant) {
  NetworkConfig c;
  c.input_size = 8;
  c.layers = {FusionLayerConfig{variant, 3, 2, 3, 1, 1, 1, 3},
              FusionLayerConfig{variant, 2, 3, 3, 1, 1, 1, 3},
              FusionLayerConfig{variant, 3, 4, 2, 1, 2, 1, 3}};
  c.pool_size = 0;
  c.fc_hidden = 5;
  c.roi_density = 8;
  return c;
}

void NetworkConfig::set_variant(FusionVariant v) {
  for (auto& l : layers) l.variant = v;
}

int NetworkConfig::layer_input_size(int i) const {
  int s = input_size;
  for (int l = 0; l < i; ++l) {
    s = fusion_layer_output_size(layers[static_cast<std::size_t>(l)], s);
    if (l == 0 && pool_size > 0) s = conv_output_size(s, pool_size, pool_stride);
  }
  return s;
}

int NetworkConfig::feature_size() const {
  return fusion_layer_output_size(layers[2], layer_input_size(2));
}

void NetworkConfig::validate() const {
  int s = input_size;
  int c = 3;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& L = layers[l];
    if (L.c_in != c) {
      throw std::invalid_argument("network config: layer " + std::to_string(l + 1) + " expects " +
                                  std::to_string(L.c_in) + " input channels, previous produces " +
                                  std::to_string(c));
    }
    const int k = std::max(L.k, L.variant == FusionVariant::kBaseline ? L.k : L.effective_shared_k());
    if (s < k) {
      throw std::invalid_argument("network config: geometry underflow at layer " +
                                  std::to_string(l + 1));
    }
    s = fusion_layer_output_size(L, s);
    if (l == 0 && pool_size > 0) {
      if (s < pool_size) throw std::invalid_argument("network config: geometry underflow at pool");
      s = conv_output_size(s, pool_size, pool_stride);
    }
    c = L.c_out;
  }
  if (s < 3) {
    throw std::invalid_argument("network config: feature map " + std::to_string(s) +
                                " is smaller than the 3x3 ROI grid");
  }
  if (fc_hidden < 1 || roi_density < 1) throw std::invalid_argument("network config: bad head");
}

std::string network_config_to_json(const NetworkConfig& cfg) {
  json layers = json::array();
  for (const auto& l : cfg.layers) {
    layers.push_back({{"variant", to_string(l.variant)},
                      {"c_in", l.c_in},
                      {"c_out", l.c_out},
                      {"k", l.k},
                      {"stride", l.stride},
                      {"shared_k", l.shared_k},
                      {"shared_out", l.shared_out},
                      {"c_hidden", l.c_hidden}});
  }
  json j{{"input_size", cfg.input_size},
         {"layers", layers},
         {"pool_size", cfg.pool_size},
         {"pool_stride", cfg.pool_stride},
         {"fc_hidden", cfg.fc_hidden},
         {"roi_density", cfg.roi_density},
         {"optimizer",
          {{"lr", cfg.optimizer.lr},
           {"momentum", cfg.optimizer.momentum},
           {"weight_decay", cfg.optimizer.weight_decay},
           {"epochs", cfg.optimizer.epochs}}}};
  return j.dump(2);
}

NetworkConfig network_config_from_json(const std::string& text) {
  const json j = json::parse(text);
  NetworkConfig c;
  if (j.contains("profile")) {
    const auto profile = j.at("profile").get<std::string>();
    const auto variant = parse_variant(j.value("variant", std::string("dfnet")));
    if (profile == "reference") {
      c = NetworkConfig::reference(variant);
    } else if (profile == "miniature") {
      c = NetworkConfig::miniature(variant, j.value("input_size", 32));
    } else if (profile == "tiny") {
      c = NetworkConfig::tiny(variant);
    } else {
      throw std::invalid_argument("network config: unknown profile '" + profile + "'");
    }
  }
  c.input_size = j.value("input_size", c.input_size);
  if (j.contains("layers")) {
    const auto& ls = j.at("layers");
    if (!ls.is_array() || ls.size() != 3) {
      throw std::invalid_argument("network config: exactly three layers required");
    }
    for (std::size_t i = 0; i < 3; ++i) {
      const auto& e = ls[i];
      auto& l = c.layers[i];
      l.variant = parse_variant(e.value("variant", to_string(l.variant)));
      l.c_in = e.value("c_in", l.c_in);
      l.c_out = e.value("c_out", l.c_out);
      l.k = e.value("k", l.k);
      l.stride = e.value("stride", l.stride);
      l.shared_k = e.value("shared_k", l.shared_k);
      l.shared_out = e.value("shared_out", l.shared_out);
      l.c_hidden = e.value("c_hidden", l.c_hidden);
    }
  }
  c.pool_size = j.value("pool_size", c.pool_size);
  c.pool_stride = j.value("pool_stride", c.pool_stride);
  c.fc_hidden = j.value("fc_hidden", c.fc_hidden);
  c.roi_density = j.value("roi_density", c.roi_density);
  if (j.contains("optimizer")) {
    const auto& o = j.at("optimizer");
    c.optimizer.lr = o.value("lr", c.optimizer.lr);
    c.optimizer.momentum = o.value("momentum", c.optimizer.momentum);
    c.optimizer.weight_decay = o.value("weight_decay", c.optimizer.weight_decay);
    c.optimizer.epochs = o.value("epochs", c.optimizer.epochs);
  }
  c.validate();
  return c;
}

std::string config_hash(const NetworkConfig& cfg) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : network_config_to_json(cfg)) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::vector<ParamView> parameter_views(NetworkParams& params) {
  static const char* kBankNames[] = {"w_rgb",         "w_share",       "w_t",
                                     "att_rgb.fc1",   "att_rgb.fc1_b", "att_rgb.fc2",
                                     "att_rgb.fc2_b", "att_t.fc1",     "att_t.fc1_b",
                                     "att_t.fc2",     "att_t.fc2_b"};
  std::vector<ParamView> out;
  for (std::size_t l = 0; l < params.banks.size(); ++l) {
    auto views = parameter_views(params.banks[l]);
    for (std::size_t i = 0; i < views.size(); ++i) {
      if (views[i].empty()) continue;
      out.push_back({ParamGroup::kFusion, "layer" + std::to_string(l + 1) + "." + kBankNames[i],
                     views[i]});
    }
  }
  auto& h = params.head;
  out.push_back({ParamGroup::kFc45, "fc4.w", h.fc4.data()});
  out.push_back({ParamGroup::kFc45, "fc4.b", h.fc4_bias});
  out.push_back({ParamGroup::kFc45, "fc5.w", h.fc5.data()});
  out.push_back({ParamGroup::kFc45, "fc5.b", h.fc5_bias});
  out.push_back({ParamGroup::kFc6, "fc6.w", h.fc6.data()});
  out.push_back({ParamGroup::kFc6, "fc6.b", h.fc6_bias});
  return out;
}

NetworkParams zeros_like(const NetworkParams& params) {
  NetworkParams z;
  for (const auto& b : params.banks) z.banks.push_back(zeros_like(b));
  const auto& h = params.head;
  z.head = {Matrix(h.fc4.rows(), h.fc4.cols()), std::vector<double>(h.fc4_bias.size(), 0.0),
            Matrix(h.fc5.rows(), h.fc5.cols()), std::vector<double>(h.fc5_bias.size(), 0.0),
            Matrix(h.fc6.rows(), h.fc6.cols()), std::vector<double>(h.fc6_bias.size(), 0.0)};
  return z;
}

NetworkParams init_network(const NetworkConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  NetworkParams p;
  for (const auto& l : cfg.layers) p.banks.push_back(make_kernel_bank(l, rng));
  const int in = cfg.head_input();
  const int hidden = cfg.fc_hidden;
  p.head.fc4 = he_matrix(hidden, in, std::sqrt(2.0 / in), rng);
  p.head.fc4_bias.assign(static_cast<std::size_t>(hidden), 0.0);
  p.head.fc5 = he_matrix(hidden, hidden, std::sqrt(2.0 / hidden), rng);
  p.head.fc5_bias.assign(static_cast<std::size_t>(hidden), 0.0);
  reinit_fc6(cfg, p, seed ^ 0x9e3779b97f4a7c15ULL);
  return p;
}

void reinit_fc6(const NetworkConfig& cfg, NetworkParams& params, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  params.head.fc6 = he_matrix(2, cfg.fc_hidden, 0.01, rng);
  params.head.fc6_bias.assign(2, 0.0);
}

BackboneOutput backbone_forward(const NetworkConfig& cfg, const NetworkParams& params,
                                const Tensor& img_rgb, const Tensor& img_t,
                                const ForwardOptions& options, BackboneCache* cache) {
  if (img_rgb.shape() != img_t.shape()) {
    throw std::invalid_argument("backbone: RGB " + Tensor::to_string(img_rgb.shape()) +
                                " and thermal " + Tensor::to_string(img_t.shape()) +
                                " images differ in shape");
  }
  if (img_rgb.dim(1) != 3) throw std::invalid_argument("backbone: images must have 3 channels");
  if (img_rgb.dim(2) < cfg.layers[0].k || img_rgb.dim(3) < cfg.layers[0].k) {
    throw std::invalid_argument("backbone: geometry underflow");
  }
  BackboneOutput out;
  Tensor rgb = img_rgb, t = img_t;
  for (std::size_t l = 0; l < 3; ++l) {
    LayerCache* lc = cache ? &cache->layers[l] : nullptr;
    const LayerOptions lopt{options.pinned_weights ? options.pinned_weights : options.layer_weights[l],
                            options.detach_attention};
    auto r = fusion_layer_forward(cfg.layers[l], params.banks[l], rgb, t, lopt, lc);
    out.conv_counts[l] = r.conv_count;
    if (!r.weights.empty()) out.weights[l] = r.weights.front();
    rgb = std::move(r.out_rgb);
    t = std::move(r.out_t);
    if (l == 0 && cfg.pool_size > 0) {
      auto pr = maxpool2d(rgb, cfg.pool_size, cfg.pool_stride);
      auto pt = maxpool2d(t, cfg.pool_size, cfg.pool_stride);
      if (cache) cache->pool_input_shape = rgb.shape();
      rgb = pr.output;
      t = pt.output;
      if (cache) {
        cache->pool_rgb = std::move(pr);
        cache->pool_t = std::move(pt);
      }
    }
  }
  out.features = concat_channels(rgb, t);
  out.feat_rgb = std::move(rgb);
  out.feat_t = std::move(t);
  if (cache) cache->valid = true;
  return out;
}

void backbone_backward(const NetworkConfig& cfg, const NetworkParams& params,
                       const Tensor& grad_features, const BackboneCache& cache,
                       NetworkParams& grads) {
  if (!cache.valid) throw std::logic_error("backbone_backward: missing forward cache");
  const int c = cfg.layers[2].c_out;
  Tensor g_rgb = slice_channels(grad_features, 0, c);
  Tensor g_t = slice_channels(grad_features, c, 2 * c);
  for (int l = 2; l >= 0; --l) {
    const auto ul = static_cast<std::size_t>(l);
    if (l == 0 && cfg.pool_size > 0) {
      g_rgb = maxpool2d_backward(g_rgb, *cache.pool_rgb, cache.pool_input_shape);
      g_t = maxpool2d_backward(g_t, *cache.pool_t, cache.pool_input_shape);
    }
    auto lg = fusion_layer_backward(cfg.layers[ul], params.banks[ul], g_rgb, g_t, cache.layers[ul]);
    auto dst = parameter_views(grads.banks[ul]);
    auto src = parameter_views(std::as_const(lg.params));
    for (std::size_t i = 0; i < dst.size(); ++i) {
      if (!src[i].empty()) axpy(1.0, src[i], dst[i]);
    }
    g_rgb = std::move(lg.grad_rgb);
    g_t = std::move(lg.grad_t);
  }
}

namespace {

struct BinWeights {
  int begin = 0;  // first index with a nonzero weight
  std::vector<double> w;
};

// Average of the bilinear interpolation weights over `samples` evenly spaced
// points in [lo, hi) along one axis of length `size`.
BinWeights axis_weights(double lo, double hi, int size, int density) {
  const int samples = std::max(1, static_cast<int>(std::ceil((hi - lo) * density)));
  const double step = (hi - lo) / samples;
  std::vector<double> dense(static_cast<std::size_t>(size), 0.0);
  for (int s = 0; s < samples; ++s) {
    double u = lo + (s + 0.5) * step - 0.5;
    u = std::clamp(u, 0.0, static_cast<double>(size - 1));
    const int i0 = static_cast<int>(std::floor(u));
    const double f = u - i0;
    if (i0 >= size - 1) {
      dense[static_cast<std::size_t>(size - 1)] += 1.0;
    } else {
      dense[static_cast<std::size_t>(i0)] += 1.0 - f;
      dense[static_cast<std::size_t>(i0 + 1)] += f;
    }
  }
  int b = 0, e = size;
  while (b < size && dense[static_cast<std::size_t>(b)] == 0.0) ++b;
  while (e > b && dense[static_cast<std::size_t>(e - 1)] == 0.0) --e;
  BinWeights bw{b, std::vector<double>(dense.begin() + b, dense.begin() + e)};
  for (double& v : bw.w) v /= samples;
  return bw;
}

struct RoiGrid {
  std::array<BinWeights, 3> ys;
  std::array<BinWeights, 3> xs;
};

RoiGrid roi_grid(const Tensor::Shape& shape, const BoundingBox& box, double scale, int density) {
  if (!(box.w > 0.0) || !(box.h > 0.0) || !(scale > 0.0)) {
    throw std::invalid_argument("roi_pool: box and scale must be positive");
  }
  const int fh = shape[2], fw = shape[3];
  double x0 = box.x * scale, x1 = (box.x + box.w) * scale;
  double y0 = box.y * scale, y1 = (box.y + box.h) * scale;
  if (x1 - x0 < 1.0) {
    const double c = 0.5 * (x0 + x1);
    x0 = c - 0.5;
    x1 = c + 0.5;
  }
  if (y1 - y0 < 1.0) {
    const double c = 0.5 * (y0 + y1);
    y0 = c - 0.5;
    y1 = c + 0.5;
  }
  if (x1 <= 0.0 || y1 <= 0.0 || x0 >= fw || y0 >= fh) {
    throw std::invalid_argument("roi_pool: box does not intersect the feature map");
  }
  RoiGrid g;
  const double bw = (x1 - x0) / 3.0, bh = (y1 - y0) / 3.0;
  for (int i = 0; i < 3; ++i) {
    g.xs[static_cast<std::size_t>(i)] = axis_weights(x0 + i * bw, x0 + (i + 1) * bw, fw, density);
    g.ys[static_cast<std::size_t>(i)] = axis_weights(y0 + i * bh, y0 + (i + 1) * bh, fh, density);
  }
  return g;
}

}  // namespace

Tensor roi_pool(const Tensor& features, const BoundingBox& box, double scale, int density) {
  if (features.dim(0) != 1) throw std::invalid_argument("roi_pool: expects a single feature map");
  const RoiGrid g = roi_grid(features.shape(), box, scale, density);
  const int channels = features.dim(1);
  Tensor out({1, channels, 3, 3});
  for (int c = 0; c < channels; ++c) {
    for (int by = 0; by < 3; ++by) {
      const auto& wy = g.ys[static_cast<std::size_t>(by)];
      for (int bx = 0; bx < 3; ++bx) {
        const auto& wx = g.xs[static_cast<std::size_t>(bx)];
        double acc = 0.0;
        for (std::size_t iy = 0; iy < wy.w.size(); ++iy) {
          double row = 0.0;
          for (std::size_t ix = 0; ix < wx.w.size(); ++ix) {
            row += wx.w[ix] * features.at(0, c, wy.begin + static_cast<int>(iy),
                                          wx.begin + static_cast<int>(ix));
          }
          acc += wy.w[iy] * row;
        }
        out.at(0, c, by, bx) = acc;
      }
    }
  }
  return out;
}

Tensor roi_pool_backward(const Tensor& grad_out, const Tensor::Shape& feature_shape,
                         const BoundingBox& box, double scale, int density) {
  const RoiGrid g = roi_grid(feature_shape, box, scale, density);
  Tensor grad(feature_shape);
  for (int c = 0; c < feature_shape[1]; ++c) {
    for (int by = 0; by < 3; ++by) {
      const auto& wy = g.ys[static_cast<std::size_t>(by)];
      for (int bx = 0; bx < 3; ++bx) {
        const auto& wx = g.xs[static_cast<std::size_t>(bx)];
        const double go = grad_out.at(0, c, by, bx);
        if (go == 0.0) continue;
        for (std::size_t iy = 0; iy < wy.w.size(); ++iy)
          for (std::size_t ix = 0; ix < wx.w.size(); ++ix)
            grad.at(0, c, wy.begin + static_cast<int>(iy), wx.begin + static_cast<int>(ix)) +=
                go * wy.w[iy] * wx.w[ix];
      }
    }
  }
  return grad;
}

HeadTrace head_forward(const HeadParams& head, std::span<const double> x) {
  HeadTrace t;
  t.x.assign(x.begin(), x.end());
  t.h4_pre = fully_connected(t.x, head.fc4, head.fc4_bias);
  t.h4 = t.h4_pre;
  for (double& v : t.h4) v = std::max(v, 0.0);
  t.h5_pre = fully_connected(t.h4, head.fc5, head.fc5_bias);
  t.h5 = t.h5_pre;
  for (double& v : t.h5) v = std::max(v, 0.0);
  t.logits = fully_connected(t.h5, head.fc6, head.fc6_bias);
  return t;
}

std::vector<double> head_backward(const HeadParams& head, const HeadTrace& trace,
                                  std::span<const double> grad_logits, HeadParams& grads,
                                  bool fc45_trainable) {
  auto g6 = fully_connected_backward(grad_logits, trace.h5, head.fc6);
  axpy(1.0, g6.grad_weights.data(), grads.fc6.data());
  axpy(1.0, g6.grad_bias, grads.fc6_bias);
  auto relu_back = [](std::vector<double> g, const std::vector<double>& pre) {
    for (std::size_t i = 0; i < g.size(); ++i)
      if (!(pre[i] > 0.0)) g[i] = 0.0;
    return g;
  };
  const auto g5_pre = relu_back(std::move(g6.grad_x), trace.h5_pre);
  auto g5 = fully_connected_backward(g5_pre, trace.h4, head.fc5);
  const auto g4_pre = relu_back(std::move(g5.grad_x), trace.h4_pre);
  auto g4 = fully_connected_backward(g4_pre, trace.x, head.fc4);
  if (fc45_trainable) {
    axpy(1.0, g5.grad_weights.data(), grads.fc5.data());
    axpy(1.0, g5.grad_bias, grads.fc5_bias);
    axpy(1.0, g4.grad_weights.data(), grads.fc4.data());
    axpy(1.0, g4.grad_bias, grads.fc4_bias);
  }
  return std::move(g4.grad_x);
}

Scores score_features(const NetworkConfig& cfg, const NetworkParams& params,
                      const Tensor& features, const BoundingBox& box) {
  const double scale = static_cast<double>(features.dim(3)) / cfg.input_size;
  const Tensor pooled = roi_pool(features, box, scale, cfg.roi_density);
  const auto t = head_forward(params.head, pooled.data());
  return {t.logits[0], t.logits[1]};
}

std::vector<Scores> score_candidates_on_features(const NetworkConfig& cfg,
                                                 const NetworkParams& params,
                                                 const Tensor& features,
                                                 std::span<const BoundingBox> candidates,
                                                 int threads) {
  std::vector<Scores> scores(candidates.size());
  parallel_for(candidates.size(), threads, [&](std::size_t i) {
    scores[i] = score_features(cfg, params, features, candidates[i]);
  });
  return scores;
}

std::vector<Scores> score_candidates(const NetworkConfig& cfg, const NetworkParams& params,
                                     const Tensor& img_rgb, const Tensor& img_t,
                                     std::span<const BoundingBox> candidates, int threads,
                                     const ForwardOptions& options) {
  const auto bb = backbone_forward(cfg, params, img_rgb, img_t, options);
  return score_candidates_on_features(cfg, params, bb.features, candidates, threads);
}

double cross_entropy(std::span<const double> logits, bool positive,
                     std::array<double, 2>& grad_logits) {
  const auto p = softmax(logits);
  const std::size_t target = positive ? 0 : 1;
  grad_logits = {p[0], p[1]};
  grad_logits[target] -= 1.0;
  // log-sum-exp form keeps the loss finite for saturated logits
  const double m = std::max(logits[0], logits[1]);
  const double lse = m + std::log(std::exp(logits[0] - m) + std::exp(logits[1] - m));
  return lse - logits[target];
}

void SgdMomentum::step(std::span<double> param, std::span<const double> grad, double lr,
                       std::size_t slot) {
  if (param.size() != grad.size()) throw std::invalid_argument("sgd: shape mismatch");
  if (velocity_.size() <= slot) velocity_.resize(slot + 1);
  auto& v = velocity_[slot];
  if (v.size() != param.size()) v.assign(param.size(), 0.0);
  for (std::size_t i = 0; i < param.size(); ++i) {
    v[i] = momentum_ * v[i] + grad[i] + weight_decay_ * param[i];
    param[i] -= lr * v[i];
  }
}

void SgdMomentum::step(std::vector<ParamView>& params, const std::vector<ParamView>& grads,
                       const std::array<double, 3>& group_lr) {
  if (params.size() != grads.size()) throw std::invalid_argument("sgd: parameter list mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double lr = group_lr[static_cast<std::size_t>(params[i].group)];
    if (lr == 0.0) continue;  // frozen group
    step(params[i].values, grads[i].values, lr, i);
  }
}

namespace {

void zero(NetworkParams& grads) {
  for (auto& v : parameter_views(grads)) std::ranges::fill(v.values, 0.0);
}

}  // namespace

TrainResult train_offline(const NetworkConfig& cfg, NetworkParams& params,
                          const std::vector<TrainingFrame>& frames, const TrainOptions& options) {
  cfg.validate();
  for (const auto& f : frames) {
    if (f.boxes.size() != f.positive.size()) {
      throw std::invalid_argument("train_offline: every box needs a pos/neg label");
    }
  }
  const auto& opt = options.optimizer;
  const std::array<double, 3> group_lr{
      options.train_fusion ? opt.lr * options.group_lr_scale[0] : 0.0,
      opt.lr * options.group_lr_scale[1], opt.lr * options.group_lr_scale[2]};
  const bool fusion_live = group_lr[0] != 0.0;
  const bool fc45_live = group_lr[1] != 0.0;
  const ForwardOptions fwd{std::nullopt, options.detach_attention};

  // Frozen backbone: features never change, compute them once.
  std::vector<Tensor> frozen_features;
  if (!fusion_live) {
    for (const auto& f : frames) frozen_features.push_back(backbone_forward(cfg, params, f.rgb, f.t, fwd).features);
  }

  std::mt19937_64 rng(options.seed);
  SgdMomentum sgd(opt.momentum, opt.weight_decay);
  NetworkParams grads = zeros_like(params);
  auto param_views = parameter_views(params);
  auto grad_views = parameter_views(grads);
  const int batch = std::max(1, options.batch_size);

  std::vector<std::size_t> offsets(frames.size() + 1, 0);
  for (std::size_t i = 0; i < frames.size(); ++i) offsets[i + 1] = offsets[i] + frames[i].boxes.size();
  std::vector<double> sample_loss(offsets.back(), 0.0);

  TrainResult result;
  std::vector<std::size_t> frame_order(frames.size());
  std::iota(frame_order.begin(), frame_order.end(), 0);
  for (int epoch = 0; epoch < opt.epochs; ++epoch) {
    std::shuffle(frame_order.begin(), frame_order.end(), rng);
    for (std::size_t fi : frame_order) {
      const auto& frame = frames[fi];
      std::vector<std::size_t> order(frame.boxes.size());
      std::iota(order.begin(), order.end(), 0);
      std::shuffle(order.begin(), order.end(), rng);
      for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(batch)) {
        const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(batch));
        const double inv = 1.0 / static_cast<double>(stop - start);
        zero(grads);
        BackboneCache cache;
        Tensor features = fusion_live
                              ? backbone_forward(cfg, params, frame.rgb, frame.t, fwd, &cache).features
                              : frozen_features[fi];
        const double scale = static_cast<double>(features.dim(3)) / cfg.input_size;
        Tensor grad_features(features.shape());
        for (std::size_t s = start; s < stop; ++s) {
          const std::size_t idx = order[s];
          const auto& box = frame.boxes[idx];
          const Tensor pooled = roi_pool(features, box, scale, cfg.roi_density);
          const auto trace = head_forward(params.head, pooled.data());
          std::array<double, 2> g{};
          const double loss = cross_entropy(trace.logits, frame.positive[idx] != 0, g);
          if (!std::isfinite(loss)) {
            throw TrainingDiverged("train_offline: non-finite loss at epoch " +
                                   std::to_string(epoch) + ", frame " + std::to_string(fi) +
                                   " (lr " + std::to_string(opt.lr) + ")");
          }
          sample_loss[offsets[fi] + idx] = loss;
          g[0] *= inv;
          g[1] *= inv;
          auto gx = head_backward(params.head, trace, g, grads.head, fc45_live);
          if (fusion_live) {
            Tensor gp({1, features.dim(1), 3, 3}, std::move(gx));
            axpy(1.0, roi_pool_backward(gp, features.shape(), box, scale, cfg.roi_density).data(),
                 grad_features.data());
          }
        }
        if (fusion_live) backbone_backward(cfg, params, grad_features, cache, grads);
        sgd.step(param_views, grad_views, group_lr);
      }
    }
    const double total = std::accumulate(sample_loss.begin(), sample_loss.end(), 0.0);
    const double mean = sample_loss.empty() ? 0.0 : total / static_cast<double>(sample_loss.size());
    if (!std::isfinite(mean)) throw TrainingDiverged("train_offline: loss diverged");
    result.loss_curve.push_back(mean);
  }
  result.final_accuracy = evaluate_loss(cfg, params, frames, options.detach_attention).second;
  return result;
}

std::pair<double, double> evaluate_loss(const NetworkConfig& cfg, const NetworkParams& params,
                                        const std::vector<TrainingFrame>& frames,
                                        bool detach_attention) {
  double loss = 0.0, correct = 0.0, count = 0.0;
  for (const auto& f : frames) {
    const auto features = backbone_forward(cfg, params, f.rgb, f.t, {std::nullopt, detach_attention}).features;
    for (std::size_t i = 0; i < f.boxes.size(); ++i) {
      const auto s = score_features(cfg, params, features, f.boxes[i]);
      std::array<double, 2> g{};
      const std::array<double, 2> logits{s.pos, s.neg};
      loss += cross_entropy(logits, f.positive[i] != 0, g);
      correct += ((s.pos > s.neg) == (f.positive[i] != 0)) ? 1.0 : 0.0;
      count += 1.0;
    }
  }
  if (count == 0.0) return {0.0, 0.0};
  return {loss / count, correct / count};
}

double frame_loss(const NetworkConfig& cfg, const NetworkParams& params, const TrainingFrame& frame,
                  const ForwardOptions& options, NetworkParams* grads) {
  if (frame.boxes.empty() || frame.boxes.size() != frame.positive.size()) {
    throw std::invalid_argument("frame_loss: need a non-empty, fully labelled frame");
  }
  BackboneCache cache;
  const auto bb = backbone_forward(cfg, params, frame.rgb, frame.t, options, grads ? &cache : nullptr);
  const double scale = static_cast<double>(bb.features.dim(3)) / cfg.input_size;
  const double inv = 1.0 / static_cast<double>(frame.boxes.size());
  Tensor grad_features(bb.features.shape());
  double loss = 0.0;
  for (std::size_t i = 0; i < frame.boxes.size(); ++i) {
    const Tensor pooled = roi_pool(bb.features, frame.boxes[i], scale, cfg.roi_density);
    const auto trace = head_forward(params.head, pooled.data());
    std::array<double, 2> g{};
    loss += cross_entropy(trace.logits, frame.positive[i] != 0, g);
    if (!grads) continue;
    g[0] *= inv;
    g[1] *= inv;
    auto gx = head_backward(params.head, trace, g, grads->head, true);
    Tensor gp({1, bb.features.dim(1), 3, 3}, std::move(gx));
    axpy(1.0, roi_pool_backward(gp, bb.features.shape(), frame.boxes[i], scale, cfg.roi_density).data(),
         grad_features.data());
  }
  if (grads) backbone_backward(cfg, params, grad_features, cache, *grads);
  return loss * inv;
}

std::string encode_head(const HeadParams& h) {
  auto mat = [](const Matrix& m) { return BlobTensor{{m.rows(), m.cols()}, m.vec()}; };
  auto vec = [](const std::vector<double>& v) {
    return BlobTensor{{static_cast<std::int32_t>(v.size())}, v};
  };
  return encode_blob(kFcBlobMagic, {{mat(h.fc4), vec(h.fc4_bias)},
                                    {mat(h.fc5), vec(h.fc5_bias)},
                                    {mat(h.fc6), vec(h.fc6_bias)}});
}

HeadParams decode_head(const std::string& bytes) {
  const auto layers = decode_blob(kFcBlobMagic, bytes);
  if (layers.size() != 3) throw std::runtime_error("head blob: expected 3 layers");
  auto mat = [](const BlobTensor& t) {
    if (t.shape.size() != 2) throw std::runtime_error("head blob: weight must be rank 2");
    Matrix m(t.shape[0], t.shape[1]);
    m.vec() = t.values;
    return m;
  };
  HeadParams h;
  for (const auto& l : layers) {
    if (l.size() != 2) throw std::runtime_error("head blob: expected weight and bias per layer");
  }
  h.fc4 = mat(layers[0][0]);
  h.fc4_bias = layers[0][1].values;
  h.fc5 = mat(layers[1][0]);
  h.fc5_bias = layers[1][1].values;
  h.fc6 = mat(layers[2][0]);
  h.fc6_bias = layers[2][1].values;
  return h;
}

void save_checkpoint(const std::string& dir, const NetworkConfig& cfg, const NetworkParams& params,
                     int epoch, double loss) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  write_file_atomic((fs::path(dir) / "kernels.bin").string(), encode_kernel_banks(params.banks));
  write_file_atomic((fs::path(dir) / "head.bin").string(), encode_head(params.head));
  json manifest{{"config_hash", config_hash(cfg)},
                {"epoch", epoch},
                {"loss", loss},
                {"config", json::parse(network_config_to_json(cfg))}};
  write_file_atomic((fs::path(dir) / "manifest.json").string(), manifest.dump(2) + "\n");
}

Checkpoint load_checkpoint(const std::string& dir) {
  namespace fs = std::filesystem;
  const json manifest = json::parse(read_file((fs::path(dir) / "manifest.json").string()));
  Checkpoint ck;
  ck.config = network_config_from_json(manifest.at("config").dump());
  if (config_hash(ck.config) != manifest.at("config_hash").get<std::string>()) {
    throw std::runtime_error("checkpoint: config hash mismatch in " + dir);
  }
  ck.epoch = manifest.at("epoch").get<int>();
  ck.loss = manifest.at("loss").get<double>();
  ck.params.banks = decode_kernel_banks(read_file((fs::path(dir) / "kernels.bin").string()));
  ck.params.head = decode_head(read_file((fs::path(dir) / "head.bin").string()));
  if (ck.params.banks.size() != 3) throw std::runtime_error("checkpoint: expected 3 kernel banks");
  return ck;
}

}  // namespace dynfuse
