#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "dynfuse/fusion.hpp"
#include "dynfuse/ops.hpp"
#include "dynfuse/tensor.hpp"

namespace dynfuse {

struct BoundingBox {
  double x = 0.0;  // top-left, pixels
  double y = 0.0;
  double w = 1.0;
  double h = 1.0;

  double cx() const { return x + 0.5 * w; }
  double cy() const { return y + 0.5 * h; }
  friend bool operator==(const BoundingBox&, const BoundingBox&) = default;
};

struct OptimizerConfig {
  double lr = 1e-4;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  int epochs = 60;
};

struct NetworkConfig {
  int input_size = 107;
  std::array<FusionLayerConfig, 3> layers{};
  // Max pooling applied to both branches after the first layer; 0 disables.
  int pool_size = 3;
  int pool_stride = 2;
  int fc_hidden = 512;  // FC4 and FC5 width
  // ROI bilinear samples per feature pixel along each axis.
  int roi_density = 32;
  OptimizerConfig optimizer{};

  // 107x107 input: conv1 96@7x7/2 + 3x3/2 max pool, conv2 256@5x5/2,
  // conv3 512@3x3/1, 9x9 features per branch.
  static NetworkConfig reference(FusionVariant variant = FusionVariant::kDFNet);
  // Small channel widths (8/16/32) for CI-scale training and tracking.
  static NetworkConfig miniature(FusionVariant variant = FusionVariant::kDFNet,
                                 int input_size = 32);
  // 8x8 inputs with 2-4 channels for exhaustive finite-difference checks.
  static NetworkConfig tiny(FusionVariant variant = FusionVariant::kDFNet);

  void set_variant(FusionVariant v);
  // Spatial size entering layer i (0-based) and of the final feature map.
  int layer_input_size(int i) const;
  int feature_size() const;
  int feature_channels() const { return 2 * layers[2].c_out; }
  int head_input() const { return feature_channels() * 9; }
  void validate() const;
};

std::string network_config_to_json(const NetworkConfig& cfg);
NetworkConfig network_config_from_json(const std::string& text);
// FNV-1a of the canonical JSON form, as 16 hex digits.
std::string config_hash(const NetworkConfig& cfg);

struct HeadParams {
  Matrix fc4;
  std::vector<double> fc4_bias;
  Matrix fc5;
  std::vector<double> fc5_bias;
  Matrix fc6;
  std::vector<double> fc6_bias;
};

struct NetworkParams {
  std::vector<KernelBank> banks;  // one per fusion layer
  HeadParams head;
};

enum class ParamGroup { kFusion, kFc45, kFc6 };

struct ParamView {
  ParamGroup group;
  std::string name;
  std::span<double> values;
};

std::vector<ParamView> parameter_views(NetworkParams& params);
NetworkParams zeros_like(const NetworkParams& params);

NetworkParams init_network(const NetworkConfig& cfg, std::uint64_t seed);
// Fresh random FC6 (the tracking-time head).
void reinit_fc6(const NetworkConfig& cfg, NetworkParams& params, std::uint64_t seed);

struct ForwardOptions {
  // Same coefficients for every layer; overrides layer_weights.
  std::optional<FusionWeights> pinned_weights;
  bool detach_attention = false;
  // Per-layer coefficients for batch-1 passes.
  std::array<std::optional<FusionWeights>, 3> layer_weights{};
};

struct BackboneCache {
  std::array<LayerCache, 3> layers;
  std::optional<MaxPoolResult> pool_rgb;
  std::optional<MaxPoolResult> pool_t;
  Tensor::Shape pool_input_shape{};
  bool valid = false;
};

struct BackboneOutput {
  Tensor feat_rgb;
  Tensor feat_t;
  Tensor features;  // feat_rgb and feat_t concatenated along channels
  // Per layer mixing weights of the first sample (dfnet layers only).
  std::array<std::optional<FusionWeights>, 3> weights;
  std::array<int, 3> conv_counts{};
};

// Both images are (1, 3, S, S); the thermal image is replicated to 3 channels.
BackboneOutput backbone_forward(const NetworkConfig& cfg, const NetworkParams& params,
                                const Tensor& img_rgb, const Tensor& img_t,
                                const ForwardOptions& options = {},
                                BackboneCache* cache = nullptr);

// Accumulates fusion-layer gradients into grads.banks given d loss / d features.
void backbone_backward(const NetworkConfig& cfg, const NetworkParams& params,
                       const Tensor& grad_features, const BackboneCache& cache,
                       NetworkParams& grads);

// Bilinear-sampled average pooling of `box` (image pixels) into a 3x3 grid.
// `scale` maps image pixels to feature pixels; feature pixel j covers
// [j, j+1) with its sample at j + 0.5. Boxes thinner than one feature pixel
// are widened about their center.
Tensor roi_pool(const Tensor& features, const BoundingBox& box, double scale, int density = 32);
Tensor roi_pool_backward(const Tensor& grad_out, const Tensor::Shape& feature_shape,
                         const BoundingBox& box, double scale, int density = 32);

struct HeadTrace {
  std::vector<double> x;
  std::vector<double> h4_pre, h4, h5_pre, h5;
  std::vector<double> logits;
};

// FC4 -> ReLU -> FC5 -> ReLU -> FC6; logits[0] is the target score,
// logits[1] the background score.
HeadTrace head_forward(const HeadParams& head, std::span<const double> x);
// Accumulates head gradients; returns d loss / d x.
std::vector<double> head_backward(const HeadParams& head, const HeadTrace& trace,
                                  std::span<const double> grad_logits, HeadParams& grads,
                                  bool fc45_trainable = true);

struct Scores {
  double pos = 0.0;
  double neg = 0.0;
};

Scores score_features(const NetworkConfig& cfg, const NetworkParams& params,
                      const Tensor& features, const BoundingBox& box);

// One backbone pass, then an independent head evaluation per candidate.
std::vector<Scores> score_candidates(const NetworkConfig& cfg, const NetworkParams& params,
                                     const Tensor& img_rgb, const Tensor& img_t,
                                     std::span<const BoundingBox> candidates, int threads = 1,
                                     const ForwardOptions& options = {});
std::vector<Scores> score_candidates_on_features(const NetworkConfig& cfg,
                                                 const NetworkParams& params,
                                                 const Tensor& features,
                                                 std::span<const BoundingBox> candidates,
                                                 int threads = 1);

// Softmax cross-entropy over (pos, neg) logits; returns the loss and writes
// d loss / d logits.
double cross_entropy(std::span<const double> logits, bool positive,
                     std::array<double, 2>& grad_logits);

// SGD with momentum and L2 weight decay:
//   v <- momentum * v + grad + weight_decay * param
//   param <- param - lr * v
class SgdMomentum {
 public:
  SgdMomentum(double momentum, double weight_decay)
      : momentum_(momentum), weight_decay_(weight_decay) {}

  void step(std::span<double> param, std::span<const double> grad, double lr, std::size_t slot);
  void step(std::vector<ParamView>& params, const std::vector<ParamView>& grads,
            const std::array<double, 3>& group_lr);
  void reset() { velocity_.clear(); }

 private:
  double momentum_;
  double weight_decay_;
  std::vector<std::vector<double>> velocity_;
};

struct TrainingFrame {
  Tensor rgb;
  Tensor t;
  std::vector<BoundingBox> boxes;
  std::vector<std::uint8_t> positive;
};

struct TrainOptions {
  OptimizerConfig optimizer{};
  std::uint64_t seed = 0;
  int batch_size = 64;  // samples drawn per frame per iteration
  bool detach_attention = false;
  bool train_fusion = true;
  std::array<double, 3> group_lr_scale{1.0, 1.0, 1.0};
};

struct TrainResult {
  std::vector<double> loss_curve;  // mean loss per epoch
  double final_accuracy = 0.0;
};

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

TrainResult train_offline(const NetworkConfig& cfg, NetworkParams& params,
                          const std::vector<TrainingFrame>& frames, const TrainOptions& options);

// Mean loss and accuracy over every sample without updating.
std::pair<double, double> evaluate_loss(const NetworkConfig& cfg, const NetworkParams& params,
                                        const std::vector<TrainingFrame>& frames,
                                        bool detach_attention = false);

// Mean cross-entropy over one frame's labelled boxes. When `grads` is given,
// the gradient of that mean is accumulated into it (fusion layers included).
double frame_loss(const NetworkConfig& cfg, const NetworkParams& params, const TrainingFrame& frame,
                  const ForwardOptions& options = {}, NetworkParams* grads = nullptr);

// Checkpoint: <dir>/kernels.bin, <dir>/head.bin, <dir>/manifest.json.
void save_checkpoint(const std::string& dir, const NetworkConfig& cfg, const NetworkParams& params,
                     int epoch, double loss);
struct Checkpoint {
  NetworkConfig config;
  NetworkParams params;
  int epoch = 0;
  double loss = 0.0;
};
Checkpoint load_checkpoint(const std::string& dir);

std::string encode_head(const HeadParams& head);
HeadParams decode_head(const std::string& bytes);

}  // namespace dynfuse
