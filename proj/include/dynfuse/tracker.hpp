#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "dynfuse/network.hpp"

namespace dynfuse {

// ---------------------------------------------------------------------------
// Synthetic RGB-thermal sequences

enum class DegradationKind {
  kLowLight,          // RGB frame multiplied by `level`
  kIrNoise,           // additive Gaussian IR noise with sigma `level`
  kOcclusion,         // target hidden in both modalities
  kThermalCrossover,  // target IR intensity equals the local background
};

struct DegradationEvent {
  DegradationKind kind = DegradationKind::kLowLight;
  int begin = 0;  // first affected frame
  int end = 0;    // one past the last affected frame
  double level = 1.0;
};

struct SyntheticSequenceConfig {
  int frames = 100;
  int size = 48;  // square frames
  double object_w = 10.0;
  double object_h = 10.0;
  double start_x = 19.0;  // top-left of the first ground-truth box
  double start_y = 19.0;
  double velocity_x = 0.0;  // pixels per frame; reflects at the frame border
  double velocity_y = 0.0;
  double rgb_noise_sigma = 0.02;  // sensor noise, applied after the gain
  double ir_noise_sigma = 0.0;    // baseline IR noise
  int distractors = 2;            // background blobs sharing one cue each
  std::vector<DegradationEvent> schedule;
  std::uint64_t seed = 0;

  void validate() const;
};

struct FrameDegradation {
  double rgb_gain = 1.0;
  double ir_noise_sigma = 0.0;
  bool occluded = false;
  bool crossover = false;
};

FrameDegradation degradation_at(const SyntheticSequenceConfig& cfg, int frame);

struct Sequence {
  std::vector<Tensor> rgb;  // (1, 3, S, S), values in [0, 1]
  std::vector<Tensor> ir;   // (1, 1, S, S)
  std::vector<BoundingBox> gt;
};

Sequence generate_sequence(const SyntheticSequenceConfig& cfg);

// (1, 1, S, S) -> (1, 3, S, S)
Tensor replicate_thermal(const Tensor& ir);

// `rgb/%06d.ppm`, `ir/%06d.pgm` (1-based frame numbers, 8-bit), and
// `groundtruth.txt` with four space-separated integers per line.
void save_sequence(const std::string& dir, const Sequence& seq);
Sequence load_sequence(const std::string& dir);

std::string format_boxes(const std::vector<BoundingBox>& boxes);
std::vector<BoundingBox> parse_boxes(const std::string& text);

// ---------------------------------------------------------------------------
// Sampling

double iou(const BoundingBox& a, const BoundingBox& b);

// Keeps w, h within [min_size, frame] and the box inside the frame.
BoundingBox clip_box(const BoundingBox& b, int frame_size, double min_size = 2.0);

struct GaussianSampler {
  double sigma_xy = 0.1;    // times the box diagonal
  double sigma_scale = 0.5; // sizes scale by 1.05^N(0, sigma_scale)
};

std::vector<BoundingBox> gaussian_sample_candidates(const BoundingBox& prev, int n,
                                                    const GaussianSampler& sampler,
                                                    int frame_size, std::mt19937_64& rng);

struct SampleConfig {
  int n_pos = 500;
  int n_neg = 5000;
  double pos_thresh = 0.7;
  double neg_thresh = 0.3;
  GaussianSampler pos_sampler{0.1, 0.5};
  std::size_t max_draws_per_sample = 1000;
};

struct SampleSet {
  std::vector<BoundingBox> pos;
  std::vector<BoundingBox> neg;
};

class SamplingBudgetExceeded : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

SampleSet collect_samples(const BoundingBox& gt, int frame_size, const SampleConfig& cfg,
                          std::mt19937_64& rng);

// ---------------------------------------------------------------------------
// Online tracking

enum class Modality { kDual, kRgbOnly, kThermalOnly };

std::string to_string(Modality m);
Modality parse_modality(const std::string& name);

// Chooses what each stream sees: an ablated run feeds the same modality to
// both streams.
std::pair<Tensor, Tensor> modality_inputs(const Tensor& rgb, const Tensor& ir3, Modality m);

struct ProtocolConfig {
  int n_candidates = 256;
  GaussianSampler sampler{};
  int top_k = 5;
  SampleConfig init_samples{};
  SampleConfig online_samples{50, 200, 0.7, 0.3, {0.1, 0.5}, 1000};
  int init_iterations = 50;
  int update_iterations = 15;
  int batch_pos = 32;
  int batch_neg = 96;
  double init_lr = 1e-4;
  double lr_fc6 = 1e-3;
  double lr_fc45 = 5e-4;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  int long_term_interval = 10;
  int long_term_frames = 100;   // positive-sample memory
  int short_term_frames = 20;   // negative-sample memory
  double failure_threshold = 0.0;
  bool updates_enabled = true;
  Modality modality = Modality::kDual;
  std::uint64_t seed = 0;
  int threads = 1;
};

struct TrackFrame {
  BoundingBox box;
  double top_score = 0.0;
  std::array<std::optional<FusionWeights>, 3> weights;
  bool long_term = false;
  bool short_term = false;

  std::string update_event() const;
};

struct Track {
  std::vector<TrackFrame> frames;
  std::vector<BoundingBox> boxes() const;
};

// Frame 0 is initialised from `first_box`; every later frame runs the
// candidate search. Fusion layers stay frozen; FC4-FC6 are fine-tuned.
Track track(const NetworkConfig& cfg, const NetworkParams& trained, const Sequence& seq,
            const BoundingBox& first_box, const ProtocolConfig& protocol);

// ---------------------------------------------------------------------------
// Evaluation

struct PrSr {
  double pr = 0.0;
  double sr = 0.0;
  double threshold = 5.0;
};

// PR: share of frames whose center error is <= threshold pixels.
// SR: trapezoidal area under the success curve sampled at overlap thresholds
// 0, 0.05, ..., 1, where success(t) is the share of frames with IoU >= t and
// a frame with zero overlap never counts as a success.
PrSr evaluate_pr_sr(const std::vector<BoundingBox>& track, const std::vector<BoundingBox>& gt,
                    double pr_threshold);

double center_error(const BoundingBox& a, const BoundingBox& b);

// ---------------------------------------------------------------------------
// Files

// `frame,x,y,w,h`
std::string results_csv(const Track& track);
std::vector<BoundingBox> parse_results_csv(const std::string& text);
// `frame,layer,a,b,c,d,top_score,update_event`
std::string trace_csv(const Track& track);
// {"pr":..,"sr":..,"threshold":..}
std::string metrics_json(const PrSr& m);

// ---------------------------------------------------------------------------
// Offline training data from synthetic sequences

struct SyntheticTrainingConfig {
  int sequences = 4;
  int frames_per_sequence = 40;
  int frame_stride = 4;  // every n-th frame becomes a training frame
  int pos_per_frame = 16;
  int neg_per_frame = 48;
  int size = 48;
  std::uint64_t seed = 0;
};

// Random mixed-degradation sequences for offline training.
std::vector<SyntheticSequenceConfig> training_sequence_configs(const SyntheticTrainingConfig& cfg);
std::vector<TrainingFrame> build_training_frames(const SyntheticTrainingConfig& cfg,
                                                 Modality modality = Modality::kDual);

// Mixed-degradation evaluation sequence: low light early, IR noise from
// `ir_switch_frame` to the end.
SyntheticSequenceConfig mixed_degradation_sequence(std::uint64_t seed, int frames = 100,
                                                   int size = 48, int ir_switch_frame = 60,
                                                   double ir_sigma = 0.6);

}  // namespace dynfuse
