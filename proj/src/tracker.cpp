#include "dynfuse/tracker.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <iomanip>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "dynfuse/ops.hpp"

namespace dynfuse {
namespace {

std::string fmt(double v, int digits = 6) {
  std::ostringstream ss;
  ss << std::fixed << std::setprecision(digits) << v;
  return ss.str();
}

using Pooled = std::vector<double>;

Pooled pool_box(const NetworkConfig& cfg, const Tensor& features, const BoundingBox& box) {
  const double scale = static_cast<double>(features.dim(3)) / cfg.input_size;
  return roi_pool(features, box, scale, cfg.roi_density).vec();
}

std::vector<Pooled> pool_boxes(const NetworkConfig& cfg, const Tensor& features,
                               const std::vector<BoundingBox>& boxes) {
  std::vector<Pooled> out;
  out.reserve(boxes.size());
  for (const auto& b : boxes) out.push_back(pool_box(cfg, features, b));
  return out;
}

// Fine-tunes the head on pooled features: every iteration draws batch_pos
// positives and batch_neg negatives with replacement.
void train_head(HeadParams& head, SgdMomentum& sgd, const std::vector<const Pooled*>& pos,
                const std::vector<const Pooled*>& neg, int iterations, int batch_pos,
                int batch_neg, const std::array<double, 3>& group_lr, std::mt19937_64& rng) {
  if (pos.empty() || neg.empty()) return;
  NetworkParams holder;
  holder.head = head;
  NetworkParams grads = zeros_like(holder);
  std::uniform_int_distribution<std::size_t> pick_pos(0, pos.size() - 1);
  std::uniform_int_distribution<std::size_t> pick_neg(0, neg.size() - 1);
  const double inv = 1.0 / (batch_pos + batch_neg);
  const bool fc45 = group_lr[1] != 0.0;
  auto params = parameter_views(holder);
  auto gviews = parameter_views(grads);
  for (int it = 0; it < iterations; ++it) {
    for (auto& v : gviews) std::ranges::fill(v.values, 0.0);
    for (int s = 0; s < batch_pos + batch_neg; ++s) {
      const bool positive = s < batch_pos;
      const Pooled& x = positive ? *pos[pick_pos(rng)] : *neg[pick_neg(rng)];
      const auto trace = head_forward(holder.head, x);
      std::array<double, 2> g{};
      cross_entropy(trace.logits, positive, g);
      g[0] *= inv;
      g[1] *= inv;
      head_backward(holder.head, trace, g, grads.head, fc45);
    }
    sgd.step(params, gviews, group_lr);
  }
  head = std::move(holder.head);
}

}  // namespace

double iou(const BoundingBox& a, const BoundingBox& b) {
  const double iw = std::min(a.x + a.w, b.x + b.w) - std::max(a.x, b.x);
  const double ih = std::min(a.y + a.h, b.y + b.h) - std::max(a.y, b.y);
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  return inter / (a.w * a.h + b.w * b.h - inter);
}

double center_error(const BoundingBox& a, const BoundingBox& b) {
  return std::hypot(a.cx() - b.cx(), a.cy() - b.cy());
}

BoundingBox clip_box(const BoundingBox& b, int frame_size, double min_size) {
  const double S = frame_size;
  BoundingBox c;
  c.w = std::clamp(b.w, min_size, S);
  c.h = std::clamp(b.h, min_size, S);
  c.x = std::clamp(b.x, 0.0, S - c.w);
  c.y = std::clamp(b.y, 0.0, S - c.h);
  return c;
}

std::vector<BoundingBox> gaussian_sample_candidates(const BoundingBox& prev, int n,
                                                    const GaussianSampler& sampler,
                                                    int frame_size, std::mt19937_64& rng) {
  if (n < 1) throw std::invalid_argument("gaussian_sample_candidates: n must be >= 1");
  std::normal_distribution<double> gauss(0.0, 1.0);
  const double spread = sampler.sigma_xy * std::hypot(prev.w, prev.h);
  std::vector<BoundingBox> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    double cx = prev.cx(), cy = prev.cy(), s = 1.0;
    if (spread > 0.0) {
      cx += spread * gauss(rng);
      cy += spread * gauss(rng);
    }
    if (sampler.sigma_scale > 0.0) s = std::pow(1.05, sampler.sigma_scale * gauss(rng));
    const double w = prev.w * s, h = prev.h * s;
    out.push_back(clip_box({cx - 0.5 * w, cy - 0.5 * h, w, h}, frame_size));
  }
  return out;
}

SampleSet collect_samples(const BoundingBox& gt, int frame_size, const SampleConfig& cfg,
                          std::mt19937_64& rng) {
  if (!(cfg.neg_thresh >= 0.0 && cfg.neg_thresh < cfg.pos_thresh && cfg.pos_thresh <= 1.0)) {
    throw std::invalid_argument("collect_samples: thresholds must satisfy 0 <= neg < pos <= 1");
  }
  SampleSet set;
  std::size_t draws = 0;
  const std::size_t pos_budget = cfg.max_draws_per_sample * static_cast<std::size_t>(std::max(1, cfg.n_pos));
  while (static_cast<int>(set.pos.size()) < cfg.n_pos) {
    if (++draws > pos_budget) {
      throw SamplingBudgetExceeded(
          "collect_samples: found " + std::to_string(set.pos.size()) + "/" +
          std::to_string(cfg.n_pos) + " positives with IoU > " + fmt(cfg.pos_thresh, 3) +
          " after " + std::to_string(pos_budget) + " draws around box (" + fmt(gt.x, 1) + "," +
          fmt(gt.y, 1) + "," + fmt(gt.w, 1) + "," + fmt(gt.h, 1) + ")");
    }
    const auto b = gaussian_sample_candidates(gt, 1, cfg.pos_sampler, frame_size, rng).front();
    if (iou(b, gt) > cfg.pos_thresh) set.pos.push_back(b);
  }

  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);
  draws = 0;
  const std::size_t neg_budget = cfg.max_draws_per_sample * static_cast<std::size_t>(std::max(1, cfg.n_neg));
  while (static_cast<int>(set.neg.size()) < cfg.n_neg) {
    if (++draws > neg_budget) {
      throw SamplingBudgetExceeded(
          "collect_samples: found " + std::to_string(set.neg.size()) + "/" +
          std::to_string(cfg.n_neg) + " negatives with IoU < " + fmt(cfg.neg_thresh, 3) +
          " after " + std::to_string(neg_budget) + " draws; box (" + fmt(gt.w, 1) + "x" +
          fmt(gt.h, 1) + ") may cover most of the " + std::to_string(frame_size) + "px frame");
    }
    const double s = std::pow(1.05, gauss(rng));
    const double w = std::min(gt.w * s, static_cast<double>(frame_size));
    const double h = std::min(gt.h * s, static_cast<double>(frame_size));
    const BoundingBox b = clip_box({u01(rng) * (frame_size - w), u01(rng) * (frame_size - h), w, h}, frame_size);
    if (iou(b, gt) < cfg.neg_thresh) set.neg.push_back(b);
  }
  return set;
}

std::string to_string(Modality m) {
  switch (m) {
    case Modality::kDual: return "dual";
    case Modality::kRgbOnly: return "rgb";
    case Modality::kThermalOnly: return "thermal";
  }
  return "unknown";
}

Modality parse_modality(const std::string& name) {
  if (name == "dual") return Modality::kDual;
  if (name == "rgb") return Modality::kRgbOnly;
  if (name == "thermal") return Modality::kThermalOnly;
  throw std::invalid_argument("unknown modality '" + name + "'");
}

std::pair<Tensor, Tensor> modality_inputs(const Tensor& rgb, const Tensor& ir3, Modality m) {
  switch (m) {
    case Modality::kDual: return {rgb, ir3};
    case Modality::kRgbOnly: return {rgb, rgb};
    case Modality::kThermalOnly: return {ir3, ir3};
  }
  throw std::logic_error("unreachable");
}

std::string TrackFrame::update_event() const {
  if (long_term && short_term) return "long+short";
  if (long_term) return "long";
  if (short_term) return "short";
  return "none";
}

std::vector<BoundingBox> Track::boxes() const {
  std::vector<BoundingBox> out;
  out.reserve(frames.size());
  for (const auto& f : frames) out.push_back(f.box);
  return out;
}

Track track(const NetworkConfig& cfg, const NetworkParams& trained, const Sequence& seq,
            const BoundingBox& first_box, const ProtocolConfig& protocol) {
  if (seq.rgb.empty()) return {};
  const int S = seq.rgb.front().dim(3);
  if (S != cfg.input_size || seq.rgb.front().dim(2) != cfg.input_size) {
    throw std::invalid_argument("track: frames are " + std::to_string(S) +
                                " px but the network expects " + std::to_string(cfg.input_size));
  }
  NetworkParams params = trained;
  reinit_fc6(cfg, params, protocol.seed ^ 0x5bd1e995ULL);
  std::mt19937_64 rng(protocol.seed);

  const auto run_backbone = [&](std::size_t i) {
    auto [a, b] = modality_inputs(seq.rgb[i], replicate_thermal(seq.ir[i]), protocol.modality);
    return backbone_forward(cfg, params, a, b);
  };

  Track out;
  // Sample memories, one entry per frame that contributed samples.
  std::deque<std::vector<Pooled>> pos_memory, neg_memory;

  auto bb = run_backbone(0);
  {
    const auto samples = collect_samples(first_box, S, protocol.init_samples, rng);
    pos_memory.push_back(pool_boxes(cfg, bb.features, samples.pos));
    neg_memory.push_back(pool_boxes(cfg, bb.features, samples.neg));
    SgdMomentum init_sgd(protocol.momentum, protocol.weight_decay);
    std::vector<const Pooled*> pos, neg;
    for (const auto& p : pos_memory.back()) pos.push_back(&p);
    for (const auto& n : neg_memory.back()) neg.push_back(&n);
    train_head(params.head, init_sgd, pos, neg, protocol.init_iterations, protocol.batch_pos,
               protocol.batch_neg, {0.0, 0.0, protocol.init_lr}, rng);
    if (!protocol.updates_enabled) {
      pos_memory.clear();
      neg_memory.clear();
    }
  }
  TrackFrame first;
  first.box = first_box;
  first.top_score = score_features(cfg, params, bb.features, first_box).pos;
  first.weights = bb.weights;
  out.frames.push_back(first);

  SgdMomentum online_sgd(protocol.momentum, protocol.weight_decay);
  const std::array<double, 3> online_lr{0.0, protocol.lr_fc45, protocol.lr_fc6};
  BoundingBox target = first_box;

  for (std::size_t t = 1; t < seq.rgb.size(); ++t) {
    bb = run_backbone(t);
    const auto candidates =
        gaussian_sample_candidates(target, protocol.n_candidates, protocol.sampler, S, rng);
    const auto scores =
        score_candidates_on_features(cfg, params, bb.features, candidates, protocol.threads);

    std::vector<std::size_t> order(candidates.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return scores[a].pos > scores[b].pos; });
    const std::size_t k = std::min<std::size_t>(static_cast<std::size_t>(std::max(1, protocol.top_k)),
                                                candidates.size());
    BoundingBox mean{0, 0, 0, 0};
    for (std::size_t i = 0; i < k; ++i) {
      const auto& c = candidates[order[i]];
      mean.x += c.x / k;
      mean.y += c.y / k;
      mean.w += c.w / k;
      mean.h += c.h / k;
    }
    TrackFrame frame;
    frame.top_score = scores[order.front()].pos;
    frame.weights = bb.weights;
    const bool success = frame.top_score >= protocol.failure_threshold;
    if (success) target = mean;
    frame.box = target;

    if (protocol.updates_enabled) {
      if (success) {
        const auto samples = collect_samples(target, S, protocol.online_samples, rng);
        pos_memory.push_back(pool_boxes(cfg, bb.features, samples.pos));
        neg_memory.push_back(pool_boxes(cfg, bb.features, samples.neg));
        while (static_cast<int>(pos_memory.size()) > protocol.long_term_frames) pos_memory.pop_front();
        while (static_cast<int>(neg_memory.size()) > protocol.short_term_frames) neg_memory.pop_front();
      }
      frame.short_term = !success;
      frame.long_term = success && protocol.long_term_interval > 0 &&
                        t % static_cast<std::size_t>(protocol.long_term_interval) == 0;
      if (frame.short_term || frame.long_term) {
        // Short-term updates only look at recent positives.
        const std::size_t pos_frames =
            frame.short_term ? std::min<std::size_t>(pos_memory.size(),
                                                     static_cast<std::size_t>(protocol.short_term_frames))
                             : pos_memory.size();
        std::vector<const Pooled*> pos, neg;
        for (std::size_t i = pos_memory.size() - pos_frames; i < pos_memory.size(); ++i)
          for (const auto& p : pos_memory[i]) pos.push_back(&p);
        for (const auto& f : neg_memory)
          for (const auto& n : f) neg.push_back(&n);
        train_head(params.head, online_sgd, pos, neg, protocol.update_iterations,
                   protocol.batch_pos, protocol.batch_neg, online_lr, rng);
      }
    }
    out.frames.push_back(frame);
  }
  return out;
}

PrSr evaluate_pr_sr(const std::vector<BoundingBox>& track, const std::vector<BoundingBox>& gt,
                    double pr_threshold) {
  if (track.size() != gt.size()) {
    throw std::invalid_argument("evaluate_pr_sr: " + std::to_string(track.size()) +
                                " tracked boxes vs " + std::to_string(gt.size()) + " ground truth");
  }
  PrSr r;
  r.threshold = pr_threshold;
  if (gt.empty()) return r;
  const double n = static_cast<double>(gt.size());
  std::vector<double> overlaps;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    if (center_error(track[i], gt[i]) <= pr_threshold) r.pr += 1.0;
    overlaps.push_back(iou(track[i], gt[i]));
  }
  r.pr /= n;
  constexpr int kSteps = 20;
  std::array<double, kSteps + 1> success{};
  for (int s = 0; s <= kSteps; ++s) {
    const double t = static_cast<double>(s) / kSteps;
    double hits = 0.0;
    for (double o : overlaps) hits += (o > 0.0 && o >= t) ? 1.0 : 0.0;
    success[static_cast<std::size_t>(s)] = hits / n;
  }
  for (int s = 0; s < kSteps; ++s) {
    r.sr += 0.5 * (success[static_cast<std::size_t>(s)] + success[static_cast<std::size_t>(s + 1)]) / kSteps;
  }
  return r;
}

std::string results_csv(const Track& track) {
  std::string out = "frame,x,y,w,h\n";
  for (std::size_t i = 0; i < track.frames.size(); ++i) {
    const auto& b = track.frames[i].box;
    out += std::to_string(i + 1) + "," + fmt(b.x, 4) + "," + fmt(b.y, 4) + "," + fmt(b.w, 4) + "," +
           fmt(b.h, 4) + "\n";
  }
  return out;
}

std::vector<BoundingBox> parse_results_csv(const std::string& text) {
  std::vector<BoundingBox> boxes;
  std::istringstream ss(text);
  std::string line;
  std::getline(ss, line);
  if (line.rfind("frame,x,y,w,h", 0) != 0) throw std::runtime_error("results csv: bad header");
  while (std::getline(ss, line)) {
    if (line.empty()) continue;
    std::replace(line.begin(), line.end(), ',', ' ');
    std::istringstream ls(line);
    int frame = 0;
    BoundingBox b;
    if (!(ls >> frame >> b.x >> b.y >> b.w >> b.h)) throw std::runtime_error("results csv: bad row");
    boxes.push_back(b);
  }
  return boxes;
}

std::string trace_csv(const Track& track) {
  std::string out = "frame,layer,a,b,c,d,top_score,update_event\n";
  for (std::size_t i = 0; i < track.frames.size(); ++i) {
    const auto& f = track.frames[i];
    for (std::size_t l = 0; l < f.weights.size(); ++l) {
      out += std::to_string(i + 1) + "," + std::to_string(l + 1) + ",";
      if (f.weights[l]) {
        const auto& w = *f.weights[l];
        out += fmt(w.a, 8) + "," + fmt(w.b, 8) + "," + fmt(w.c, 8) + "," + fmt(w.d, 8) + ",";
      } else {
        out += ",,,,";
      }
      out += fmt(f.top_score, 6) + "," + f.update_event() + "\n";
    }
  }
  return out;
}

std::string metrics_json(const PrSr& m) {
  nlohmann::ordered_json j{{"pr", m.pr}, {"sr", m.sr}, {"threshold", m.threshold}};
  return j.dump(2) + "\n";
}

std::vector<SyntheticSequenceConfig> training_sequence_configs(const SyntheticTrainingConfig& cfg) {
  std::mt19937_64 rng(cfg.seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::vector<SyntheticSequenceConfig> out;
  const int F = cfg.frames_per_sequence;
  for (int s = 0; s < cfg.sequences; ++s) {
    SyntheticSequenceConfig c = mixed_degradation_sequence(cfg.seed * 1000 + static_cast<std::uint64_t>(s),
                                                           F, cfg.size, F, 0.0);
    c.schedule.clear();
    // One degradation per modality at random times, sometimes none.
    const int a = static_cast<int>(u01(rng) * F * 0.5);
    const int b = a + std::max(1, F / 4);
    c.schedule.push_back({DegradationKind::kLowLight, a, b, 0.05 + 0.2 * u01(rng)});
    const int e = static_cast<int>(u01(rng) * F * 0.5);
    const double kind = u01(rng);
    if (kind < 0.6) {
      c.schedule.push_back({DegradationKind::kIrNoise, e, F, 0.2 + 0.6 * u01(rng)});
    } else if (kind < 0.8) {
      c.schedule.push_back({DegradationKind::kThermalCrossover, e, e + F / 4, 1.0});
    }
    out.push_back(c);
  }
  return out;
}

std::vector<TrainingFrame> build_training_frames(const SyntheticTrainingConfig& cfg,
                                                 Modality modality) {
  std::vector<TrainingFrame> frames;
  std::mt19937_64 rng(cfg.seed ^ 0xa5a5a5a5ULL);
  SampleConfig sc;
  sc.n_pos = cfg.pos_per_frame;
  sc.n_neg = cfg.neg_per_frame;
  for (const auto& sc_cfg : training_sequence_configs(cfg)) {
    const Sequence seq = generate_sequence(sc_cfg);
    for (std::size_t i = 0; i < seq.rgb.size(); i += static_cast<std::size_t>(std::max(1, cfg.frame_stride))) {
      const auto samples = collect_samples(seq.gt[i], cfg.size, sc, rng);
      auto [a, b] = modality_inputs(seq.rgb[i], replicate_thermal(seq.ir[i]), modality);
      TrainingFrame f{std::move(a), std::move(b), {}, {}};
      for (const auto& p : samples.pos) {
        f.boxes.push_back(p);
        f.positive.push_back(1);
      }
      for (const auto& n : samples.neg) {
        f.boxes.push_back(n);
        f.positive.push_back(0);
      }
      frames.push_back(std::move(f));
    }
  }
  return frames;
}

}  // namespace dynfuse
