#include "dynfuse/checks.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "dynfuse/log.hpp"
#include "dynfuse/ops.hpp"

namespace dynfuse {
namespace {

Tensor random_tensor(Tensor::Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(shape);
  std::uniform_real_distribution<double> u(lo, hi);
  for (double& v : t.data()) v = u(rng);
  return t;
}

Kernel4D random_kernel(Kernel4D::Shape shape, std::mt19937_64& rng) {
  Kernel4D k(shape);
  std::normal_distribution<double> n(0.0, 1.0);
  for (double& v : k.data()) v = n(rng);
  return k;
}

void fill_normal(std::span<double> v, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, stddev);
  for (double& x : v) x = n(rng);
}

double max_abs(std::span<const double> v) {
  double m = 0.0;
  for (double x : v) m = std::max(m, std::abs(x));
  return m;
}

BoundingBox random_box(int frame, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double w = 0.2 * frame + 0.3 * frame * u(rng);
  const double h = 0.2 * frame + 0.3 * frame * u(rng);
  return {u(rng) * (frame - w), u(rng) * (frame - h), w, h};
}

// Random labelled frame: two positives, two negatives.
TrainingFrame random_frame(const NetworkConfig& cfg, std::mt19937_64& rng) {
  const int s = cfg.input_size;
  TrainingFrame f{random_tensor({1, 3, s, s}, rng, 0.0, 1.0), random_tensor({1, 3, s, s}, rng, 0.0, 1.0),
                  {}, {}};
  for (int i = 0; i < 4; ++i) {
    f.boxes.push_back(random_box(s, rng));
    f.positive.push_back(i % 2 == 0 ? 1 : 0);
  }
  return f;
}

// Makes every attention path carry gradient: fresh fc2 weights and biases.
void liven_attention(NetworkParams& p, std::mt19937_64& rng) {
  for (auto& bank : p.banks) {
    for (AttentionParams* a : {&bank.attention_rgb, &bank.attention_t}) {
      if (a->empty()) continue;
      fill_normal(a->fc1.data(), 1.0 / std::sqrt(a->in_channels()), rng);
      fill_normal(a->fc1_bias, 0.1, rng);
      fill_normal(a->fc2.data(), 1.0 / std::sqrt(a->hidden()), rng);
      fill_normal(a->fc2_bias, 0.1, rng);
    }
  }
  fill_normal(p.head.fc6.data(), 0.3, rng);
}

}  // namespace

double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

double GradcheckReport::max_rel_error() const {
  double m = 0.0;
  for (const auto& g : groups) m = std::max(m, g.max_rel_error);
  return m;
}

constexpr double kKinkTolerance = 1e-4;

GradcheckReport gradcheck_network(const NetworkConfig& cfg, std::uint64_t seed,
                                  const GradcheckOptions& options) {
  std::mt19937_64 rng(seed);
  NetworkParams params = init_network(cfg, seed);
  liven_attention(params, rng);
  const TrainingFrame frame = random_frame(cfg, rng);
  const ForwardOptions fwd{std::nullopt, options.detach_attention};

  NetworkParams grads = zeros_like(params);
  frame_loss(cfg, params, frame, fwd, &grads);
  // Detached attention is a constant: the numeric reference holds it at its current value.
  ForwardOptions numeric_fwd;
  if (options.detach_attention) {
    numeric_fwd.layer_weights = backbone_forward(cfg, params, frame.rgb, frame.t).weights;
  }

  auto pviews = parameter_views(params);
  auto gviews = parameter_views(grads);
  GradcheckReport report;
  const double h = options.step;
  for (std::size_t v = 0; v < pviews.size(); ++v) {
    auto values = pviews[v].values;
    const auto analytic = gviews[v].values;
    std::vector<std::size_t> coords(values.size());
    std::iota(coords.begin(), coords.end(), 0);
    if (options.coords_per_tensor > 0 && coords.size() > static_cast<std::size_t>(options.coords_per_tensor)) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(static_cast<std::size_t>(options.coords_per_tensor));
      std::sort(coords.begin(), coords.end());
    }
    const double denom = std::max(max_abs(analytic), 1e-8);
    GroupError err{pviews[v].name, 0.0, coords.size()};
    for (std::size_t i : coords) {
      const double saved = values[i];
      const auto probe = [&](double step) {
        values[i] = saved + step;
        const double up = frame_loss(cfg, params, frame, numeric_fwd);
        values[i] = saved - step;
        const double down = frame_loss(cfg, params, frame, numeric_fwd);
        values[i] = saved;
        return std::pair{up, down};
      };
      double step = h;
      auto [up, down] = probe(step);
      double rel = std::abs((up - down) / (2.0 * step) - analytic[i]) / denom;
      // A ReLU or max-pool switch inside [-step, step] shows up as disagreeing one-sided slopes;
      // such coordinates are re-probed with a smaller step.
      for (int retry = 0; retry < 2 && rel >= kKinkTolerance; ++retry) {
        const double f0 = frame_loss(cfg, params, frame, numeric_fwd);
        const double asym = std::abs((up - f0) / step - (f0 - down) / step) / denom;
        if (asym < kKinkTolerance) break;
        log_debug("gradcheck " + pviews[v].name + "[" + std::to_string(i) + "] kink within step " +
                  std::to_string(step) + ", rel " + std::to_string(rel));
        ++err.kink_reprobes;
        step *= 0.1;
        std::tie(up, down) = probe(step);
        rel = std::abs((up - down) / (2.0 * step) - analytic[i]) / denom;
      }
      err.max_rel_error = std::max(err.max_rel_error, rel);
    }
    log_debug("gradcheck " + err.name + " rel " + std::to_string(err.max_rel_error));
    report.groups.push_back(err);
  }
  return report;
}

double shared_kernel_split_error(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const auto cfg = NetworkConfig::miniature().layers[1];
  KernelBank bank = make_kernel_bank(cfg, rng);
  for (AttentionParams* a : {&bank.attention_rgb, &bank.attention_t}) {
    fill_normal(a->fc2.data(), 0.5, rng);
  }
  const Tensor f_rgb = random_tensor({2, cfg.c_in, 9, 9}, rng);
  const Tensor f_t = random_tensor({2, cfg.c_in, 9, 9}, rng);
  LayerCache cache;
  const auto out = df_layer_forward(f_rgb, f_t, bank, cfg.stride, {}, &cache);
  const Tensor g_rgb = random_tensor(out.out_rgb.shape(), rng);
  const Tensor g_t = random_tensor(out.out_t.shape(), rng);
  const Tensor zero_rgb(out.out_rgb.shape()), zero_t(out.out_t.shape());
  const auto both = df_layer_backward(g_rgb, g_t, cache, bank);
  const auto only_rgb = df_layer_backward(g_rgb, zero_t, cache, bank);
  const auto only_t = df_layer_backward(zero_rgb, g_t, cache, bank);
  Kernel4D sum = only_rgb.params.w_share;
  axpy(1.0, only_t.params.w_share.data(), sum.data());
  const double scale = std::max(max_abs(both.params.w_share.data()), 1e-300);
  // Both branch contributions must be present, otherwise the split is vacuous.
  if (max_abs(only_rgb.params.w_share.data()) == 0.0 || max_abs(only_t.params.w_share.data()) == 0.0) {
    return 1.0;
  }
  return max_abs_diff(both.params.w_share.data(), sum.data()) / scale;
}

EquivalenceReport run_equivalence(std::uint64_t seed, int trials, int witness_trials) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  const NetworkConfig mini = NetworkConfig::miniature();
  EquivalenceReport r;
  r.trials = trials;
  for (int i = 0; i < trials; ++i) {
    const int l = i % 3;
    const auto& lc = mini.layers[static_cast<std::size_t>(l)];
    const int s = mini.layer_input_size(l);
    KernelBank bank = make_kernel_bank(lc, rng);
    const Tensor f_rgb = random_tensor({1, lc.c_in, s, s}, rng);
    const Tensor f_t = random_tensor({1, lc.c_in, s, s}, rng);
    const double a = u01(rng), c = u01(rng);
    const FusionWeights w{a, 1.0 - a, c, 1.0 - c};
    LayerCache cache;
    df_layer_forward(f_rgb, f_t, bank, lc.stride, {w, false}, &cache);

    Tensor ref_rgb = conv2d_forward(f_rgb, bank.w_rgb, lc.stride);
    scale(w.a, ref_rgb.data());
    axpy(w.b, conv2d_forward(f_rgb, bank.w_share, lc.stride).data(), ref_rgb.data());
    Tensor ref_t = conv2d_forward(f_t, bank.w_share, lc.stride);
    scale(w.c, ref_t.data());
    axpy(w.d, conv2d_forward(f_t, bank.w_t, lc.stride).data(), ref_t.data());

    const double rel_rgb = max_abs_diff(cache.pre_rgb.data(), ref_rgb.data()) / std::max(max_abs(ref_rgb.data()), 1e-300);
    const double rel_t = max_abs_diff(cache.pre_t.data(), ref_t.data()) / std::max(max_abs(ref_t.data()), 1e-300);
    r.max_rel_discrepancy = std::max({r.max_rel_discrepancy, rel_rgb, rel_t});
  }

  // Feature-space sum of activated outputs vs one activated merged-kernel
  // convolution.
  r.witness_trials = witness_trials;
  std::vector<double> gaps;
  for (int i = 0; i < witness_trials; ++i) {
    const int l = i % 3;
    const auto& lc = mini.layers[static_cast<std::size_t>(l)];
    const int s = mini.layer_input_size(l);
    const Kernel4D w_own = random_kernel({lc.c_out, lc.c_in, lc.k, lc.k}, rng);
    const Kernel4D w_share = random_kernel({lc.c_out, lc.c_in, lc.k, lc.k}, rng);
    const Tensor f = random_tensor({1, lc.c_in, s, s}, rng);
    const auto ma = ma_layer_forward(f, f, w_own, w_share, w_own, lc.stride);
    const Tensor merged = relu(conv2d_forward(f, merge_kernels(w_own, w_share, 1.0, 1.0), lc.stride));
    const double gap = max_abs_diff(ma.out_rgb.data(), merged.data());
    gaps.push_back(gap);
    if (gap > r.witness_margin) ++r.witness_hits;
  }
  if (!gaps.empty()) {
    r.min_witness = *std::min_element(gaps.begin(), gaps.end());
    r.median_witness = median(gaps);
  }
  return r;
}

std::vector<ConvCountRow> conv_count_table(std::uint64_t seed) {
  std::vector<ConvCountRow> rows;
  std::mt19937_64 rng(seed);
  for (FusionVariant v : {FusionVariant::kBaseline, FusionVariant::kMANet, FusionVariant::kIVFuse,
                          FusionVariant::kDFNet}) {
    const auto cfg = NetworkConfig::miniature(v);
    const auto params = init_network(cfg, seed);
    const int s = cfg.input_size;
    const Tensor rgb = random_tensor({1, 3, s, s}, rng, 0.0, 1.0);
    const Tensor t = random_tensor({1, 3, s, s}, rng, 0.0, 1.0);
    rows.push_back({v, backbone_forward(cfg, params, rgb, t).conv_counts});
  }
  return rows;
}

double endpoint_collapse_error(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const auto df_cfg = NetworkConfig::miniature(FusionVariant::kDFNet);
  const auto base_cfg = NetworkConfig::miniature(FusionVariant::kBaseline);
  NetworkParams df = init_network(df_cfg, seed);
  liven_attention(df, rng);
  NetworkParams base = init_network(base_cfg, seed + 1);
  for (std::size_t l = 0; l < 3; ++l) {
    base.banks[l].w_rgb = df.banks[l].w_rgb;
    base.banks[l].w_t = df.banks[l].w_t;
  }
  base.head = df.head;
  const int s = df_cfg.input_size;
  const Tensor rgb = random_tensor({1, 3, s, s}, rng, 0.0, 1.0);
  const Tensor t = random_tensor({1, 3, s, s}, rng, 0.0, 1.0);
  const auto a = backbone_forward(df_cfg, df, rgb, t, {FusionWeights{1.0, 0.0, 0.0, 1.0}, false});
  const auto b = backbone_forward(base_cfg, base, rgb, t);
  double err = max_abs_diff(a.features.data(), b.features.data());
  for (int i = 0; i < 16; ++i) {
    const auto box = random_box(s, rng);
    const auto sa = score_features(df_cfg, df, a.features, box);
    const auto sb = score_features(base_cfg, base, b.features, box);
    err = std::max({err, std::abs(sa.pos - sb.pos), std::abs(sa.neg - sb.neg)});
  }
  return err;
}

SimplexReport simplex_check(std::uint64_t seed, int evaluations) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> c_dist(1, 32), h_dist(1, 16), s_dist(1, 6);
  SimplexReport r;
  while (r.evaluations < evaluations) {
    const int c_in = c_dist(rng), hidden = h_dist(rng), s = s_dist(rng);
    AttentionParams p = make_attention(c_in, hidden, rng);
    fill_normal(p.fc1.data(), 1.0 / std::sqrt(c_in), rng);
    fill_normal(p.fc1_bias, 0.5, rng);
    fill_normal(p.fc2.data(), 1.0 / std::sqrt(hidden), rng);
    fill_normal(p.fc2_bias, 0.5, rng);
    const int batch = std::min(8, evaluations - r.evaluations);
    const Tensor f = random_tensor({batch, c_in, s, s}, rng, -2.0, 2.0);
    for (const auto& w : attention_weights(f, p)) {
      ++r.evaluations;
      const double sum_err = std::abs(w[0] + w[1] - 1.0);
      r.max_sum_error = std::max(r.max_sum_error, sum_err);
      r.min_component = std::min({r.min_component, w[0], w[1]});
      r.max_component = std::max({r.max_component, w[0], w[1]});
      if (sum_err > 1e-12 || !(w[0] > 0.0 && w[0] < 1.0) || !(w[1] > 0.0 && w[1] < 1.0)) {
        ++r.violations;
      }
    }
  }
  return r;
}

std::array<double, 3> delta_d(const Track& track, int switch_frame) {
  std::array<double, 3> out{};
  for (std::size_t l = 0; l < 3; ++l) {
    double before = 0.0, after = 0.0;
    int nb = 0, na = 0;
    for (std::size_t t = 0; t < track.frames.size(); ++t) {
      const auto& w = track.frames[t].weights[l];
      if (!w) continue;
      if (static_cast<int>(t) < switch_frame) {
        before += w->d;
        ++nb;
      } else if (static_cast<int>(t) > switch_frame) {
        after += w->d;
        ++na;
      }
    }
    if (nb > 0 && na > 0) out[l] = after / na - before / nb;
  }
  return out;
}

bool BehavioralReport::dual_wins() const {
  return median_pr_dual >= median_pr_rgb && median_pr_dual >= median_pr_thermal;
}

BehavioralReport run_behavioral_suite(const BehavioralOptions& options) {
  const auto cfg = NetworkConfig::miniature(FusionVariant::kDFNet, options.size);
  const std::array<Modality, 3> modalities{Modality::kDual, Modality::kRgbOnly, Modality::kThermalOnly};
  std::array<NetworkParams, 3> nets;
  for (std::size_t m = 0; m < 3; ++m) {
    SyntheticTrainingConfig tc = options.training;
    tc.size = options.size;
    const auto frames = build_training_frames(tc, modalities[m]);
    nets[m] = init_network(cfg, tc.seed);
    TrainOptions to;
    to.optimizer = options.optimizer;
    to.seed = tc.seed;
    const auto res = train_offline(cfg, nets[m], frames, to);
    log_info("trained " + to_string(modalities[m]) + " network: loss " +
             std::to_string(res.loss_curve.front()) + " -> " + std::to_string(res.loss_curve.back()) +
             ", accuracy " + std::to_string(res.final_accuracy));
  }

  BehavioralReport report;
  std::vector<double> pr[3], dd;
  for (int i = 0; i < options.seeds; ++i) {
    const std::uint64_t seed = options.base_seed + static_cast<std::uint64_t>(i);
    const auto seq = generate_sequence(mixed_degradation_sequence(seed, options.frames, options.size,
                                                                  options.ir_switch_frame, options.ir_sigma));
    SeedOutcome o;
    o.seed = seed;
    for (std::size_t m = 0; m < 3; ++m) {
      ProtocolConfig p = options.protocol;
      p.modality = modalities[m];
      p.seed = seed;
      p.threads = options.threads;
      const Track tr = track(cfg, nets[m], seq, seq.gt.front(), p);
      const double v = evaluate_pr_sr(tr.boxes(), seq.gt, 5.0).pr;
      (m == 0 ? o.pr_dual : m == 1 ? o.pr_rgb : o.pr_thermal) = v;
      pr[m].push_back(v);
      if (m == 0) o.delta_d = delta_d(tr, options.ir_switch_frame);
    }
    double largest = 0.0;
    for (double d : o.delta_d) largest = std::max(largest, std::abs(d));
    dd.push_back(largest);
    log_info("seed " + std::to_string(seed) + ": PR dual " + std::to_string(o.pr_dual) + " rgb " +
             std::to_string(o.pr_rgb) + " thermal " + std::to_string(o.pr_thermal) + " |dd| " +
             std::to_string(largest));
    report.seeds.push_back(o);
  }
  report.median_pr_dual = median(pr[0]);
  report.median_pr_rgb = median(pr[1]);
  report.median_pr_thermal = median(pr[2]);
  report.median_abs_delta_d = median(dd);
  return report;
}

}  // namespace dynfuse
