#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "dynfuse/tracker.hpp"
#include "test_util.hpp"

using namespace dynfuse;
using namespace dynfuse::testing;

namespace {

std::filesystem::path temp_dir(const std::string& name) {
  const auto p = std::filesystem::temp_directory_path() / ("dynfuse_tracker_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

SyntheticSequenceConfig clean_static(int frames, std::uint64_t seed) {
  SyntheticSequenceConfig c;
  c.frames = frames;
  c.seed = seed;
  return c;
}

ProtocolConfig light_protocol(std::uint64_t seed) {
  ProtocolConfig p;
  p.n_candidates = 128;
  p.init_samples = {100, 400, 0.7, 0.3, {0.1, 0.5}, 1000};
  p.init_iterations = 30;
  p.seed = seed;
  return p;
}

// Offline-trained miniature network shared by the tracking cases.
const NetworkParams& trained_network() {
  static const NetworkParams params = [] {
    const auto cfg = NetworkConfig::miniature(FusionVariant::kDFNet, 48);
    NetworkParams p = init_network(cfg, 1000);
    SyntheticTrainingConfig tc;
    tc.seed = 1000;
    TrainOptions opt;
    opt.optimizer = {1e-3, 0.9, 5e-4, 30};
    opt.seed = 1000;
    train_offline(cfg, p, build_training_frames(tc), opt);
    return p;
  }();
  return params;
}

}  // namespace

TEST_SUITE("tracker") {

TEST_CASE("iou") {
  const BoundingBox a{0, 0, 2, 2};
  CHECK(iou(a, a) == 1.0);
  CHECK(iou(a, BoundingBox{5, 5, 2, 2}) == 0.0);
  CHECK(iou(a, BoundingBox{2, 0, 2, 2}) == 0.0);
  CHECK(std::abs(iou(a, BoundingBox{1, 0, 2, 2}) - 1.0 / 3.0) < 1e-15);
  CHECK(iou(a, BoundingBox{1, 0, 2, 2}) == iou(BoundingBox{1, 0, 2, 2}, a));
  CHECK(std::abs(iou(BoundingBox{0, 0, 4, 4}, BoundingBox{1, 1, 2, 2}) - 0.25) < 1e-15);
  CHECK(center_error(a, BoundingBox{3, 4, 2, 2}) == 5.0);
}

TEST_CASE("precision and success rates") {
  std::vector<BoundingBox> gt, far;
  for (int i = 0; i < 10; ++i) {
    gt.push_back({10.0 + i, 5.0, 8, 6});
    far.push_back({60.0 + i, 50.0, 8, 6});
  }
  const auto perfect = evaluate_pr_sr(gt, gt, 5.0);
  CHECK(perfect.pr == 1.0);
  CHECK(std::abs(perfect.sr - 1.0) < 1e-12);
  const auto miss = evaluate_pr_sr(far, gt, 20.0);
  CHECK(miss.pr == 0.0);
  CHECK(miss.sr == 0.0);
  std::vector<BoundingBox> half = gt;
  for (int i = 0; i < 5; ++i) half[static_cast<std::size_t>(i)] = far[static_cast<std::size_t>(i)];
  const auto h = evaluate_pr_sr(half, gt, 5.0);
  CHECK(h.pr == 0.5);
  CHECK(std::abs(h.sr - 0.5) < 1e-12);
  // One frame at IoU 1/3: success is 1 up to 0.30, 0 from 0.35, trapezoid 0.325.
  const auto third = evaluate_pr_sr({BoundingBox{1, 0, 2, 2}}, {BoundingBox{0, 0, 2, 2}}, 0.5);
  CHECK(std::abs(third.sr - 0.325) < 1e-12);
  CHECK(third.pr == 0.0);
  CHECK_THROWS_AS(evaluate_pr_sr({gt[0]}, gt, 5.0), std::invalid_argument);
  const auto empty = evaluate_pr_sr({}, {}, 5.0);
  CHECK(empty.pr == 0.0);
}

TEST_CASE("gaussian candidate sampler") {
  const BoundingBox prev{20, 18, 10, 8};
  std::mt19937_64 rng(31);
  SUBCASE("zero spread returns copies") {
    for (const auto& b : gaussian_sample_candidates(prev, 17, {0.0, 0.0}, 48, rng)) CHECK(b == prev);
  }
  SUBCASE("fixed seed gives identical candidates") {
    std::mt19937_64 a(5), b(5);
    CHECK(gaussian_sample_candidates(prev, 64, {}, 48, a) == gaussian_sample_candidates(prev, 64, {}, 48, b));
  }
  SUBCASE("empirical centre mean within three standard errors") {
    const int n = 100000;
    const GaussianSampler s{0.1, 0.5};
    const auto c = gaussian_sample_candidates(prev, n, s, 1000, rng);
    double mx = 0, my = 0;
    for (const auto& b : c) {
      mx += b.cx();
      my += b.cy();
    }
    mx /= n;
    my /= n;
    const double se = 0.1 * std::hypot(prev.w, prev.h) / std::sqrt(static_cast<double>(n));
    // Centre jitter plus the symmetric scale jitter; the latter leaves the centre unbiased.
    CHECK(std::abs(mx - prev.cx()) < 3 * se);
    CHECK(std::abs(my - prev.cy()) < 3 * se);
  }
  SUBCASE("candidates stay inside the frame") {
    for (const auto& b : gaussian_sample_candidates(BoundingBox{0, 0, 6, 6}, 500, {0.5, 2.0}, 24, rng)) {
      CHECK(b.x >= 0.0);
      CHECK(b.y >= 0.0);
      CHECK(b.x + b.w <= 24.0 + 1e-9);
      CHECK(b.y + b.h <= 24.0 + 1e-9);
    }
  }
  CHECK_THROWS_AS(gaussian_sample_candidates(prev, 0, {}, 48, rng), std::invalid_argument);
}

TEST_CASE("training sample collection") {
  const BoundingBox gt{19, 19, 10, 10};
  std::mt19937_64 rng(32);
  SUBCASE("postconditions hold for every sample") {
    const SampleConfig cfg{200, 600, 0.7, 0.3, {0.1, 0.5}, 1000};
    const auto s = collect_samples(gt, 48, cfg, rng);
    CHECK(s.pos.size() == 200);
    CHECK(s.neg.size() == 600);
    for (const auto& b : s.pos) CHECK(iou(b, gt) > 0.7);
    for (const auto& b : s.neg) CHECK(iou(b, gt) < 0.3);
  }
  SUBCASE("near-duplicate positives at a 0.999 threshold") {
    const SampleConfig cfg{10, 10, 0.999, 0.3, {0.0001, 0.001}, 100000};
    for (const auto& b : collect_samples(gt, 48, cfg, rng).pos) {
      CHECK(std::abs(b.x - gt.x) < 0.01);
      CHECK(std::abs(b.w - gt.w) < 0.01);
    }
  }
  SUBCASE("fixed seed gives an identical sample set") {
    std::mt19937_64 a(9), b(9);
    const SampleConfig cfg{20, 50, 0.7, 0.3, {0.1, 0.5}, 1000};
    const auto x = collect_samples(gt, 48, cfg, a), y = collect_samples(gt, 48, cfg, b);
    CHECK(x.pos == y.pos);
    CHECK(x.neg == y.neg);
  }
  SUBCASE("degenerate ground truth exhausts the budget") {
    // A full-frame target leaves no room for negatives.
    const SampleConfig cfg{5, 5, 0.7, 0.3, {0.1, 0.5}, 50};
    CHECK_THROWS_AS(collect_samples(BoundingBox{0, 0, 48, 48}, 48, cfg, rng), SamplingBudgetExceeded);
  }
  CHECK_THROWS_AS(collect_samples(gt, 48, {1, 1, 0.3, 0.7, {}, 10}, rng), std::invalid_argument);
}

TEST_CASE("synthetic sequences") {
  SUBCASE("zero velocity keeps the box constant") {
    const auto seq = generate_sequence(clean_static(12, 3));
    for (const auto& b : seq.gt) CHECK(b == seq.gt.front());
  }
  SUBCASE("clean frames follow the rendering formula") {
    auto c = clean_static(3, 4);
    c.rgb_noise_sigma = 0.0;
    c.distractors = 0;
    const auto seq = generate_sequence(c);
    const Tensor& rgb = seq.rgb[1];
    // Checkerboard of 2-pixel cells anchored at the box corner.
    CHECK(rgb.at(0, 0, 19, 19) == 0.9);
    CHECK(rgb.at(0, 2, 19, 19) == 0.15);
    CHECK(rgb.at(0, 0, 19, 21) == 0.15);
    CHECK(rgb.at(0, 2, 19, 21) == 0.85);
    CHECK(rgb.at(0, 0, 21, 21) == 0.9);
    for (int y = 19; y < 29; ++y)
      for (int x = 19; x < 29; ++x) CHECK(seq.ir[1].at(0, 0, y, x) == 0.85);
    CHECK(seq.rgb[0] == seq.rgb[2]);
    CHECK(seq.ir[0] == seq.ir[2]);
  }
  SUBCASE("same seed gives bit-identical frames") {
    auto c = mixed_degradation_sequence(5, 20);
    const auto a = generate_sequence(c), b = generate_sequence(c);
    CHECK(a.rgb == b.rgb);
    CHECK(a.ir == b.ir);
    c.seed = 6;
    CHECK(generate_sequence(c).rgb != a.rgb);
  }
  SUBCASE("degradation schedule") {
    const auto c = mixed_degradation_sequence(5, 100, 48, 60, 0.6);
    CHECK(degradation_at(c, 70).ir_noise_sigma == 0.6);
    CHECK(degradation_at(c, 10).ir_noise_sigma < 0.6);
  }
  SUBCASE("moving objects reflect at the border") {
    auto c = clean_static(60, 7);
    c.velocity_x = 1.5;
    const auto seq = generate_sequence(c);
    for (const auto& b : seq.gt) {
      CHECK(b.x >= 0.0);
      CHECK(b.x + b.w <= 48.0);
    }
  }
  SUBCASE("invalid configurations") {
    auto c = clean_static(5, 1);
    c.start_x = 45;
    CHECK_THROWS_AS(generate_sequence(c), std::invalid_argument);
    c = clean_static(5, 1);
    c.object_w = 60;
    CHECK_THROWS_AS(generate_sequence(c), std::invalid_argument);
    c = clean_static(5, 1);
    c.schedule.push_back({DegradationKind::kIrNoise, 4, 2, 0.5});
    CHECK_THROWS_AS(generate_sequence(c), std::invalid_argument);
  }
  SUBCASE("disk round trip keeps 8-bit pixels and integer boxes") {
    const auto seq = generate_sequence(clean_static(4, 8));
    const auto dir = temp_dir("seq");
    save_sequence(dir.string(), seq);
    CHECK(std::filesystem::exists(dir / "rgb" / "000001.ppm"));
    CHECK(std::filesystem::exists(dir / "ir" / "000004.pgm"));
    const auto back = load_sequence(dir.string());
    REQUIRE(back.rgb.size() == 4);
    for (std::size_t f = 0; f < 4; ++f) {
      for (std::size_t i = 0; i < seq.rgb[f].size(); ++i)
        CHECK(std::abs(back.rgb[f][i] - std::clamp(seq.rgb[f][i], 0.0, 1.0)) <= 0.5 / 255 + 1e-12);
      CHECK(back.gt[f] == seq.gt[f]);
    }
    save_sequence(dir.string(), back);
    const auto again = load_sequence(dir.string());
    CHECK(again.rgb == back.rgb);
    CHECK(again.ir == back.ir);
    CHECK_THROWS(load_sequence((dir / "missing").string()));
  }
  CHECK(parse_boxes(format_boxes({BoundingBox{1, 2, 3, 4}, BoundingBox{5, 6, 7, 8}})) ==
        std::vector<BoundingBox>{{1, 2, 3, 4}, {5, 6, 7, 8}});
  CHECK_THROWS(parse_boxes("1 2 x 4\n"));
}

TEST_CASE("result files") {
  Track t;
  for (int i = 0; i < 3; ++i) {
    TrackFrame f;
    f.box = {1.25 + i, 2.5, 10.125, 9.0};
    f.top_score = 0.5 * i;
    f.weights[0] = FusionWeights{0.25, 0.75, 0.5, 0.5};
    f.long_term = i == 2;
    t.frames.push_back(f);
  }
  const std::string csv = results_csv(t);
  CHECK(csv.rfind("frame,x,y,w,h\n1,1.2500,2.5000,10.1250,9.0000\n", 0) == 0);
  CHECK(parse_results_csv(csv) == t.boxes());
  CHECK_THROWS(parse_results_csv("x,y\n"));
  CHECK_THROWS(parse_results_csv("frame,x,y,w,h\n1,2,3\n"));
  const std::string trace = trace_csv(t);
  CHECK(trace.rfind("frame,layer,a,b,c,d,top_score,update_event\n", 0) == 0);
  CHECK(trace.find("1,1,0.25000000,0.75000000,0.50000000,0.50000000,0.000000,none\n") != std::string::npos);
  CHECK(trace.find(",long\n") != std::string::npos);
  CHECK(trace.find("1,2,,,,,0.000000,none\n") != std::string::npos);
  CHECK(metrics_json({0.5, 0.25, 5.0}).find("\"pr\"") < metrics_json({0.5, 0.25, 5.0}).find("\"sr\""));
  TrackFrame both;
  both.long_term = both.short_term = true;
  CHECK(both.update_event() == "long+short");
  CHECK(TrackFrame{}.update_event() == "none");
  CHECK(parse_modality(to_string(Modality::kThermalOnly)) == Modality::kThermalOnly);
  CHECK_THROWS_AS(parse_modality("depth"), std::invalid_argument);
}

TEST_CASE("modality inputs") {
  std::mt19937_64 rng(33);
  const Tensor rgb = random_tensor({1, 3, 8, 8}, rng), ir3 = random_tensor({1, 3, 8, 8}, rng);
  CHECK(modality_inputs(rgb, ir3, Modality::kDual) == std::pair{rgb, ir3});
  CHECK(modality_inputs(rgb, ir3, Modality::kRgbOnly) == std::pair{rgb, rgb});
  CHECK(modality_inputs(rgb, ir3, Modality::kThermalOnly) == std::pair{ir3, ir3});
  const Tensor ir({1, 1, 4, 4}, 0.3);
  const Tensor rep = replicate_thermal(ir);
  CHECK(rep.shape() == Tensor::Shape{1, 3, 4, 4});
  for (double v : rep.data()) CHECK(v == 0.3);
}

TEST_CASE("online tracking") {
  const auto cfg = NetworkConfig::miniature(FusionVariant::kDFNet, 48);
  const NetworkParams& params = trained_network();
  SUBCASE("static clean object is followed closely") {
    const auto seq = generate_sequence(clean_static(40, 11));
    const auto track_result = track(cfg, params, seq, seq.gt.front(), light_protocol(1));
    REQUIRE(track_result.frames.size() == seq.gt.size());
    int close = 0;
    for (std::size_t i = 0; i < seq.gt.size(); ++i)
      if (center_error(track_result.frames[i].box, seq.gt[i]) < 5.0) ++close;
    CHECK(close >= static_cast<int>(std::ceil(0.95 * seq.gt.size())));
    for (const auto& f : track_result.frames)
      for (const auto& w : f.weights) {
        REQUIRE(w.has_value());
        CHECK(w->on_simplex());
      }
  }
  SUBCASE("updates disabled and a fixed seed rerun bit-identically") {
    const auto seq = generate_sequence(mixed_degradation_sequence(3, 20));
    auto p = light_protocol(4);
    p.updates_enabled = false;
    const auto a = track(cfg, params, seq, seq.gt.front(), p);
    const auto b = track(cfg, params, seq, seq.gt.front(), p);
    CHECK(trace_csv(a) == trace_csv(b));
    CHECK(results_csv(a) == results_csv(b));
    p.threads = 3;
    CHECK(results_csv(track(cfg, params, seq, seq.gt.front(), p)) == results_csv(a));
  }
  SUBCASE("a single candidate makes top-1 and top-5 identical") {
    const auto seq = generate_sequence(clean_static(6, 12));
    auto p = light_protocol(5);
    p.n_candidates = 1;
    p.top_k = 1;
    const auto one = track(cfg, params, seq, seq.gt.front(), p);
    p.top_k = 5;
    const auto five = track(cfg, params, seq, seq.gt.front(), p);
    CHECK(results_csv(one) == results_csv(five));
  }
  SUBCASE("frame size must match the network input") {
    const auto seq = generate_sequence([] {
      auto c = clean_static(2, 1);
      c.size = 40;
      return c;
    }());
    CHECK_THROWS_AS(track(cfg, params, seq, seq.gt.front(), light_protocol(1)), std::invalid_argument);
  }
}

}  // TEST_SUITE
