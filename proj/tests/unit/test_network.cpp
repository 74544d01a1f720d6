#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "dynfuse/checks.hpp"
#include "dynfuse/network.hpp"
#include "dynfuse/tracker.hpp"
#include "test_util.hpp"

using namespace dynfuse;
using namespace dynfuse::testing;

namespace {

std::filesystem::path temp_dir(const std::string& name) {
  const auto p = std::filesystem::temp_directory_path() / ("dynfuse_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

double bilinear(const Tensor& f, int c, double y, double x) {
  y = std::clamp(y, 0.0, static_cast<double>(f.dim(2) - 1));
  x = std::clamp(x, 0.0, static_cast<double>(f.dim(3) - 1));
  const int y0 = std::min(static_cast<int>(y), f.dim(2) - 2), x0 = std::min(static_cast<int>(x), f.dim(3) - 2);
  const double fy = y - y0, fx = x - x0;
  return (1 - fy) * ((1 - fx) * f.at(0, c, y0, x0) + fx * f.at(0, c, y0, x0 + 1)) +
         fy * ((1 - fx) * f.at(0, c, y0 + 1, x0) + fx * f.at(0, c, y0 + 1, x0 + 1));
}

// Average of 2D bilinear samples on an n x n grid per bin, in feature coordinates.
Tensor dense_roi(const Tensor& f, double x0, double y0, double x1, double y1, int n) {
  Tensor out({1, f.dim(1), 3, 3});
  const double bw = (x1 - x0) / 3, bh = (y1 - y0) / 3;
  for (int c = 0; c < f.dim(1); ++c)
    for (int by = 0; by < 3; ++by)
      for (int bx = 0; bx < 3; ++bx) {
        double s = 0;
        for (int i = 0; i < n; ++i)
          for (int j = 0; j < n; ++j) {
            const double y = y0 + by * bh + (i + 0.5) * bh / n - 0.5;
            const double x = x0 + bx * bw + (j + 0.5) * bw / n - 0.5;
            s += bilinear(f, c, y, x);
          }
        out.at(0, c, by, bx) = s / (n * n);
      }
  return out;
}

std::vector<TrainingFrame> small_frames(int size, std::uint64_t seed) {
  SyntheticTrainingConfig tc;
  tc.sequences = 1;
  tc.frames_per_sequence = 8;
  tc.frame_stride = 4;
  tc.pos_per_frame = 4;
  tc.neg_per_frame = 8;
  tc.size = size;
  tc.seed = seed;
  return build_training_frames(tc);
}

}  // namespace

TEST_SUITE("network") {

TEST_CASE("profiles and geometry") {
  const auto ref = NetworkConfig::reference();
  CHECK(ref.layer_input_size(1) == 25);
  CHECK(ref.layer_input_size(2) == 11);
  CHECK(ref.feature_size() == 9);
  CHECK(ref.feature_channels() == 1024);
  CHECK(NetworkConfig::miniature(FusionVariant::kDFNet, 48).feature_size() == 9);
  CHECK(NetworkConfig::tiny().feature_size() == 3);
  for (auto v : {FusionVariant::kBaseline, FusionVariant::kMANet, FusionVariant::kIVFuse, FusionVariant::kDFNet}) {
    CHECK_NOTHROW(NetworkConfig::reference(v).validate());
    CHECK_NOTHROW(NetworkConfig::miniature(v, 48).validate());
  }
  auto bad = NetworkConfig::miniature();
  bad.layers[1].c_in = 5;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  auto small = NetworkConfig::tiny();
  small.input_size = 4;
  CHECK_THROWS_AS(small.validate(), std::invalid_argument);
}

TEST_CASE("config JSON round trip and hash") {
  for (auto cfg : {NetworkConfig::reference(FusionVariant::kMANet), NetworkConfig::miniature(FusionVariant::kIVFuse, 48),
                   NetworkConfig::tiny()}) {
    const std::string text = network_config_to_json(cfg);
    const NetworkConfig back = network_config_from_json(text);
    CHECK(network_config_to_json(back) == text);
    CHECK(config_hash(back) == config_hash(cfg));
    CHECK(config_hash(cfg).size() == 16);
  }
  auto a = NetworkConfig::miniature();
  auto b = a;
  b.layers[2].c_hidden = 17;
  CHECK(config_hash(a) != config_hash(b));
  const auto p = network_config_from_json(R"({"profile": "miniature", "variant": "manet", "input_size": 48})");
  CHECK(p.input_size == 48);
  CHECK(p.layers[0].variant == FusionVariant::kMANet);
  CHECK_THROWS(network_config_from_json(R"({"profile": "huge"})"));
  CHECK_THROWS(network_config_from_json("not json"));
}

TEST_CASE("ROI pooling") {
  std::mt19937_64 rng(21);
  const Tensor f = random_tensor({1, 2, 9, 9}, rng);
  SUBCASE("converges to the dense 2D oracle at high density") {
    const BoundingBox box{8.0, 12.0, 18.0, 18.0};  // scale 0.25 -> [2, 6.5) x [3, 7.5)
    CHECK(max_abs_diff(roi_pool(f, box, 0.25, 1000).data(), dense_roi(f, 2.0, 3.0, 6.5, 7.5, 1500).data()) < 1e-5);
  }
  SUBCASE("sample count equal to the oracle grid is exact") {
    // Bin length 1.0 feature pixel at density 100 gives exactly 100 samples per axis.
    const BoundingBox box{1.0, 2.0, 3.0, 3.0};
    const Tensor got = roi_pool(f, box, 1.0, 100);
    CHECK(max_abs_diff(got.data(), dense_roi(f, 1.0, 2.0, 4.0, 5.0, 100).data()) < 1e-12);
  }
  SUBCASE("default density is close to the dense oracle") {
    const BoundingBox box{1.3, 0.7, 5.9, 6.2};
    const Tensor got = roi_pool(f, box, 1.0, 32);
    CHECK(max_abs_diff(got.data(), dense_roi(f, 1.3, 0.7, 7.2, 6.9, 400).data()) < 2e-3);
  }
  SUBCASE("affine map: each bin average equals the value at the bin centre") {
    Tensor a({1, 1, 9, 9});
    for (int y = 0; y < 9; ++y)
      for (int x = 0; x < 9; ++x) a.at(0, 0, y, x) = 0.3 + 0.7 * x - 1.1 * y;
    const BoundingBox box{2.2, 1.9, 4.5, 5.1};
    const Tensor got = roi_pool(a, box, 1.0, 32);
    for (int by = 0; by < 3; ++by)
      for (int bx = 0; bx < 3; ++bx) {
        const double cx = box.x + (bx + 0.5) * box.w / 3 - 0.5, cy = box.y + (by + 0.5) * box.h / 3 - 0.5;
        CHECK(std::abs(got.at(0, 0, by, bx) - (0.3 + 0.7 * cx - 1.1 * cy)) < 1e-12);
      }
  }
  SUBCASE("constant map is preserved, also near borders") {
    Tensor c({1, 1, 9, 9}, 2.5);
    for (const BoundingBox& b : {BoundingBox{0, 0, 9, 9}, BoundingBox{-3, -3, 5, 5}, BoundingBox{7.5, 7.5, 4, 4}}) {
      const Tensor pooled = roi_pool(c, b, 1.0);
      for (double v : pooled.data()) CHECK(std::abs(v - 2.5) < 1e-12);
    }
  }
  SUBCASE("thin boxes are widened to one feature pixel") {
    const Tensor thin = roi_pool(f, BoundingBox{4.0, 4.0, 0.1, 0.1}, 1.0);
    const Tensor unit = roi_pool(f, BoundingBox{3.55, 3.55, 1.0, 1.0}, 1.0);
    CHECK(max_abs_diff(thin.data(), unit.data()) < 1e-12);
  }
  SUBCASE("invalid boxes") {
    CHECK_THROWS_AS(roi_pool(f, BoundingBox{0, 0, 0, 3}, 1.0), std::invalid_argument);
    CHECK_THROWS_AS(roi_pool(f, BoundingBox{20, 20, 3, 3}, 1.0), std::invalid_argument);
    CHECK_THROWS_AS(roi_pool(f, BoundingBox{-9, 0, 4, 3}, 1.0), std::invalid_argument);
    CHECK_THROWS_AS(roi_pool(f, BoundingBox{0, 0, 3, 3}, 0.0), std::invalid_argument);
  }
  SUBCASE("backward matches finite differences") {
    Tensor g = random_tensor({1, 2, 3, 3}, rng);
    for (const BoundingBox& b : {BoundingBox{1.3, 0.7, 5.9, 6.2}, BoundingBox{-1, 2, 4, 9}, BoundingBox{4, 4, 0.2, 0.2}}) {
      Tensor x = f;
      const auto loss = [&] { return dot(g.data(), roi_pool(x, b, 1.0, 8).data()); };
      CHECK(rel_error(roi_pool_backward(g, x.shape(), b, 1.0, 8).data(), numeric_grad(x.data(), loss)) < 1e-7);
    }
  }
}

TEST_CASE("cross entropy") {
  std::mt19937_64 rng(22);
  std::uniform_real_distribution<double> u(-30, 30);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> z{u(rng), u(rng)};
    for (bool positive : {true, false}) {
      std::array<double, 2> g{};
      const double loss = cross_entropy(z, positive, g);
      const long double zt = positive ? z[0] : z[1], zo = positive ? z[1] : z[0];
      const long double ref = std::log1p(std::exp(static_cast<long double>(zo - zt)));
      CHECK(std::abs(loss - static_cast<double>(ref)) <= 1e-12 * std::max(1.0, static_cast<double>(ref)));
      const auto num = numeric_grad(z, [&] {
        std::array<double, 2> unused{};
        return cross_entropy(z, positive, unused);
      });
      CHECK(std::abs(g[0] - num[0]) < 1e-6);
      CHECK(std::abs(g[1] - num[1]) < 1e-6);
      CHECK(std::abs(g[0] + g[1]) < 1e-15);
    }
  }
  std::array<double, 2> g{};
  CHECK(std::isfinite(cross_entropy(std::vector<double>{-800.0, 800.0}, true, g)));
}

TEST_CASE("SGD with momentum follows the recurrence") {
  SgdMomentum opt(0.9, 5e-4);
  std::vector<double> p{1.0, -2.0, 0.5}, ref = p, v(3, 0.0);
  std::mt19937_64 rng(23);
  std::normal_distribution<double> n;
  for (int it = 0; it < 25; ++it) {
    const std::vector<double> g{n(rng), n(rng), n(rng)};
    opt.step(p, g, 0.01, 0);
    for (std::size_t i = 0; i < 3; ++i) {
      v[i] = 0.9 * v[i] + g[i] + 5e-4 * ref[i];
      ref[i] -= 0.01 * v[i];
    }
  }
  CHECK(rel_error(p, ref) < 1e-14);
  SgdMomentum frozen(0.9, 5e-4);
  std::vector<double> q{1.0, 2.0};
  frozen.step(q, std::vector<double>{3.0, -1.0}, 0.0, 0);
  CHECK(q == std::vector<double>{1.0, 2.0});
}

TEST_CASE("head backward matches finite differences") {
  auto cfg = NetworkConfig::tiny();
  NetworkParams params = init_network(cfg, 3);
  std::mt19937_64 rng(24);
  std::vector<double> x(static_cast<std::size_t>(cfg.head_input()));
  for (double& v : x) v = std::normal_distribution<double>(0, 1)(rng);
  const std::vector<double> gl{0.7, -1.3};
  HeadParams grads = zeros_like(params).head;
  const auto trace = head_forward(params.head, x);
  const auto gx = head_backward(params.head, trace, gl, grads);
  const auto loss = [&] {
    const auto t = head_forward(params.head, x);
    return gl[0] * t.logits[0] + gl[1] * t.logits[1];
  };
  CHECK(rel_error(gx, numeric_grad(x, loss)) < 1e-6);
  CHECK(rel_error(grads.fc4.data(), numeric_grad(params.head.fc4.data(), loss)) < 1e-6);
  CHECK(rel_error(grads.fc5_bias, numeric_grad(params.head.fc5_bias, loss)) < 1e-6);
  CHECK(rel_error(grads.fc6.data(), numeric_grad(params.head.fc6.data(), loss)) < 1e-6);
}

TEST_CASE("tiny network gradcheck over every coordinate") {
  GradcheckOptions opt;
  opt.coords_per_tensor = 0;
  for (auto v : {FusionVariant::kDFNet, FusionVariant::kBaseline, FusionVariant::kMANet, FusionVariant::kIVFuse}) {
    CAPTURE(to_string(v));
    const auto report = gradcheck_network(NetworkConfig::tiny(v), 5, opt);
    CHECK(report.max_rel_error() < 1e-4);
    CHECK(!report.groups.empty());
  }
  opt.detach_attention = true;
  CHECK(gradcheck_network(NetworkConfig::tiny(), 6, opt).max_rel_error() < 1e-4);
}

TEST_CASE("backbone behaviour") {
  const auto cfg = NetworkConfig::miniature(FusionVariant::kDFNet, 48);
  const NetworkParams params = init_network(cfg, 9);
  std::mt19937_64 rng(25);
  const Tensor rgb = random_tensor({1, 3, 48, 48}, rng, 0, 1), t = random_tensor({1, 3, 48, 48}, rng, 0, 1);
  const auto out = backbone_forward(cfg, params, rgb, t);
  CHECK(out.features.shape() == Tensor::Shape{1, 64, 9, 9});
  for (const auto& w : out.weights) {
    REQUIRE(w.has_value());
    CHECK(*w == FusionWeights{});
  }
  CHECK(out.conv_counts == std::array<int, 3>{2, 2, 2});
  const auto pinned = backbone_forward(cfg, params, rgb, t, {FusionWeights{1, 0, 0, 1}, false});
  auto base_cfg = cfg;
  base_cfg.set_variant(FusionVariant::kBaseline);
  const auto base = backbone_forward(base_cfg, params, rgb, t);
  CHECK(max_abs_diff(pinned.features.data(), base.features.data()) <= 1e-12);
  CHECK_THROWS_AS(backbone_forward(cfg, params, Tensor({1, 3, 40, 40}), t), std::invalid_argument);
}

TEST_CASE("parallel candidate scoring equals serial") {
  const auto cfg = NetworkConfig::miniature(FusionVariant::kDFNet, 48);
  const NetworkParams params = init_network(cfg, 10);
  std::mt19937_64 rng(26);
  const Tensor rgb = random_tensor({1, 3, 48, 48}, rng, 0, 1), t = random_tensor({1, 3, 48, 48}, rng, 0, 1);
  std::vector<BoundingBox> boxes;
  std::uniform_real_distribution<double> u(0, 36);
  for (int i = 0; i < 64; ++i) boxes.push_back({u(rng), u(rng), 6 + u(rng) / 4, 6 + u(rng) / 4});
  const auto serial = score_candidates(cfg, params, rgb, t, boxes, 1);
  const auto parallel = score_candidates(cfg, params, rgb, t, boxes, 4);
  REQUIRE(serial.size() == parallel.size());
  for (std::size_t i = 0; i < serial.size(); ++i) {
    CHECK(serial[i].pos == parallel[i].pos);
    CHECK(serial[i].neg == parallel[i].neg);
  }
}

TEST_CASE("offline training") {
  const auto cfg = NetworkConfig::miniature(FusionVariant::kDFNet, 48);
  const auto frames = small_frames(48, 31);
  SUBCASE("zero learning rate leaves parameters and loss unchanged") {
    NetworkParams params = init_network(cfg, 11);
    const NetworkParams before = params;
    TrainOptions opt;
    opt.optimizer = {0.0, 0.9, 5e-4, 3};
    const auto r = train_offline(cfg, params, frames, opt);
    REQUIRE(r.loss_curve.size() == 3);
    CHECK(r.loss_curve[0] == r.loss_curve[1]);
    CHECK(r.loss_curve[1] == r.loss_curve[2]);
    CHECK(encode_kernel_banks(params.banks) == encode_kernel_banks(before.banks));
    CHECK(encode_head(params.head) == encode_head(before.head));
  }
  SUBCASE("loss decreases and training is deterministic") {
    NetworkParams a = init_network(cfg, 12), b = a;
    TrainOptions opt;
    opt.optimizer = {1e-3, 0.9, 5e-4, 8};
    const auto ra = train_offline(cfg, a, frames, opt);
    const auto rb = train_offline(cfg, b, frames, opt);
    CHECK(ra.loss_curve == rb.loss_curve);
    CHECK(ra.loss_curve.back() < ra.loss_curve.front());
    CHECK(encode_kernel_banks(a.banks) == encode_kernel_banks(b.banks));
  }
  SUBCASE("non-finite input is reported as divergence") {
    auto bad = frames;
    bad[0].rgb.data()[5] = std::nan("");
    NetworkParams params = init_network(cfg, 13);
    TrainOptions opt;
    opt.optimizer = {1e-3, 0.9, 5e-4, 2};
    CHECK_THROWS_AS(train_offline(cfg, params, bad, opt), TrainingDiverged);
  }
  SUBCASE("frame loss gradient matches finite differences on the head") {
    NetworkParams params = init_network(cfg, 14);
    NetworkParams grads = zeros_like(params);
    frame_loss(cfg, params, frames[0], {}, &grads);
    const auto loss = [&] { return frame_loss(cfg, params, frames[0]); };
    std::span<double> few = params.head.fc6.data().subspan(0, 6);
    CHECK(rel_error(std::span<const double>(grads.head.fc6.data().data(), 6), numeric_grad(few, loss)) < 1e-5);
  }
}

TEST_CASE("checkpoints") {
  const auto cfg = NetworkConfig::miniature(FusionVariant::kMANet, 48);
  const NetworkParams params = init_network(cfg, 15);
  const auto dir = temp_dir("ckpt");
  save_checkpoint(dir.string(), cfg, params, 7, 0.25);
  const Checkpoint back = load_checkpoint(dir.string());
  CHECK(back.epoch == 7);
  CHECK(back.loss == 0.25);
  CHECK(network_config_to_json(back.config) == network_config_to_json(cfg));
  CHECK(encode_kernel_banks(back.params.banks) == encode_kernel_banks(params.banks));
  CHECK(encode_head(back.params.head) == encode_head(params.head));
  SUBCASE("tampered kernels are rejected") {
    std::fstream f(dir / "kernels.bin", std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(40);
    f.put('\x7f');
    f.close();
    CHECK_THROWS(load_checkpoint(dir.string()));
  }
  SUBCASE("missing directory") { CHECK_THROWS(load_checkpoint((dir / "nope").string())); }
  CHECK_THROWS(decode_head("short"));
}

}  // TEST_SUITE
