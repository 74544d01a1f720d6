#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "dynfuse/serialize.hpp"
#include "dynfuse/tracker.hpp"

namespace dynfuse {
namespace {

constexpr double kTargetIr = 0.85;
constexpr double kBackgroundIr = 0.25;

struct Blob {
  BoundingBox box;
  bool rgb_textured;  // checkerboard in RGB
  bool ir_warm;       // warm in IR
};

bool covers(const BoundingBox& b, int x, int y) {
  const double px = x + 0.5, py = y + 0.5;
  return px >= b.x && px < b.x + b.w && py >= b.y && py < b.y + b.h;
}

double inside_fraction(const BoundingBox& b, int size) {
  const double iw = std::max(0.0, std::min(b.x + b.w, static_cast<double>(size)) - std::max(b.x, 0.0));
  const double ih = std::max(0.0, std::min(b.y + b.h, static_cast<double>(size)) - std::max(b.y, 0.0));
  return iw * ih / (b.w * b.h);
}

// Reflecting 1-D motion that keeps [p, p + extent] inside [0, size].
double reflect(double p, double extent, int size) {
  const double span = size - extent;
  if (span <= 0.0) return 0.0;
  const double period = 2.0 * span;
  double q = std::fmod(p, period);
  if (q < 0.0) q += period;
  return q <= span ? q : period - q;
}

unsigned char quantize(double v) {
  return static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

void write_pnm(const std::string& path, const Tensor& img, bool color) {
  const int h = img.dim(2), w = img.dim(3);
  std::string out = std::string(color ? "P6" : "P5") + "\n" + std::to_string(w) + " " +
                    std::to_string(h) + "\n255\n";
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < (color ? 3 : 1); ++c) out.push_back(static_cast<char>(quantize(img.at(0, c, y, x))));
  write_file_atomic(path, out);
}

Tensor read_pnm(const std::string& path, bool color) {
  const std::string bytes = read_file(path);
  std::istringstream ss(bytes);
  std::string magic;
  int w = 0, h = 0, maxval = 0;
  ss >> magic >> w >> h >> maxval;
  if (magic != (color ? "P6" : "P5") || w < 1 || h < 1 || maxval != 255) {
    throw std::runtime_error("unsupported image file " + path);
  }
  ss.get();
  const int channels = color ? 3 : 1;
  const auto offset = static_cast<std::size_t>(ss.tellg());
  if (bytes.size() < offset + static_cast<std::size_t>(w) * h * channels) {
    throw std::runtime_error("truncated image file " + path);
  }
  Tensor img({1, channels, h, w});
  std::size_t i = offset;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < channels; ++c)
        img.at(0, c, y, x) = static_cast<unsigned char>(bytes[i++]) / 255.0;
  return img;
}

std::string frame_name(int i, const char* ext) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%06d.%s", i, ext);
  return buf;
}

}  // namespace

void SyntheticSequenceConfig::validate() const {
  if (frames < 1 || size < 8) throw std::invalid_argument("sequence config: need >= 1 frame of size >= 8");
  if (object_w < 2.0 || object_h < 2.0 || object_w > size || object_h > size) {
    throw std::invalid_argument("sequence config: object does not fit in the frame");
  }
  if (inside_fraction({start_x, start_y, object_w, object_h}, size) < 0.5) {
    throw std::invalid_argument("sequence config: object starts less than 50% inside the frame");
  }
  if (rgb_noise_sigma < 0.0 || ir_noise_sigma < 0.0 || distractors < 0) {
    throw std::invalid_argument("sequence config: degradation values must be non-negative");
  }
  for (const auto& e : schedule) {
    if (e.level < 0.0 || e.begin > e.end) {
      throw std::invalid_argument("sequence config: invalid degradation event");
    }
  }
}

FrameDegradation degradation_at(const SyntheticSequenceConfig& cfg, int frame) {
  FrameDegradation d;
  d.ir_noise_sigma = cfg.ir_noise_sigma;
  for (const auto& e : cfg.schedule) {
    if (frame < e.begin || frame >= e.end) continue;
    switch (e.kind) {
      case DegradationKind::kLowLight: d.rgb_gain *= e.level; break;
      case DegradationKind::kIrNoise: d.ir_noise_sigma = std::max(d.ir_noise_sigma, e.level); break;
      case DegradationKind::kOcclusion: d.occluded = true; break;
      case DegradationKind::kThermalCrossover: d.crossover = true; break;
    }
  }
  return d;
}

Sequence generate_sequence(const SyntheticSequenceConfig& cfg) {
  cfg.validate();
  const int S = cfg.size;
  std::mt19937_64 rng(cfg.seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);

  // Static smooth background with a little fixed texture.
  std::array<double, 3> fx{}, fy{}, phase{};
  for (int c = 0; c < 3; ++c) {
    fx[c] = 0.05 + 0.2 * u01(rng);
    fy[c] = 0.05 + 0.2 * u01(rng);
    phase[c] = 6.283185307179586 * u01(rng);
  }
  const double ir_fx = 0.03 + 0.1 * u01(rng), ir_fy = 0.03 + 0.1 * u01(rng);
  std::normal_distribution<double> texture(0.0, 0.03);
  Tensor bg_rgb({1, 3, S, S});
  Tensor bg_ir({1, 1, S, S});
  for (int y = 0; y < S; ++y) {
    for (int x = 0; x < S; ++x) {
      for (int c = 0; c < 3; ++c) {
        bg_rgb.at(0, c, y, x) = 0.45 + 0.15 * std::sin(fx[c] * x + phase[c]) * std::cos(fy[c] * y) + texture(rng);
      }
      bg_ir.at(0, 0, y, x) = kBackgroundIr + 0.08 * std::sin(ir_fx * x) * std::cos(ir_fy * y + phase[0]);
    }
  }

  // Distractors alternate between an RGB look-alike (cold) and a warm blob
  // with background colours; each shares exactly one cue with the target.
  std::vector<Blob> blobs;
  const BoundingBox start{cfg.start_x, cfg.start_y, cfg.object_w, cfg.object_h};
  for (int i = 0; i < cfg.distractors; ++i) {
    BoundingBox b{0, 0, cfg.object_w, cfg.object_h};
    for (int attempt = 0; attempt < 100; ++attempt) {
      b.x = u01(rng) * (S - b.w);
      b.y = u01(rng) * (S - b.h);
      if (iou(b, start) == 0.0) break;
    }
    blobs.push_back({b, i % 2 == 0, i % 2 == 1});
  }

  const std::array<double, 3> color_a{0.9, 0.15, 0.15}, color_b{0.15, 0.2, 0.85};
  const auto checker = [&](const BoundingBox& b, int x, int y, int c) {
    const int cx = static_cast<int>(std::floor((x + 0.5 - b.x) / 2.0));
    const int cy = static_cast<int>(std::floor((y + 0.5 - b.y) / 2.0));
    return ((cx + cy) % 2 == 0 ? color_a : color_b)[static_cast<std::size_t>(c)];
  };

  Sequence seq;
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (int f = 0; f < cfg.frames; ++f) {
    const FrameDegradation d = degradation_at(cfg, f);
    // Whole-pixel boxes, so the integer ground-truth file round-trips exactly.
    const BoundingBox gt{std::round(reflect(cfg.start_x + cfg.velocity_x * f, cfg.object_w, S)),
                         std::round(reflect(cfg.start_y + cfg.velocity_y * f, cfg.object_h, S)),
                         std::round(cfg.object_w), std::round(cfg.object_h)};
    Tensor rgb = bg_rgb;
    Tensor ir = bg_ir;
    for (const auto& blob : blobs) {
      for (int y = 0; y < S; ++y) {
        for (int x = 0; x < S; ++x) {
          if (!covers(blob.box, x, y)) continue;
          if (blob.rgb_textured)
            for (int c = 0; c < 3; ++c) rgb.at(0, c, y, x) = checker(blob.box, x, y, c);
          if (blob.ir_warm) ir.at(0, 0, y, x) = kTargetIr;
        }
      }
    }
    for (int y = 0; y < S; ++y) {
      for (int x = 0; x < S; ++x) {
        if (!covers(gt, x, y)) continue;
        if (d.occluded) {
          for (int c = 0; c < 3; ++c) rgb.at(0, c, y, x) = 0.5;
          ir.at(0, 0, y, x) = kBackgroundIr;
          continue;
        }
        for (int c = 0; c < 3; ++c) rgb.at(0, c, y, x) = checker(gt, x, y, c);
        ir.at(0, 0, y, x) = d.crossover ? bg_ir.at(0, 0, y, x) : kTargetIr;
      }
    }
    for (double& v : rgb.data()) {
      v *= d.rgb_gain;
      if (cfg.rgb_noise_sigma > 0.0) v += cfg.rgb_noise_sigma * gauss(rng);
    }
    if (d.ir_noise_sigma > 0.0) {
      for (double& v : ir.data()) v += d.ir_noise_sigma * gauss(rng);
    }
    seq.rgb.push_back(std::move(rgb));
    seq.ir.push_back(std::move(ir));
    seq.gt.push_back(gt);
  }
  return seq;
}

Tensor replicate_thermal(const Tensor& ir) {
  if (ir.dim(1) != 1) throw std::invalid_argument("replicate_thermal: expects one channel");
  Tensor out({ir.dim(0), 3, ir.dim(2), ir.dim(3)});
  for (int n = 0; n < ir.dim(0); ++n)
    for (int c = 0; c < 3; ++c) std::ranges::copy(ir.plane(n, 0), out.plane(n, c).begin());
  return out;
}

std::string format_boxes(const std::vector<BoundingBox>& boxes) {
  std::string out;
  for (const auto& b : boxes) {
    out += std::to_string(std::lround(b.x)) + " " + std::to_string(std::lround(b.y)) + " " +
           std::to_string(std::lround(b.w)) + " " + std::to_string(std::lround(b.h)) + "\n";
  }
  return out;
}

std::vector<BoundingBox> parse_boxes(const std::string& text) {
  std::vector<BoundingBox> boxes;
  std::istringstream ss(text);
  std::string line;
  while (std::getline(ss, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream ls(line);
    BoundingBox b;
    if (!(ls >> b.x >> b.y >> b.w >> b.h)) throw std::runtime_error("malformed box line: " + line);
    boxes.push_back(b);
  }
  return boxes;
}

void save_sequence(const std::string& dir, const Sequence& seq) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(dir) / "rgb");
  fs::create_directories(fs::path(dir) / "ir");
  for (std::size_t i = 0; i < seq.rgb.size(); ++i) {
    const int n = static_cast<int>(i) + 1;
    write_pnm((fs::path(dir) / "rgb" / frame_name(n, "ppm")).string(), seq.rgb[i], true);
    write_pnm((fs::path(dir) / "ir" / frame_name(n, "pgm")).string(), seq.ir[i], false);
  }
  write_file_atomic((fs::path(dir) / "groundtruth.txt").string(), format_boxes(seq.gt));
}

Sequence load_sequence(const std::string& dir) {
  namespace fs = std::filesystem;
  Sequence seq;
  seq.gt = parse_boxes(read_file((fs::path(dir) / "groundtruth.txt").string()));
  for (std::size_t i = 0; i < seq.gt.size(); ++i) {
    const int n = static_cast<int>(i) + 1;
    seq.rgb.push_back(read_pnm((fs::path(dir) / "rgb" / frame_name(n, "ppm")).string(), true));
    seq.ir.push_back(read_pnm((fs::path(dir) / "ir" / frame_name(n, "pgm")).string(), false));
    if (seq.rgb.back().shape()[2] != seq.ir.back().shape()[2] ||
        seq.rgb.back().shape()[3] != seq.ir.back().shape()[3]) {
      throw std::runtime_error("sequence: RGB and IR frame " + std::to_string(n) + " differ in size");
    }
  }
  return seq;
}

SyntheticSequenceConfig mixed_degradation_sequence(std::uint64_t seed, int frames, int size,
                                                   int ir_switch_frame, double ir_sigma) {
  std::mt19937_64 rng(seed * 7919 + 17);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  SyntheticSequenceConfig cfg;
  cfg.frames = frames;
  cfg.size = size;
  cfg.object_w = cfg.object_h = std::round(size * 0.21);
  cfg.start_x = 4.0 + u01(rng) * (size - cfg.object_w - 8.0);
  cfg.start_y = 4.0 + u01(rng) * (size - cfg.object_h - 8.0);
  const double angle = 6.283185307179586 * u01(rng);
  const double speed = 0.5 + 0.5 * u01(rng);
  cfg.velocity_x = speed * std::cos(angle);
  cfg.velocity_y = speed * std::sin(angle);
  cfg.rgb_noise_sigma = 0.05;
  cfg.distractors = 2;
  const int low_begin = frames / 6;
  const int low_end = std::min(ir_switch_frame, low_begin + frames / 4);
  if (low_end > low_begin) cfg.schedule.push_back({DegradationKind::kLowLight, low_begin, low_end, 0.08});
  if (ir_switch_frame < frames) {
    cfg.schedule.push_back({DegradationKind::kIrNoise, std::max(0, ir_switch_frame), frames, ir_sigma});
  }
  cfg.seed = seed;
  return cfg;
}

}  // namespace dynfuse
