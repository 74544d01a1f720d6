#include "dynfuse/cli.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <iomanip>
#include <optional>
#include <sstream>

#include "dynfuse/checks.hpp"
#include "dynfuse/cost_model.hpp"
#include "dynfuse/log.hpp"
#include "dynfuse/parallel.hpp"
#include "dynfuse/serialize.hpp"
#include "dynfuse/tracker.hpp"

namespace dynfuse {
namespace {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

constexpr double kGradTolerance = 1e-4;
constexpr double kEquivalenceTolerance = 1e-10;

// Defaults, overridden by the --config file, overridden in turn by flags.
struct Settings {
  std::uint64_t seed = 7;
  int threads = 0;
  NetworkConfig network = NetworkConfig::miniature(FusionVariant::kDFNet, 48);
  SyntheticTrainingConfig training{};
  OptimizerConfig optimizer{1e-3, 0.9, 5e-4, 30};
  int batch_size = 64;
  bool detach_attention = false;
  Modality train_modality = Modality::kDual;
  int frames = 100;
  int ir_switch_frame = 60;
  double ir_sigma = 0.6;
  ProtocolConfig protocol{};
  double pr_threshold = 5.0;
};

void load_config(const std::string& path, Settings& s) {
  const auto j = nlohmann::json::parse(read_file(path));
  s.seed = j.value("seed", s.seed);
  s.threads = j.value("threads", s.threads);
  if (j.contains("network")) s.network = network_config_from_json(j.at("network").dump());
  if (j.contains("train")) {
    const auto& t = j.at("train");
    auto& tc = s.training;
    tc.sequences = t.value("sequences", tc.sequences);
    tc.frames_per_sequence = t.value("frames_per_sequence", tc.frames_per_sequence);
    tc.frame_stride = t.value("frame_stride", tc.frame_stride);
    tc.pos_per_frame = t.value("pos_per_frame", tc.pos_per_frame);
    tc.neg_per_frame = t.value("neg_per_frame", tc.neg_per_frame);
    s.optimizer.lr = t.value("lr", s.optimizer.lr);
    s.optimizer.momentum = t.value("momentum", s.optimizer.momentum);
    s.optimizer.weight_decay = t.value("weight_decay", s.optimizer.weight_decay);
    s.optimizer.epochs = t.value("epochs", s.optimizer.epochs);
    s.batch_size = t.value("batch_size", s.batch_size);
    s.detach_attention = t.value("detach_attention", s.detach_attention);
    if (t.contains("modality")) s.train_modality = parse_modality(t.at("modality").get<std::string>());
  }
  if (j.contains("track")) {
    const auto& t = j.at("track");
    auto& p = s.protocol;
    s.frames = t.value("frames", s.frames);
    s.ir_switch_frame = t.value("ir_switch_frame", s.ir_switch_frame);
    s.ir_sigma = t.value("ir_sigma", s.ir_sigma);
    s.pr_threshold = t.value("pr_threshold", s.pr_threshold);
    p.n_candidates = t.value("n_candidates", p.n_candidates);
    p.top_k = t.value("top_k", p.top_k);
    p.init_iterations = t.value("init_iterations", p.init_iterations);
    p.update_iterations = t.value("update_iterations", p.update_iterations);
    p.init_lr = t.value("init_lr", p.init_lr);
    p.lr_fc6 = t.value("lr_fc6", p.lr_fc6);
    p.lr_fc45 = t.value("lr_fc45", p.lr_fc45);
    p.long_term_interval = t.value("long_term_interval", p.long_term_interval);
    p.failure_threshold = t.value("failure_threshold", p.failure_threshold);
    p.updates_enabled = t.value("updates_enabled", p.updates_enabled);
    p.sampler.sigma_xy = t.value("sigma_xy", p.sampler.sigma_xy);
    p.sampler.sigma_scale = t.value("sigma_scale", p.sampler.sigma_scale);
    if (t.contains("modality")) p.modality = parse_modality(t.at("modality").get<std::string>());
  }
}

std::string fixed(double v, int digits) {
  std::ostringstream ss;
  ss << std::fixed << std::setprecision(digits) << v;
  return ss.str();
}

std::string sci(double v) {
  std::ostringstream ss;
  ss << std::scientific << std::setprecision(3) << v;
  return ss.str();
}

std::string out_path(const std::string& dir, const std::string& name) {
  return (fs::path(dir) / name).string();
}

struct Flags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<int> threads;
  std::optional<std::string> variant;
  bool detach_attention = false;
  bool strict_ivfuse = false;
  std::string out;
};

class Cli {
 public:
  Cli(std::ostream& out, std::ostream& err) : out_(out), err_(err) {}

  int run(int argc, const char* const* argv);

 private:
  Settings settings() const;
  int gradcheck();
  int equivalence();
  int convcount();
  int cost();
  int train();
  int track_cmd();
  int eval();
  int trace_export();

  std::ostream& out_;
  std::ostream& err_;
  Flags flags_;
  // Subcommand-specific options.
  int seeds_ = 1;
  int coords_ = 8;
  std::string profile_ = "miniature";
  int trials_ = 1000;
  int witness_trials_ = 100;
  std::string spec_;
  std::int64_t c_hidden_ = 64;
  std::optional<int> epochs_;
  std::optional<std::string> modality_;
  std::string checkpoint_;
  std::string sequence_;
  std::string results_;
  std::string groundtruth_;
  std::optional<double> threshold_;
  bool save_sequence_ = false;
};

Settings Cli::settings() const {
  Settings s;
  if (!flags_.config.empty()) load_config(flags_.config, s);
  if (flags_.seed) s.seed = *flags_.seed;
  if (flags_.threads) s.threads = *flags_.threads;
  if (flags_.variant) s.network.set_variant(parse_variant(*flags_.variant));
  if (flags_.detach_attention) s.detach_attention = true;
  if (epochs_) s.optimizer.epochs = *epochs_;
  if (modality_) {
    s.train_modality = parse_modality(*modality_);
    s.protocol.modality = s.train_modality;
  }
  if (threshold_) s.pr_threshold = *threshold_;
  if (s.threads <= 0) s.threads = default_threads();
  s.training.seed = s.seed;
  s.training.size = s.network.input_size;
  s.protocol.seed = s.seed;
  s.protocol.threads = s.threads;
  s.network.validate();
  return s;
}

int Cli::gradcheck() {
  const Settings s = settings();
  NetworkConfig cfg = profile_ == "tiny" ? NetworkConfig::tiny() : NetworkConfig::miniature();
  cfg.set_variant(s.network.layers[0].variant);
  GradcheckOptions opt;
  opt.coords_per_tensor = profile_ == "tiny" ? 0 : coords_;
  opt.detach_attention = s.detach_attention;

  std::vector<GroupError> worst;
  std::string csv = "seed,group,max_rel_error,checked,kink_reprobes\n";
  for (int i = 0; i < seeds_; ++i) {
    const std::uint64_t seed = s.seed + static_cast<std::uint64_t>(i);
    const auto report = gradcheck_network(cfg, seed, opt);
    for (std::size_t g = 0; g < report.groups.size(); ++g) {
      const auto& e = report.groups[g];
      csv += std::to_string(seed) + "," + e.name + "," + sci(e.max_rel_error) + "," + std::to_string(e.checked) + "," +
             std::to_string(e.kink_reprobes) + "\n";
      if (worst.size() <= g) {
        worst.push_back(e);
      } else {
        worst[g].max_rel_error = std::max(worst[g].max_rel_error, e.max_rel_error);
        worst[g].kink_reprobes += e.kink_reprobes;
      }
    }
  }
  const double split = shared_kernel_split_error(s.seed);
  double max_err = 0.0;
  out_ << "gradcheck " << to_string(cfg.layers[0].variant) << " (" << profile_ << "), seeds "
       << s.seed << ".." << s.seed + static_cast<std::uint64_t>(seeds_ - 1) << "\n";
  out_ << std::left << std::setw(22) << "group" << std::setw(15) << "max_rel_error" << "kink_reprobes\n";
  for (const auto& e : worst) {
    out_ << std::left << std::setw(22) << e.name << std::setw(15) << sci(e.max_rel_error) << e.kink_reprobes << "\n";
    max_err = std::max(max_err, e.max_rel_error);
  }
  out_ << std::left << std::setw(22) << "w_share split" << sci(split) << "\n";
  const bool ok = max_err < kGradTolerance && split < 1e-12;
  out_ << (ok ? "PASS" : "FAIL") << " max rel error " << sci(max_err) << " (tolerance " << sci(kGradTolerance) << ")\n";
  if (!flags_.out.empty()) write_file_atomic(out_path(flags_.out, "gradcheck.csv"), csv);
  return ok ? kExitOk : kExitCheckFailed;
}

int Cli::equivalence() {
  const Settings s = settings();
  const auto r = run_equivalence(s.seed, trials_, witness_trials_);
  const double hit_rate = r.witness_trials ? static_cast<double>(r.witness_hits) / r.witness_trials : 0.0;
  out_ << "kernel-space fusion: " << r.trials << " trials, max pre-activation rel discrepancy "
       << sci(r.max_rel_discrepancy) << "\n";
  out_ << "feature-space witness: " << r.witness_hits << "/" << r.witness_trials << " trials with max abs diff > "
       << sci(r.witness_margin) << " (min " << sci(r.min_witness) << ", median " << sci(r.median_witness) << ")\n";
  const bool ok = r.max_rel_discrepancy < kEquivalenceTolerance && hit_rate >= 0.95;
  out_ << (ok ? "PASS" : "FAIL") << "\n";
  if (!flags_.out.empty()) {
    ordered_json j{{"seed", s.seed},
                   {"trials", r.trials},
                   {"max_rel_discrepancy", r.max_rel_discrepancy},
                   {"witness_trials", r.witness_trials},
                   {"witness_hits", r.witness_hits},
                   {"witness_margin", r.witness_margin},
                   {"min_witness", r.min_witness},
                   {"median_witness", r.median_witness}};
    write_file_atomic(out_path(flags_.out, "equivalence.json"), j.dump(2) + "\n");
  }
  return ok ? kExitOk : kExitCheckFailed;
}

int Cli::convcount() {
  const Settings s = settings();
  auto rows = conv_count_table(s.seed);
  if (flags_.variant) {
    const auto v = parse_variant(*flags_.variant);
    std::erase_if(rows, [&](const ConvCountRow& r) { return r.variant != v; });
  }
  bool ok = true;
  std::string csv = "variant,layer1,layer2,layer3\n";
  out_ << std::left << std::setw(10) << "variant" << std::right << std::setw(8) << "layer1" << std::setw(8)
       << "layer2" << std::setw(8) << "layer3" << "\n";
  for (const auto& r : rows) {
    const int expected = r.variant == FusionVariant::kMANet ? 4 : 2;
    out_ << std::left << std::setw(10) << to_string(r.variant) << std::right;
    csv += to_string(r.variant);
    for (int c : r.per_layer) {
      out_ << std::setw(8) << c;
      csv += "," + std::to_string(c);
      ok = ok && c == expected;
    }
    out_ << "\n";
    csv += "\n";
  }
  if (!flags_.out.empty()) write_file_atomic(out_path(flags_.out, "convcount.csv"), csv);
  return ok ? kExitOk : kExitCheckFailed;
}

int Cli::cost() {
  std::vector<std::vector<LayerCostSpec>> groups;
  if (!spec_.empty()) {
    groups = group_by_variant(parse_cost_specs(read_file(spec_)));
  } else {
    for (auto v : {FusionVariant::kBaseline, FusionVariant::kIVFuse, FusionVariant::kMANet, FusionVariant::kDFNet}) {
      groups.push_back(reference_geometry(v, c_hidden_));
    }
  }
  const CostOptions opt{flags_.strict_ivfuse};
  std::vector<CostReport> reports;
  for (const auto& g : groups) reports.push_back(network_cost_report(g, opt));
  out_ << render_cost_table(reports);
  if (!flags_.out.empty()) write_file_atomic(out_path(flags_.out, "cost.csv"), render_cost_csv(reports));
  return kExitOk;
}

int Cli::train() {
  if (flags_.out.empty()) throw CLI::RequiredError("--out");
  const Settings s = settings();
  log_info("building synthetic training frames");
  const auto frames = build_training_frames(s.training, s.train_modality);
  NetworkParams params = init_network(s.network, s.seed);
  TrainOptions to;
  to.optimizer = s.optimizer;
  to.seed = s.seed;
  to.batch_size = s.batch_size;
  to.detach_attention = s.detach_attention;
  const auto res = train_offline(s.network, params, frames, to);
  save_checkpoint(flags_.out, s.network, params, s.optimizer.epochs, res.loss_curve.back());
  std::string csv = "epoch,loss\n";
  for (std::size_t e = 0; e < res.loss_curve.size(); ++e) {
    csv += std::to_string(e + 1) + "," + fixed(res.loss_curve[e], 8) + "\n";
  }
  write_file_atomic(out_path(flags_.out, "loss_curve.csv"), csv);
  out_ << "trained " << to_string(s.network.layers[0].variant) << " on " << frames.size() << " frames ("
       << to_string(s.train_modality) << "), " << s.optimizer.epochs << " epochs\n";
  out_ << "loss " << fixed(res.loss_curve.front(), 4) << " -> " << fixed(res.loss_curve.back(), 4)
       << ", accuracy " << fixed(res.final_accuracy, 4) << "\n";
  out_ << "checkpoint " << flags_.out << " (config " << config_hash(s.network) << ")\n";
  return kExitOk;
}

Sequence load_or_generate(const Settings& s, const std::string& dir, int size) {
  if (!dir.empty()) return load_sequence(dir);
  return generate_sequence(mixed_degradation_sequence(s.seed, s.frames, size, s.ir_switch_frame, s.ir_sigma));
}

int Cli::track_cmd() {
  if (flags_.out.empty()) throw CLI::RequiredError("--out");
  if (checkpoint_.empty()) throw CLI::RequiredError("--checkpoint");
  const Settings s = settings();
  const auto ck = load_checkpoint(checkpoint_);
  const Sequence seq = load_or_generate(s, sequence_, ck.config.input_size);
  if (seq.gt.empty()) throw std::runtime_error("sequence has no frames");
  const Track tr = track(ck.config, ck.params, seq, seq.gt.front(), s.protocol);
  const auto m = evaluate_pr_sr(tr.boxes(), seq.gt, s.pr_threshold);
  write_file_atomic(out_path(flags_.out, "results.csv"), results_csv(tr));
  write_file_atomic(out_path(flags_.out, "trace.csv"), trace_csv(tr));
  write_file_atomic(out_path(flags_.out, "metrics.json"), metrics_json(m));
  if (save_sequence_) save_sequence(out_path(flags_.out, "sequence"), seq);
  out_ << "tracked " << seq.gt.size() << " frames (" << to_string(s.protocol.modality) << ")\n";
  out_ << "PR@" << fixed(s.pr_threshold, 1) << " " << fixed(m.pr, 4) << "  SR " << fixed(m.sr, 4) << "\n";
  return kExitOk;
}

int Cli::eval() {
  if (results_.empty()) throw CLI::RequiredError("--results");
  const Settings s = settings();
  std::vector<BoundingBox> gt;
  if (!groundtruth_.empty()) {
    gt = parse_boxes(read_file(groundtruth_));
  } else if (!sequence_.empty()) {
    gt = parse_boxes(read_file(out_path(sequence_, "groundtruth.txt")));
  } else {
    throw CLI::RequiredError("--groundtruth or --sequence");
  }
  const auto boxes = parse_results_csv(read_file(results_));
  const auto m = evaluate_pr_sr(boxes, gt, s.pr_threshold);
  out_ << "PR@" << fixed(s.pr_threshold, 1) << " " << fixed(m.pr, 4) << "  SR " << fixed(m.sr, 4) << "\n";
  if (!flags_.out.empty()) write_file_atomic(out_path(flags_.out, "metrics.json"), metrics_json(m));
  return kExitOk;
}

int Cli::trace_export() {
  if (flags_.out.empty()) throw CLI::RequiredError("--out");
  if (checkpoint_.empty()) throw CLI::RequiredError("--checkpoint");
  const Settings s = settings();
  const auto ck = load_checkpoint(checkpoint_);
  std::string summary = "seed,layer,d_before,d_after,delta_d\n";
  out_ << std::left << std::setw(8) << "seed" << std::setw(8) << "layer" << std::right << std::setw(12)
       << "delta_d" << "\n";
  for (int i = 0; i < seeds_; ++i) {
    Settings si = s;
    si.seed = s.seed + static_cast<std::uint64_t>(i);
    si.protocol.seed = si.seed;
    const Sequence seq = load_or_generate(si, sequence_, ck.config.input_size);
    const Track tr = track(ck.config, ck.params, seq, seq.gt.front(), si.protocol);
    write_file_atomic(out_path(flags_.out, "trace_seed" + std::to_string(si.seed) + ".csv"), trace_csv(tr));
    const auto dd = delta_d(tr, s.ir_switch_frame);
    for (std::size_t l = 0; l < 3; ++l) {
      double before = 0.0, after = 0.0;
      int nb = 0, na = 0;
      for (std::size_t t = 0; t < tr.frames.size(); ++t) {
        const auto& w = tr.frames[t].weights[l];
        if (!w) continue;
        if (static_cast<int>(t) < s.ir_switch_frame) {
          before += w->d;
          ++nb;
        } else if (static_cast<int>(t) > s.ir_switch_frame) {
          after += w->d;
          ++na;
        }
      }
      summary += std::to_string(si.seed) + "," + std::to_string(l + 1) + "," +
                 (nb ? fixed(before / nb, 8) : "") + "," + (na ? fixed(after / na, 8) : "") + "," +
                 fixed(dd[l], 8) + "\n";
      out_ << std::left << std::setw(8) << si.seed << std::setw(8) << l + 1 << std::right << std::setw(12)
           << fixed(dd[l], 6) << "\n";
    }
  }
  write_file_atomic(out_path(flags_.out, "delta_d.csv"), summary);
  return kExitOk;
}

int Cli::run(int argc, const char* const* argv) {
  CLI::App app{"Two-stream dynamic fusion engine: verification, cost model, training and tracking", "dynfuse"};
  app.require_subcommand(1);
  app.fallthrough();
  app.add_option("--config", flags_.config, "JSON config with network/train/track sections")->check(CLI::ExistingFile);
  app.add_option("--seed", flags_.seed, "Random seed");
  app.add_option("--threads", flags_.threads, "Worker threads (default: available cores)")->check(CLI::PositiveNumber);
  app.add_option("--out", flags_.out, "Output directory for CSV/JSON artifacts");
  app.add_option("--variant", flags_.variant, "Fusion variant")
      ->check(CLI::IsMember({"baseline", "manet", "ivfuse", "dfnet"}));
  app.add_flag("--detach-attention", flags_.detach_attention, "Treat attention weights as constants in backprop");
  app.add_flag("--strict-ivfuse-cost", flags_.strict_ivfuse, "Count IVFuse with its mixed kernel sizes");

  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of every parameter group");
  gc->add_option("--seeds", seeds_, "Number of consecutive seeds")->check(CLI::PositiveNumber);
  gc->add_option("--coords", coords_, "Coordinates probed per parameter tensor")->check(CLI::PositiveNumber);
  gc->add_option("--profile", profile_, "Network size")->check(CLI::IsMember({"miniature", "tiny"}));

  auto* eq = app.add_subcommand("equivalence", "Kernel-space linearity and feature-space nonlinearity checks");
  eq->add_option("--trials", trials_)->check(CLI::PositiveNumber);
  eq->add_option("--witness-trials", witness_trials_)->check(CLI::PositiveNumber);

  app.add_subcommand("convcount", "Convolutions per forward pass for each variant");

  auto* co = app.add_subcommand("cost", "Mult-Adds table");
  co->add_option("--spec", spec_, "JSON list of layer geometries")->check(CLI::ExistingFile);
  co->add_option("--c-hidden", c_hidden_, "Attention width for the built-in geometry")->check(CLI::PositiveNumber);

  auto* tr = app.add_subcommand("train", "Offline training on synthetic sequences; writes a checkpoint");
  tr->add_option("--epochs", epochs_)->check(CLI::PositiveNumber);
  tr->add_option("--modality", modality_)->check(CLI::IsMember({"dual", "rgb", "thermal"}));

  auto* tk = app.add_subcommand("track", "Track one sequence with a trained checkpoint");
  tk->add_option("--checkpoint", checkpoint_)->check(CLI::ExistingDirectory);
  tk->add_option("--sequence", sequence_, "Sequence directory (default: synthetic, from --seed)")
      ->check(CLI::ExistingDirectory);
  tk->add_option("--modality", modality_)->check(CLI::IsMember({"dual", "rgb", "thermal"}));
  tk->add_option("--threshold", threshold_, "PR center-error threshold in pixels");
  tk->add_flag("--save-sequence", save_sequence_, "Also write the tracked sequence under --out");

  auto* ev = app.add_subcommand("eval", "PR/SR of a results file against ground truth");
  ev->add_option("--results", results_)->check(CLI::ExistingFile);
  ev->add_option("--groundtruth", groundtruth_)->check(CLI::ExistingFile);
  ev->add_option("--sequence", sequence_)->check(CLI::ExistingDirectory);
  ev->add_option("--threshold", threshold_);

  auto* te = app.add_subcommand("trace-export", "Per-frame mixing-weight traces across an IR degradation switch");
  te->add_option("--checkpoint", checkpoint_)->check(CLI::ExistingDirectory);
  te->add_option("--sequence", sequence_)->check(CLI::ExistingDirectory);
  te->add_option("--seeds", seeds_)->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out_ << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out_ << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err_ << "error: " << e.what() << "\n\n" << app.help();
    return kExitUsage;
  }

  try {
    if (*gc) return gradcheck();
    if (*eq) return equivalence();
    if (app.got_subcommand("convcount")) return convcount();
    if (*co) return cost();
    if (*tr) return train();
    if (*tk) return track_cmd();
    if (*ev) return eval();
    if (*te) return trace_export();
  } catch (const CLI::RequiredError& e) {
    err_ << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::invalid_argument& e) {
    err_ << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const nlohmann::json::exception& e) {
    err_ << "error: bad JSON: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err_ << "error: " << e.what() << "\n";
    return kExitCheckFailed;
  }
  err_ << app.help();
  return kExitUsage;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  Cli cli(out, err);
  return cli.run(argc, argv);
}

}  // namespace dynfuse
