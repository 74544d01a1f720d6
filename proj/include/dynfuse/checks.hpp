#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "dynfuse/network.hpp"
#include "dynfuse/tracker.hpp"

namespace dynfuse {

// ---------------------------------------------------------------------------
// Finite-difference gradient check of a whole network

struct GroupError {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  // Coordinates whose central difference straddled a kink and were re-probed at step / 10.
  std::size_t kink_reprobes = 0;
};

struct GradcheckReport {
  std::vector<GroupError> groups;
  double max_rel_error() const;
};

struct GradcheckOptions {
  double step = 1e-5;
  // Coordinates probed per parameter tensor; <= 0 probes every coordinate.
  int coords_per_tensor = 8;
  bool detach_attention = false;
};

// Random frame pair and labelled boxes, random parameters with live attention
// paths. Error per tensor is max |analytic - central difference| over the
// probed coordinates, divided by the largest analytic magnitude in the tensor.
GradcheckReport gradcheck_network(const NetworkConfig& cfg, std::uint64_t seed,
                                  const GradcheckOptions& options = {});

// Shared-kernel gradient against the sum of its per-branch contributions,
// each computed with the other branch's loss term switched off.
double shared_kernel_split_error(std::uint64_t seed);

// ---------------------------------------------------------------------------
// Kernel-space vs feature-space fusion

struct EquivalenceReport {
  int trials = 0;
  double max_rel_discrepancy = 0.0;  // merged-kernel conv vs weighted conv sum
  int witness_trials = 0;
  int witness_hits = 0;             // trials whose nonlinearity gap exceeds the margin
  double witness_margin = 1e-3;
  double min_witness = 0.0;
  double median_witness = 0.0;
};

EquivalenceReport run_equivalence(std::uint64_t seed, int trials = 1000, int witness_trials = 100);

// ---------------------------------------------------------------------------
// Instrumentation

struct ConvCountRow {
  FusionVariant variant;
  std::array<int, 3> per_layer{};
};

std::vector<ConvCountRow> conv_count_table(std::uint64_t seed);

// DF network with attention pinned to (1, 0)/(0, 1) against a baseline
// network sharing its non-shared kernels and head; max abs score difference.
double endpoint_collapse_error(std::uint64_t seed);

struct SimplexReport {
  int evaluations = 0;
  int violations = 0;
  double max_sum_error = 0.0;
  double min_component = 1.0;
  double max_component = 0.0;
};

SimplexReport simplex_check(std::uint64_t seed, int evaluations = 100000);

// ---------------------------------------------------------------------------
// Behavioral suite on synthetic mixed-degradation sequences

struct BehavioralOptions {
  int seeds = 10;
  int frames = 100;
  int size = 48;
  int ir_switch_frame = 60;
  double ir_sigma = 0.6;
  std::uint64_t base_seed = 1;
  // Training sequences use seed 1000 so they never coincide with evaluation seeds.
  SyntheticTrainingConfig training{4, 40, 4, 16, 48, 48, 1000};
  OptimizerConfig optimizer{1e-3, 0.9, 5e-4, 30};
  ProtocolConfig protocol{};
  int threads = 1;
};

struct SeedOutcome {
  std::uint64_t seed = 0;
  double pr_dual = 0.0;
  double pr_rgb = 0.0;
  double pr_thermal = 0.0;
  std::array<double, 3> delta_d{};  // per layer, mean after switch minus mean before
};

struct BehavioralReport {
  std::vector<SeedOutcome> seeds;
  double median_pr_dual = 0.0;
  double median_pr_rgb = 0.0;
  double median_pr_thermal = 0.0;
  double median_abs_delta_d = 0.0;  // median over seeds of the largest per-layer |delta d|
  bool dual_wins() const;
};

// Trains one network per modality, then tracks every seed's sequence.
BehavioralReport run_behavioral_suite(const BehavioralOptions& options);

// Mean of d over frames [0, switch) and (switch, end) for every layer.
std::array<double, 3> delta_d(const Track& track, int switch_frame);

double median(std::vector<double> v);

}  // namespace dynfuse
