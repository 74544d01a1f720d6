#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dynfuse/fusion.hpp"

namespace dynfuse {

// Geometry of one two-stream layer for Mult-Adds accounting. h and w are the
// *input* spatial dims.
struct LayerCostSpec {
  FusionVariant variant = FusionVariant::kBaseline;
  std::int64_t h = 1;
  std::int64_t w = 1;
  std::int64_t c_in = 1;
  std::int64_t c_out = 1;
  std::int64_t k = 1;
  std::int64_t c_hidden = 64;
  std::int64_t shared_k = 1;
  // IVFuse strict mode only: shared_out channels use shared_k, the remaining
  // channels use own_k (0 means k).
  std::int64_t shared_out = 0;
  std::int64_t own_k = 0;
};

struct CostOptions {
  // Count IVFuse with its mixed kernel sizes instead of as baseline-equal.
  bool strict_ivfuse = false;
};

// Mult-Adds of one layer, both branches included:
//   baseline, ivfuse: 2*H*W*Cin*Cout*k^2
//   manet:            baseline + 2*H*W*Cin*Cout*shared_k^2
//   dfnet:            2*(H*W*Cin + Cin*Chidden + 2*Chidden + H*W*Cin*Cout*k^2)
std::int64_t layer_multadds(const LayerCostSpec& spec, const CostOptions& options = {});

struct CostRow {
  int layer = 0;
  FusionVariant variant = FusionVariant::kBaseline;
  std::int64_t multadds = 0;
  std::int64_t baseline_multadds = 0;
};

struct CostReport {
  std::vector<CostRow> rows;
  std::int64_t total = 0;
  std::int64_t baseline_total = 0;

  // total / baseline_total * 100, rounded half-up to two decimals.
  std::string percent() const;
};

CostReport network_cost_report(const std::vector<LayerCostSpec>& specs,
                               const CostOptions& options = {});

// "323.14M": value / 1e6, two decimals, round half up. Exact integer math.
std::string format_millions(std::int64_t value);
// num / den * 100 with two decimals, round half up.
std::string format_percent(std::int64_t num, std::int64_t den);

// JSON list of {variant, h, w, c_in, c_out, k, c_hidden?, shared_k?, shared_out?}.
std::vector<LayerCostSpec> parse_cost_specs(const std::string& json_text);

// Groups consecutive specs by variant; each group is one network.
std::vector<std::vector<LayerCostSpec>> group_by_variant(const std::vector<LayerCostSpec>& specs);

// Aligned table (one line per network with C1..Cn, total, percent).
std::string render_cost_table(const std::vector<CostReport>& reports);
// `layer,variant,multadds,percent` with a `total` row per network.
std::string render_cost_csv(const std::vector<CostReport>& reports);

// The three-layer geometry whose baseline reproduces the published table.
std::vector<LayerCostSpec> reference_geometry(FusionVariant variant, std::int64_t c_hidden = 64);

}  // namespace dynfuse
