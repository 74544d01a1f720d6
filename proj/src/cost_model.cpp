#include "dynfuse/cost_model.hpp"

#include <algorithm>
#include <iomanip>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace dynfuse {
namespace {

std::int64_t conv_term(const LayerCostSpec& s, std::int64_t c_out, std::int64_t k) {
  return s.h * s.w * s.c_in * c_out * k * k;
}

void validate(const LayerCostSpec& s) {
  for (std::int64_t v : {s.h, s.w, s.c_in, s.c_out, s.k, s.c_hidden, s.shared_k}) {
    if (v < 1) throw std::invalid_argument("cost spec: all dimensions must be positive");
  }
  if (s.shared_out < 0 || s.shared_out > s.c_out || s.own_k < 0) {
    throw std::invalid_argument("cost spec: invalid ivfuse split");
  }
}

std::string fixed2(std::int64_t hundredths) {
  std::ostringstream ss;
  ss << hundredths / 100 << '.' << std::setw(2) << std::setfill('0') << hundredths % 100;
  return ss.str();
}

}  // namespace

std::int64_t layer_multadds(const LayerCostSpec& s, const CostOptions& options) {
  validate(s);
  const std::int64_t base = 2 * conv_term(s, s.c_out, s.k);
  switch (s.variant) {
    case FusionVariant::kBaseline:
      return base;
    case FusionVariant::kIVFuse: {
      if (!options.strict_ivfuse) return base;
      const std::int64_t own_k = s.own_k > 0 ? s.own_k : s.k;
      return 2 * (conv_term(s, s.c_out - s.shared_out, own_k) +
                  conv_term(s, s.shared_out, s.shared_k));
    }
    case FusionVariant::kMANet:
      return base + 2 * conv_term(s, s.c_out, s.shared_k);
    case FusionVariant::kDFNet:
      return 2 * (s.h * s.w * s.c_in + s.c_in * s.c_hidden + 2 * s.c_hidden +
                  conv_term(s, s.c_out, s.k));
  }
  throw std::logic_error("unreachable");
}

std::string format_millions(std::int64_t value) {
  return fixed2((value + 5000) / 10000) + "M";
}

std::string format_percent(std::int64_t num, std::int64_t den) {
  if (den <= 0) throw std::invalid_argument("format_percent: non-positive denominator");
  // round(num * 10000 / den), half up
  const __int128 n = num, d = den;
  const auto q = static_cast<std::int64_t>((2 * n * 10000 + d) / (2 * d));
  return fixed2(q) + "%";
}

std::string CostReport::percent() const { return format_percent(total, baseline_total); }

CostReport network_cost_report(const std::vector<LayerCostSpec>& specs,
                               const CostOptions& options) {
  if (specs.empty()) throw std::invalid_argument("network_cost_report: empty spec list");
  CostReport r;
  int layer = 1;
  for (const auto& s : specs) {
    LayerCostSpec base = s;
    base.variant = FusionVariant::kBaseline;
    CostRow row{layer++, s.variant, layer_multadds(s, options), layer_multadds(base)};
    r.total += row.multadds;
    r.baseline_total += row.baseline_multadds;
    r.rows.push_back(row);
  }
  return r;
}

std::vector<LayerCostSpec> parse_cost_specs(const std::string& json_text) {
  const auto doc = nlohmann::json::parse(json_text);
  const auto& list = doc.is_object() && doc.contains("layers") ? doc.at("layers") : doc;
  if (!list.is_array()) throw std::invalid_argument("cost spec: expected a JSON list of layers");
  std::vector<LayerCostSpec> out;
  for (const auto& e : list) {
    LayerCostSpec s;
    s.variant = parse_variant(e.at("variant").get<std::string>());
    s.h = e.at("h").get<std::int64_t>();
    s.w = e.at("w").get<std::int64_t>();
    s.c_in = e.at("c_in").get<std::int64_t>();
    s.c_out = e.at("c_out").get<std::int64_t>();
    s.k = e.at("k").get<std::int64_t>();
    s.c_hidden = e.value("c_hidden", std::int64_t{64});
    s.shared_k = e.value("shared_k", s.k);
    s.shared_out = e.value("shared_out", std::int64_t{0});
    s.own_k = e.value("own_k", std::int64_t{0});
    validate(s);
    out.push_back(s);
  }
  return out;
}

std::vector<std::vector<LayerCostSpec>> group_by_variant(const std::vector<LayerCostSpec>& specs) {
  std::vector<std::vector<LayerCostSpec>> groups;
  for (const auto& s : specs) {
    if (groups.empty() || groups.back().front().variant != s.variant) groups.emplace_back();
    groups.back().push_back(s);
  }
  return groups;
}

std::string render_cost_table(const std::vector<CostReport>& reports) {
  std::size_t layers = 0;
  for (const auto& r : reports) layers = std::max(layers, r.rows.size());
  std::ostringstream ss;
  ss << std::left << std::setw(10) << "model";
  for (std::size_t i = 0; i < layers; ++i) ss << std::right << std::setw(11) << ("C" + std::to_string(i + 1));
  ss << std::setw(12) << "total" << std::setw(10) << "percent" << '\n';
  for (const auto& r : reports) {
    ss << std::left << std::setw(10) << to_string(r.rows.front().variant);
    for (std::size_t i = 0; i < layers; ++i) {
      ss << std::right << std::setw(11) << (i < r.rows.size() ? format_millions(r.rows[i].multadds) : "-");
    }
    ss << std::setw(12) << format_millions(r.total) << std::setw(10) << r.percent() << '\n';
  }
  return ss.str();
}

std::string render_cost_csv(const std::vector<CostReport>& reports) {
  std::ostringstream ss;
  ss << "layer,variant,multadds,percent\n";
  for (const auto& r : reports) {
    const std::string variant = to_string(r.rows.front().variant);
    for (const auto& row : r.rows) {
      std::string pct = format_percent(row.multadds, row.baseline_multadds);
      pct.pop_back();
      ss << row.layer << ',' << variant << ',' << row.multadds << ',' << pct << '\n';
    }
    std::string pct = r.percent();
    pct.pop_back();
    ss << "total," << variant << ',' << r.total << ',' << pct << '\n';
  }
  return ss.str();
}

std::vector<LayerCostSpec> reference_geometry(FusionVariant variant, std::int64_t c_hidden) {
  std::vector<LayerCostSpec> specs{
      {variant, 107, 107, 3, 96, 7, c_hidden, 3, 24, 3},
      {variant, 25, 25, 96, 256, 5, c_hidden, 1, 64, 0},
      {variant, 11, 11, 256, 512, 3, c_hidden, 1, 128, 0},
  };
  if (variant == FusionVariant::kIVFuse) {
    // First layer mixes 7x7 shared with 3x3 non-shared kernels.
    specs[0].shared_k = 7;
    specs[1].shared_k = 5;
    specs[2].shared_k = 3;
  }
  return specs;
}

}  // namespace dynfuse
