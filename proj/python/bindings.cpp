#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "dynfuse/checks.hpp"
#include "dynfuse/cli.hpp"
#include "dynfuse/cost_model.hpp"
#include "dynfuse/fusion.hpp"
#include "dynfuse/ops.hpp"
#include "dynfuse/tracker.hpp"

namespace py = pybind11;
using namespace dynfuse;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

template <class T>
T to_dense(const Array& a, const char* what) {
  if (a.ndim() != 4) throw std::invalid_argument(std::string(what) + " must be 4-dimensional");
  typename T::Shape shape{};
  for (int i = 0; i < 4; ++i) shape[static_cast<std::size_t>(i)] = static_cast<int>(a.shape(i));
  return T(shape, std::vector<double>(a.data(), a.data() + a.size()));
}

template <class T>
Array to_array(const T& t) {
  Array out({t.dim(0), t.dim(1), t.dim(2), t.dim(3)});
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

BoundingBox to_box(const std::array<double, 4>& b) { return {b[0], b[1], b[2], b[3]}; }

std::vector<BoundingBox> to_boxes(const std::vector<std::array<double, 4>>& v) {
  std::vector<BoundingBox> out;
  for (const auto& b : v) out.push_back(to_box(b));
  return out;
}

py::dict report_dict(const CostReport& r) {
  py::list rows;
  for (const auto& row : r.rows) {
    py::dict d;
    d["layer"] = row.layer;
    d["variant"] = to_string(row.variant);
    d["multadds"] = row.multadds;
    rows.append(d);
  }
  py::dict d;
  d["rows"] = rows;
  d["total"] = r.total;
  d["baseline_total"] = r.baseline_total;
  d["percent"] = r.percent();
  return d;
}

}  // namespace

PYBIND11_MODULE(_dynfuse, m) {
  m.doc() = "Two-stream dynamic fusion engine";

  m.def("conv2d", [](const Array& x, const Array& k, int stride) {
    return to_array(conv2d_forward(to_dense<Tensor>(x, "input"), to_dense<Kernel4D>(k, "kernel"), stride));
  }, py::arg("input"), py::arg("kernel"), py::arg("stride") = 1, "Valid cross-correlation, NCHW / OIHW.");

  m.def("merge_kernels", [](const Array& a, const Array& b, double alpha, double beta) {
    return to_array(merge_kernels(to_dense<Kernel4D>(a, "a"), to_dense<Kernel4D>(b, "b"), alpha, beta));
  }, py::arg("a"), py::arg("b"), py::arg("alpha"), py::arg("beta"));

  m.def("layer_multadds", [](const std::string& variant, std::int64_t h, std::int64_t w, std::int64_t c_in,
                             std::int64_t c_out, std::int64_t k, std::int64_t c_hidden, std::int64_t shared_k) {
    LayerCostSpec s;
    s.variant = parse_variant(variant);
    s.h = h;
    s.w = w;
    s.c_in = c_in;
    s.c_out = c_out;
    s.k = k;
    s.c_hidden = c_hidden;
    s.shared_k = shared_k;
    return layer_multadds(s);
  }, py::arg("variant"), py::arg("h"), py::arg("w"), py::arg("c_in"), py::arg("c_out"), py::arg("k"),
     py::arg("c_hidden") = 64, py::arg("shared_k") = 1);

  m.def("reference_cost_report", [](const std::string& variant, std::int64_t c_hidden) {
    return report_dict(network_cost_report(reference_geometry(parse_variant(variant), c_hidden)));
  }, py::arg("variant"), py::arg("c_hidden") = 64);

  m.def("format_millions", &format_millions);

  m.def("iou", [](const std::array<double, 4>& a, const std::array<double, 4>& b) {
    return iou(to_box(a), to_box(b));
  }, "IoU of two (x, y, w, h) boxes.");

  m.def("evaluate_pr_sr", [](const std::vector<std::array<double, 4>>& track,
                             const std::vector<std::array<double, 4>>& gt, double threshold) {
    const auto r = evaluate_pr_sr(to_boxes(track), to_boxes(gt), threshold);
    py::dict d;
    d["pr"] = r.pr;
    d["sr"] = r.sr;
    d["threshold"] = r.threshold;
    return d;
  }, py::arg("track"), py::arg("gt"), py::arg("threshold") = 5.0);

  m.def("gradcheck", [](std::uint64_t seed, const std::string& profile) {
    const auto cfg = profile == "tiny" ? NetworkConfig::tiny() : NetworkConfig::miniature();
    GradcheckOptions opt;
    if (profile == "tiny") opt.coords_per_tensor = 0;
    return gradcheck_network(cfg, seed, opt).max_rel_error();
  }, py::arg("seed"), py::arg("profile") = "tiny", "Largest relative finite-difference error.");

  m.def("run_cli", [](std::vector<std::string> args) {
    args.insert(args.begin(), "dynfuse");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream out, err;
    int code;
    {
      py::gil_scoped_release release;
      code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
    }
    return py::make_tuple(code, out.str(), err.str());
  }, py::arg("args"), "Runs the command-line interface in-process; returns (exit_code, stdout, stderr).");
}
