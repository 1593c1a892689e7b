#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "pcisr/cli.hpp"
#include "pcisr/finetune.hpp"
#include "pcisr/io.hpp"
#include "pcisr/metrics.hpp"
#include "pcisr/recon.hpp"
#include "pcisr/training.hpp"

namespace py = pybind11;
using namespace pcisr;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor(std::move(shape), std::vector<double>(a.data(), a.data() + a.size()));
}

Array to_array(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  Array out(shape);
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

Extent2 extent(const std::pair<std::size_t, std::size_t>& p) { return {p.first, p.second}; }
std::pair<std::size_t, std::size_t> pair(Extent2 e) { return {e.rows, e.cols}; }

MetricConfig metric_config(int bit_depth, const std::string& convention) {
  MetricConfig c;
  c.bit_depth = bit_depth;
  c.convention = parse_psnr_convention(convention);
  return c;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Parallel compressive super-resolution imaging core";

  auto base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<ShapeError>(m, "ShapeError", base.ptr());
  py::register_exception<NumericError>(m, "NumericError", base.ptr());
  py::register_exception<TapeError>(m, "TapeError", base.ptr());
  py::register_exception<FormatError>(m, "FormatError", base.ptr());
  py::register_exception<ConfigError>(m, "ConfigError", base.ptr());

  py::class_<SparseOTF>(m, "OTF")
      .def_property_readonly("detector_shape", [](const SparseOTF& o) { return pair(o.detector_shape()); })
      .def_property_readonly("dmd_shape", [](const SparseOTF& o) { return pair(o.dmd_shape()); })
      .def_property_readonly("nnz", &SparseOTF::nnz)
      .def("dense", [](const SparseOTF& o) {
        Array out({static_cast<py::ssize_t>(o.rows()), static_cast<py::ssize_t>(o.cols())});
        const auto d = o.dense();
        std::copy(d.begin(), d.end(), out.mutable_data());
        return out;
      })
      .def("__repr__", [](const SparseOTF& o) {
        return "<OTF detector " + std::to_string(o.detector_shape().rows) + "x" + std::to_string(o.detector_shape().cols) +
               ", dmd " + std::to_string(o.dmd_shape().rows) + "x" + std::to_string(o.dmd_shape().cols) + ", nnz " +
               std::to_string(o.nnz()) + ">";
      });

  m.def("make_ideal_otf", [](std::pair<std::size_t, std::size_t> dmd, std::pair<std::size_t, std::size_t> factor) {
    return make_ideal_otf(extent(dmd), extent(factor));
  }, py::arg("dmd"), py::arg("factor") = std::pair<std::size_t, std::size_t>{4, 4});
  m.def("perturb_otf", [](const SparseOTF& base_otf, double shift_y, double shift_x, double rotation, double scale,
                          double blur, double gain_jitter, std::uint64_t seed) {
    return perturb_otf(base_otf, OTFPerturbation{shift_y, shift_x, rotation, scale, blur, gain_jitter}, seed);
  }, py::arg("otf"), py::arg("shift_y") = 0.0, py::arg("shift_x") = 0.0, py::arg("rotation") = 0.0,
        py::arg("scale") = 1.0, py::arg("blur") = 0.0, py::arg("gain_jitter") = 0.0, py::arg("seed") = 0);
  m.def("load_otf", [](const std::string& p) { return load_otf(p); });
  m.def("save_otf", [](const std::string& p, const SparseOTF& o) { save_otf(p, o); });

  m.def("pci_measure", [](const SparseOTF& otf, const Array& masks, const Array& object, double sigma, bool squared,
                          std::uint64_t seed) {
    return to_array(pci_measure(otf, to_tensor(masks), to_tensor(object), NoiseConfig{sigma, squared, seed}));
  }, py::arg("otf"), py::arg("masks"), py::arg("object"), py::arg("sigma") = 0.0, py::arg("squared") = true,
        py::arg("seed") = 0);
  m.def("gi_reconstruct", [](const SparseOTF& otf, const Array& masks, const Array& frames) {
    return to_array(gi_reconstruct(otf, to_tensor(masks), to_tensor(frames)));
  }, py::arg("otf"), py::arg("masks"), py::arg("frames"));
  m.def("tv_reconstruct", [](const SparseOTF& otf, const Array& masks, const Array& frames, double lam, std::size_t max_iters) {
    TVConfig c;
    c.lambda = lam;
    c.max_iters = max_iters;
    return to_array(tv_reconstruct(otf, to_tensor(masks), to_tensor(frames), c).image);
  }, py::arg("otf"), py::arg("masks"), py::arg("frames"), py::arg("lam") = 1e-2, py::arg("max_iters") = 300);
  m.def("random_masks", [](std::size_t n, std::pair<std::size_t, std::size_t> element,
                           std::pair<std::size_t, std::size_t> size, std::uint64_t seed) {
    return to_array(MaskSet::random(n, extent(element), seed).binary(extent(size)));
  }, py::arg("n"), py::arg("element"), py::arg("size"), py::arg("seed") = 0);

  m.def("psnr", [](const Array& x, const Array& y, int bit_depth, const std::string& convention) {
    return psnr(to_tensor(x), to_tensor(y), metric_config(bit_depth, convention));
  }, py::arg("x"), py::arg("y"), py::arg("bit_depth") = 16, py::arg("convention") = "mse-normalized");
  m.def("ssim", [](const Array& x, const Array& y, int bit_depth) {
    return ssim(to_tensor(x), to_tensor(y), metric_config(bit_depth, "mse-normalized"));
  }, py::arg("x"), py::arg("y"), py::arg("bit_depth") = 16);
  m.def("render_chart", [](std::pair<std::size_t, std::size_t> size) { return to_array(render_chart(extent(size))); },
        py::arg("size") = std::pair<std::size_t, std::size_t>{32, 32});
  m.def("stripe_contrast", [](const Array& image) {
    std::vector<std::tuple<std::size_t, bool, double, bool>> out;
    for (const auto& s : stripe_resolvability(to_tensor(image)))
      out.emplace_back(s.group.period, s.group.vertical, s.contrast, s.resolved);
    return out;
  }, py::arg("image"), "(period, vertical, contrast, resolved) per stripe group of the default chart");

  m.def("make_synthetic_dataset", [](std::size_t n, std::pair<std::size_t, std::size_t> size, std::uint64_t seed) {
    const auto images = make_synthetic_dataset(n, extent(size), seed);
    Array out({static_cast<py::ssize_t>(n), static_cast<py::ssize_t>(size.first), static_cast<py::ssize_t>(size.second)});
    double* dst = out.mutable_data();
    for (const auto& img : images) dst = std::copy(img.data().begin(), img.data().end(), dst);
    return out;
  }, py::arg("n"), py::arg("size") = std::pair<std::size_t, std::size_t>{32, 32}, py::arg("seed") = 0);

  m.def("load_tensor", [](const std::string& p) { return to_array(load_tensor(p)); });
  m.def("save_tensor", [](const std::string& p, const Array& a) { save_tensor(p, to_tensor(a)); });
  m.def("read_pgm", [](const std::string& p) { return to_array(read_pgm(std::filesystem::path(p))); });
  m.def("write_pgm", [](const std::string& p, const Array& a, int bit_depth) {
    write_pgm(std::filesystem::path(p), to_tensor(a), bit_depth);
  }, py::arg("path"), py::arg("image"), py::arg("bit_depth") = 16);

  m.def("run_cli", [](const std::vector<std::string>& args) {
    std::vector<const char*> argv{"pcisr"};
    for (const auto& a : args) argv.push_back(a.c_str());
    return run_cli(static_cast<int>(argv.size()), argv.data());
  }, py::arg("args"), "Runs one `pcisr` subcommand in-process and returns its exit status");
}
