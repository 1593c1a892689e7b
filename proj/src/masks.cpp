#include "pcisr/masks.hpp"

#include <cmath>
#include <fstream>
#include <random>
#include <string>

#include "pcisr/io.hpp"

namespace pcisr {

Tensor tile(const Tensor& element, Extent2 size) {
  if (element.ndim() != 2 && element.ndim() != 3) {
    throw ShapeError("tile: expected [fy x fx] or [N x fy x fx], got " + shape_string(element.shape()));
  }
  if (size.count() == 0) throw ShapeError("tile: target extents must be positive");
  const bool batched = element.ndim() == 3;
  const std::size_t n = batched ? element.extent(0) : 1;
  const std::size_t fy = element.extent(batched ? 1 : 0);
  const std::size_t fx = element.extent(batched ? 2 : 1);
  const auto e = element.data();
  std::vector<double> out(n * size.count());
  for (std::size_t m = 0; m < n; ++m) {
    for (std::size_t y = 0; y < size.rows; ++y) {
      for (std::size_t x = 0; x < size.cols; ++x) {
        out[(m * size.rows + y) * size.cols + x] = e[(m * fy + y % fy) * fx + x % fx];
      }
    }
  }
  Shape shape = batched ? Shape{n, size.rows, size.cols} : Shape{size.rows, size.cols};
  return record_op(std::move(shape), std::move(out), {element}, [n, fy, fx, size](auto g, auto gin) {
    for (std::size_t m = 0; m < n; ++m) {
      for (std::size_t y = 0; y < size.rows; ++y) {
        for (std::size_t x = 0; x < size.cols; ++x) {
          gin[0][(m * fy + y % fy) * fx + x % fx] += g[(m * size.rows + y) * size.cols + x];
        }
      }
    }
  });
}

namespace {

double sigmoid_scalar(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

Tensor binarize_st(const Tensor& logits) {
  const auto x = logits.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = sigmoid_scalar(x[i]) >= 0.5 ? 1.0 : 0.0;
  return record_op(logits.shape(), std::move(out), {logits}, [logits](auto g, auto gin) {
    const auto x = logits.data();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double s = sigmoid_scalar(x[i]);
      gin[0][i] += g[i] * s * (1.0 - s);
    }
  });
}

MaskSet::MaskSet(Tensor element_logits) : logits_(std::move(element_logits)) {
  if (logits_.ndim() != 3) {
    throw ShapeError("mask logits must be [N x fy x fx], got " + shape_string(logits_.shape()));
  }
}

MaskSet MaskSet::random(std::size_t n_masks, Extent2 element, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> uniform(-0.5, 0.5);
  std::vector<double> logits(n_masks * element.count());
  for (auto& v : logits) v = uniform(rng);
  return MaskSet(Tensor(Shape{n_masks, element.rows, element.cols}, std::move(logits), true));
}

MaskSet MaskSet::from_binary_elements(const Tensor& elements) {
  if (elements.ndim() != 3) throw ShapeError("binary elements must be [N x fy x fx]");
  std::vector<double> logits(elements.numel());
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double v = elements[i];
    if (v != 0.0 && v != 1.0) throw FormatError("mask elements must be binary");
    logits[i] = v == 1.0 ? 1.0 : -1.0;
  }
  return MaskSet(Tensor(elements.shape(), std::move(logits), true));
}

Tensor MaskSet::binary_elements() const {
  NoGradScope no_grad;
  return binarize_st(logits_).detach();
}

Tensor MaskSet::realize(Extent2 size) const { return tile(binarize_st(logits_), size); }

Tensor MaskSet::binary(Extent2 size) const {
  NoGradScope no_grad;
  return tile(binary_elements(), size).detach();
}

void export_masks(const std::filesystem::path& path, const MaskSet& masks, Extent2 size) {
  save_tensor(path, masks.binary(size));
}

MaskSet load_masks(const std::filesystem::path& path, Extent2 element) {
  const Tensor stack = load_tensor(path);
  if (stack.ndim() != 3) throw FormatError("mask file must hold an [N x P x Q] stack");
  const std::size_t n = stack.extent(0), rows = stack.extent(1), cols = stack.extent(2);
  if (element.rows == 0 || element.cols == 0 || element.rows > rows || element.cols > cols) {
    throw FormatError("mask element shape does not fit the stored masks");
  }
  std::vector<double> elements(n * element.count());
  for (std::size_t m = 0; m < n; ++m) {
    for (std::size_t y = 0; y < rows; ++y) {
      for (std::size_t x = 0; x < cols; ++x) {
        const double v = stack[(m * rows + y) * cols + x];
        if (v != 0.0 && v != 1.0) throw FormatError("mask values must be 0 or 1 in " + path.string());
        const std::size_t e = (m * element.rows + y % element.rows) * element.cols + x % element.cols;
        if (y < element.rows && x < element.cols) {
          elements[e] = v;
        } else if (elements[e] != v) {
          throw FormatError("masks in " + path.string() + " are not periodic with the element shape");
        }
      }
    }
  }
  return MaskSet::from_binary_elements(Tensor(Shape{n, element.rows, element.cols}, std::move(elements)));
}

void write_pbm(const std::filesystem::path& path, const Tensor& masks) {
  if (masks.ndim() != 3) throw ShapeError("write_pbm expects an [N x P x Q] stack");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  const std::size_t n = masks.extent(0), rows = masks.extent(1), cols = masks.extent(2);
  for (std::size_t m = 0; m < n; ++m) {
    out << "P4\n" << cols << ' ' << rows << '\n';
    for (std::size_t y = 0; y < rows; ++y) {
      for (std::size_t x0 = 0; x0 < cols; x0 += 8) {
        unsigned char byte = 0;
        for (std::size_t b = 0; b < 8 && x0 + b < cols; ++b) {
          const double v = masks[(m * rows + y) * cols + x0 + b];
          if (v != 0.0 && v != 1.0) throw FormatError("write_pbm: mask values must be binary");
          if (v == 1.0) byte |= static_cast<unsigned char>(0x80u >> b);
        }
        out.put(static_cast<char>(byte));
      }
    }
  }
  if (!out) throw FormatError("failed writing " + path.string());
}

Tensor read_pbm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::vector<double> data;
  std::size_t n = 0, rows = 0, cols = 0;
  while (in.peek() != std::char_traits<char>::eof()) {
    std::string magic;
    std::size_t w = 0, h = 0;
    in >> magic >> w >> h;
    if (!in || magic != "P4" || w == 0 || h == 0) throw FormatError("malformed PBM header in " + path.string());
    in.get();
    if (n > 0 && (w != cols || h != rows)) throw FormatError("PBM images in " + path.string() + " differ in size");
    rows = h;
    cols = w;
    for (std::size_t y = 0; y < rows; ++y) {
      for (std::size_t x0 = 0; x0 < cols; x0 += 8) {
        const auto byte = binary::get_u8(in);
        for (std::size_t b = 0; b < 8 && x0 + b < cols; ++b) data.push_back((byte & (0x80u >> b)) ? 1.0 : 0.0);
      }
    }
    ++n;
  }
  if (n == 0) throw FormatError("empty PBM file " + path.string());
  return Tensor(Shape{n, rows, cols}, std::move(data));
}

}  // namespace pcisr
