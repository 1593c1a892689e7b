#include "pcisr/ops.hpp"

#include <Eigen/Core>
#include <cmath>
#include <string>

namespace pcisr {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;
using MatrixMap = Eigen::Map<RowMatrix>;

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(what) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
}

void require_rank(const Tensor& a, std::size_t rank, const char* what) {
  if (a.ndim() != rank) {
    throw ShapeError(std::string(what) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_string(a.shape()));
  }
}

double sigmoid_scalar(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

Tensor binary_op(ElementwiseOp op, const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "elementwise");
  const auto x = a.data();
  const auto y = b.data();
  const std::size_t n = x.size();
  std::vector<double> out(n);
  switch (op) {
    case ElementwiseOp::add:
      for (std::size_t i = 0; i < n; ++i) out[i] = x[i] + y[i];
      return record_op(a.shape(), std::move(out), {a, b}, [](auto g, auto gin) {
        for (std::size_t i = 0; i < g.size(); ++i) {
          if (!gin[0].empty()) gin[0][i] += g[i];
          if (!gin[1].empty()) gin[1][i] += g[i];
        }
      });
    case ElementwiseOp::sub:
      for (std::size_t i = 0; i < n; ++i) out[i] = x[i] - y[i];
      return record_op(a.shape(), std::move(out), {a, b}, [](auto g, auto gin) {
        for (std::size_t i = 0; i < g.size(); ++i) {
          if (!gin[0].empty()) gin[0][i] += g[i];
          if (!gin[1].empty()) gin[1][i] -= g[i];
        }
      });
    case ElementwiseOp::mul:
      for (std::size_t i = 0; i < n; ++i) out[i] = x[i] * y[i];
      return record_op(a.shape(), std::move(out), {a, b}, [a, b](auto g, auto gin) {
        const auto x = a.data();
        const auto y = b.data();
        for (std::size_t i = 0; i < g.size(); ++i) {
          if (!gin[0].empty()) gin[0][i] += g[i] * y[i];
          if (!gin[1].empty()) gin[1][i] += g[i] * x[i];
        }
      });
    case ElementwiseOp::div:
      for (std::size_t i = 0; i < n; ++i) {
        if (y[i] == 0.0) throw NumericError("division by zero");
        out[i] = x[i] / y[i];
      }
      return record_op(a.shape(), std::move(out), {a, b}, [a, b](auto g, auto gin) {
        const auto x = a.data();
        const auto y = b.data();
        for (std::size_t i = 0; i < g.size(); ++i) {
          if (!gin[0].empty()) gin[0][i] += g[i] / y[i];
          if (!gin[1].empty()) gin[1][i] -= g[i] * x[i] / (y[i] * y[i]);
        }
      });
    default:
      throw ShapeError("elementwise: op kind is unary");
  }
}

Tensor unary_op(ElementwiseOp op, const Tensor& a) {
  const auto x = a.data();
  const std::size_t n = x.size();
  std::vector<double> out(n);
  switch (op) {
    case ElementwiseOp::relu:
      for (std::size_t i = 0; i < n; ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
      return record_op(a.shape(), std::move(out), {a}, [a](auto g, auto gin) {
        const auto x = a.data();
        for (std::size_t i = 0; i < g.size(); ++i) {
          if (x[i] > 0.0) gin[0][i] += g[i];
        }
      });
    case ElementwiseOp::sigmoid: {
      for (std::size_t i = 0; i < n; ++i) out[i] = sigmoid_scalar(x[i]);
      std::vector<double> saved = out;
      return record_op(a.shape(), std::move(out), {a}, [s = std::move(saved)](auto g, auto gin) {
        for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += g[i] * s[i] * (1.0 - s[i]);
      });
    }
    case ElementwiseOp::square:
      for (std::size_t i = 0; i < n; ++i) out[i] = x[i] * x[i];
      return record_op(a.shape(), std::move(out), {a}, [a](auto g, auto gin) {
        const auto x = a.data();
        for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += 2.0 * x[i] * g[i];
      });
    default:
      throw ShapeError("elementwise: op kind is binary");
  }
}

bool is_unary(ElementwiseOp op) {
  return op == ElementwiseOp::relu || op == ElementwiseOp::sigmoid || op == ElementwiseOp::square;
}

}  // namespace

Tensor elementwise(ElementwiseOp op, const Tensor& a, const Tensor& b) {
  if (is_unary(op)) return unary_op(op, a);
  return binary_op(op, a, b);
}

Tensor elementwise(ElementwiseOp op, const Tensor& a, double b) {
  if (is_unary(op)) return unary_op(op, a);
  const auto x = a.data();
  std::vector<double> out(x.size());
  double scale = 1.0;
  switch (op) {
    case ElementwiseOp::add:
      for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + b;
      break;
    case ElementwiseOp::sub:
      for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] - b;
      break;
    case ElementwiseOp::mul:
      for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * b;
      scale = b;
      break;
    case ElementwiseOp::div:
      if (b == 0.0) throw NumericError("division by zero");
      for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] / b;
      scale = 1.0 / b;
      break;
    default:
      break;
  }
  const bool is_div = op == ElementwiseOp::div;
  return record_op(a.shape(), std::move(out), {a}, [scale, is_div, b](auto g, auto gin) {
    for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += is_div ? g[i] / b : g[i] * scale;
  });
}

Tensor add(const Tensor& a, const Tensor& b) { return elementwise(ElementwiseOp::add, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return elementwise(ElementwiseOp::sub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return elementwise(ElementwiseOp::mul, a, b); }
Tensor div(const Tensor& a, const Tensor& b) { return elementwise(ElementwiseOp::div, a, b); }
Tensor add(const Tensor& a, double b) { return elementwise(ElementwiseOp::add, a, b); }
Tensor sub(const Tensor& a, double b) { return elementwise(ElementwiseOp::sub, a, b); }
Tensor mul(const Tensor& a, double b) { return elementwise(ElementwiseOp::mul, a, b); }
Tensor div(const Tensor& a, double b) { return elementwise(ElementwiseOp::div, a, b); }
Tensor relu(const Tensor& a) { return unary_op(ElementwiseOp::relu, a); }
Tensor sigmoid(const Tensor& a) { return unary_op(ElementwiseOp::sigmoid, a); }
Tensor square(const Tensor& a) { return unary_op(ElementwiseOp::square, a); }

Tensor sum(const Tensor& a) {
  double total = 0.0;
  for (double v : a.data()) total += v;
  return record_op(Shape{}, {total}, {a}, [](auto g, auto gin) {
    for (auto& v : gin[0]) v += g[0];
  });
}

Tensor mean(const Tensor& a) { return div(sum(a), static_cast<double>(a.numel())); }

Tensor sum_leading(const Tensor& a) {
  if (a.ndim() < 1) throw ShapeError("sum_leading needs rank >= 1");
  Shape rest(a.shape().begin() + 1, a.shape().end());
  const std::size_t n = a.extent(0);
  const std::size_t inner = shape_numel(rest);
  const auto x = a.data();
  std::vector<double> out(inner, 0.0);
  for (std::size_t k = 0; k < n; ++k) {
    for (std::size_t i = 0; i < inner; ++i) out[i] += x[k * inner + i];
  }
  return record_op(std::move(rest), std::move(out), {a}, [n, inner](auto g, auto gin) {
    for (std::size_t k = 0; k < n; ++k) {
      for (std::size_t i = 0; i < inner; ++i) gin[0][k * inner + i] += g[i];
    }
  });
}

Tensor expand_leading(const Tensor& a, std::size_t n) {
  if (n == 0) throw ShapeError("expand_leading needs n >= 1");
  Shape shape{n};
  shape.insert(shape.end(), a.shape().begin(), a.shape().end());
  const std::size_t inner = a.numel();
  std::vector<double> out;
  out.reserve(n * inner);
  for (std::size_t k = 0; k < n; ++k) out.insert(out.end(), a.data().begin(), a.data().end());
  return record_op(std::move(shape), std::move(out), {a}, [n, inner](auto g, auto gin) {
    for (std::size_t k = 0; k < n; ++k) {
      for (std::size_t i = 0; i < inner; ++i) gin[0][i] += g[k * inner + i];
    }
  });
}

Tensor squared_error(const Tensor& a, const Tensor& b) { return sum(square(sub(a, b))); }

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t m = a.extent(0), k = a.extent(1), n = b.extent(1);
  if (b.extent(0) != k) {
    throw ShapeError("matmul: inner dimensions disagree " + shape_string(a.shape()) + " * " +
                     shape_string(b.shape()));
  }
  std::vector<double> out(m * n);
  MatrixMap(out.data(), m, n).noalias() =
      ConstMatrixMap(a.data().data(), m, k) * ConstMatrixMap(b.data().data(), k, n);
  return record_op(Shape{m, n}, std::move(out), {a, b}, [a, b, m, k, n](auto g, auto gin) {
    ConstMatrixMap gm(g.data(), m, n);
    if (!gin[0].empty()) {
      MatrixMap(gin[0].data(), m, k).noalias() += gm * ConstMatrixMap(b.data().data(), k, n).transpose();
    }
    if (!gin[1].empty()) {
      MatrixMap(gin[1].data(), k, n).noalias() += ConstMatrixMap(a.data().data(), m, k).transpose() * gm;
    }
  });
}

Tensor transpose(const Tensor& a) {
  require_rank(a, 2, "transpose");
  const std::size_t r = a.extent(0), c = a.extent(1);
  const auto x = a.data();
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = x[i * c + j];
  }
  return record_op(Shape{c, r}, std::move(out), {a}, [r, c](auto g, auto gin) {
    for (std::size_t i = 0; i < r; ++i) {
      for (std::size_t j = 0; j < c; ++j) gin[0][i * c + j] += g[j * r + i];
    }
  });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw ShapeError("reshape: cannot view " + shape_string(a.shape()) + " as " + shape_string(shape));
  }
  return record_op(std::move(shape), a.to_vector(), {a}, [](auto g, auto gin) {
    for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += g[i];
  });
}

namespace {

struct ConvGeometry {
  std::size_t c_in, h, w, c_out, k, stride, padding, h_out, w_out;
  std::size_t patch() const { return c_in * k * k; }
  std::size_t pixels() const { return h_out * w_out; }
};

void im2col(const ConvGeometry& g, const double* in, double* cols) {
  const std::size_t np = g.pixels();
  for (std::size_t c = 0; c < g.c_in; ++c) {
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        double* row = cols + ((c * g.k + ky) * g.k + kx) * np;
        for (std::size_t oy = 0; oy < g.h_out; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.padding);
          double* dst = row + oy * g.w_out;
          if (iy < 0 || iy >= static_cast<long>(g.h)) {
            for (std::size_t ox = 0; ox < g.w_out; ++ox) dst[ox] = 0.0;
            continue;
          }
          const double* src = in + (c * g.h + static_cast<std::size_t>(iy)) * g.w;
          for (std::size_t ox = 0; ox < g.w_out; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.padding);
            dst[ox] = (ix < 0 || ix >= static_cast<long>(g.w)) ? 0.0 : src[ix];
          }
        }
      }
    }
  }
}

void col2im_add(const ConvGeometry& g, const double* cols, double* in) {
  const std::size_t np = g.pixels();
  for (std::size_t c = 0; c < g.c_in; ++c) {
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        const double* row = cols + ((c * g.k + ky) * g.k + kx) * np;
        for (std::size_t oy = 0; oy < g.h_out; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.padding);
          if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
          double* dst = in + (c * g.h + static_cast<std::size_t>(iy)) * g.w;
          const double* src = row + oy * g.w_out;
          for (std::size_t ox = 0; ox < g.w_out; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.padding);
            if (ix >= 0 && ix < static_cast<long>(g.w)) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& kernels, const Tensor& bias, std::size_t stride,
              std::size_t padding) {
  require_rank(input, 3, "conv2d input");
  require_rank(kernels, 4, "conv2d kernels");
  require_rank(bias, 1, "conv2d bias");
  ConvGeometry g{};
  g.c_in = input.extent(0);
  g.h = input.extent(1);
  g.w = input.extent(2);
  g.c_out = kernels.extent(0);
  g.k = kernels.extent(2);
  g.stride = stride;
  g.padding = padding;
  if (kernels.extent(1) != g.c_in || kernels.extent(3) != g.k) {
    throw ShapeError("conv2d: kernels " + shape_string(kernels.shape()) + " incompatible with input " +
                     shape_string(input.shape()));
  }
  if (g.k % 2 == 0) throw ShapeError("conv2d: kernel size must be odd");
  if (bias.extent(0) != g.c_out) throw ShapeError("conv2d: bias length must equal output channels");
  if (stride == 0) throw ShapeError("conv2d: stride must be positive");
  if (g.h + 2 * padding < g.k || g.w + 2 * padding < g.k) {
    throw ShapeError("conv2d: kernel larger than padded input " + shape_string(input.shape()));
  }
  g.h_out = (g.h + 2 * padding - g.k) / stride + 1;
  g.w_out = (g.w + 2 * padding - g.k) / stride + 1;

  std::vector<double> cols(g.patch() * g.pixels());
  im2col(g, input.data().data(), cols.data());
  std::vector<double> out(g.c_out * g.pixels());
  MatrixMap om(out.data(), g.c_out, g.pixels());
  om.noalias() = ConstMatrixMap(kernels.data().data(), g.c_out, g.patch()) *
                 ConstMatrixMap(cols.data(), g.patch(), g.pixels());
  const auto b = bias.data();
  for (std::size_t o = 0; o < g.c_out; ++o) om.row(o).array() += b[o];

  return record_op(
      Shape{g.c_out, g.h_out, g.w_out}, std::move(out), {input, kernels, bias},
      [g, kernels, cols = std::move(cols)](auto grad, auto gin) {
        ConstMatrixMap gm(grad.data(), g.c_out, g.pixels());
        if (!gin[1].empty()) {
          MatrixMap(gin[1].data(), g.c_out, g.patch()).noalias() +=
              gm * ConstMatrixMap(cols.data(), g.patch(), g.pixels()).transpose();
        }
        if (!gin[2].empty()) {
          for (std::size_t o = 0; o < g.c_out; ++o) {
            double acc = 0.0;
            for (std::size_t i = 0; i < g.pixels(); ++i) acc += grad[o * g.pixels() + i];
            gin[2][o] += acc;
          }
        }
        if (!gin[0].empty()) {
          RowMatrix gcols(g.patch(), g.pixels());
          gcols.noalias() = ConstMatrixMap(kernels.data().data(), g.c_out, g.patch()).transpose() * gm;
          col2im_add(g, gcols.data(), gin[0].data());
        }
      });
}

Tensor upsample_nearest2x(const Tensor& input) {
  require_rank(input, 3, "upsample_nearest2x");
  const std::size_t c = input.extent(0), h = input.extent(1), w = input.extent(2);
  const auto x = input.data();
  std::vector<double> out(c * 4 * h * w);
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t y = 0; y < 2 * h; ++y) {
      for (std::size_t xx = 0; xx < 2 * w; ++xx) {
        out[(ch * 2 * h + y) * 2 * w + xx] = x[(ch * h + y / 2) * w + xx / 2];
      }
    }
  }
  return record_op(Shape{c, 2 * h, 2 * w}, std::move(out), {input}, [c, h, w](auto g, auto gin) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t y = 0; y < 2 * h; ++y) {
        for (std::size_t xx = 0; xx < 2 * w; ++xx) {
          gin[0][(ch * h + y / 2) * w + xx / 2] += g[(ch * 2 * h + y) * 2 * w + xx];
        }
      }
    }
  });
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  require_rank(a, 3, "concat_channels");
  require_rank(b, 3, "concat_channels");
  if (a.extent(1) != b.extent(1) || a.extent(2) != b.extent(2)) {
    throw ShapeError("concat_channels: spatial extents differ " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
  const std::size_t na = a.numel();
  std::vector<double> out;
  out.reserve(na + b.numel());
  out.insert(out.end(), a.data().begin(), a.data().end());
  out.insert(out.end(), b.data().begin(), b.data().end());
  Shape shape{a.extent(0) + b.extent(0), a.extent(1), a.extent(2)};
  return record_op(std::move(shape), std::move(out), {a, b}, [na](auto g, auto gin) {
    if (!gin[0].empty()) {
      for (std::size_t i = 0; i < na; ++i) gin[0][i] += g[i];
    }
    if (!gin[1].empty()) {
      for (std::size_t i = 0; i < gin[1].size(); ++i) gin[1][i] += g[na + i];
    }
  });
}

}  // namespace pcisr
