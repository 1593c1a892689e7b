#pragma once

#include <cstddef>

#include "pcisr/tensor.hpp"

// Differentiable tensor operations. Every function records itself on the
// active tape when one of its inputs is tracked.
namespace pcisr {

enum class ElementwiseOp { add, sub, mul, div, relu, sigmoid, square };

// Binary kinds need equal shapes; unary kinds ignore `b`.
Tensor elementwise(ElementwiseOp op, const Tensor& a, const Tensor& b);
Tensor elementwise(ElementwiseOp op, const Tensor& a, double b);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
// Throws NumericError when any divisor is zero.
Tensor div(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, double b);
Tensor sub(const Tensor& a, double b);
Tensor mul(const Tensor& a, double b);
Tensor div(const Tensor& a, double b);
Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor square(const Tensor& a);

// Reductions use a fixed row-major sequential summation order.
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
// [n x ...] -> [...]
Tensor sum_leading(const Tensor& a);
// [...] -> [n x ...], repeating the input n times.
Tensor expand_leading(const Tensor& a, std::size_t n);
// Sum of squared differences.
Tensor squared_error(const Tensor& a, const Tensor& b);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);

// input [c_in x h x w], kernels [c_out x c_in x k x k], bias [c_out].
// Output extent is floor((h + 2*padding - k) / stride) + 1 per axis.
Tensor conv2d(const Tensor& input, const Tensor& kernels, const Tensor& bias,
              std::size_t stride = 1, std::size_t padding = 0);

// [c x h x w] -> [c x 2h x 2w], each pixel duplicated into a 2x2 block.
Tensor upsample_nearest2x(const Tensor& input);
// [c1 x h x w], [c2 x h x w] -> [(c1 + c2) x h x w]
Tensor concat_channels(const Tensor& a, const Tensor& b);

}  // namespace pcisr
