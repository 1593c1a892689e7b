#pragma once

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "pcisr/tensor.hpp"

namespace testing {

inline pcisr::Tensor random_tensor(pcisr::Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0,
                                   bool requires_grad = false) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(pcisr::shape_numel(shape));
  for (auto& x : v) x = u(rng);
  return pcisr::Tensor(std::move(shape), std::move(v), requires_grad);
}

inline double rel_err(double a, double b, double floor = 1e-12) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

// Central differences of a scalar function w.r.t. entry k of input j.
inline double central_difference(const std::function<double(const std::vector<pcisr::Tensor>&)>& f,
                                 const std::vector<pcisr::Tensor>& inputs, std::size_t j, std::size_t k, double h) {
  std::vector<pcisr::Tensor> plus, minus;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    plus.push_back(inputs[i].detach());
    minus.push_back(inputs[i].detach());
  }
  plus[j].mutable_data()[k] += h;
  minus[j].mutable_data()[k] -= h;
  return (f(plus) - f(minus)) / (2.0 * h);
}

// Worst relative error between reverse-mode and central-difference
// gradients over every entry of every input. `floor` bounds the denominator
// for entries whose gradient is near zero.
inline double gradient_check(const std::function<pcisr::Tensor(const std::vector<pcisr::Tensor>&)>& f,
                             const std::vector<pcisr::Tensor>& inputs, double h = 1e-5, double floor = 1e-6) {
  std::vector<pcisr::Tensor> tracked;
  for (const auto& t : inputs) tracked.push_back(t.clone(true));
  const auto vg = pcisr::value_and_grad(f, tracked);
  auto scalar = [&](const std::vector<pcisr::Tensor>& xs) {
    pcisr::NoGradScope no_grad;
    return f(xs).item();
  };
  double worst = 0.0;
  for (std::size_t j = 0; j < inputs.size(); ++j) {
    for (std::size_t k = 0; k < inputs[j].numel(); ++k) {
      const double fd = central_difference(scalar, inputs, j, k, h);
      worst = std::max(worst, rel_err(vg.grads[j][k], fd, floor));
    }
  }
  return worst;
}

inline std::vector<double> values(const pcisr::Tensor& t) { return t.to_vector(); }

}  // namespace testing
