#include <doctest.h>

#include "helpers.hpp"
#include "pcisr/ops.hpp"
#include "pcisr/optim.hpp"

using namespace pcisr;

namespace {

void accumulate(const std::vector<Tensor>& params, const std::function<Tensor()>& loss) {
  Tape tape;
  Tensor l;
  {
    TapeScope scope(tape);
    l = loss();
  }
  tape.backward(l);
}

}  // namespace

TEST_SUITE("optim") {

TEST_CASE("Adam steps follow the bias-corrected recursion") {
  const std::vector<double> start{0.5, -1.0, 2.0};
  const std::vector<double> target{1.0, 1.0, -1.0};
  Tensor x(Shape{3}, start, true);
  const Tensor c(Shape{3}, target);
  AdamConfig cfg;
  cfg.learning_rate = 0.1;
  Adam opt({x}, cfg);

  // Reference recursion in plain doubles.
  std::vector<double> w = start, m(3, 0.0), v(3, 0.0);
  for (int t = 1; t <= 5; ++t) {
    opt.zero_grad();
    accumulate({x}, [&] { return sum(square(sub(x, c))); });
    opt.step();
    for (std::size_t i = 0; i < 3; ++i) {
      const double g = 2.0 * (w[i] - target[i]);
      m[i] = 0.9 * m[i] + 0.1 * g;
      v[i] = 0.999 * v[i] + 0.001 * g * g;
      const double mh = m[i] / (1.0 - std::pow(0.9, t)), vh = v[i] / (1.0 - std::pow(0.999, t));
      w[i] -= 0.1 * mh / (std::sqrt(vh) + 1e-8);
    }
    for (std::size_t i = 0; i < 3; ++i) CHECK(testing::rel_err(x[i], w[i]) <= 1e-14);
  }
  CHECK(opt.steps() == 5);
}

TEST_CASE("first Adam step moves every coordinate by the learning rate") {
  Tensor x(Shape{2}, {3.0, -7.0}, true);
  AdamConfig cfg;
  Adam opt({x}, cfg);
  accumulate({x}, [&] { return sum(mul(x, Tensor(Shape{2}, {5.0, -0.01}))); });
  opt.step();
  CHECK(x[0] == doctest::Approx(3.0 - 2e-4).epsilon(1e-9));
  CHECK(x[1] == doctest::Approx(-7.0 + 2e-4).epsilon(1e-9));
}

TEST_CASE("zero learning rate and missing gradients leave parameters untouched") {
  Tensor a(Shape{2}, {1.0, 2.0}, true), b(Shape{2}, {3.0, 4.0}, true);
  AdamConfig zero;
  zero.learning_rate = 0.0;
  Adam opt({a, b}, zero);
  accumulate({a}, [&] { return sum(square(a)); });
  opt.step();
  CHECK(a.to_vector() == std::vector<double>{1.0, 2.0});
  Adam opt2({a, b}, AdamConfig{});
  accumulate({a}, [&] { return sum(square(a)); });
  opt2.step();
  CHECK(a.to_vector() != std::vector<double>{1.0, 2.0});
  CHECK(b.to_vector() == std::vector<double>{3.0, 4.0});
}

TEST_CASE("invalid configurations are rejected") {
  AdamConfig bad;
  bad.learning_rate = -1;
  CHECK_THROWS_AS(Adam({}, bad), ConfigError);
  bad = {};
  bad.beta1 = 1.0;
  CHECK_THROWS_AS(Adam({}, bad), ConfigError);
  bad = {};
  bad.epsilon = 0.0;
  CHECK_THROWS_AS(Adam({}, bad), ConfigError);
}

}  // TEST_SUITE
