#include <doctest.h>

#include <cmath>

#include "cmoe/ops.hpp"
#include "cmoe/rng.hpp"
#include "cmoe/tensor.hpp"
#include "test_util.hpp"

using namespace cmoe;
using testutil::random_tensor;
using testutil::rel_err;

TEST_CASE("backward: sum of squares") {
  PrecisionScope prec(Precision::f64);
  Tensor x = Tensor::from({3}, {1, 2, 3}, true);
  Tensor loss = sum_all(mul(x, x));
  backward(loss);
  CHECK(x.grad()[0] == doctest::Approx(2));
  CHECK(x.grad()[1] == doctest::Approx(4));
  CHECK(x.grad()[2] == doctest::Approx(6));
}

TEST_CASE("backward: softmax sums to one, so its sum has zero gradient") {
  PrecisionScope prec(Precision::f64);
  Tensor x = Tensor::from({4}, {0.3, -1.2, 2.0, 0.0}, true);
  Tensor loss = sum_all(softmax(x));
  backward(loss);
  for (double g : x.grad()) CHECK(std::abs(g) < 1e-12);
}

TEST_CASE("backward: composite graph matches finite differences") {
  Rng rng(7);
  for (int trial = 0; trial < 5; ++trial) {
    Tensor x = random_tensor(rng, {3, 4});
    double err = testutil::gradcheck(
        [](const Tensor& t) {
          Tensor a = silu(t);
          Tensor b = softmax(add(a, mul_scalar(t, 0.5)));
          Tensor c = l2_normalize(mul(b, exp(mul_scalar(t, 0.1))));
          return mean_all(mul(c, c));
        },
        x);
    CHECK(err < 1e-3);
  }
}

TEST_CASE("backward rejects non-scalar roots and repeated calls") {
  PrecisionScope prec(Precision::f64);
  Tensor x = Tensor::from({2}, {1, 2}, true);
  Tensor y = mul(x, x);
  CHECK_THROWS_AS(backward(y), std::invalid_argument);
  Tensor loss = sum_all(y);
  backward(loss);
  CHECK_THROWS_AS(backward(loss), std::runtime_error);
}

TEST_CASE("finite_diff_grad on analytic cases") {
  PrecisionScope prec(Precision::f64);
  Tensor x = Tensor::from({2}, {1, 2});
  Tensor g = finite_diff_grad(
      [](const Tensor& t) { return t.at(0) * t.at(0) + t.at(1) * t.at(1); }, x);
  CHECK(g.at(0) == doctest::Approx(2).epsilon(1e-6));
  CHECK(g.at(1) == doctest::Approx(4).epsilon(1e-6));

  Tensor gc = finite_diff_grad([](const Tensor&) { return 3.14; }, x);
  CHECK(gc.at(0) == 0.0);
  CHECK(gc.at(1) == 0.0);
}

TEST_CASE("precision toggle rounds forward buffers to f32") {
  const double v = 0.1;  // not representable in f32
  {
    PrecisionScope prec(Precision::f32);
    Tensor t = Tensor::from({1}, {v});
    CHECK(t.value() == static_cast<double>(static_cast<float>(v)));
  }
  {
    PrecisionScope prec(Precision::f64);
    Tensor t = Tensor::from({1}, {v});
    CHECK(t.value() == v);
  }
}

TEST_CASE("grad does not flow through detach") {
  PrecisionScope prec(Precision::f64);
  Tensor x = Tensor::from({2}, {1.0, -2.0}, true);
  Tensor loss = sum_all(mul(x.detach(), x));
  backward(loss);
  CHECK(x.grad()[0] == doctest::Approx(1.0));
  CHECK(x.grad()[1] == doctest::Approx(-2.0));
}

TEST_CASE("shape errors name the operation and both shapes") {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({4, 2});
  try {
    matmul(a, b);
    FAIL("expected throw");
  } catch (const std::invalid_argument& e) {
    std::string msg = e.what();
    CHECK(msg.find("matmul") != std::string::npos);
    CHECK(msg.find("[2,3]") != std::string::npos);
    CHECK(msg.find("[4,2]") != std::string::npos);
  }
}
