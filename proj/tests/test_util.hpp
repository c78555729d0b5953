#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "cmoe/ops.hpp"
#include "cmoe/rng.hpp"
#include "cmoe/tensor.hpp"

namespace cmoe::testutil {

inline Tensor random_tensor(Rng& rng, const Shape& shape, bool requires_grad = true,
                            double scale = 1.0) {
  Tensor t = Tensor::zeros(shape, requires_grad);
  for (double& v : t.data()) v = rng.gaussian() * scale;
  return t;
}

// Normwise relative error with a floor, so near-zero gradients compare on
// finite-difference noise rather than blowing up.
inline double rel_err(const std::vector<double>& a, const std::vector<double>& b) {
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double denom = std::max({std::sqrt(na), std::sqrt(nb), 1e-6});
  return std::sqrt(diff) / denom;
}

// Runs f to build a fresh scalar graph from x, backprops, and compares the
// autodiff gradient against central finite differences.
inline double gradcheck(const std::function<Tensor(const Tensor&)>& f, Tensor x,
                        double h = 1e-5) {
  PrecisionScope prec(Precision::f64);
  x.set_requires_grad(true);
  x.zero_grad();
  Tensor loss = f(x);
  backward(loss);
  Tensor fd = finite_diff_grad(
      [&](const Tensor& probe) {
        NoGradScope ng;
        return f(probe).value();
      },
      x, h);
  return rel_err(x.grad(), fd.data());
}

}  // namespace cmoe::testutil
