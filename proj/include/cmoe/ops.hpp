#pragma once

#include <cstdint>
#include <vector>

#include "cmoe/tensor.hpp"

namespace cmoe {

// Dense differentiable primitives. Binary ops broadcast the smaller operand
// over leading axes when its shape is a trailing suffix of the larger's
// (anything else needs an explicit reshape).

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor pow_scalar(const Tensor& x, double exponent);
Tensor add_scalar(const Tensor& x, double c);
Tensor mul_scalar(const Tensor& x, double c);
Tensor sigmoid(const Tensor& x);
Tensor silu(const Tensor& x);
Tensor clamp(const Tensor& x, double lo, double hi);

// out[i] = mask[i] ? a[i] : b[i]; the mask is discrete (no gradient path).
Tensor where(const std::vector<uint8_t>& mask, const Tensor& a, const Tensor& b);

Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);
// axis may be negative (wraps); rank 1 or 2.
Tensor sum(const Tensor& x, int axis);
Tensor mean(const Tensor& x, int axis);

Tensor matmul(const Tensor& a, const Tensor& b);

// Row selection along axis 0. idx entries must be in [0, rows).
Tensor gather_rows(const Tensor& x, const std::vector<int64_t>& idx);
// out[idx[i]] += x[i], out has num_rows rows. idx == -1 drops the row.
Tensor scatter_add_rows(const Tensor& x, const std::vector<int64_t>& idx, int64_t num_rows);

Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor slice_rows(const Tensor& x, int64_t start, int64_t len);
Tensor reshape(const Tensor& x, const Shape& shape);

// out[n,:] = x[n,:] * s[n]
Tensor scale_rows(const Tensor& x, const Tensor& s);

// Last-axis softmax (rank 1 or 2), numerically stabilised.
Tensor softmax(const Tensor& x);
// Last-axis L2 normalisation with an epsilon guard in the denominator, so a
// zero row maps to a zero row.
Tensor l2_normalize(const Tensor& x, double eps = 1e-12);

}  // namespace cmoe
