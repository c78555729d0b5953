#include "cmoe/ops.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace cmoe {

namespace {

// Suffix broadcast: returns the output shape, throws when neither operand's
// shape is a trailing suffix of the other's.
Shape broadcast_shape(const char* op, const Shape& a, const Shape& b) {
  const bool a_big = numel_of(a) >= numel_of(b);
  const Shape& big = a_big ? a : b;
  const Shape& small = a_big ? b : a;
  if (numel_of(small) == 1) return big;  // scalar against anything
  if (small.size() > big.size()) fail_shape(op, a, b);
  const size_t off = big.size() - small.size();
  for (size_t i = 0; i < small.size(); ++i) {
    if (small[i] != big[off + i]) fail_shape(op, a, b);
  }
  return big;
}

inline bool grad_wanted(const TensorNode& n) { return n.requires_grad; }

}  // namespace

#define CMOE_BINARY_LOOP(expr)                                   \
  const auto& A = a.data();                                      \
  const auto& B = b.data();                                      \
  const size_t an = A.size(), bn = B.size();                     \
  const size_t n = std::max(an, bn);                             \
  std::vector<double> out(n);                                    \
  for (size_t i = 0; i < n; ++i) {                               \
    const double av = A[i % an];                                 \
    const double bv = B[i % bn];                                 \
    out[i] = (expr);                                             \
  }

Tensor add(const Tensor& a, const Tensor& b) {
  Shape os = broadcast_shape("add", a.shape(), b.shape());
  CMOE_BINARY_LOOP(av + bv)
  return make_result(std::move(os), std::move(out), {a, b}, [](TensorNode& self) {
    TensorNode& pa = *self.parents[0];
    TensorNode& pb = *self.parents[1];
    const size_t n = self.grad.size();
    if (grad_wanted(pa)) {
      pa.ensure_grad();
      const size_t an = pa.data.size();
      for (size_t i = 0; i < n; ++i) pa.grad[i % an] += self.grad[i];
    }
    if (grad_wanted(pb)) {
      pb.ensure_grad();
      const size_t bn = pb.data.size();
      for (size_t i = 0; i < n; ++i) pb.grad[i % bn] += self.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  Shape os = broadcast_shape("sub", a.shape(), b.shape());
  CMOE_BINARY_LOOP(av - bv)
  return make_result(std::move(os), std::move(out), {a, b}, [](TensorNode& self) {
    TensorNode& pa = *self.parents[0];
    TensorNode& pb = *self.parents[1];
    const size_t n = self.grad.size();
    if (grad_wanted(pa)) {
      pa.ensure_grad();
      const size_t an = pa.data.size();
      for (size_t i = 0; i < n; ++i) pa.grad[i % an] += self.grad[i];
    }
    if (grad_wanted(pb)) {
      pb.ensure_grad();
      const size_t bn = pb.data.size();
      for (size_t i = 0; i < n; ++i) pb.grad[i % bn] -= self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  Shape os = broadcast_shape("mul", a.shape(), b.shape());
  CMOE_BINARY_LOOP(av * bv)
  return make_result(std::move(os), std::move(out), {a, b}, [](TensorNode& self) {
    TensorNode& pa = *self.parents[0];
    TensorNode& pb = *self.parents[1];
    const size_t n = self.grad.size();
    const size_t an = pa.data.size(), bn = pb.data.size();
    if (grad_wanted(pa)) {
      pa.ensure_grad();
      for (size_t i = 0; i < n; ++i) pa.grad[i % an] += self.grad[i] * pb.data[i % bn];
    }
    if (grad_wanted(pb)) {
      pb.ensure_grad();
      for (size_t i = 0; i < n; ++i) pb.grad[i % bn] += self.grad[i] * pa.data[i % an];
    }
  });
}

Tensor div(const Tensor& a, const Tensor& b) {
  Shape os = broadcast_shape("div", a.shape(), b.shape());
  CMOE_BINARY_LOOP(av / bv)
  return make_result(std::move(os), std::move(out), {a, b}, [](TensorNode& self) {
    TensorNode& pa = *self.parents[0];
    TensorNode& pb = *self.parents[1];
    const size_t n = self.grad.size();
    const size_t an = pa.data.size(), bn = pb.data.size();
    if (grad_wanted(pa)) {
      pa.ensure_grad();
      for (size_t i = 0; i < n; ++i) pa.grad[i % an] += self.grad[i] / pb.data[i % bn];
    }
    if (grad_wanted(pb)) {
      pb.ensure_grad();
      for (size_t i = 0; i < n; ++i) {
        const double bv = pb.data[i % bn];
        pb.grad[i % bn] -= self.grad[i] * pa.data[i % an] / (bv * bv);
      }
    }
  });
}

#undef CMOE_BINARY_LOOP

namespace {

template <class Fwd, class Bwd>
Tensor unary_op(const Tensor& x, Fwd fwd, Bwd bwd) {
  std::vector<double> out(x.data().size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = fwd(x.data()[i]);
  return make_result(x.shape(), std::move(out), {x}, [bwd](TensorNode& self) {
    TensorNode& p = *self.parents[0];
    if (!grad_wanted(p)) return;
    p.ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i)
      p.grad[i] += self.grad[i] * bwd(p.data[i], self.data[i]);
  });
}

}  // namespace

Tensor neg(const Tensor& x) {
  return unary_op(
      x, [](double v) { return -v; }, [](double, double) { return -1.0; });
}

Tensor exp(const Tensor& x) {
  return unary_op(
      x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
  return unary_op(
      x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor pow_scalar(const Tensor& x, double e) {
  return unary_op(
      x, [e](double v) { return std::pow(v, e); },
      [e](double v, double) { return e * std::pow(v, e - 1.0); });
}

Tensor add_scalar(const Tensor& x, double c) {
  return unary_op(
      x, [c](double v) { return v + c; }, [](double, double) { return 1.0; });
}

Tensor mul_scalar(const Tensor& x, double c) {
  return unary_op(
      x, [c](double v) { return v * c; }, [c](double, double) { return c; });
}

Tensor sigmoid(const Tensor& x) {
  return unary_op(
      x, [](double v) { return 1.0 / (1.0 + std::exp(-v)); },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor silu(const Tensor& x) {
  return unary_op(
      x, [](double v) { return v / (1.0 + std::exp(-v)); },
      [](double v, double) {
        const double s = 1.0 / (1.0 + std::exp(-v));
        return s * (1.0 + v * (1.0 - s));
      });
}

Tensor clamp(const Tensor& x, double lo, double hi) {
  if (lo > hi) throw std::invalid_argument("clamp: lo > hi");
  return unary_op(
      x, [lo, hi](double v) { return std::min(std::max(v, lo), hi); },
      [lo, hi](double v, double) { return (v >= lo && v <= hi) ? 1.0 : 0.0; });
}

Tensor where(const std::vector<uint8_t>& mask, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) fail_shape("where", a.shape(), b.shape());
  if (static_cast<int64_t>(mask.size()) != a.numel())
    throw std::invalid_argument("where: mask length " + std::to_string(mask.size()) +
                                " does not match tensor shape " + shape_str(a.shape()));
  std::vector<double> out(a.data().size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = mask[i] ? a.data()[i] : b.data()[i];
  return make_result(a.shape(), std::move(out), {a, b}, [mask](TensorNode& self) {
    TensorNode& pa = *self.parents[0];
    TensorNode& pb = *self.parents[1];
    if (grad_wanted(pa)) {
      pa.ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i)
        if (mask[i]) pa.grad[i] += self.grad[i];
    }
    if (grad_wanted(pb)) {
      pb.ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i)
        if (!mask[i]) pb.grad[i] += self.grad[i];
    }
  });
}

Tensor sum_all(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  return make_result({1}, {s}, {x}, [](TensorNode& self) {
    TensorNode& p = *self.parents[0];
    if (!grad_wanted(p)) return;
    p.ensure_grad();
    for (double& g : p.grad) g += self.grad[0];
  });
}

Tensor mean_all(const Tensor& x) {
  if (x.numel() == 0) throw std::invalid_argument("mean_all: empty tensor");
  double s = 0.0;
  for (double v : x.data()) s += v;
  const double inv = 1.0 / static_cast<double>(x.numel());
  return make_result({1}, {s * inv}, {x}, [inv](TensorNode& self) {
    TensorNode& p = *self.parents[0];
    if (!grad_wanted(p)) return;
    p.ensure_grad();
    for (double& g : p.grad) g += self.grad[0] * inv;
  });
}

namespace {

Tensor reduce_2d(const Tensor& x, int axis, bool take_mean, const char* op) {
  int r = x.rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r)
    throw std::invalid_argument(std::string(op) + ": axis out of range for shape " +
                                shape_str(x.shape()));
  if (r == 1) return take_mean ? mean_all(x) : sum_all(x);
  if (r != 2)
    throw std::invalid_argument(std::string(op) + ": rank " + std::to_string(r) +
                                " unsupported (reshape first)");
  const int64_t m = x.dim(0), n = x.dim(1);
  if (axis == 1) {
    std::vector<double> out(static_cast<size_t>(m), 0.0);
    for (int64_t i = 0; i < m; ++i) {
      double s = 0.0;
      for (int64_t j = 0; j < n; ++j) s += x.at(i * n + j);
      out[static_cast<size_t>(i)] = take_mean ? s / static_cast<double>(n) : s;
    }
    const double scale = take_mean ? 1.0 / static_cast<double>(n) : 1.0;
    return make_result({m}, std::move(out), {x}, [n, scale](TensorNode& self) {
      TensorNode& p = *self.parents[0];
      if (!grad_wanted(p)) return;
      p.ensure_grad();
      const int64_t m2 = static_cast<int64_t>(self.grad.size());
      for (int64_t i = 0; i < m2; ++i)
        for (int64_t j = 0; j < n; ++j) p.grad[static_cast<size_t>(i * n + j)] += self.grad[static_cast<size_t>(i)] * scale;
    });
  }
  std::vector<double> out(static_cast<size_t>(n), 0.0);
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j) out[static_cast<size_t>(j)] += x.at(i * n + j);
  if (take_mean)
    for (double& v : out) v /= static_cast<double>(m);
  const double scale = take_mean ? 1.0 / static_cast<double>(m) : 1.0;
  return make_result({n}, std::move(out), {x}, [m, n, scale](TensorNode& self) {
    TensorNode& p = *self.parents[0];
    if (!grad_wanted(p)) return;
    p.ensure_grad();
    for (int64_t i = 0; i < m; ++i)
      for (int64_t j = 0; j < n; ++j) p.grad[static_cast<size_t>(i * n + j)] += self.grad[static_cast<size_t>(j)] * scale;
  });
}

}  // namespace

Tensor sum(const Tensor& x, int axis) { return reduce_2d(x, axis, false, "sum"); }
Tensor mean(const Tensor& x, int axis) { return reduce_2d(x, axis, true, "mean"); }

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) fail_shape("matmul", a.shape(), b.shape());
  const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(static_cast<size_t>(m * n), 0.0);
  {
    const double* __restrict__ A = a.data().data();
    const double* __restrict__ B = b.data().data();
    double* __restrict__ O = out.data();
    for (int64_t i = 0; i < m; ++i) {
      for (int64_t kk = 0; kk < k; ++kk) {
        const double av = A[i * k + kk];
        const double* Brow = B + kk * n;
        double* Orow = O + i * n;
        for (int64_t j = 0; j < n; ++j) Orow[j] += av * Brow[j];
      }
    }
  }
  return make_result({m, n}, std::move(out), {a, b}, [m, k, n](TensorNode& self) {
    TensorNode& pa = *self.parents[0];
    TensorNode& pb = *self.parents[1];
    const double* __restrict__ G = self.grad.data();
    if (grad_wanted(pa)) {
      pa.ensure_grad();
      const double* __restrict__ B = pb.data.data();
      double* __restrict__ dA = pa.grad.data();
      // dA[i,k] += sum_j G[i,j] * B[k,j]
      for (int64_t i = 0; i < m; ++i) {
        for (int64_t kk = 0; kk < k; ++kk) {
          const double* Grow = G + i * n;
          const double* Brow = B + kk * n;
          double s = 0.0;
          for (int64_t j = 0; j < n; ++j) s += Grow[j] * Brow[j];
          dA[i * k + kk] += s;
        }
      }
    }
    if (grad_wanted(pb)) {
      pb.ensure_grad();
      const double* __restrict__ A = pa.data.data();
      double* __restrict__ dB = pb.grad.data();
      // dB[k,j] += sum_i A[i,k] * G[i,j]
      for (int64_t i = 0; i < m; ++i) {
        for (int64_t kk = 0; kk < k; ++kk) {
          const double av = A[i * k + kk];
          const double* Grow = G + i * n;
          double* dBrow = dB + kk * n;
          for (int64_t j = 0; j < n; ++j) dBrow[j] += av * Grow[j];
        }
      }
    }
  });
}

namespace {

int64_t row_width(const Tensor& x) {
  int64_t w = 1;
  for (int i = 1; i < x.rank(); ++i) w *= x.dim(i);
  return w;
}

}  // namespace

Tensor gather_rows(const Tensor& x, const std::vector<int64_t>& idx) {
  if (x.rank() < 1) throw std::invalid_argument("gather_rows: scalar input");
  const int64_t rows = x.dim(0);
  const int64_t w = row_width(x);
  for (int64_t i : idx)
    if (i < 0 || i >= rows)
      throw std::out_of_range("gather_rows: index " + std::to_string(i) + " out of [0," +
                              std::to_string(rows) + ")");
  Shape os = x.shape();
  os[0] = static_cast<int64_t>(idx.size());
  std::vector<double> out(static_cast<size_t>(os[0] * w));
  for (size_t i = 0; i < idx.size(); ++i)
    std::copy_n(x.data().begin() + idx[i] * w, w, out.begin() + static_cast<int64_t>(i) * w);
  return make_result(std::move(os), std::move(out), {x}, [idx, w](TensorNode& self) {
    TensorNode& p = *self.parents[0];
    if (!grad_wanted(p)) return;
    p.ensure_grad();
    for (size_t i = 0; i < idx.size(); ++i) {
      const double* g = self.grad.data() + static_cast<int64_t>(i) * w;
      double* d = p.grad.data() + idx[i] * w;
      for (int64_t t = 0; t < w; ++t) d[t] += g[t];
    }
  });
}

Tensor scatter_add_rows(const Tensor& x, const std::vector<int64_t>& idx, int64_t num_rows) {
  if (x.rank() < 1) throw std::invalid_argument("scatter_add_rows: scalar input");
  if (static_cast<int64_t>(idx.size()) != x.dim(0))
    throw std::invalid_argument("scatter_add_rows: " + std::to_string(idx.size()) +
                                " indices for " + std::to_string(x.dim(0)) + " rows");
  const int64_t w = row_width(x);
  for (int64_t i : idx)
    if (i >= num_rows || i < -1)
      throw std::out_of_range("scatter_add_rows: index " + std::to_string(i) + " out of [-1," +
                              std::to_string(num_rows) + ")");
  Shape os = x.shape();
  os[0] = num_rows;
  std::vector<double> out(static_cast<size_t>(num_rows * w), 0.0);
  for (size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0) continue;  // dropped row
    const double* src = x.data().data() + static_cast<int64_t>(i) * w;
    double* dst = out.data() + idx[i] * w;
    for (int64_t t = 0; t < w; ++t) dst[t] += src[t];
  }
  return make_result(std::move(os), std::move(out), {x}, [idx, w](TensorNode& self) {
    TensorNode& p = *self.parents[0];
    if (!grad_wanted(p)) return;
    p.ensure_grad();
    for (size_t i = 0; i < idx.size(); ++i) {
      if (idx[i] < 0) continue;
      const double* g = self.grad.data() + idx[i] * w;
      double* d = p.grad.data() + static_cast<int64_t>(i) * w;
      for (int64_t t = 0; t < w; ++t) d[t] += g[t];
    }
  });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
  const int64_t w = row_width(parts[0]);
  int64_t rows = 0;
  for (const Tensor& p : parts) {
    if (p.rank() != parts[0].rank() || row_width(p) != w)
      fail_shape("concat_rows", parts[0].shape(), p.shape());
    rows += p.dim(0);
  }
  Shape os = parts[0].shape();
  os[0] = rows;
  std::vector<double> out;
  out.reserve(static_cast<size_t>(rows * w));
  for (const Tensor& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  std::vector<int64_t> sizes;
  for (const Tensor& p : parts) sizes.push_back(p.numel());
  return make_result(std::move(os), std::move(out), parts, [sizes](TensorNode& self) {
    int64_t off = 0;
    for (size_t pi = 0; pi < self.parents.size(); ++pi) {
      TensorNode& p = *self.parents[pi];
      if (grad_wanted(p)) {
        p.ensure_grad();
        for (int64_t t = 0; t < sizes[pi]; ++t) p.grad[static_cast<size_t>(t)] += self.grad[static_cast<size_t>(off + t)];
      }
      off += sizes[pi];
    }
  });
}

Tensor slice_rows(const Tensor& x, int64_t start, int64_t len) {
  if (x.rank() < 1 || start < 0 || len < 0 || start + len > x.dim(0))
    throw std::out_of_range("slice_rows: range [" + std::to_string(start) + "," +
                            std::to_string(start + len) + ") out of " + shape_str(x.shape()));
  const int64_t w = row_width(x);
  Shape os = x.shape();
  os[0] = len;
  std::vector<double> out(x.data().begin() + start * w, x.data().begin() + (start + len) * w);
  return make_result(std::move(os), std::move(out), {x}, [start, w](TensorNode& self) {
    TensorNode& p = *self.parents[0];
    if (!grad_wanted(p)) return;
    p.ensure_grad();
    for (size_t t = 0; t < self.grad.size(); ++t)
      p.grad[static_cast<size_t>(start * w) + t] += self.grad[t];
  });
}

Tensor reshape(const Tensor& x, const Shape& shape) {
  if (numel_of(shape) != x.numel()) fail_shape("reshape", x.shape(), shape);
  std::vector<double> out = x.data();
  return make_result(shape, std::move(out), {x}, [](TensorNode& self) {
    TensorNode& p = *self.parents[0];
    if (!grad_wanted(p)) return;
    p.ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i];
  });
}

Tensor scale_rows(const Tensor& x, const Tensor& s) {
  if (x.rank() != 2 || s.rank() != 1 || s.dim(0) != x.dim(0)) fail_shape("scale_rows", x.shape(), s.shape());
  const int64_t n = x.dim(0), d = x.dim(1);
  std::vector<double> out(static_cast<size_t>(n * d));
  for (int64_t i = 0; i < n; ++i) {
    const double sv = s.at(i);
    for (int64_t j = 0; j < d; ++j) out[static_cast<size_t>(i * d + j)] = x.at(i * d + j) * sv;
  }
  return make_result({n, d}, std::move(out), {x, s}, [n, d](TensorNode& self) {
    TensorNode& px = *self.parents[0];
    TensorNode& ps = *self.parents[1];
    if (grad_wanted(px)) {
      px.ensure_grad();
      for (int64_t i = 0; i < n; ++i) {
        const double sv = ps.data[static_cast<size_t>(i)];
        for (int64_t j = 0; j < d; ++j)
          px.grad[static_cast<size_t>(i * d + j)] += self.grad[static_cast<size_t>(i * d + j)] * sv;
      }
    }
    if (grad_wanted(ps)) {
      ps.ensure_grad();
      for (int64_t i = 0; i < n; ++i) {
        double acc = 0.0;
        for (int64_t j = 0; j < d; ++j)
          acc += self.grad[static_cast<size_t>(i * d + j)] * px.data[static_cast<size_t>(i * d + j)];
        ps.grad[static_cast<size_t>(i)] += acc;
      }
    }
  });
}

Tensor softmax(const Tensor& x) {
  if (x.rank() < 1 || x.rank() > 2)
    throw std::invalid_argument("softmax: rank " + std::to_string(x.rank()) + " unsupported");
  const int64_t rows = x.rank() == 2 ? x.dim(0) : 1;
  const int64_t cols = x.rank() == 2 ? x.dim(1) : x.dim(0);
  std::vector<double> out(x.data().size());
  for (int64_t r = 0; r < rows; ++r) {
    const double* in = x.data().data() + r * cols;
    double* o = out.data() + r * cols;
    double mx = in[0];
    for (int64_t c = 1; c < cols; ++c) mx = std::max(mx, in[c]);
    double sum = 0.0;
    for (int64_t c = 0; c < cols; ++c) {
      o[c] = std::exp(in[c] - mx);
      sum += o[c];
    }
    for (int64_t c = 0; c < cols; ++c) o[c] /= sum;
  }
  return make_result(x.shape(), std::move(out), {x}, [rows, cols](TensorNode& self) {
    TensorNode& p = *self.parents[0];
    if (!grad_wanted(p)) return;
    p.ensure_grad();
    for (int64_t r = 0; r < rows; ++r) {
      const double* y = self.data.data() + r * cols;
      const double* g = self.grad.data() + r * cols;
      double dot = 0.0;
      for (int64_t c = 0; c < cols; ++c) dot += y[c] * g[c];
      double* d = p.grad.data() + r * cols;
      for (int64_t c = 0; c < cols; ++c) d[c] += y[c] * (g[c] - dot);
    }
  });
}

Tensor l2_normalize(const Tensor& x, double eps) {
  if (x.rank() < 1 || x.rank() > 2)
    throw std::invalid_argument("l2_normalize: rank " + std::to_string(x.rank()) + " unsupported");
  const int64_t rows = x.rank() == 2 ? x.dim(0) : 1;
  const int64_t cols = x.rank() == 2 ? x.dim(1) : x.dim(0);
  std::vector<double> out(x.data().size());
  std::vector<double> norms(static_cast<size_t>(rows));
  for (int64_t r = 0; r < rows; ++r) {
    const double* in = x.data().data() + r * cols;
    double ss = 0.0;
    for (int64_t c = 0; c < cols; ++c) ss += in[c] * in[c];
    const double nrm = std::sqrt(ss);
    norms[static_cast<size_t>(r)] = nrm;
    const double inv = 1.0 / (nrm + eps);
    double* o = out.data() + r * cols;
    for (int64_t c = 0; c < cols; ++c) o[c] = in[c] * inv;
  }
  return make_result(x.shape(), std::move(out), {x},
                     [rows, cols, eps, norms](TensorNode& self) {
                       TensorNode& p = *self.parents[0];
                       if (!grad_wanted(p)) return;
                       p.ensure_grad();
                       for (int64_t r = 0; r < rows; ++r) {
                         const double nrm = norms[static_cast<size_t>(r)];
                         const double den = nrm + eps;
                         const double* xr = p.data.data() + r * cols;
                         const double* g = self.grad.data() + r * cols;
                         double* d = p.grad.data() + r * cols;
                         double xg = 0.0;
                         for (int64_t c = 0; c < cols; ++c) xg += xr[c] * g[c];
                         const double corr = nrm > 1e-30 ? xg / (nrm * den * den) : 0.0;
                         for (int64_t c = 0; c < cols; ++c) d[c] += g[c] / den - xr[c] * corr;
                       }
                     });
}

}  // namespace cmoe
