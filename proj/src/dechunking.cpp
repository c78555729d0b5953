#include "cmoe/dechunking.hpp"

#include <stdexcept>

namespace cmoe {

IndexMaps build_maps(const std::vector<uint8_t>& b) {
  if (b.empty() || !b[0])
    throw std::invalid_argument("build_maps: first position must be a boundary");
  IndexMaps maps;
  maps.psi.resize(b.size());
  int64_t count = -1;
  for (size_t i = 0; i < b.size(); ++i) {
    if (b[i]) {
      maps.phi.push_back(static_cast<int64_t>(i));
      ++count;
    }
    maps.psi[i] = count;  // cumulative-count minus one
  }
  return maps;
}

Tensor ema_scan(const Tensor& c, const Tensor& p, EmaMode mode) {
  if (c.rank() != 2 || c.dim(0) < 1)
    throw std::invalid_argument("ema_scan: expected [M,d] with M >= 1, got " + shape_str(c.shape()));
  if (p.rank() != 1 || p.dim(0) != c.dim(0)) fail_shape("ema_scan", c.shape(), p.shape());
  const int64_t m = c.dim(0), d = c.dim(1);
  std::vector<double> out(c.data().size());
  const double* C = c.data().data();
  const double* P = p.data().data();
  if (mode == EmaMode::recursive) {
    for (int64_t j = 0; j < d; ++j) out[static_cast<size_t>(j)] = C[j];
    for (int64_t i = 1; i < m; ++i) {
      const double pi = P[i];
      for (int64_t j = 0; j < d; ++j)
        out[static_cast<size_t>(i * d + j)] = pi * C[i * d + j] + (1.0 - pi) * out[static_cast<size_t>((i - 1) * d + j)];
    }
    return make_result({m, d}, std::move(out), {c, p}, [m, d](TensorNode& self) {
      TensorNode& pc = *self.parents[0];
      TensorNode& pp = *self.parents[1];
      const bool wc = pc.requires_grad, wp = pp.requires_grad;
      if (wc) pc.ensure_grad();
      if (wp) pp.ensure_grad();
      // Running gradient flows backwards through the recurrence.
      std::vector<double> g(self.grad);
      for (int64_t i = m - 1; i >= 1; --i) {
        const double pi = pp.data[static_cast<size_t>(i)];
        double dp = 0.0;
        for (int64_t j = 0; j < d; ++j) {
          const double gi = g[static_cast<size_t>(i * d + j)];
          if (wc) pc.grad[static_cast<size_t>(i * d + j)] += gi * pi;
          dp += gi * (pc.data[static_cast<size_t>(i * d + j)] - self.data[static_cast<size_t>((i - 1) * d + j)]);
          g[static_cast<size_t>((i - 1) * d + j)] += gi * (1.0 - pi);
        }
        if (wp) pp.grad[static_cast<size_t>(i)] += dp;
      }
      if (wc)
        for (int64_t j = 0; j < d; ++j) pc.grad[static_cast<size_t>(j)] += g[static_cast<size_t>(j)];
    });
  }

  // one_step
  for (int64_t i = 0; i < m; ++i) {
    const double pi = P[i];
    const int64_t prev = i == 0 ? 0 : i - 1;
    for (int64_t j = 0; j < d; ++j)
      out[static_cast<size_t>(i * d + j)] = pi * C[i * d + j] + (1.0 - pi) * C[prev * d + j];
  }
  return make_result({m, d}, std::move(out), {c, p}, [m, d](TensorNode& self) {
    TensorNode& pc = *self.parents[0];
    TensorNode& pp = *self.parents[1];
    const bool wc = pc.requires_grad, wp = pp.requires_grad;
    if (wc) pc.ensure_grad();
    if (wp) pp.ensure_grad();
    for (int64_t i = 0; i < m; ++i) {
      const double pi = pp.data[static_cast<size_t>(i)];
      const int64_t prev = i == 0 ? 0 : i - 1;
      double dp = 0.0;
      for (int64_t j = 0; j < d; ++j) {
        const double gi = self.grad[static_cast<size_t>(i * d + j)];
        if (wc) {
          pc.grad[static_cast<size_t>(i * d + j)] += gi * pi;
          pc.grad[static_cast<size_t>(prev * d + j)] += gi * (1.0 - pi);
        }
        dp += gi * (pc.data[static_cast<size_t>(i * d + j)] - pc.data[static_cast<size_t>(prev * d + j)]);
      }
      if (wp) pp.grad[static_cast<size_t>(i)] += dp;
    }
  });
}

std::vector<double> ema_recursive_parallel(const std::vector<double>& c,
                                           const std::vector<double>& p, int64_t m, int64_t d,
                                           double perturb) {
  if (static_cast<int64_t>(c.size()) != m * d || static_cast<int64_t>(p.size()) != m)
    throw std::invalid_argument("ema_recursive_parallel: size mismatch");
  // e_i = a_i e_{i-1} + b_i with a_0 = 0, b_0 = c_0, a_i = 1-p_i, b_i = p_i c_i.
  // The scan composes affine maps: (a2,b2) o (a1,b1) = (a2*a1, a2*b1 + b2).
  std::vector<double> a(static_cast<size_t>(m));
  std::vector<double> b(c);
  a[0] = 0.0;
  for (int64_t i = 1; i < m; ++i) {
    a[static_cast<size_t>(i)] = 1.0 - p[static_cast<size_t>(i)];
    for (int64_t j = 0; j < d; ++j) b[static_cast<size_t>(i * d + j)] *= p[static_cast<size_t>(i)];
  }
  std::vector<double> a2(a.size());
  std::vector<double> b2(b.size());
  for (int64_t offset = 1; offset < m; offset *= 2) {
    for (int64_t i = 0; i < m; ++i) {
      if (i >= offset) {
        const double ai = a[static_cast<size_t>(i)];
        a2[static_cast<size_t>(i)] = ai * a[static_cast<size_t>(i - offset)];
        for (int64_t j = 0; j < d; ++j)
          b2[static_cast<size_t>(i * d + j)] =
              ai * b[static_cast<size_t>((i - offset) * d + j)] + b[static_cast<size_t>(i * d + j)] + perturb;
      } else {
        a2[static_cast<size_t>(i)] = a[static_cast<size_t>(i)];
        for (int64_t j = 0; j < d; ++j) b2[static_cast<size_t>(i * d + j)] = b[static_cast<size_t>(i * d + j)];
      }
    }
    a.swap(a2);
    b.swap(b2);
  }
  return b;  // a_0 = 0 wipes the dependence on the seed value
}

Tensor ste(const Tensor& x) {
  std::vector<double> out(x.data().size(), 1.0);
  return make_result(x.shape(), std::move(out), {x}, [](TensorNode& self) {
    TensorNode& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i];
  });
}

DechunkOut dechunk(const Tensor& e, const IndexMaps& maps, const Tensor& h,
                   const Tensor& selected_prob) {
  if (h.rank() != 2 || static_cast<int64_t>(maps.psi.size()) != h.dim(0))
    throw std::invalid_argument("dechunk: psi length " + std::to_string(maps.psi.size()) +
                                " does not match hidden " + shape_str(h.shape()));
  if (e.dim(0) != static_cast<int64_t>(maps.phi.size()))
    throw std::invalid_argument("dechunk: " + std::to_string(e.dim(0)) + " concepts for " +
                                std::to_string(maps.phi.size()) + " boundaries");
  if (selected_prob.numel() != h.dim(0)) fail_shape("dechunk", h.shape(), selected_prob.shape());
  Tensor aligned = gather_rows(e, maps.psi);
  Tensor z = add(h, scale_rows(aligned, ste(selected_prob)));
  return {z, aligned};
}

}  // namespace cmoe
