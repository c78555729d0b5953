#pragma once

#include <cstdint>
#include <vector>

#include "cmoe/ops.hpp"
#include "cmoe/tensor.hpp"

namespace cmoe {

// phi: concept index -> token position of its boundary (strictly increasing,
// phi[0] = 0). psi: token position -> concept index, non-decreasing;
// psi[n] = m iff phi[m] <= n < phi[m+1] with a sentinel phi[M] = N.
struct IndexMaps {
  std::vector<int64_t> phi;
  std::vector<int64_t> psi;
};

IndexMaps build_maps(const std::vector<uint8_t>& b);

enum class EmaMode { recursive, one_step };

// Probability-weighted blending of concepts before plug-back.
//   recursive: e_0 = c_0, e_m = p_m c_m + (1-p_m) e_{m-1}
//   one_step:  e_m = p_m c_m + (1-p_m) c_{m-1}, with c_{-1} := c_0
// p holds the boundary probabilities at phi(m); p[0] is 1 by construction.
Tensor ema_scan(const Tensor& c, const Tensor& p, EmaMode mode);

// Vectorised scan over the affine recurrence (Hillis-Steele composition of
// (a,b) pairs). Forward values only; must match the sequential loop to
// 1e-12 at 64-bit. perturb exists so a verification suite can prove it
// notices a broken scan.
std::vector<double> ema_recursive_parallel(const std::vector<double>& c,
                                           const std::vector<double>& p, int64_t m, int64_t d,
                                           double perturb = 0.0);

// Straight-through estimator: forward is all ones, backward passes the
// incoming gradient to x unchanged.
Tensor ste(const Tensor& x);

struct DechunkOut {
  Tensor z;        // [N,d] = h + aligned * ste(selected_prob)
  Tensor aligned;  // [N,d] token-aligned concepts, e[psi(n)]
};

DechunkOut dechunk(const Tensor& e, const IndexMaps& maps, const Tensor& h,
                   const Tensor& selected_prob);

}  // namespace cmoe
