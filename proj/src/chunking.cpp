#include "cmoe/chunking.hpp"

#include <algorithm>
#include <stdexcept>

namespace cmoe {

Tensor boundary_scores(const Tensor& h, const RouterWeights& w) {
  if (h.rank() != 2 || h.dim(0) < 1)
    throw std::invalid_argument("boundary_scores: expected [N,d] with N >= 1, got " +
                                shape_str(h.shape()));
  const int64_t n = h.dim(0);
  Tensor first = Tensor::full({1}, 1.0);
  if (n == 1) return first;
  Tensor q = l2_normalize(matmul(slice_rows(h, 1, n - 1), w.wq));  // current tokens
  Tensor k = l2_normalize(matmul(slice_rows(h, 0, n - 1), w.wk));  // previous tokens
  Tensor cos = sum(mul(q, k), -1);                                 // [N-1]
  Tensor p_rest = clamp(mul_scalar(add_scalar(neg(cos), 1.0), 0.5), 0.0, 1.0);
  return concat_rows({first, p_rest});
}

Tensor linear_router_scores(const Tensor& h, const Tensor& v, const Tensor& bias) {
  if (h.rank() != 2 || v.rank() != 1 || v.dim(0) != h.dim(1))
    fail_shape("linear_router_scores", h.shape(), v.shape());
  const int64_t n = h.dim(0);
  Tensor first = Tensor::full({1}, 1.0);
  if (n == 1) return first;
  Tensor logits = add(reshape(matmul(h, reshape(v, {v.dim(0), 1})), {n}), bias);
  Tensor p = sigmoid(logits);
  return concat_rows({first, slice_rows(p, 1, n - 1)});
}

Tensor sharpen(const Tensor& p, double tau) {
  if (tau < 1.0) throw std::invalid_argument("sharpen: tau must be >= 1");
  std::vector<uint8_t> hi(p.data().size());
  for (size_t i = 0; i < hi.size(); ++i) hi[i] = p.data()[i] >= 0.5 ? 1 : 0;
  Tensor half = Tensor::full(p.shape(), 0.5);
  // The inactive branch sees 0.5 instead of its real input: the output is
  // masked anyway and pow stays away from the singular endpoints.
  Tensor upper = pow_scalar(where(hi, p, half), 1.0 / tau);
  Tensor lower_in = where(hi, half, add_scalar(neg(p), 1.0));
  Tensor lower = add_scalar(neg(pow_scalar(lower_in, 1.0 / tau)), 1.0);
  return where(hi, upper, lower);
}

std::vector<uint8_t> sample_boundaries(const std::vector<double>& p_sharp, Rng& rng) {
  std::vector<uint8_t> b(p_sharp.size(), 0);
  if (b.empty()) return b;
  b[0] = 1;
  for (size_t i = 1; i < b.size(); ++i) b[i] = rng.bernoulli(p_sharp[i]) ? 1 : 0;
  return b;
}

std::vector<uint8_t> threshold_boundaries(const std::vector<double>& p) {
  std::vector<uint8_t> b(p.size(), 0);
  if (b.empty()) return b;
  b[0] = 1;
  for (size_t i = 1; i < b.size(); ++i) b[i] = p[i] >= 0.5 ? 1 : 0;
  return b;
}

std::vector<uint8_t> gaussian_boundaries(const std::vector<double>& p, double sigma, Rng& rng) {
  std::vector<uint8_t> b(p.size(), 0);
  if (b.empty()) return b;
  b[0] = 1;
  for (size_t i = 1; i < b.size(); ++i) {
    const double noisy = std::clamp(p[i] + rng.gaussian() * sigma, 0.0, 1.0);
    b[i] = noisy >= 0.5 ? 1 : 0;
  }
  return b;
}

ChunkDecision decide_boundaries(Tensor p, const NoiseConfig& noise, bool training, Rng* rng) {
  ChunkDecision dec;
  dec.p = p;
  dec.n_tokens = p.numel();
  dec.b_threshold = threshold_boundaries(p.data());
  if (!training || noise.kind == NoiseKind::none) {
    dec.b = dec.b_threshold;
  } else if (noise.kind == NoiseKind::bernoulli) {
    if (!rng) throw std::invalid_argument("decide_boundaries: bernoulli noise needs an rng");
    std::vector<double> sharp;
    {
      NoGradScope ng;
      sharp = sharpen(p.detach(), noise.tau).data();
    }
    dec.b = sample_boundaries(sharp, *rng);
  } else {
    if (!rng) throw std::invalid_argument("decide_boundaries: gaussian noise needs an rng");
    dec.b = gaussian_boundaries(p.data(), noise.sigma, *rng);
  }
  dec.n_concepts = 0;
  for (uint8_t v : dec.b) dec.n_concepts += v;
  dec.selected_prob = where(dec.b, p, add_scalar(neg(p), 1.0));
  return dec;
}

ChunkDecision fixed_chunk_decision(int64_t n, int64_t stride) {
  if (stride < 1) throw std::invalid_argument("fixed_chunk_decision: stride must be >= 1");
  std::vector<double> p(static_cast<size_t>(n), 0.0);
  std::vector<uint8_t> b(static_cast<size_t>(n), 0);
  for (int64_t i = 0; i < n; i += stride) {
    p[static_cast<size_t>(i)] = 1.0;
    b[static_cast<size_t>(i)] = 1;
  }
  ChunkDecision dec;
  dec.p = Tensor::from({n}, std::move(p));
  dec.b = b;
  dec.b_threshold = b;
  dec.n_tokens = n;
  dec.n_concepts = 0;
  for (uint8_t v : b) dec.n_concepts += v;
  dec.selected_prob = Tensor::full({n}, 1.0);  // b*p + (1-b)*(1-p) with p in {0,1}
  return dec;
}

Tensor aux_loss(const Tensor& p, const std::vector<uint8_t>& b, double R) {
  if (R <= 1.0) throw std::invalid_argument("aux_loss: target ratio must exceed 1");
  if (static_cast<int64_t>(b.size()) != p.numel())
    throw std::invalid_argument("aux_loss: mask length " + std::to_string(b.size()) +
                                " does not match p " + shape_str(p.shape()));
  double f1 = 0.0;
  for (uint8_t v : b) f1 += v;
  f1 /= static_cast<double>(b.size());
  Tensor g1 = mean_all(p);
  Tensor term1 = mul_scalar(g1, R * f1);
  Tensor term2 = mul_scalar(add_scalar(neg(g1), 1.0), R / (R - 1.0) * (1.0 - f1));
  return add(term1, term2);
}

ConceptSequence merge(const Tensor& h, const std::vector<uint8_t>& b, MergeStrategy strategy,
                      SumSpan span) {
  if (h.rank() != 2 || static_cast<int64_t>(b.size()) != h.dim(0))
    throw std::invalid_argument("merge: mask length " + std::to_string(b.size()) +
                                " does not match hidden " + shape_str(h.shape()));
  if (b.empty() || !b[0]) throw std::invalid_argument("merge: first position must be a boundary");
  ConceptSequence cs;
  for (size_t i = 0; i < b.size(); ++i)
    if (b[i]) cs.phi.push_back(static_cast<int64_t>(i));
  const int64_t m = static_cast<int64_t>(cs.phi.size());

  if (strategy == MergeStrategy::last_token) {
    cs.c = gather_rows(h, cs.phi);
    return cs;
  }

  const int64_t n = h.dim(0);
  std::vector<int64_t> dest(static_cast<size_t>(n), -1);
  if (span == SumSpan::ends_at_boundary) {
    // chunk j covers (phi[j-1], phi[j]]; tokens after the last boundary have
    // no finished chunk and contribute to no concept
    int64_t j = 0;
    for (int64_t t = 0; t < n && j < m; ++t) {
      dest[static_cast<size_t>(t)] = j;
      if (t == cs.phi[static_cast<size_t>(j)]) ++j;
    }
  } else {
    // ablation variant: chunk j covers [phi[j], phi[j+1])
    int64_t j = -1;
    for (int64_t t = 0; t < n; ++t) {
      if (j + 1 < m && t == cs.phi[static_cast<size_t>(j + 1)]) ++j;
      dest[static_cast<size_t>(t)] = j;
    }
  }
  cs.c = scatter_add_rows(h, dest, m);
  return cs;
}

double compression_ratio(int64_t n_tokens, int64_t n_concepts) {
  if (n_concepts < 1) throw std::invalid_argument("compression_ratio: no concepts");
  return static_cast<double>(n_tokens) / static_cast<double>(n_concepts);
}

}  // namespace cmoe
