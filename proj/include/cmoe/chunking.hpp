#pragma once

#include <cstdint>
#include <vector>

#include "cmoe/ops.hpp"
#include "cmoe/rng.hpp"
#include "cmoe/tensor.hpp"

namespace cmoe {

// Chunk-router projections; distinct from any attention weights.
struct RouterWeights {
  Tensor wq, wk;  // [d,d]
};

enum class NoiseKind { none, bernoulli, gaussian };

struct NoiseConfig {
  NoiseKind kind = NoiseKind::bernoulli;
  double tau = 6.0;    // sharpness, > 1
  double sigma = 0.1;  // gaussian stddev
};

// Per-token boundary decision for one sequence. p and selected_prob stay in
// the graph (the router learns through them); the mask itself is discrete.
struct ChunkDecision {
  Tensor p;                          // [N] boundary probabilities, p[0] = 1
  std::vector<uint8_t> b;            // boundary mask actually used
  std::vector<uint8_t> b_threshold;  // p >= 0.5 mask (flip-rate reference)
  Tensor selected_prob;              // [N] = b*p + (1-b)*(1-p)
  int64_t n_tokens = 0;
  int64_t n_concepts = 0;
};

// p_n = clamp((1 - cos(Wq h_n, Wk h_{n-1})) / 2, 0, 1) for n >= 2, p_1 = 1.
Tensor boundary_scores(const Tensor& h, const RouterWeights& w);

// Ablation router: p_n = sigmoid(v . h_n + bias), p_1 forced to 1.
Tensor linear_router_scores(const Tensor& h, const Tensor& v, const Tensor& bias);

// p^(1/tau) above 0.5, mirrored below; identity at tau = 1.
Tensor sharpen(const Tensor& p, double tau);

// b_n ~ Bernoulli(p_sharp_n); the first position is always a boundary.
std::vector<uint8_t> sample_boundaries(const std::vector<double>& p_sharp, Rng& rng);

std::vector<uint8_t> threshold_boundaries(const std::vector<double>& p);

// Raw-probability gaussian perturbation, clamped, then thresholded.
std::vector<uint8_t> gaussian_boundaries(const std::vector<double>& p, double sigma, Rng& rng);

// Full train/eval decision for one row given its scores.
ChunkDecision decide_boundaries(Tensor p, const NoiseConfig& noise, bool training, Rng* rng);

// Boundary at positions 1, 1+stride, ... (1-indexed); bypasses the router.
ChunkDecision fixed_chunk_decision(int64_t n, int64_t stride);

// L_aux = R*F1*G1 + R/(R-1)*(1-F1)*(1-G1), statistics over all given tokens
// jointly. Gradient reaches p only; b is discrete.
Tensor aux_loss(const Tensor& p, const std::vector<uint8_t>& b, double R);

enum class MergeStrategy { last_token, sum };

// Span convention for sum merging. Chunks ending at their boundary token is
// the causal default; the starts_at_boundary variant leaks future tokens and
// exists for ablation only.
enum class SumSpan { ends_at_boundary, starts_at_boundary };

struct ConceptSequence {
  Tensor c;                  // [M,d]
  std::vector<int64_t> phi;  // boundary token positions, 0-indexed
};

ConceptSequence merge(const Tensor& h, const std::vector<uint8_t>& b, MergeStrategy strategy,
                      SumSpan span = SumSpan::ends_at_boundary);

double compression_ratio(int64_t n_tokens, int64_t n_concepts);

}  // namespace cmoe
