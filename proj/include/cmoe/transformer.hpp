#pragma once

#include <cstdint>
#include <vector>

#include "cmoe/ops.hpp"
#include "cmoe/tensor.hpp"

namespace cmoe {

struct AttentionWeights {
  Tensor wq, wk, wv, wo;  // [d,d]
  // Concept projectors, present only on joint-decoding layers.
  Tensor wq_c, wk_c, wv_c;
  bool has_concept_proj = false;
  int n_heads = 4;
};

struct ExpertWeights {
  Tensor w_gate, w_up;  // [d, d_ff]
  Tensor w_down;        // [d_ff, d]
};

struct MoEBlock {
  Tensor router;  // [d, n_experts]
  std::vector<ExpertWeights> experts;
  int n_experts = 1;
  int k_active = 1;
};

struct LayerWeights {
  Tensor attn_norm_gain, moe_norm_gain;  // [d]
  AttentionWeights attn;
  MoEBlock moe;
};

Tensor rmsnorm(const Tensor& x, const Tensor& gain, double eps = 1e-6);

// Rotary position embedding over interleaved pairs within each head.
Tensor rope(const Tensor& x, int n_heads, double base = 10000.0);

// Multi-head causal attention core: softmax(QK^T/sqrt(d_head) + mask)V.
Tensor mha_causal(const Tensor& q, const Tensor& k, const Tensor& v, int n_heads);

// Full attention sublayer. When token-aligned concepts are given the layer
// must carry concept projectors; their contribution is added to Q, K and V
// before rotary encoding.
Tensor causal_attention(const Tensor& x, const AttentionWeights& w,
                        const Tensor* concepts = nullptr);

// Per-token top-k expert indices, gate-descending, ties to the lowest index.
struct MoERouting {
  std::vector<int> topk;  // [tokens * k_active]
};

struct MoEOut {
  Tensor y;
  Tensor balance_loss;  // scalar
};

// Top-k routing with gates renormalised over the selected experts. The
// balance loss is n_experts * sum_e f_e * g_e where f_e is the fraction of
// routing assignments landing on e (so sum_e f_e = 1) and g_e the mean gate
// probability. frozen, when given, bypasses selection (gradient oracle use).
MoEOut moe_forward(const Tensor& x, const MoEBlock& block, const MoERouting* frozen = nullptr,
                   MoERouting* routing_out = nullptr);

Tensor embed(const Tensor& table, const std::vector<int>& ids);
Tensor lm_head(const Tensor& x, const Tensor& head);

// Sum of -log p(target) over positions with valid[t] != 0.
Tensor cross_entropy_sum(const Tensor& logits, const std::vector<int>& targets,
                         const std::vector<uint8_t>& valid);

struct LayerOut {
  Tensor y;
  Tensor balance_loss;
};

// Pre-norm block: x + attn(norm(x)), then x + moe(norm(x)).
LayerOut transformer_layer(const Tensor& x, const LayerWeights& lw,
                           const Tensor* concepts = nullptr);

}  // namespace cmoe
