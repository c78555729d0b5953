#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "cmoe/chunking.hpp"
#include "cmoe/data.hpp"
#include "cmoe/dechunking.hpp"
#include "cmoe/rng.hpp"
#include "cmoe/transformer.hpp"

namespace cmoe {

enum class Arch { moe_baseline, concept_moe };
enum class RouterKind { cosine, linear, fixed };

struct ModelConfig {
  Arch arch = Arch::concept_moe;
  int64_t d = 64;
  int64_t d_c = 64;  // concept-stack hidden size, >= d
  int64_t L_E = 2, L_C = 6, L_D = 2;
  int64_t L_loop = 0;  // looped leading concept layers (weight-shared)
  int n_heads = 4;
  int64_t d_ff = 128;
  int64_t concept_d_ff = 0;  // 0: d_ff scaled by d_c/d
  int n_experts = 4;
  int k_active = 2;
  int concept_n_experts = 0;  // 0: same as n_experts
  int concept_k_active = 0;   // 0: same as k_active
  double R_target = 2.0;
  MergeStrategy merge = MergeStrategy::sum;
  SumSpan sum_span = SumSpan::ends_at_boundary;
  NoiseConfig noise;
  RouterKind router = RouterKind::cosine;
  int64_t fixed_stride = 0;  // fixed router; 0 derives ceil(R_target)
  bool joint_decoding = true;
  int joint_layers = 4;  // capped at L_D
  EmaMode ema_mode = EmaMode::recursive;
  double lambda_aux = 0.03;
  int64_t seq_len = 128;
  int64_t vocab = 256;
  // Set by CT conversion: the dechunk residual adds the concept-stack
  // increment (C_hat - C) instead of the full concept state, which makes the
  // conversion reproduce the source model exactly.
  bool concept_delta_residual = false;

  void validate() const;  // throws naming the offending field

  int64_t effective_concept_d_ff() const;
  int effective_concept_n_experts() const { return concept_n_experts > 0 ? concept_n_experts : n_experts; }
  int effective_concept_k_active() const { return concept_k_active > 0 ? concept_k_active : k_active; }
  int effective_joint_layers() const;
  int64_t effective_fixed_stride() const;
};

struct ModelWeights {
  Tensor embedding;        // [V,d]
  Tensor head;             // [d,V], untied
  Tensor final_norm_gain;  // [d]
  std::vector<LayerWeights> encoder, concept_stack, decoder;
  RouterWeights chunk_router;  // cosine kind
  Tensor linear_router_v, linear_router_bias;
  Tensor proj_in, proj_out;  // [d,d_c], [d_c,d]; present when d_c > d

  // Visits every parameter in checkpoint order.
  void for_each(const std::function<void(const std::string&, Tensor&)>& fn);
  std::vector<Tensor> parameters();
  int64_t count() const;
};

// Fresh weights. Concept projectors on joint-decoding layers start at zero;
// randomize_concept_proj overrides that for test harnesses that need a live
// joint path.
ModelWeights init_weights(const ModelConfig& cfg, uint64_t seed,
                          bool randomize_concept_proj = false);

// Closed-form parameter count; must equal ModelWeights::count exactly.
int64_t param_count(const ModelConfig& cfg);

enum class Mode { train, eval };

struct ForwardTrace {
  std::vector<Tensor> logits;  // one [T,vocab] per batch row
  Tensor total_loss;           // scalar graph node (when targets present)
  double ce = 0.0, aux = 0.0, balance = 0.0;
  int64_t tokens = 0, concepts = 0;
  double r_achieved = 1.0;
  double p_mean = 0.0;
  double flip_rate = 0.0;
  std::vector<ChunkDecision> decisions;  // per row (concept arch only)
};

// Runs the pipeline over every row of the batch in one graph. Aux-loss
// statistics aggregate across the whole batch; total = ce + lambda*aux +
// 0.01*balance. Noise draws come from rng (train mode with noise only).
ForwardTrace forward(const ModelConfig& cfg, ModelWeights& w, const Batch& batch, Mode mode,
                     Rng* rng);

// Plain MoE baseline: the same stacks run token-level with no chunk module.
ModelWeights build_baseline_moe(const ModelConfig& cfg, uint64_t seed);

// CT conversion: reuse all baseline weights, add a random chunk router and
// zero concept projectors on the last joint_layers decoder layers. Requires
// d_c == d; forces last_token merging and the delta-residual dechunk.
struct ConvertedModel {
  ModelConfig cfg;
  ModelWeights weights;
};
ConvertedModel convert_to_conceptmoe(const ModelConfig& base_cfg, const ModelWeights& base,
                                     uint64_t router_seed);

}  // namespace cmoe
