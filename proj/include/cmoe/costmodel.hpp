#pragma once

#include <cstdint>
#include <string>

namespace cmoe {

// Exact ratio helper for compression ratios given as fractions ("16/9") or
// terminating decimals ("1.5").
struct Ratio {
  long long num = 1, den = 1;
  static Ratio parse(const std::string& text);
  double value() const { return static_cast<double>(num) / static_cast<double>(den); }
};

enum class Strategy { baseline, moe, loop, attn_moe };

Strategy strategy_from_name(const std::string& name);
std::string strategy_name(Strategy s);

struct CostInputs {
  int64_t L_E = 4, L_C = 20, L_D = 4;
  int64_t d = 1024;
  int64_t d_ff = 4096;
  int64_t N = 4096;  // sequence length
  int n_experts = 64;
  int k_active = 8;          // encoder/decoder (and baseline) activation
  int k_active_concept = 8;  // concept stack activation (strategies moe/loop)
  double R = 2.0;
  int64_t L_loop = 0;          // strategy loop
  double hidden_scale = 1.0;   // strategy attn_moe
  Strategy strategy = Strategy::baseline;
};

struct CostReport {
  double attn_map_flops = 0.0;
  double attn_map_reduction = 1.0;
  double kv_elems = 0.0;
  double kv_reduction = 1.0;
  double per_token_flops = 0.0;
};

// Per-token FLOPs of one attention / one MoE layer at width d (2 FLOPs per
// multiply-add; attention-map cost reported separately).
double c_attn(int64_t d);
double c_moe(int64_t d, int64_t d_ff, int k_active);

// Concept-stack attention-map FLOPs and KV cache (element counts) with the
// reduction factors in closed form.
CostReport attn_map_and_kv(const CostInputs& in);

// Per-token FLOPs of the whole stack, attention maps excluded; the concept
// stack is divided by R and adjusted per strategy.
double per_token_flops(const CostInputs& in);

struct ReallocResult {
  Strategy strategy;
  int k_active_concept = 0;
  int64_t L_loop = 0;
  double hidden_scale = 1.0;
  double residual = 0.0;  // signed (flops - baseline) / baseline
};

// Finds the smallest knob setting whose per-token FLOPs reach the baseline's:
// the added experts (moe), loop count at the given concept activation (loop),
// or the exact hidden scale sqrt(R) (attn_moe). Throws when infeasible.
ReallocResult solve_reallocation(const CostInputs& base, double R, Strategy strategy);

}  // namespace cmoe
