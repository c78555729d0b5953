#include "cmoe/costmodel.hpp"

#include <cmath>
#include <numeric>
#include <stdexcept>

namespace cmoe {

Ratio Ratio::parse(const std::string& text) {
  Ratio r;
  const auto slash = text.find('/');
  if (slash != std::string::npos) {
    r.num = std::stoll(text.substr(0, slash));
    r.den = std::stoll(text.substr(slash + 1));
  } else {
    const auto dot = text.find('.');
    if (dot == std::string::npos) {
      r.num = std::stoll(text);
      r.den = 1;
    } else {
      const std::string digits = text.substr(0, dot) + text.substr(dot + 1);
      r.num = std::stoll(digits);
      r.den = 1;
      for (size_t i = dot + 1; i < text.size(); ++i) r.den *= 10;
    }
  }
  if (r.den == 0) throw std::invalid_argument("ratio: zero denominator in \"" + text + "\"");
  const long long g = std::gcd(std::abs(r.num), std::abs(r.den));
  if (g > 1) {
    r.num /= g;
    r.den /= g;
  }
  return r;
}

Strategy strategy_from_name(const std::string& name) {
  if (name == "baseline") return Strategy::baseline;
  if (name == "moe") return Strategy::moe;
  if (name == "loop") return Strategy::loop;
  if (name == "attn_moe") return Strategy::attn_moe;
  throw std::invalid_argument("unknown strategy \"" + name + "\" (baseline|moe|loop|attn_moe)");
}

std::string strategy_name(Strategy s) {
  switch (s) {
    case Strategy::baseline: return "baseline";
    case Strategy::moe: return "moe";
    case Strategy::loop: return "loop";
    default: return "attn_moe";
  }
}

double c_attn(int64_t d) { return 8.0 * static_cast<double>(d) * static_cast<double>(d); }

double c_moe(int64_t d, int64_t d_ff, int k_active) {
  return 3.0 * 2.0 * static_cast<double>(d) * static_cast<double>(d_ff) *
         static_cast<double>(k_active);
}

namespace {

void check_inputs(const CostInputs& in) {
  if (in.R < 1.0) throw std::invalid_argument("cost model: R must be >= 1");
  if (in.L_C < 1 || in.d < 1 || in.N < 1 || in.d_ff < 1)
    throw std::invalid_argument("cost model: counts must be positive");
  if (in.L_loop < 0) throw std::invalid_argument("cost model: L_loop must be >= 0");
  if (in.hidden_scale <= 0.0) throw std::invalid_argument("cost model: hidden_scale must be > 0");
}

}  // namespace

CostReport attn_map_and_kv(const CostInputs& in) {
  check_inputs(in);
  const double Lc = static_cast<double>(in.L_C);
  const double d = static_cast<double>(in.d);
  const double N = static_cast<double>(in.N);
  const double R = in.R;
  const double base_attn = Lc * d * N * N;
  const double base_kv = 2.0 * Lc * d * N;

  CostReport rep;
  switch (in.strategy) {
    case Strategy::baseline:
      rep.attn_map_reduction = 1.0;
      rep.kv_reduction = 1.0;
      break;
    case Strategy::moe:
      rep.attn_map_reduction = R * R;
      rep.kv_reduction = R;
      break;
    case Strategy::loop:
      rep.attn_map_reduction = R * R * Lc / (Lc + static_cast<double>(in.L_loop));
      rep.kv_reduction = R * Lc / (Lc + static_cast<double>(in.L_loop));
      break;
    case Strategy::attn_moe:
      // hidden scale sqrt(R) and length N/R: d' N'^2 = d N^2 / R^1.5
      rep.attn_map_reduction = std::pow(R, 1.5);
      rep.kv_reduction = std::sqrt(R);
      break;
  }
  rep.attn_map_flops = base_attn / rep.attn_map_reduction;
  rep.kv_elems = base_kv / rep.kv_reduction;
  rep.per_token_flops = per_token_flops(in);
  return rep;
}

double per_token_flops(const CostInputs& in) {
  check_inputs(in);
  const double outer = static_cast<double>(in.L_E + in.L_D) *
                       (c_attn(in.d) + c_moe(in.d, in.d_ff, in.k_active));
  const double concept_unit = c_attn(in.d) + c_moe(in.d, in.d_ff, in.k_active);
  double concept_flops;
  switch (in.strategy) {
    case Strategy::baseline:
      return outer + static_cast<double>(in.L_C) * concept_unit;
    case Strategy::moe:
      concept_flops = static_cast<double>(in.L_C) *
                (c_attn(in.d) + c_moe(in.d, in.d_ff, in.k_active_concept));
      break;
    case Strategy::loop:
      concept_flops = static_cast<double>(in.L_C + in.L_loop) *
                (c_attn(in.d) + c_moe(in.d, in.d_ff, in.k_active_concept));
      break;
    case Strategy::attn_moe:
      // widening the hidden size scales both terms by s^2
      concept_flops = static_cast<double>(in.L_C) * in.hidden_scale * in.hidden_scale * concept_unit;
      break;
    default:
      concept_flops = 0.0;
  }
  return outer + concept_flops / in.R;
}

ReallocResult solve_reallocation(const CostInputs& base, double R, Strategy strategy) {
  if (R <= 1.0) throw std::invalid_argument("solve_reallocation: R must exceed 1");
  CostInputs b = base;
  b.strategy = Strategy::baseline;
  b.R = 1.0;
  const double target = per_token_flops(b);

  ReallocResult res;
  res.strategy = strategy;
  CostInputs probe = base;
  probe.R = R;
  probe.strategy = strategy;

  switch (strategy) {
    case Strategy::moe: {
      for (int k = base.k_active; k <= base.n_experts; ++k) {
        probe.k_active_concept = k;
        const double f = per_token_flops(probe);
        if (f >= target) {
          res.k_active_concept = k;
          res.residual = (f - target) / target;
          return res;
        }
      }
      throw std::runtime_error(
          "solve_reallocation: infeasible, k_active' would exceed n_experts (" +
          std::to_string(base.n_experts) + ")");
    }
    case Strategy::loop: {
      probe.k_active_concept = base.k_active_concept;
      res.k_active_concept = base.k_active_concept;
      for (int64_t loop = 0; loop <= base.L_C; ++loop) {
        probe.L_loop = loop;
        const double f = per_token_flops(probe);
        if (f >= target) {
          res.L_loop = loop;
          res.residual = (f - target) / target;
          return res;
        }
      }
      throw std::runtime_error("solve_reallocation: infeasible, L_loop capped at L_C (" +
                               std::to_string(base.L_C) + ")");
    }
    case Strategy::attn_moe: {
      res.hidden_scale = std::sqrt(R);
      probe.hidden_scale = res.hidden_scale;
      probe.k_active_concept = base.k_active;
      const double f = per_token_flops(probe);
      res.residual = (f - target) / target;
      return res;
    }
    default:
      throw std::invalid_argument("solve_reallocation: strategy must be moe|loop|attn_moe");
  }
}

}  // namespace cmoe
