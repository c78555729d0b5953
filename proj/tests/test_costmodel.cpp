#include <doctest.h>

#include <cmath>

#include "cmoe/costmodel.hpp"

using namespace cmoe;

TEST_CASE("ratio parsing") {
  CHECK(Ratio::parse("16/9").value() == doctest::Approx(16.0 / 9.0));
  CHECK(Ratio::parse("1.5").num == 3);
  CHECK(Ratio::parse("1.5").den == 2);
  CHECK(Ratio::parse("2").value() == 2.0);
  CHECK_THROWS(Ratio::parse("3/0"));
}

TEST_CASE("table rows: moe strategy reduces attention maps by R^2 and KV by R") {
  CostInputs in;
  in.L_C = 20;
  in.d = 1024;
  in.N = 4096;
  in.R = 2.0;
  in.strategy = Strategy::moe;
  CostReport rep = attn_map_and_kv(in);
  CHECK(rep.attn_map_reduction == 4.0);
  CHECK(rep.kv_reduction == 2.0);
  const double base = 20.0 * 1024.0 * 4096.0 * 4096.0;
  CHECK(rep.attn_map_flops == base / 4.0);
  CHECK(rep.kv_elems == 2.0 * 20.0 * 1024.0 * 4096.0 / 2.0);
}

TEST_CASE("table rows: loop strategy at L_loop=8") {
  CostInputs in;
  in.L_C = 20;
  in.d = 1024;
  in.N = 4096;
  in.R = 2.0;
  in.L_loop = 8;
  in.strategy = Strategy::loop;
  CostReport rep = attn_map_and_kv(in);
  CHECK(rep.attn_map_reduction == doctest::Approx(4.0 * 20.0 / 28.0).epsilon(1e-15));
  CHECK(rep.kv_reduction == doctest::Approx(2.0 * 20.0 / 28.0).epsilon(1e-15));
}

TEST_CASE("table rows: attn_moe reduces by R^1.5 and sqrt(R)") {
  CostInputs in;
  in.R = 2.0;
  in.strategy = Strategy::attn_moe;
  CostReport rep = attn_map_and_kv(in);
  CHECK(rep.attn_map_reduction == std::pow(2.0, 1.5));
  CHECK(rep.attn_map_reduction == doctest::Approx(2.828).epsilon(1e-3));
  CHECK(rep.kv_reduction == std::sqrt(2.0));
  CHECK_THROWS(attn_map_and_kv(CostInputs{.R = 0.5}));
}

TEST_CASE("per-token flops: baseline identity and 16/9 break-even") {
  CostInputs in;
  in.L_E = 4;
  in.L_C = 20;
  in.L_D = 4;
  in.d = 1024;
  in.d_ff = 2048;
  in.k_active = 8;
  in.k_active_concept = 8;

  CostInputs base = in;
  base.strategy = Strategy::baseline;
  base.R = 1.0;
  const double unit = c_attn(in.d) + c_moe(in.d, in.d_ff, in.k_active);
  CHECK(per_token_flops(base) == doctest::Approx(28.0 * unit).epsilon(1e-15));

  // hidden scale 4/3 multiplies concept compute by 16/9; R = 16/9 cancels it
  CostInputs scaled = in;
  scaled.strategy = Strategy::attn_moe;
  scaled.hidden_scale = 4.0 / 3.0;
  scaled.R = 1.0;
  const double concept_base = 20.0 * unit;
  const double concept_scaled = per_token_flops(scaled) - 8.0 * unit;
  CHECK(concept_scaled == doctest::Approx(concept_base * 16.0 / 9.0).epsilon(1e-12));

  scaled.R = 16.0 / 9.0;
  CHECK(per_token_flops(scaled) - 8.0 * unit == doctest::Approx(concept_base).epsilon(1e-12));
}

TEST_CASE("per-token flops is monotone in the knobs and decreasing in R") {
  CostInputs in;
  in.strategy = Strategy::moe;
  in.R = 2.0;
  double prev = 0.0;
  for (int k = 1; k <= 16; ++k) {
    in.k_active_concept = k;
    const double f = per_token_flops(in);
    CHECK(f > prev);
    prev = f;
  }
  in.k_active_concept = 8;
  in.strategy = Strategy::loop;
  prev = 0.0;
  for (int64_t l = 0; l <= 10; ++l) {
    in.L_loop = l;
    const double f = per_token_flops(in);
    CHECK(f > prev);
    prev = f;
  }
  in.strategy = Strategy::attn_moe;
  prev = 0.0;
  for (double s = 1.0; s < 3.0; s += 0.25) {
    in.hidden_scale = s;
    const double f = per_token_flops(in);
    CHECK(f > prev);
    prev = f;
  }
  in.hidden_scale = 1.5;
  prev = 1e300;
  for (double r = 1.0; r <= 4.0; r += 0.5) {
    in.R = r;
    const double f = per_token_flops(in);
    CHECK(f < prev);
    prev = f;
  }
}

TEST_CASE("reallocation solver: attn_moe closed form and enumeration parity") {
  CostInputs base;
  base.L_E = 4;
  base.L_C = 20;
  base.L_D = 4;
  base.d = 512;
  base.d_ff = 1024;
  base.n_experts = 64;
  base.k_active = 8;
  base.k_active_concept = 8;

  ReallocResult am = solve_reallocation(base, 2.0, Strategy::attn_moe);
  CHECK(am.hidden_scale == std::sqrt(2.0));
  CHECK(std::abs(am.residual) < 1e-12);

  // enumeration oracle for the moe strategy
  for (double r : {1.5, 2.0, 4.0}) {
    ReallocResult got = solve_reallocation(base, r, Strategy::moe);
    CostInputs b2 = base;
    b2.strategy = Strategy::baseline;
    b2.R = 1.0;
    const double target = per_token_flops(b2);
    int expect = -1;
    for (int k = base.k_active; k <= base.n_experts; ++k) {
      CostInputs probe = base;
      probe.strategy = Strategy::moe;
      probe.R = r;
      probe.k_active_concept = k;
      if (per_token_flops(probe) >= target) {
        expect = k;
        break;
      }
    }
    CHECK(got.k_active_concept == expect);
    CHECK(got.residual >= 0.0);
  }

  // loop solver with a raised concept activation, against the same oracle
  CostInputs with_k = base;
  with_k.k_active_concept = 11;
  ReallocResult loop = solve_reallocation(with_k, 1.5, Strategy::loop);
  CostInputs b2 = base;
  b2.strategy = Strategy::baseline;
  b2.R = 1.0;
  const double target = per_token_flops(b2);
  int64_t expect = -1;
  for (int64_t l = 0; l <= base.L_C; ++l) {
    CostInputs probe = with_k;
    probe.strategy = Strategy::loop;
    probe.R = 1.5;
    probe.L_loop = l;
    if (per_token_flops(probe) >= target) {
      expect = l;
      break;
    }
  }
  CHECK(loop.L_loop == expect);

  // infeasible: tiny expert pool
  CostInputs cramped = base;
  cramped.n_experts = 8;
  CHECK_THROWS(solve_reallocation(cramped, 4.0, Strategy::moe));
}
