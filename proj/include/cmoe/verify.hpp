#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace cmoe {

struct CheckResult {
  std::string name;
  bool ok = false;
  std::string detail;
};

// Worker bound from CONCEPT_THREADS (default 1). Checks stay deterministic
// at any setting; instances are seeded independently.
int concept_threads();

// Finite-difference gradient checks for every differentiable module path:
// cosine/linear router, aux loss with frozen boundaries, both merge
// strategies, both EMA modes, dechunk (plus the straight-through contract
// against its hand-derived gradient), joint-decoding attention, and MoE with
// frozen routing.
std::vector<CheckResult> run_grad_suite(uint64_t seed, int instances = 20);

// Perturbing token t must leave eval-mode logits at positions < t
// bit-identical on a random-weight full model.
std::vector<CheckResult> run_causal_suite(uint64_t seed, int trials = 20);

// Vectorised scan vs sequential loop, plus hand-computed one-step values on
// dyadic inputs. inject_bug perturbs the scan to prove the check can fail.
std::vector<CheckResult> run_ema_suite(uint64_t seed, int instances = 100,
                                       bool inject_bug = false);

// Baseline-equality of the CT conversion under an all-boundary router, the
// parameter-count delta, and liveness of the zero-initialised projectors.
std::vector<CheckResult> run_convert_suite(uint64_t seed, int inputs = 10);

}  // namespace cmoe
