// Acceptance suite: runs every criterion end to end and prints one PASS/FAIL
// line per criterion. Exit code 0 iff all pass. Optional argv: criterion ids
// to run (default all). The training criteria (7-9) take the longest; the
// whole suite is sized for well under two hours on one core.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "cmoe/checkpoint.hpp"
#include "cmoe/costmodel.hpp"
#include "cmoe/harness.hpp"
#include "cmoe/textgen.hpp"
#include "cmoe/verify.hpp"

using namespace cmoe;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;
  void fail(const std::string& why) {
    pass = false;
    if (!detail.empty()) detail += "; ";
    detail += why;
  }
  void note(const std::string& info) {
    if (detail.empty()) detail = info;
  }
};

std::filesystem::path work_dir() {
  auto p = std::filesystem::temp_directory_path() / "cmoe_acceptance";
  std::filesystem::create_directories(p);
  return p;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

Outcome from_checks(const std::vector<CheckResult>& checks) {
  Outcome o;
  for (const CheckResult& c : checks) {
    if (!c.ok) o.fail(c.name + " (" + c.detail + ")");
  }
  if (o.pass) o.note(std::to_string(checks.size()) + " checks green");
  return o;
}

// exact fraction arithmetic for the aux-loss identity
struct Frac {
  long long n, d;
  Frac reduce() const {
    long long g = std::__gcd(std::abs(n), std::abs(d));
    return g > 1 ? Frac{n / g, d / g} : *this;
  }
  Frac operator*(const Frac& o) const { return Frac{n * o.n, d * o.d}.reduce(); }
  Frac operator+(const Frac& o) const { return Frac{n * o.d + o.n * d, d * o.d}.reduce(); }
  Frac operator-(const Frac& o) const { return Frac{n * o.d - o.n * d, d * o.d}.reduce(); }
  Frac operator/(const Frac& o) const { return Frac{n * o.d, d * o.n}.reduce(); }
};

// ---------------------------------------------------------------------------

Outcome criterion1_gradients() {
  auto t0 = std::chrono::steady_clock::now();
  Outcome o = from_checks(run_grad_suite(20240601, 20));
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (secs >= 120.0) o.fail("runtime " + std::to_string(secs) + "s exceeds 2 min");
  return o;
}

Outcome criterion2_causality() {
  auto t0 = std::chrono::steady_clock::now();
  Outcome o = from_checks(run_causal_suite(20240602, 20));
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (secs >= 60.0) o.fail("runtime " + std::to_string(secs) + "s exceeds 1 min");
  return o;
}

Outcome criterion3_conversion() {
  auto t0 = std::chrono::steady_clock::now();
  Outcome o = from_checks(run_convert_suite(20240603, 10));
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (secs >= 60.0) o.fail("runtime " + std::to_string(secs) + "s exceeds 1 min");
  return o;
}

Outcome criterion4_ema() { return from_checks(run_ema_suite(20240604, 100)); }

Outcome criterion5_aux_geometry() {
  Outcome o;
  // exact identity at F1 = G1 = 1/R via fraction arithmetic
  const std::pair<long long, long long> ratios[] = {{3, 2}, {16, 9}, {2, 1}, {4, 1}};
  for (auto [p, q] : ratios) {
    const Frac R{p, q};
    const Frac F{q, p};
    const Frac one{1, 1};
    const Frac loss = R * F * F + (R / (R - one)) * (one - F) * (one - F);
    if (loss.n != loss.d)
      o.fail("exact aux loss at 1/R is " + std::to_string(loss.n) + "/" + std::to_string(loss.d) +
             " for R=" + std::to_string(p) + "/" + std::to_string(q));
  }
  // the float path agrees at realizable batch statistics
  PrecisionScope prec(Precision::f64);
  for (double r : {1.5, 16.0 / 9.0, 2.0, 4.0}) {
    const int64_t n = 144;
    const int64_t k = static_cast<int64_t>(std::llround(n / r));
    std::vector<double> pv(static_cast<size_t>(n), 0.0);
    std::vector<uint8_t> b(static_cast<size_t>(n), 0);
    for (int64_t i = 0; i < k; ++i) {
      pv[static_cast<size_t>(i)] = 1.0;
      b[static_cast<size_t>(i)] = 1;
    }
    const double loss = aux_loss(Tensor::from({n}, pv), b, r).value();
    if (std::abs(loss - 1.0) > 1e-12) o.fail("float aux loss off at R=" + std::to_string(r));
  }
  // 101x101 sweep. Thresholded boundaries couple the statistics: a confident
  // probability vector (entries in {0,1}) forces F1 == G1, so the realizable
  // slice of the grid is the diagonal; its minimum must sit at 1/R.
  for (double r : {1.5, 2.0, 4.0}) {
    auto loss_at = [r](double f, double g) {
      return r * f * g + r / (r - 1.0) * (1.0 - f) * (1.0 - g);
    };
    double best = 1e300;
    int best_i = -1;
    for (int i = 0; i <= 100; ++i) {
      for (int j = 0; j <= 100; ++j) {
        const double l = loss_at(i / 100.0, j / 100.0);
        if (i == j && l < best) {
          best = l;
          best_i = i;
        }
      }
    }
    if (std::abs(best_i / 100.0 - 1.0 / r) > 0.01 + 1e-9)
      o.fail("grid argmin " + std::to_string(best_i / 100.0) + " off the 1/R locus for R=" +
             std::to_string(r));
  }
  o.note("exact identity for R in {3/2, 16/9, 2, 4}; grid minima on the F1=G1=1/R locus");
  return o;
}

Outcome criterion6_cost_model() {
  Outcome o;
  const int64_t Lc = 20, Lloop = 8;
  for (double r : {1.5, 2.0, 4.0}) {
    CostInputs in;
    in.L_C = Lc;
    in.d = 1024;
    in.N = 4096;
    in.R = r;
    in.L_loop = Lloop;

    in.strategy = Strategy::baseline;
    CostReport base = attn_map_and_kv(in);
    if (base.attn_map_reduction != 1.0 || base.kv_reduction != 1.0) o.fail("baseline row not 1x");

    in.strategy = Strategy::moe;
    CostReport moe = attn_map_and_kv(in);
    if (moe.attn_map_reduction != r * r) o.fail("moe attn reduction != R^2 at R=" + std::to_string(r));
    if (moe.kv_reduction != r) o.fail("moe kv reduction != R");
    if (moe.attn_map_flops != base.attn_map_flops / (r * r)) o.fail("moe attn flops mismatch");

    in.strategy = Strategy::loop;
    CostReport loop = attn_map_and_kv(in);
    const double lc = static_cast<double>(Lc), ll = static_cast<double>(Lloop);
    if (loop.attn_map_reduction != r * r * lc / (lc + ll)) o.fail("loop attn reduction mismatch");
    if (loop.kv_reduction != r * lc / (lc + ll)) o.fail("loop kv reduction mismatch");

    in.strategy = Strategy::attn_moe;
    CostReport am = attn_map_and_kv(in);
    if (am.attn_map_reduction != std::pow(r, 1.5)) o.fail("attn_moe reduction != R^1.5");
    if (am.kv_reduction != std::sqrt(r)) o.fail("attn_moe kv reduction != sqrt(R)");
  }
  // headline anchor values at R = 2
  {
    CostInputs in;
    in.R = 2.0;
    in.strategy = Strategy::moe;
    CostReport rep = attn_map_and_kv(in);
    if (rep.attn_map_reduction != 4.0 || rep.kv_reduction != 2.0) o.fail("R=2 anchor not 4x/2x");
    in.strategy = Strategy::attn_moe;
    CostReport am = attn_map_and_kv(in);
    if (std::abs(am.attn_map_reduction - 2.8284271247461903) > 1e-15) o.fail("R=2 anchor not 2^1.5");
    if (am.kv_reduction != std::sqrt(2.0)) o.fail("R=2 anchor not sqrt(2)");
  }
  // hidden scale 4/3 multiplies concept compute by 16/9; R = 16/9 breaks even
  {
    CostInputs in;
    in.L_E = 4;
    in.L_C = 20;
    in.L_D = 4;
    in.strategy = Strategy::attn_moe;
    in.hidden_scale = 4.0 / 3.0;
    in.R = 1.0;
    const double unit = c_attn(in.d) + c_moe(in.d, in.d_ff, in.k_active);
    const double concept_scaled = per_token_flops(in) - 8.0 * unit;
    if (std::abs(concept_scaled / (20.0 * unit) - 16.0 / 9.0) > 1e-12)
      o.fail("hidden scale 4/3 does not give 16/9 concept compute");
    in.R = 16.0 / 9.0;
    CostInputs base = in;
    base.strategy = Strategy::baseline;
    base.R = 1.0;
    if (std::abs(per_token_flops(in) - per_token_flops(base)) / per_token_flops(base) > 1e-12)
      o.fail("R = 16/9 does not break even against the baseline");
  }
  o.note("all four rows exact for R in {1.5, 2, 4}; 4x/2x, R^1.5/sqrt(R) and 16/9 anchors hold");
  return o;
}

struct DeskArtifacts {
  TrainResult result;
  double h0 = 0.0;  // order-0 entropy of the eval split, nats
  std::vector<double> p_mean_tail;
};

ModelConfig desk_model_config() {
  ModelConfig cfg;
  cfg.d = 64;
  cfg.d_c = 64;
  cfg.L_E = 2;
  cfg.L_C = 6;
  cfg.L_D = 2;
  cfg.n_heads = 4;
  cfg.d_ff = 128;
  cfg.n_experts = 4;
  cfg.k_active = 2;
  cfg.R_target = 2.0;
  cfg.merge = MergeStrategy::sum;
  cfg.noise = {NoiseKind::bernoulli, 6.0, 0.1};
  cfg.lambda_aux = 0.03;
  cfg.seq_len = 128;
  return cfg;
}

TrainConfig desk_train_config() {
  TrainConfig t;
  t.steps = 5000;
  t.batch = 4;
  t.seq_len = 128;
  t.lr_peak = 3e-3;
  t.lr_warmup_steps = 100;
  t.lr_min = 3e-4;
  t.seed = 42;
  t.eval_every = 500;
  t.lambda_aux = 0.03;
  t.R_target = 2.0;
  t.eval_windows = 64;
  return t;
}

DeskArtifacts& desk_run() {
  static DeskArtifacts art;
  static bool done = false;
  if (done) return art;
  done = true;

  const std::string dir = (work_dir() / "desk_run").string();
  std::filesystem::remove_all(dir);
  std::string text = generate_text(7, 1258291);  // >= 1 MiB
  Corpus corpus = Corpus::from_bytes(std::vector<uint8_t>(text.begin(), text.end()), 0.05);

  // order-0 byte entropy of the eval split
  std::vector<int64_t> hist(256, 0);
  for (size_t i = corpus.train_end; i < corpus.bytes.size(); ++i) ++hist[corpus.bytes[i]];
  const double n = static_cast<double>(corpus.eval_size());
  for (int64_t c : hist)
    if (c > 0) art.h0 -= static_cast<double>(c) / n * std::log(static_cast<double>(c) / n);

  art.result = train(desk_model_config(), desk_train_config(), corpus, dir);
  const size_t tail = std::min<size_t>(art.result.metrics.size(), 500);
  for (size_t i = art.result.metrics.size() - tail; i < art.result.metrics.size(); ++i)
    art.p_mean_tail.push_back(art.result.metrics[i].p_mean);
  return art;
}

Outcome criterion7_compression_control() {
  Outcome o;
  DeskArtifacts& art = desk_run();
  const double r = art.result.r_train_final;
  double pm = 0.0;
  for (double v : art.p_mean_tail) pm += v;
  pm /= static_cast<double>(art.p_mean_tail.size());
  char buf[160];
  std::snprintf(buf, sizeof(buf), "R_train(final 500) = %.4f (need [1.8, 2.2]), p_mean = %.4f (need [0.35, 0.65])", r, pm);
  o.note(buf);
  if (r < 1.8 || r > 2.2) o.fail("R_train out of [1.8, 2.2]");
  if (pm < 0.35 || pm > 0.65) o.fail("p_mean out of [0.35, 0.65]");
  return o;
}

Outcome criterion8_noise_robustness() {
  Outcome o;
  ModelConfig cfg;
  cfg.d = 32;
  cfg.d_c = 32;
  cfg.L_E = 1;
  cfg.L_C = 3;
  cfg.L_D = 1;
  cfg.n_heads = 4;
  cfg.d_ff = 64;
  cfg.n_experts = 4;
  cfg.k_active = 2;
  cfg.R_target = 2.0;
  cfg.merge = MergeStrategy::sum;
  cfg.seq_len = 96;

  TrainConfig t;
  t.steps = 1500;
  t.batch = 4;
  t.seq_len = 96;
  t.lr_peak = 3e-3;
  t.lr_warmup_steps = 50;
  t.lr_min = 3e-4;
  t.seed = 420;
  t.eval_every = 250;
  t.R_target = 2.0;
  t.eval_windows = 48;

  // The robustness claim is about evaluation-set distribution shift, so the
  // eval tail comes from a visibly different text style (harder word skew,
  // longer sentences) than the training split.
  std::string train_text = generate_text(11, 486 * 1024);
  std::string eval_text = generate_text(12, 26 * 1024, TextStyle{1.2, 8, 14});
  std::vector<uint8_t> bytes(train_text.begin(), train_text.end());
  bytes.insert(bytes.end(), eval_text.begin(), eval_text.end());
  Corpus corpus = Corpus::from_bytes(std::move(bytes),
                                     static_cast<double>(eval_text.size()) / (486.0 * 1024 + 26.0 * 1024));
  // held-in slice of the training distribution, for the R_train measurement
  Corpus train_dist = Corpus::from_bytes(
      std::vector<uint8_t>(train_text.begin(), train_text.end()), 0.06);

  ModelConfig noisy_cfg = cfg;
  noisy_cfg.noise = {NoiseKind::bernoulli, 6.0, 0.1};
  ModelConfig quiet_cfg = cfg;
  quiet_cfg.noise.kind = NoiseKind::none;

  train(noisy_cfg, t, corpus, (work_dir() / "noise_on").string());
  train(quiet_cfg, t, corpus, (work_dir() / "noise_off").string());

  // Both models are measured with the same thresholded instrument: R on
  // held-in training-distribution text vs R on the shifted tail. This keeps
  // the Bernoulli sampling offset (a train-time artifact) out of the drift.
  PrecisionScope prec(Precision::f32);
  auto drift_of = [&](const std::string& dir) {
    LoadedModel lm = load_checkpoint(dir + "/checkpoint");
    EvalResult on_train = evaluate(lm.cfg, lm.weights, train_dist, t.seq_len, t.eval_windows);
    EvalResult on_shift = evaluate(lm.cfg, lm.weights, corpus, t.seq_len, t.eval_windows);
    return std::pair(std::abs(on_shift.r - on_train.r), std::abs(on_shift.p_mean - 0.5));
  };
  auto [drift_noisy, dev_noisy] = drift_of((work_dir() / "noise_on").string());
  auto [drift_quiet, dev_quiet] = drift_of((work_dir() / "noise_off").string());
  char buf[256];
  std::snprintf(buf, sizeof(buf),
                "drift |R_eval-R_train|: %.4f (noisy) vs %.4f (none); |p_mean-1/R|: %.4f vs %.4f",
                drift_noisy, drift_quiet, dev_noisy, dev_quiet);
  o.note(buf);
  if (drift_noisy > drift_quiet) o.fail("noise increased the train/eval compression drift");
  if (!(dev_noisy < dev_quiet)) o.fail("noisy p_mean not strictly closer to 1/R");
  return o;
}

Outcome criterion9_training_sanity() {
  Outcome o;
  DeskArtifacts& art = desk_run();
  char buf[128];
  std::snprintf(buf, sizeof(buf), "ce_eval %.4f vs order-0 entropy %.4f (margin %.4f, need >= 0.5)",
                art.result.final_eval.ce, art.h0, art.h0 - art.result.final_eval.ce);
  o.note(buf);
  if (art.result.final_eval.ce > art.h0 - 0.5) o.fail("eval cross-entropy not 0.5 nats under order-0");

  // determinism: identical seeds produce identical metrics files
  ModelConfig small;
  small.d = 16;
  small.d_c = 16;
  small.L_E = 1;
  small.L_C = 1;
  small.L_D = 1;
  small.n_heads = 2;
  small.d_ff = 16;
  small.n_experts = 2;
  small.k_active = 1;
  small.seq_len = 32;
  TrainConfig t;
  t.steps = 50;
  t.batch = 2;
  t.seq_len = 32;
  t.lr_warmup_steps = 5;
  t.eval_every = 25;
  t.eval_windows = 4;
  std::string text = generate_text(13, 64 * 1024);
  Corpus corpus = Corpus::from_bytes(std::vector<uint8_t>(text.begin(), text.end()), 0.05);
  const auto d1 = work_dir() / "det_a", d2 = work_dir() / "det_b";
  std::filesystem::remove_all(d1);
  std::filesystem::remove_all(d2);
  train(small, t, corpus, d1.string());
  train(small, t, corpus, d2.string());
  if (read_file((d1 / "metrics.csv").string()) != read_file((d2 / "metrics.csv").string()))
    o.fail("identical seeds produced different metrics files");
  return o;
}

Outcome criterion10_reallocation_solver() {
  Outcome o;
  Rng rng(20240610);
  int families = 0;
  for (int fam = 0; fam < 10; ++fam) {
    CostInputs base;
    base.L_E = 2 + static_cast<int64_t>(rng.below(5));
    base.L_D = 2 + static_cast<int64_t>(rng.below(5));
    base.L_C = 8 + static_cast<int64_t>(rng.below(25));
    base.d = 256 << rng.below(3);
    base.d_ff = base.d * (2 + static_cast<int64_t>(rng.below(3)));
    base.n_experts = 32 + static_cast<int>(rng.below(33));
    base.k_active = 4 + static_cast<int>(rng.below(5));
    base.k_active_concept = base.k_active + 2 + static_cast<int>(rng.below(3));
    const double r = std::vector<double>{1.5, 2.0, 4.0}[fam % 3];

    CostInputs bb = base;
    bb.strategy = Strategy::baseline;
    bb.R = 1.0;
    const double target = per_token_flops(bb);

    // enumeration oracle: smallest knob meeting the baseline
    int oracle_k = -1;
    for (int k = base.k_active; k <= base.n_experts; ++k) {
      CostInputs probe = base;
      probe.strategy = Strategy::moe;
      probe.R = r;
      probe.k_active_concept = k;
      if (per_token_flops(probe) >= target) {
        oracle_k = k;
        break;
      }
    }
    int64_t oracle_loop = -1;
    for (int64_t l = 0; l <= base.L_C; ++l) {
      CostInputs probe = base;
      probe.strategy = Strategy::loop;
      probe.R = r;
      probe.L_loop = l;
      if (per_token_flops(probe) >= target) {
        oracle_loop = l;
        break;
      }
    }

    try {
      ReallocResult moe = solve_reallocation(base, r, Strategy::moe);
      if (moe.k_active_concept != oracle_k)
        o.fail("family " + std::to_string(fam) + ": moe solver " +
               std::to_string(moe.k_active_concept) + " vs oracle " + std::to_string(oracle_k));
    } catch (const std::exception&) {
      if (oracle_k != -1) o.fail("family " + std::to_string(fam) + ": moe solver infeasible, oracle found " + std::to_string(oracle_k));
    }
    try {
      ReallocResult loop = solve_reallocation(base, r, Strategy::loop);
      if (loop.L_loop != oracle_loop)
        o.fail("family " + std::to_string(fam) + ": loop solver " + std::to_string(loop.L_loop) +
               " vs oracle " + std::to_string(oracle_loop));
    } catch (const std::exception&) {
      if (oracle_loop != -1) o.fail("family " + std::to_string(fam) + ": loop solver infeasible");
    }
    ReallocResult am = solve_reallocation(base, r, Strategy::attn_moe);
    if (am.hidden_scale != std::sqrt(r)) o.fail("family " + std::to_string(fam) + ": s != sqrt(R)");
    ++families;
  }
  o.note(std::to_string(families) + " families, moe/loop solvers equal the enumeration oracle, s = sqrt(R)");
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> wanted;
  for (int i = 1; i < argc; ++i) wanted.insert(std::atoi(argv[i]));

  struct Entry {
    int id;
    const char* name;
    Outcome (*fn)();
  };
  const Entry entries[] = {
      {1, "gradient-oracle", criterion1_gradients},
      {2, "causality-no-leakage", criterion2_causality},
      {3, "lossless-ct-conversion", criterion3_conversion},
      {4, "ema-scan-equivalence", criterion4_ema},
      {5, "aux-loss-geometry", criterion5_aux_geometry},
      {6, "table1-cost-model", criterion6_cost_model},
      {7, "compression-ratio-control", criterion7_compression_control},
      {8, "noise-robustness-direction", criterion8_noise_robustness},
      {9, "training-sanity", criterion9_training_sanity},
      {10, "reallocation-solver", criterion10_reallocation_solver},
  };

  bool all_pass = true;
  for (const Entry& e : entries) {
    if (!wanted.empty() && !wanted.count(e.id)) continue;
    auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = e.fn();
    } catch (const std::exception& ex) {
      o.pass = false;
      o.detail = std::string("exception: ") + ex.what();
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("[%2d/10] %s  %-28s (%.1f s)  %s\n", e.id, o.pass ? "PASS" : "FAIL", e.name, secs,
                o.detail.c_str());
    std::fflush(stdout);
    all_pass = all_pass && o.pass;
  }
  std::printf(all_pass ? "acceptance: ALL PASS\n" : "acceptance: FAILURES\n");
  return all_pass ? 0 : 1;
}
