#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "cmoe/harness.hpp"
#include "cmoe/checkpoint.hpp"
#include "cmoe/textgen.hpp"

using namespace cmoe;

namespace {

ModelConfig smoke_model() {
  ModelConfig cfg;
  cfg.d = 16;
  cfg.d_c = 16;
  cfg.L_E = 1;
  cfg.L_C = 1;
  cfg.L_D = 1;
  cfg.n_heads = 2;
  cfg.d_ff = 16;
  cfg.n_experts = 2;
  cfg.k_active = 1;
  cfg.seq_len = 16;
  return cfg;
}

TrainConfig smoke_train(int64_t steps) {
  TrainConfig t;
  t.steps = steps;
  t.batch = 2;
  t.seq_len = 16;
  t.lr_warmup_steps = std::min<int64_t>(2, steps - 1);
  t.eval_every = 100;
  t.eval_windows = 4;
  return t;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in);
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("cosine schedule endpoints and monotone decay") {
  TrainConfig t;
  t.steps = 1000;
  t.lr_warmup_steps = 100;
  t.lr_peak = 3e-3;
  t.lr_min = 3e-4;
  CHECK(cosine_lr(t, 0) == 0.0);
  CHECK(cosine_lr(t, 50) == doctest::Approx(1.5e-3));
  CHECK(cosine_lr(t, 100) == doctest::Approx(3e-3));
  CHECK(cosine_lr(t, 1000) == doctest::Approx(3e-4).epsilon(1e-12));
  double prev = cosine_lr(t, 100);
  for (int64_t s = 101; s <= 1000; ++s) {
    const double lr = cosine_lr(t, s);
    CHECK(lr <= prev + 1e-15);
    prev = lr;
  }
}

TEST_CASE("adamw single-parameter update matches the hand computation") {
  PrecisionScope prec(Precision::f64);
  Tensor p = Tensor::from({1, 1}, {2.0}, true);
  p.grad().assign(1, 0.5);
  AdamW opt({p}, 0.9, 0.95, 0.1);
  opt.step(1e-2);

  // t=1: m = 0.1*0.5 = 0.05 ; v = 0.05*0.25 = 0.0125
  // mhat = 0.05/0.1 = 0.5 ; vhat = 0.0125/0.05 = 0.25
  // update = 0.5/(0.5 + 1e-8) + 0.1*2.0 = ...
  const double mhat = 0.5;
  const double vhat = 0.25;
  const double expect = 2.0 - 1e-2 * (mhat / (std::sqrt(vhat) + 1e-8) + 0.1 * 2.0);
  CHECK(std::abs(p.at(0) - expect) < 1e-12);

  // gains (rank 1) are not decayed
  Tensor g = Tensor::from({1}, {2.0}, true);
  g.grad().assign(1, 0.5);
  AdamW opt2({g}, 0.9, 0.95, 0.1);
  opt2.step(1e-2);
  const double expect_nodecay = 2.0 - 1e-2 * (mhat / (std::sqrt(vhat) + 1e-8));
  CHECK(std::abs(g.at(0) - expect_nodecay) < 1e-12);
}

TEST_CASE("two-step smoke run produces finite metrics with the exact header") {
  std::string text = generate_text(1, 10 * 1024);
  Corpus corpus = Corpus::from_bytes(std::vector<uint8_t>(text.begin(), text.end()), 0.05);
  const std::string dir = std::filesystem::temp_directory_path() / "cmoe_smoke_run";
  std::filesystem::remove_all(dir);
  TrainResult res = train(smoke_model(), smoke_train(2), corpus, dir);
  CHECK(res.metrics.size() == 2);
  for (const MetricsRow& r : res.metrics) {
    CHECK(std::isfinite(r.loss_total));
    CHECK(std::isfinite(r.ce));
    CHECK(std::abs(r.loss_total - (r.ce + 0.03 * r.aux + 0.01 * r.balance)) < 1e-6);
  }
  const std::string csv = read_file(dir + "/metrics.csv");
  CHECK(csv.rfind("step,loss_total,ce,aux,balance,R_train,R_eval,p_mean,flip_rate,lr\n", 0) == 0);
  CHECK(std::filesystem::exists(dir + "/checkpoint/weights.bin"));
  CHECK(std::filesystem::exists(dir + "/checkpoint/manifest.json"));
  CHECK(std::filesystem::exists(dir + "/checkpoint/config.json"));
  std::filesystem::remove_all(dir);
}

TEST_CASE("identical seeds give byte-identical metrics files") {
  std::string text = generate_text(2, 8 * 1024);
  Corpus corpus = Corpus::from_bytes(std::vector<uint8_t>(text.begin(), text.end()), 0.05);
  const std::string d1 = std::filesystem::temp_directory_path() / "cmoe_det_a";
  const std::string d2 = std::filesystem::temp_directory_path() / "cmoe_det_b";
  std::filesystem::remove_all(d1);
  std::filesystem::remove_all(d2);
  train(smoke_model(), smoke_train(5), corpus, d1);
  train(smoke_model(), smoke_train(5), corpus, d2);
  CHECK(read_file(d1 + "/metrics.csv") == read_file(d2 + "/metrics.csv"));
  CHECK(read_file(d1 + "/checkpoint/weights.bin") == read_file(d2 + "/checkpoint/weights.bin"));
  std::filesystem::remove_all(d1);
  std::filesystem::remove_all(d2);
}

TEST_CASE("evaluate: forced all-boundary router gives R_eval = 1, stride 2 gives 2") {
  std::string text = generate_text(3, 8 * 1024);
  Corpus corpus = Corpus::from_bytes(std::vector<uint8_t>(text.begin(), text.end()), 0.1);
  ModelConfig cfg = smoke_model();
  cfg.router = RouterKind::fixed;
  cfg.fixed_stride = 1;
  cfg.merge = MergeStrategy::last_token;
  ModelWeights w = init_weights(cfg, 9);
  EvalResult r1 = evaluate(cfg, w, corpus, 16, 4);
  CHECK(r1.r == 1.0);

  cfg.fixed_stride = 2;
  EvalResult r2 = evaluate(cfg, w, corpus, 16, 4);
  CHECK(r2.r == 2.0);
}

TEST_CASE("train config json round-trip rejects unknown keys") {
  TrainConfig t;
  t.steps = 7;
  t.lr_warmup_steps = 2;
  std::string text = train_config_to_json_text(t);
  TrainConfig back = train_config_from_json_text(text);
  CHECK(back.steps == 7);
  CHECK(back.beta1 == t.beta1);
  try {
    train_config_from_json_text("{\"steps\": 5, \"not_a_key\": 3}");
    FAIL("expected throw");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find("not_a_key") != std::string::npos);
  }
}

TEST_CASE("a non-finite loss aborts training with boundary-probability diagnostics") {
  std::string text = generate_text(4, 8 * 1024);
  Corpus corpus = Corpus::from_bytes(std::vector<uint8_t>(text.begin(), text.end()), 0.05);
  TrainConfig t = smoke_train(20);
  t.lr_peak = 1e18;  // guaranteed blow-up
  t.lr_min = 1e18;
  t.lr_warmup_steps = 0;
  t.grad_clip = 0.0;
  try {
    train(smoke_model(), t, corpus, "");
    FAIL("expected a non-finite-loss abort");
  } catch (const std::runtime_error& e) {
    const std::string msg = e.what();
    CHECK(msg.find("non-finite loss") != std::string::npos);
    CHECK(msg.find("p mean") != std::string::npos);
  }
}

TEST_CASE("gradient clipping caps the global norm") {
  PrecisionScope prec(Precision::f64);
  Tensor a = Tensor::from({2}, {0.0, 0.0}, true);
  a.grad() = {3.0, 4.0};
  AdamW opt({a}, 0.9, 0.95, 0.0);
  const double norm = opt.clip_grad_norm(1.0);
  CHECK(norm == doctest::Approx(5.0));
  CHECK(std::sqrt(a.grad()[0] * a.grad()[0] + a.grad()[1] * a.grad()[1]) ==
        doctest::Approx(1.0));
}
