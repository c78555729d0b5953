#include <cstdio>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "cmoe/checkpoint.hpp"
#include "cmoe/costmodel.hpp"
#include "cmoe/harness.hpp"
#include "cmoe/textgen.hpp"
#include "cmoe/verify.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitVerifyFail = 1;
constexpr int kExitUsage = 2;

int cmd_train(const std::string& model_path, const std::string& train_path,
              const std::string& corpus_path, const std::string& out_dir, double eval_fraction) {
  cmoe::ModelConfig mcfg = cmoe::load_model_config(model_path);
  cmoe::TrainConfig tcfg = cmoe::load_train_config(train_path);
  cmoe::Corpus corpus = cmoe::Corpus::from_file(corpus_path, eval_fraction);
  cmoe::TrainResult res = cmoe::train(mcfg, tcfg, corpus, out_dir);
  std::printf("trained %lld steps | ce_eval %.4f | R_train %.4f | R_eval %.4f | p_mean %.4f\n",
              static_cast<long long>(tcfg.steps), res.final_eval.ce, res.r_train_final,
              res.final_eval.r, res.final_eval.p_mean);
  std::printf("checkpoint: %s\nmetrics: %s/metrics.csv\n", res.checkpoint_dir.c_str(),
              out_dir.c_str());
  return kExitOk;
}

int cmd_eval(const std::string& checkpoint, const std::string& corpus_path, double eval_fraction,
             int64_t seq_len, int64_t windows) {
  cmoe::LoadedModel lm = cmoe::load_checkpoint(checkpoint);
  cmoe::Corpus corpus = cmoe::Corpus::from_file(corpus_path, eval_fraction);
  if (seq_len <= 0) seq_len = lm.cfg.seq_len;
  cmoe::PrecisionScope prec(cmoe::Precision::f32);
  cmoe::EvalResult r = cmoe::evaluate(lm.cfg, lm.weights, corpus, seq_len, windows);
  std::printf("{\"ce_eval\": %.10g, \"R_eval\": %.10g, \"p_mean\": %.10g}\n", r.ce, r.r, r.p_mean);
  return kExitOk;
}

int cmd_chunk(const std::string& checkpoint, const std::string& text_path,
              const std::string& format, int64_t max_bytes, const std::string& router_override,
              int64_t stride) {
  cmoe::LoadedModel lm = cmoe::load_checkpoint(checkpoint);
  if (!router_override.empty()) {
    if (router_override == "fixed") {
      lm.cfg.router = cmoe::RouterKind::fixed;
      if (stride > 0) lm.cfg.fixed_stride = stride;
    } else if (router_override == "cosine") {
      lm.cfg.router = cmoe::RouterKind::cosine;
    } else {
      throw std::runtime_error("--router-override must be cosine or fixed");
    }
  }
  if (lm.cfg.arch != cmoe::Arch::concept_moe)
    throw std::runtime_error("chunk: checkpoint is a baseline model with no chunk module");

  std::ifstream in(text_path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open text file: " + text_path);
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (text.empty()) throw std::runtime_error("text file is empty: " + text_path);
  if (static_cast<int64_t>(text.size()) > max_bytes) text.resize(static_cast<size_t>(max_bytes));

  cmoe::Batch batch;
  batch.batch = 1;
  batch.seq_len = static_cast<int64_t>(text.size());
  for (unsigned char c : text) {
    batch.input_ids.push_back(c);
    batch.targets.push_back(c);
    batch.target_valid.push_back(0);
  }
  cmoe::PrecisionScope prec(cmoe::Precision::f32);
  cmoe::NoGradScope ng;
  cmoe::ForwardTrace trace = cmoe::forward(lm.cfg, lm.weights, batch, cmoe::Mode::eval, nullptr);
  const cmoe::ChunkDecision& dec = trace.decisions.at(0);

  if (format == "annotated") {
    std::string out;
    for (size_t i = 0; i < text.size(); ++i) {
      if (dec.b[i]) out += '|';
      out += text[i];
    }
    std::printf("%s\n", out.c_str());
    std::printf("# tokens=%lld concepts=%lld R=%.4f\n", static_cast<long long>(dec.n_tokens),
                static_cast<long long>(dec.n_concepts), trace.r_achieved);
  } else if (format == "json") {
    nlohmann::json j;
    std::vector<int64_t> positions;
    for (size_t i = 0; i < dec.b.size(); ++i)
      if (dec.b[i]) positions.push_back(static_cast<int64_t>(i) + 1);  // 1-based
    j["positions"] = positions;
    j["probabilities"] = dec.p.data();
    j["R_achieved"] = trace.r_achieved;
    std::printf("%s\n", j.dump().c_str());
  } else {
    throw std::runtime_error("--format must be annotated or json");
  }
  return kExitOk;
}

int cmd_cost(const std::string& config_path, const std::string& strategy_arg,
             const std::string& r_arg, const std::string& sweep_arg, const std::string& csv_path) {
  cmoe::CostInputs base;
  if (!config_path.empty()) {
    cmoe::ModelConfig mc = cmoe::load_model_config(config_path);
    base.L_E = mc.L_E;
    base.L_C = mc.L_C;
    base.L_D = mc.L_D;
    base.d = mc.d;
    base.d_ff = mc.d_ff;
    base.N = mc.seq_len;
    base.n_experts = mc.n_experts;
    base.k_active = mc.k_active;
    base.k_active_concept = mc.effective_concept_k_active();
  }

  std::vector<cmoe::Strategy> strategies;
  if (strategy_arg.empty() || strategy_arg == "all") {
    strategies = {cmoe::Strategy::baseline, cmoe::Strategy::moe, cmoe::Strategy::loop,
                  cmoe::Strategy::attn_moe};
  } else {
    strategies = {cmoe::strategy_from_name(strategy_arg)};
  }
  std::vector<double> rs;
  if (!sweep_arg.empty()) {
    size_t pos = 0;
    while (pos < sweep_arg.size()) {
      size_t comma = sweep_arg.find(',', pos);
      if (comma == std::string::npos) comma = sweep_arg.size();
      rs.push_back(cmoe::Ratio::parse(sweep_arg.substr(pos, comma - pos)).value());
      pos = comma + 1;
    }
  } else {
    rs.push_back(cmoe::Ratio::parse(r_arg).value());
  }

  std::string csv = "strategy,R,L_loop,k_active,s,attn_map_flops,attn_reduction,kv_elems,"
                    "kv_reduction,per_token_flops\n";
  char line[512];
  for (cmoe::Strategy s : strategies) {
    for (double r : rs) {
      cmoe::CostInputs in = base;
      in.strategy = s;
      in.R = s == cmoe::Strategy::baseline ? 1.0 : r;
      std::string err;
      if (s != cmoe::Strategy::baseline) {
        try {
          cmoe::ReallocResult sol = cmoe::solve_reallocation(base, r, s);
          if (s == cmoe::Strategy::moe) in.k_active_concept = sol.k_active_concept;
          if (s == cmoe::Strategy::loop) in.L_loop = sol.L_loop;
          if (s == cmoe::Strategy::attn_moe) in.hidden_scale = sol.hidden_scale;
        } catch (const std::exception& e) {
          err = e.what();
        }
      }
      if (!err.empty()) {
        std::snprintf(line, sizeof(line), "%s,%.6g,,,,,,,,infeasible: %s\n",
                      cmoe::strategy_name(s).c_str(), r, err.c_str());
        csv += line;
        continue;
      }
      cmoe::CostReport rep = cmoe::attn_map_and_kv(in);
      std::snprintf(line, sizeof(line), "%s,%.6g,%lld,%d,%.6g,%.8g,%.8g,%.8g,%.8g,%.8g\n",
                    cmoe::strategy_name(s).c_str(), in.R, static_cast<long long>(in.L_loop),
                    in.k_active_concept, in.hidden_scale, rep.attn_map_flops,
                    rep.attn_map_reduction, rep.kv_elems, rep.kv_reduction, rep.per_token_flops);
      csv += line;
    }
  }
  std::fputs(csv.c_str(), stdout);
  if (!csv_path.empty()) {
    std::ofstream out(csv_path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + csv_path);
    out << csv;
  }
  return kExitOk;
}

int cmd_verify(const std::string& suite, uint64_t seed, bool inject_ema_bug) {
  std::vector<cmoe::CheckResult> results;
  auto run = [&](const std::string& name) {
    if (name == "grad") {
      auto r = cmoe::run_grad_suite(seed);
      results.insert(results.end(), r.begin(), r.end());
    } else if (name == "causal") {
      auto r = cmoe::run_causal_suite(seed);
      results.insert(results.end(), r.begin(), r.end());
    } else if (name == "ema") {
      auto r = cmoe::run_ema_suite(seed, 100, inject_ema_bug);
      results.insert(results.end(), r.begin(), r.end());
    } else if (name == "convert") {
      auto r = cmoe::run_convert_suite(seed);
      results.insert(results.end(), r.begin(), r.end());
    } else {
      throw std::runtime_error("unknown suite \"" + name + "\" (grad|causal|ema|convert|all)");
    }
  };
  if (suite == "all") {
    run("grad");
    run("causal");
    run("ema");
    run("convert");
  } else {
    run(suite);
  }

  std::printf("1..%zu\n", results.size());
  bool all_ok = true;
  std::string first_fail;
  for (size_t i = 0; i < results.size(); ++i) {
    const auto& r = results[i];
    std::printf("%s %zu - %s # %s\n", r.ok ? "ok" : "not ok", i + 1, r.name.c_str(),
                r.detail.c_str());
    if (!r.ok && first_fail.empty()) first_fail = r.name;
    all_ok = all_ok && r.ok;
  }
  if (!all_ok) {
    std::fprintf(stderr, "verification failed: %s\n", first_fail.c_str());
    return kExitVerifyFail;
  }
  return kExitOk;
}

int cmd_gen_corpus(const std::string& out_path, uint64_t seed, int64_t bytes) {
  std::string text = cmoe::generate_text(seed, static_cast<size_t>(bytes));
  std::ofstream out(out_path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + out_path);
  out << text;
  std::printf("wrote %lld bytes to %s\n", static_cast<long long>(bytes), out_path.c_str());
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"concept-level MoE language model toolkit"};
  app.require_subcommand(1);

  // train
  auto* train = app.add_subcommand("train", "train a model on a byte corpus");
  std::string model_cfg, train_cfg, corpus, out_dir;
  double eval_fraction = 0.05;
  train->add_option("--model-config", model_cfg)->required();
  train->add_option("--train-config", train_cfg)->required();
  train->add_option("--corpus", corpus)->required();
  train->add_option("--out", out_dir)->required();
  train->add_option("--eval-fraction", eval_fraction, "tail fraction held out for eval");

  // eval
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on held-out data");
  std::string ev_ckpt, ev_corpus;
  double ev_fraction = 0.05;
  int64_t ev_seq_len = 0, ev_windows = 64;
  ev->add_option("--checkpoint", ev_ckpt)->required();
  ev->add_option("--corpus", ev_corpus)->required();
  ev->add_option("--eval-fraction", ev_fraction);
  ev->add_option("--seq-len", ev_seq_len, "0 uses the checkpoint's seq_len");
  ev->add_option("--windows", ev_windows);

  // chunk
  auto* chunk = app.add_subcommand("chunk", "show chunk boundaries on a text file");
  std::string ck_ckpt, ck_text, ck_format = "annotated", ck_router;
  int64_t ck_max_bytes = 2048, ck_stride = 0;
  chunk->add_option("--checkpoint", ck_ckpt)->required();
  chunk->add_option("--text", ck_text)->required();
  chunk->add_option("--format", ck_format, "annotated|json");
  chunk->add_option("--max-bytes", ck_max_bytes);
  chunk->add_option("--router-override", ck_router, "force cosine or fixed routing");
  chunk->add_option("--stride", ck_stride, "stride for --router-override fixed");

  // cost
  auto* cost = app.add_subcommand("cost", "analytical FLOPs / attention-map / KV-cache model");
  std::string co_config, co_strategy, co_r = "2", co_sweep, co_csv;
  cost->add_option("--config", co_config, "model config JSON for the base architecture");
  cost->add_option("--strategy", co_strategy, "baseline|moe|loop|attn_moe|all");
  cost->add_option("--R", co_r, "compression ratio, decimals or fractions like 16/9");
  cost->add_option("--sweep", co_sweep, "comma-separated list of R values");
  cost->add_option("--csv", co_csv, "also write the table to this file");

  // verify
  auto* verify = app.add_subcommand("verify", "run the invariant suites");
  std::string vf_suite = "all";
  uint64_t vf_seed = 20240601;
  bool vf_bug = false;
  verify->add_option("--suite", vf_suite, "grad|causal|ema|convert|all");
  verify->add_option("--seed", vf_seed);
  verify->add_flag("--inject-ema-bug", vf_bug)->group("");  // test hook

  // gen-corpus
  auto* gen = app.add_subcommand("gen-corpus", "write deterministic sample text");
  std::string gc_out = "corpus.txt";
  uint64_t gc_seed = 1;
  int64_t gc_bytes = 1 << 20;
  gen->add_option("--out", gc_out);
  gen->add_option("--seed", gc_seed);
  gen->add_option("--bytes", gc_bytes);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (*train) return cmd_train(model_cfg, train_cfg, corpus, out_dir, eval_fraction);
    if (*ev) return cmd_eval(ev_ckpt, ev_corpus, ev_fraction, ev_seq_len, ev_windows);
    if (*chunk) return cmd_chunk(ck_ckpt, ck_text, ck_format, ck_max_bytes, ck_router, ck_stride);
    if (*cost) return cmd_cost(co_config, co_strategy, co_r, co_sweep, co_csv);
    if (*verify) return cmd_verify(vf_suite, vf_seed, vf_bug);
    if (*gen) return cmd_gen_corpus(gc_out, gc_seed, gc_bytes);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitUsage;
  }
  return kExitUsage;
}
