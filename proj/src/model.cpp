#include "cmoe/model.hpp"

#include <cmath>
#include <stdexcept>

namespace cmoe {

namespace {

[[noreturn]] void bad_field(const std::string& field, const std::string& why) {
  throw std::invalid_argument("ModelConfig." + field + ": " + why);
}

Tensor clone_tensor(const Tensor& t, bool requires_grad) {
  return Tensor::from(t.shape(), t.data(), requires_grad);
}

}  // namespace

int64_t ModelConfig::effective_concept_d_ff() const {
  return concept_d_ff > 0 ? concept_d_ff : d_ff * d_c / d;
}

int ModelConfig::effective_joint_layers() const {
  if (arch != Arch::concept_moe || !joint_decoding) return 0;
  return static_cast<int>(std::min<int64_t>(joint_layers, L_D));
}

int64_t ModelConfig::effective_fixed_stride() const {
  if (fixed_stride >= 1) return fixed_stride;
  return static_cast<int64_t>(std::ceil(R_target));
}

void ModelConfig::validate() const {
  if (d < 1) bad_field("d", "must be positive");
  if (n_heads < 1 || d % n_heads != 0) bad_field("n_heads", "must divide d");
  if ((d / n_heads) % 2 != 0) bad_field("n_heads", "head dimension must be even for rotary");
  if (d_c < d) bad_field("d_c", "must be >= d");
  if (d_c % n_heads != 0 || (d_c / n_heads) % 2 != 0)
    bad_field("d_c", "must split into even-dimension heads");
  if (L_E < 0) bad_field("L_E", "must be >= 0");
  if (L_C < 1) bad_field("L_C", "must be >= 1");
  if (L_D < 0) bad_field("L_D", "must be >= 0");
  if (L_loop < 0 || L_loop > L_C) bad_field("L_loop", "must lie in [0, L_C]");
  if (d_ff < 1) bad_field("d_ff", "must be positive");
  if (concept_d_ff < 0) bad_field("concept_d_ff", "must be >= 0");
  if (n_experts < 1) bad_field("n_experts", "must be positive");
  if (k_active < 1 || k_active > n_experts) bad_field("k_active", "must lie in [1, n_experts]");
  const int ce = effective_concept_n_experts();
  const int ck = effective_concept_k_active();
  if (ck < 1 || ck > ce) bad_field("concept_k_active", "must lie in [1, concept_n_experts]");
  if (arch == Arch::concept_moe && router != RouterKind::fixed && R_target <= 1.0)
    bad_field("R_target", "must exceed 1 unless the router is fixed");
  if (router == RouterKind::fixed && effective_fixed_stride() < 1)
    bad_field("fixed_stride", "must be >= 1");
  if (noise.tau < 1.0) bad_field("noise.tau", "must be >= 1");
  if (noise.sigma < 0.0) bad_field("noise.sigma", "must be >= 0");
  if (joint_layers < 0) bad_field("joint_layers", "must be >= 0");
  if (lambda_aux < 0.0) bad_field("lambda_aux", "must be >= 0");
  if (seq_len < 1) bad_field("seq_len", "must be positive");
  if (vocab < 2) bad_field("vocab", "must be >= 2");
  if (arch == Arch::moe_baseline && d_c != d) bad_field("d_c", "baseline runs at width d");
  if (concept_delta_residual && d_c != d)
    bad_field("concept_delta_residual", "requires d_c == d");
  if (concept_delta_residual && merge != MergeStrategy::last_token)
    bad_field("concept_delta_residual", "requires last_token merging");
}

namespace {

struct StackDims {
  int64_t width, ff;
  int experts, k;
};

StackDims encoder_dims(const ModelConfig& c) { return {c.d, c.d_ff, c.n_experts, c.k_active}; }
StackDims decoder_dims(const ModelConfig& c) { return {c.d, c.d_ff, c.n_experts, c.k_active}; }
StackDims concept_dims(const ModelConfig& c) {
  if (c.arch == Arch::moe_baseline) return {c.d, c.d_ff, c.n_experts, c.k_active};
  return {c.d_c, c.effective_concept_d_ff(), c.effective_concept_n_experts(),
          c.effective_concept_k_active()};
}

Tensor randn(Rng& rng, const Shape& shape, double std) {
  Tensor t = Tensor::zeros(shape, true);
  for (double& v : t.data()) v = rng.gaussian() * std;
  if (precision() == Precision::f32) round_to_f32(t.data());
  return t;
}

LayerWeights init_layer(Rng& rng, const StackDims& s, int n_heads, bool joint,
                        bool randomize_concept_proj) {
  LayerWeights lw;
  const double ws = 1.0 / std::sqrt(static_cast<double>(s.width));
  lw.attn_norm_gain = Tensor::full({s.width}, 1.0, true);
  lw.attn.n_heads = n_heads;
  lw.attn.wq = randn(rng, {s.width, s.width}, ws);
  lw.attn.wk = randn(rng, {s.width, s.width}, ws);
  lw.attn.wv = randn(rng, {s.width, s.width}, ws);
  lw.attn.wo = randn(rng, {s.width, s.width}, ws);
  if (joint) {
    lw.attn.has_concept_proj = true;
    if (randomize_concept_proj) {
      lw.attn.wq_c = randn(rng, {s.width, s.width}, ws);
      lw.attn.wk_c = randn(rng, {s.width, s.width}, ws);
      lw.attn.wv_c = randn(rng, {s.width, s.width}, ws);
    } else {
      lw.attn.wq_c = Tensor::zeros({s.width, s.width}, true);
      lw.attn.wk_c = Tensor::zeros({s.width, s.width}, true);
      lw.attn.wv_c = Tensor::zeros({s.width, s.width}, true);
    }
  }
  lw.moe_norm_gain = Tensor::full({s.width}, 1.0, true);
  lw.moe.n_experts = s.experts;
  lw.moe.k_active = s.k;
  lw.moe.router = randn(rng, {s.width, s.experts}, ws);
  const double fs = 1.0 / std::sqrt(static_cast<double>(s.ff));
  for (int e = 0; e < s.experts; ++e) {
    ExpertWeights ex;
    ex.w_gate = randn(rng, {s.width, s.ff}, ws);
    ex.w_up = randn(rng, {s.width, s.ff}, ws);
    ex.w_down = randn(rng, {s.ff, s.width}, fs);
    lw.moe.experts.push_back(std::move(ex));
  }
  return lw;
}

void visit_layer(const std::string& prefix, LayerWeights& lw,
                 const std::function<void(const std::string&, Tensor&)>& fn) {
  fn(prefix + ".attn_norm.gain", lw.attn_norm_gain);
  fn(prefix + ".attn.wq", lw.attn.wq);
  fn(prefix + ".attn.wk", lw.attn.wk);
  fn(prefix + ".attn.wv", lw.attn.wv);
  fn(prefix + ".attn.wo", lw.attn.wo);
  if (lw.attn.has_concept_proj) {
    fn(prefix + ".attn.wq_c", lw.attn.wq_c);
    fn(prefix + ".attn.wk_c", lw.attn.wk_c);
    fn(prefix + ".attn.wv_c", lw.attn.wv_c);
  }
  fn(prefix + ".moe_norm.gain", lw.moe_norm_gain);
  fn(prefix + ".moe.router", lw.moe.router);
  for (size_t e = 0; e < lw.moe.experts.size(); ++e) {
    const std::string ep = prefix + ".moe.expert." + std::to_string(e);
    fn(ep + ".w_gate", lw.moe.experts[e].w_gate);
    fn(ep + ".w_up", lw.moe.experts[e].w_up);
    fn(ep + ".w_down", lw.moe.experts[e].w_down);
  }
}

}  // namespace

void ModelWeights::for_each(const std::function<void(const std::string&, Tensor&)>& fn) {
  fn("embedding", embedding);
  fn("head", head);
  fn("final_norm.gain", final_norm_gain);
  for (size_t i = 0; i < encoder.size(); ++i) visit_layer("encoder." + std::to_string(i), encoder[i], fn);
  for (size_t i = 0; i < concept_stack.size(); ++i)
    visit_layer("concept." + std::to_string(i), concept_stack[i], fn);
  for (size_t i = 0; i < decoder.size(); ++i) visit_layer("decoder." + std::to_string(i), decoder[i], fn);
  if (chunk_router.wq.numel() > 0) {
    fn("chunk_router.wq", chunk_router.wq);
    fn("chunk_router.wk", chunk_router.wk);
  }
  if (linear_router_v.numel() > 0) {
    fn("chunk_router.v", linear_router_v);
    fn("chunk_router.bias", linear_router_bias);
  }
  if (proj_in.numel() > 0) {
    fn("proj_in", proj_in);
    fn("proj_out", proj_out);
  }
}

std::vector<Tensor> ModelWeights::parameters() {
  std::vector<Tensor> out;
  for_each([&](const std::string&, Tensor& t) { out.push_back(t); });
  return out;
}

int64_t ModelWeights::count() const {
  int64_t n = 0;
  const_cast<ModelWeights*>(this)->for_each(
      [&](const std::string&, Tensor& t) { n += t.numel(); });
  return n;
}

ModelWeights init_weights(const ModelConfig& cfg, uint64_t seed, bool randomize_concept_proj) {
  cfg.validate();
  Rng rng(seed);
  ModelWeights w;
  const double ds = 1.0 / std::sqrt(static_cast<double>(cfg.d));
  w.embedding = randn(rng, {cfg.vocab, cfg.d}, ds);
  w.head = randn(rng, {cfg.d, cfg.vocab}, 0.5 * ds);
  w.final_norm_gain = Tensor::full({cfg.d}, 1.0, true);
  const int nj = cfg.effective_joint_layers();
  for (int64_t i = 0; i < cfg.L_E; ++i)
    w.encoder.push_back(init_layer(rng, encoder_dims(cfg), cfg.n_heads, false, false));
  for (int64_t i = 0; i < cfg.L_C; ++i)
    w.concept_stack.push_back(init_layer(rng, concept_dims(cfg), cfg.n_heads, false, false));
  for (int64_t i = 0; i < cfg.L_D; ++i) {
    const bool joint = i >= cfg.L_D - nj;
    w.decoder.push_back(
        init_layer(rng, decoder_dims(cfg), cfg.n_heads, joint, randomize_concept_proj));
  }
  if (cfg.arch == Arch::concept_moe) {
    if (cfg.router == RouterKind::cosine) {
      w.chunk_router.wq = randn(rng, {cfg.d, cfg.d}, ds);
      w.chunk_router.wk = randn(rng, {cfg.d, cfg.d}, ds);
    } else if (cfg.router == RouterKind::linear) {
      w.linear_router_v = randn(rng, {cfg.d}, ds);
      w.linear_router_bias = Tensor::zeros({1}, true);
    }
    if (cfg.d_c > cfg.d) {
      w.proj_in = randn(rng, {cfg.d, cfg.d_c}, ds);
      w.proj_out = randn(rng, {cfg.d_c, cfg.d}, 1.0 / std::sqrt(static_cast<double>(cfg.d_c)));
    }
  }
  return w;
}

int64_t param_count(const ModelConfig& cfg) {
  cfg.validate();
  auto layer = [&](const StackDims& s, bool joint) {
    int64_t n = 4 * s.width * s.width + 2 * s.width;  // attention + two gains
    n += s.width * s.experts + static_cast<int64_t>(s.experts) * 3 * s.width * s.ff;
    if (joint) n += 3 * s.width * s.width;
    return n;
  };
  int64_t n = cfg.vocab * cfg.d + cfg.d * cfg.vocab + cfg.d;
  n += cfg.L_E * layer(encoder_dims(cfg), false);
  n += cfg.L_C * layer(concept_dims(cfg), false);
  const int nj = cfg.effective_joint_layers();
  n += (cfg.L_D - nj) * layer(decoder_dims(cfg), false);
  n += nj * layer(decoder_dims(cfg), true);
  if (cfg.arch == Arch::concept_moe) {
    if (cfg.router == RouterKind::cosine) n += 2 * cfg.d * cfg.d;
    if (cfg.router == RouterKind::linear) n += cfg.d + 1;
    if (cfg.d_c > cfg.d) n += 2 * cfg.d * cfg.d_c;
  }
  return n;
}

namespace {

struct RowSlices {
  std::vector<int> ids, targets;
  std::vector<uint8_t> valid;
};

RowSlices batch_row(const Batch& batch, int64_t r) {
  RowSlices row;
  const int64_t T = batch.seq_len;
  row.ids.assign(batch.input_ids.begin() + r * T, batch.input_ids.begin() + (r + 1) * T);
  row.targets.assign(batch.targets.begin() + r * T, batch.targets.begin() + (r + 1) * T);
  row.valid.assign(batch.target_valid.begin() + r * T, batch.target_valid.begin() + (r + 1) * T);
  return row;
}

Tensor run_stack(Tensor x, std::vector<LayerWeights>& layers, std::vector<Tensor>& balances,
                 const Tensor* concepts = nullptr, int joint_from = -1) {
  for (size_t i = 0; i < layers.size(); ++i) {
    const Tensor* c = (joint_from >= 0 && static_cast<int>(i) >= joint_from) ? concepts : nullptr;
    LayerOut lo = transformer_layer(x, layers[i], c);
    x = lo.y;
    balances.push_back(lo.balance_loss);
  }
  return x;
}

}  // namespace

ForwardTrace forward(const ModelConfig& cfg, ModelWeights& w, const Batch& batch, Mode mode,
                     Rng* rng) {
  cfg.validate();
  if (batch.batch < 1 || batch.seq_len < 1)
    throw std::invalid_argument("forward: empty batch");

  ForwardTrace trace;
  std::vector<Tensor> balances;
  std::vector<Tensor> ce_sums;
  std::vector<Tensor> p_parts;
  std::vector<uint8_t> b_all;
  int64_t valid_total = 0;
  int64_t flips = 0;

  for (int64_t r = 0; r < batch.batch; ++r) {
    RowSlices row = batch_row(batch, r);
    const int64_t T = static_cast<int64_t>(row.ids.size());
    Tensor x = embed(w.embedding, row.ids);
    x = run_stack(x, w.encoder, balances);

    Tensor y;
    if (cfg.arch == Arch::moe_baseline) {
      y = run_stack(x, w.concept_stack, balances);
      y = run_stack(y, w.decoder, balances);
      trace.tokens += T;
      trace.concepts += T;
    } else {
      ChunkDecision dec;
      if (cfg.router == RouterKind::fixed) {
        dec = fixed_chunk_decision(T, cfg.effective_fixed_stride());
      } else {
        Tensor p = cfg.router == RouterKind::cosine
                       ? boundary_scores(x, w.chunk_router)
                       : linear_router_scores(x, w.linear_router_v, w.linear_router_bias);
        dec = decide_boundaries(std::move(p), cfg.noise, mode == Mode::train, rng);
      }
      IndexMaps maps = build_maps(dec.b);
      ConceptSequence cs = merge(x, dec.b, cfg.merge, cfg.sum_span);

      Tensor c_in = cfg.d_c > cfg.d ? matmul(cs.c, w.proj_in) : cs.c;
      Tensor h = run_stack(c_in, w.concept_stack, balances);
      for (int64_t i = 0; i < cfg.L_loop; ++i) {  // strategy-2 loop, shared weights
        LayerOut lo = transformer_layer(h, w.concept_stack[static_cast<size_t>(i)]);
        h = lo.y;
        balances.push_back(lo.balance_loss);
      }
      Tensor h_out = cfg.d_c > cfg.d ? matmul(h, w.proj_out) : h;
      if (cfg.concept_delta_residual) h_out = sub(h_out, cs.c);

      Tensor p_bnd = gather_rows(dec.p, maps.phi);
      Tensor e = ema_scan(h_out, p_bnd, cfg.ema_mode);
      DechunkOut dz = dechunk(e, maps, x, dec.selected_prob);

      const int nj = cfg.effective_joint_layers();
      y = run_stack(dz.z, w.decoder, balances, &dz.aligned,
                    static_cast<int>(cfg.L_D) - nj);

      trace.tokens += T;
      trace.concepts += dec.n_concepts;
      for (size_t i = 0; i < dec.b.size(); ++i)
        if (dec.b[i] != dec.b_threshold[i]) ++flips;
      p_parts.push_back(dec.p);
      b_all.insert(b_all.end(), dec.b.begin(), dec.b.end());
      trace.decisions.push_back(std::move(dec));
    }

    Tensor logits = lm_head(rmsnorm(y, w.final_norm_gain), w.head);
    int64_t valid = 0;
    for (uint8_t v : row.valid) valid += v;
    if (valid > 0) {
      ce_sums.push_back(cross_entropy_sum(logits, row.targets, row.valid));
      valid_total += valid;
    }
    trace.logits.push_back(std::move(logits));
  }

  Tensor ce_mean = Tensor::scalar(0.0);
  if (valid_total > 0) {
    Tensor acc = ce_sums[0];
    for (size_t i = 1; i < ce_sums.size(); ++i) acc = add(acc, ce_sums[i]);
    ce_mean = mul_scalar(acc, 1.0 / static_cast<double>(valid_total));
  }

  Tensor aux = Tensor::scalar(0.0);
  if (cfg.arch == Arch::concept_moe && cfg.router != RouterKind::fixed) {
    Tensor p_all = p_parts.size() == 1 ? p_parts[0] : concat_rows(p_parts);
    aux = aux_loss(p_all, b_all, cfg.R_target);
  }

  Tensor bal = balances.empty() ? Tensor::scalar(0.0) : balances[0];
  for (size_t i = 1; i < balances.size(); ++i) bal = add(bal, balances[i]);
  if (!balances.empty()) bal = mul_scalar(bal, 1.0 / static_cast<double>(balances.size()));

  trace.total_loss = add(add(ce_mean, mul_scalar(aux, cfg.lambda_aux)), mul_scalar(bal, 0.01));
  trace.ce = ce_mean.value();
  trace.aux = aux.value();
  trace.balance = bal.value();
  trace.r_achieved = static_cast<double>(trace.tokens) / static_cast<double>(trace.concepts);
  if (!trace.decisions.empty()) {
    double psum = 0.0;
    int64_t pn = 0;
    for (const ChunkDecision& d : trace.decisions) {
      for (double v : d.p.data()) psum += v;
      pn += d.p.numel();
    }
    trace.p_mean = psum / static_cast<double>(pn);
    trace.flip_rate = static_cast<double>(flips) / static_cast<double>(pn);
  }
  return trace;
}

ModelWeights build_baseline_moe(const ModelConfig& cfg, uint64_t seed) {
  ModelConfig base = cfg;
  base.arch = Arch::moe_baseline;
  return init_weights(base, seed);
}

ConvertedModel convert_to_conceptmoe(const ModelConfig& base_cfg, const ModelWeights& base,
                                     uint64_t router_seed) {
  if (base_cfg.d_c != base_cfg.d)
    throw std::invalid_argument("convert_to_conceptmoe: requires d_c == d");
  ConvertedModel out;
  out.cfg = base_cfg;
  out.cfg.arch = Arch::concept_moe;
  out.cfg.merge = MergeStrategy::last_token;
  out.cfg.router = RouterKind::cosine;
  out.cfg.joint_decoding = true;
  out.cfg.concept_delta_residual = true;
  out.cfg.validate();

  ModelWeights& w = out.weights;
  auto copy_layer = [](const LayerWeights& src) {
    LayerWeights dst;
    dst.attn_norm_gain = clone_tensor(src.attn_norm_gain, true);
    dst.moe_norm_gain = clone_tensor(src.moe_norm_gain, true);
    dst.attn.n_heads = src.attn.n_heads;
    dst.attn.wq = clone_tensor(src.attn.wq, true);
    dst.attn.wk = clone_tensor(src.attn.wk, true);
    dst.attn.wv = clone_tensor(src.attn.wv, true);
    dst.attn.wo = clone_tensor(src.attn.wo, true);
    dst.moe.n_experts = src.moe.n_experts;
    dst.moe.k_active = src.moe.k_active;
    dst.moe.router = clone_tensor(src.moe.router, true);
    for (const ExpertWeights& e : src.moe.experts)
      dst.moe.experts.push_back({clone_tensor(e.w_gate, true), clone_tensor(e.w_up, true),
                                 clone_tensor(e.w_down, true)});
    return dst;
  };

  w.embedding = clone_tensor(base.embedding, true);
  w.head = clone_tensor(base.head, true);
  w.final_norm_gain = clone_tensor(base.final_norm_gain, true);
  for (const LayerWeights& l : base.encoder) w.encoder.push_back(copy_layer(l));
  for (const LayerWeights& l : base.concept_stack) {
    w.concept_stack.push_back(copy_layer(l));
    w.concept_stack.back().moe.k_active = out.cfg.effective_concept_k_active();
  }
  const int nj = out.cfg.effective_joint_layers();
  for (size_t i = 0; i < base.decoder.size(); ++i) {
    LayerWeights l = copy_layer(base.decoder[i]);
    if (static_cast<int64_t>(i) >= out.cfg.L_D - nj) {
      const int64_t dd = out.cfg.d;
      l.attn.has_concept_proj = true;
      l.attn.wq_c = Tensor::zeros({dd, dd}, true);
      l.attn.wk_c = Tensor::zeros({dd, dd}, true);
      l.attn.wv_c = Tensor::zeros({dd, dd}, true);
    }
    w.decoder.push_back(std::move(l));
  }
  Rng rng(router_seed);
  const double ds = 1.0 / std::sqrt(static_cast<double>(out.cfg.d));
  w.chunk_router.wq = randn(rng, {out.cfg.d, out.cfg.d}, ds);
  w.chunk_router.wk = randn(rng, {out.cfg.d, out.cfg.d}, ds);
  return out;
}

}  // namespace cmoe
