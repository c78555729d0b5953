#include "cmoe/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "cmoe/checkpoint.hpp"

namespace cmoe {

void TrainConfig::validate() const {
  if (steps < 1) throw std::invalid_argument("TrainConfig.steps: must be positive");
  if (batch < 1) throw std::invalid_argument("TrainConfig.batch: must be positive");
  if (seq_len < 2) throw std::invalid_argument("TrainConfig.seq_len: must be >= 2");
  if (lr_min > lr_peak) throw std::invalid_argument("TrainConfig.lr_min: must not exceed lr_peak");
  if (lr_warmup_steps < 0 || lr_warmup_steps >= steps)
    throw std::invalid_argument("TrainConfig.lr_warmup_steps: must lie in [0, steps)");
  if (eval_every < 1) throw std::invalid_argument("TrainConfig.eval_every: must be positive");
  if (eval_windows < 1) throw std::invalid_argument("TrainConfig.eval_windows: must be positive");
  if (R_target <= 1.0) throw std::invalid_argument("TrainConfig.R_target: must exceed 1");
}

double cosine_lr(const TrainConfig& cfg, int64_t t) {
  const double warm = static_cast<double>(cfg.lr_warmup_steps);
  if (t <= cfg.lr_warmup_steps)
    return warm == 0.0 ? cfg.lr_peak : cfg.lr_peak * static_cast<double>(t) / warm;
  const double progress = static_cast<double>(t - cfg.lr_warmup_steps) /
                          static_cast<double>(cfg.steps - cfg.lr_warmup_steps);
  return cfg.lr_min + 0.5 * (cfg.lr_peak - cfg.lr_min) * (1.0 + std::cos(3.14159265358979323846 * progress));
}

AdamW::AdamW(std::vector<Tensor> params, double beta1, double beta2, double weight_decay,
             double eps)
    : params_(std::move(params)), beta1_(beta1), beta2_(beta2), wd_(weight_decay), eps_(eps) {
  for (Tensor& p : params_) {
    m_.emplace_back(p.data().size(), 0.0);
    v_.emplace_back(p.data().size(), 0.0);
  }
}

void AdamW::zero_grad() {
  for (Tensor& p : params_) p.zero_grad();
}

double AdamW::clip_grad_norm(double max_norm) {
  double ss = 0.0;
  for (Tensor& p : params_) {
    if (!p.has_grad()) continue;
    for (double g : p.grad()) ss += g * g;
  }
  const double norm = std::sqrt(ss);
  if (max_norm > 0.0 && norm > max_norm) {
    const double scale = max_norm / norm;
    for (Tensor& p : params_) {
      if (!p.has_grad()) continue;
      for (double& g : p.grad()) g *= scale;
    }
  }
  return norm;
}

void AdamW::step(double lr) {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  const bool round = precision() == Precision::f32;
  for (size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = params_[i];
    if (!p.has_grad()) continue;
    const bool decay = wd_ > 0.0 && p.rank() >= 2;
    auto& data = p.data();
    auto& grad = p.grad();
    auto& m = m_[i];
    auto& v = v_[i];
    for (size_t j = 0; j < data.size(); ++j) {
      m[j] = beta1_ * m[j] + (1.0 - beta1_) * grad[j];
      v[j] = beta2_ * v[j] + (1.0 - beta2_) * grad[j] * grad[j];
      const double mh = m[j] / bc1;
      const double vh = v[j] / bc2;
      double upd = mh / (std::sqrt(vh) + eps_);
      if (decay) upd += wd_ * data[j];
      data[j] -= lr * upd;
      if (round) data[j] = static_cast<double>(static_cast<float>(data[j]));
    }
  }
}

EvalResult evaluate(const ModelConfig& cfg, ModelWeights& w, const Corpus& corpus,
                    int64_t seq_len, int64_t max_windows) {
  NoGradScope ng;
  std::vector<Batch> batches = eval_batches(corpus, seq_len, max_windows);
  if (batches.empty()) throw std::runtime_error("evaluate: eval split has no full window");
  double ce_sum = 0.0;
  int64_t ce_count = 0, tokens = 0, concepts = 0;
  double p_sum = 0.0;
  int64_t p_count = 0;
  for (const Batch& b : batches) {
    ForwardTrace t = forward(cfg, w, b, Mode::eval, nullptr);
    int64_t valid = 0;
    for (uint8_t v : b.target_valid) valid += v;
    ce_sum += t.ce * static_cast<double>(valid);
    ce_count += valid;
    tokens += t.tokens;
    concepts += t.concepts;
    for (const ChunkDecision& d : t.decisions) {
      for (double v : d.p.data()) p_sum += v;
      p_count += d.p.numel();
    }
  }
  EvalResult r;
  r.ce = ce_sum / static_cast<double>(ce_count);
  r.r = static_cast<double>(tokens) / static_cast<double>(concepts);
  r.p_mean = p_count > 0 ? p_sum / static_cast<double>(p_count) : 0.0;
  return r;
}

std::string metrics_to_csv(const std::vector<MetricsRow>& rows) {
  std::string out = "step,loss_total,ce,aux,balance,R_train,R_eval,p_mean,flip_rate,lr\n";
  char buf[512];
  for (const MetricsRow& r : rows) {
    std::snprintf(buf, sizeof(buf), "%lld,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g\n",
                  static_cast<long long>(r.step), r.loss_total, r.ce, r.aux, r.balance, r.r_train,
                  r.r_eval, r.p_mean, r.flip_rate, r.lr);
    out += buf;
  }
  return out;
}

TrainResult train(ModelConfig cfg, const TrainConfig& tcfg, const Corpus& corpus,
                  const std::string& out_dir) {
  tcfg.validate();
  cfg.lambda_aux = tcfg.lambda_aux;
  cfg.R_target = tcfg.R_target;
  cfg.seq_len = tcfg.seq_len;
  cfg.validate();

  PrecisionScope prec(tcfg.train_precision);
  ModelWeights w = init_weights(cfg, tcfg.seed);
  AdamW opt(w.parameters(), tcfg.beta1, tcfg.beta2, tcfg.weight_decay);
  BatchIterator it(corpus, tcfg.seq_len, tcfg.batch, tcfg.seed + 1);
  Rng noise_rng(tcfg.seed + 2);

  TrainResult result;
  EvalResult ev = evaluate(cfg, w, corpus, tcfg.seq_len, tcfg.eval_windows);

  std::vector<double> r_history;
  for (int64_t step = 1; step <= tcfg.steps; ++step) {
    Batch batch = it.next();
    ForwardTrace trace = forward(cfg, w, batch, Mode::train, &noise_rng);
    const double loss = trace.total_loss.value();
    if (!std::isfinite(loss)) {
      double pmin = 1.0, pmax = 0.0;
      for (const ChunkDecision& d : trace.decisions)
        for (double v : d.p.data()) {
          pmin = std::min(pmin, v);
          pmax = std::max(pmax, v);
        }
      char msg[256];
      std::snprintf(msg, sizeof(msg),
                    "train: non-finite loss at step %lld (p mean %.6g, min %.6g, max %.6g, R %.4g)",
                    static_cast<long long>(step), trace.p_mean, pmin, pmax, trace.r_achieved);
      throw std::runtime_error(msg);
    }
    backward(trace.total_loss);
    opt.clip_grad_norm(tcfg.grad_clip);
    const double lr = cosine_lr(tcfg, step);
    opt.step(lr);
    opt.zero_grad();

    if (step % tcfg.eval_every == 0 || step == tcfg.steps)
      ev = evaluate(cfg, w, corpus, tcfg.seq_len, tcfg.eval_windows);

    MetricsRow row;
    row.step = step;
    row.loss_total = loss;
    row.ce = trace.ce;
    row.aux = trace.aux;
    row.balance = trace.balance;
    row.r_train = trace.r_achieved;
    row.r_eval = ev.r;
    row.p_mean = trace.p_mean;
    row.flip_rate = trace.flip_rate;
    row.lr = lr;
    result.metrics.push_back(row);
    r_history.push_back(trace.r_achieved);
  }

  const size_t tail = std::min<size_t>(r_history.size(), 500);
  double rsum = 0.0;
  for (size_t i = r_history.size() - tail; i < r_history.size(); ++i) rsum += r_history[i];
  result.r_train_final = rsum / static_cast<double>(tail);
  result.final_eval = ev;

  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    {
      std::ofstream csv(out_dir + "/metrics.csv", std::ios::binary | std::ios::trunc);
      if (!csv) throw std::runtime_error("cannot write " + out_dir + "/metrics.csv");
      csv << metrics_to_csv(result.metrics);
    }
    result.checkpoint_dir = out_dir + "/checkpoint";
    save_checkpoint(result.checkpoint_dir, cfg, w);
    char buf[256];
    std::snprintf(buf, sizeof(buf),
                  "{\n  \"ce_eval\": %.10g,\n  \"R_eval\": %.10g,\n  \"p_mean\": %.10g,\n"
                  "  \"R_train_final\": %.10g\n}\n",
                  ev.ce, ev.r, ev.p_mean, result.r_train_final);
    std::ofstream summary(out_dir + "/summary.json", std::ios::binary | std::ios::trunc);
    summary << buf;
  }
  return result;
}

}  // namespace cmoe
