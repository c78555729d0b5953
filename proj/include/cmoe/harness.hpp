#pragma once

#include <string>
#include <vector>

#include "cmoe/data.hpp"
#include "cmoe/harness_types.hpp"
#include "cmoe/model.hpp"

namespace cmoe {

// Linear warmup from zero to lr_peak, then cosine decay to lr_min at the
// final step. t counts completed steps (lr(0) = 0).
double cosine_lr(const TrainConfig& cfg, int64_t t);

// Decoupled weight decay; decays rank >= 2 tensors only. Moments are kept in
// double regardless of the training precision.
class AdamW {
 public:
  AdamW(std::vector<Tensor> params, double beta1, double beta2, double weight_decay,
        double eps = 1e-8);

  void step(double lr);
  void zero_grad();
  // Global-norm clipping applied to the stored gradients; returns the norm.
  double clip_grad_norm(double max_norm);

  const std::vector<Tensor>& params() const { return params_; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> m_, v_;
  double beta1_, beta2_, wd_, eps_;
  int64_t t_ = 0;
};

struct EvalResult {
  double ce = 0.0;
  double r = 1.0;
  double p_mean = 0.0;
};

// Eval-mode pass over held-out windows: thresholded boundaries, no noise.
EvalResult evaluate(const ModelConfig& cfg, ModelWeights& w, const Corpus& corpus,
                    int64_t seq_len, int64_t max_windows);

struct TrainResult {
  std::vector<MetricsRow> metrics;
  EvalResult final_eval;
  double r_train_final = 1.0;  // mean of R_train over the last up-to-500 steps
  std::string checkpoint_dir;
};

std::string metrics_to_csv(const std::vector<MetricsRow>& rows);

// Trains cfg on the corpus, writing <out_dir>/checkpoint, metrics.csv and
// summary.json. tcfg's lambda_aux / R_target / seq_len override the model
// config's. Deterministic for a fixed seed. A non-finite loss aborts with a
// dump of the boundary-probability statistics.
TrainResult train(ModelConfig cfg, const TrainConfig& tcfg, const Corpus& corpus,
                  const std::string& out_dir);

}  // namespace cmoe
