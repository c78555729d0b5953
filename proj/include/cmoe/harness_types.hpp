#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cmoe/tensor.hpp"

namespace cmoe {

struct TrainConfig {
  int64_t steps = 1000;
  int64_t batch = 4;
  int64_t seq_len = 128;
  double lr_peak = 3e-3;
  int64_t lr_warmup_steps = 100;
  double lr_min = 3e-4;
  double weight_decay = 0.1;
  double beta1 = 0.9, beta2 = 0.95;
  uint64_t seed = 42;
  int64_t eval_every = 500;
  double lambda_aux = 0.03;
  double R_target = 2.0;
  double grad_clip = 1.0;
  int64_t eval_windows = 64;  // held-out windows per evaluation pass
  Precision train_precision = Precision::f32;

  void validate() const;
};

struct MetricsRow {
  int64_t step;
  double loss_total, ce, aux, balance;
  double r_train, r_eval;
  double p_mean, flip_rate, lr;
};

}  // namespace cmoe
