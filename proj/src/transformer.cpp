#include "cmoe/transformer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace cmoe {

Tensor rmsnorm(const Tensor& x, const Tensor& gain, double eps) {
  Tensor ms = mean(mul(x, x), -1);                       // [L]
  Tensor inv = pow_scalar(add_scalar(ms, eps), -0.5);    // [L]
  return mul(scale_rows(x, inv), gain);
}

Tensor rope(const Tensor& x, int n_heads, double base) {
  if (x.rank() != 2) throw std::invalid_argument("rope: expected [L,d], got " + shape_str(x.shape()));
  const int64_t L = x.dim(0), d = x.dim(1);
  if (d % n_heads != 0 || (d / n_heads) % 2 != 0)
    throw std::invalid_argument("rope: head dim must be even; d=" + std::to_string(d) +
                                " n_heads=" + std::to_string(n_heads));
  const int64_t dh = d / n_heads;
  std::vector<double> out(x.data().size());
  const double* in = x.data().data();
  for (int64_t pos = 0; pos < L; ++pos) {
    for (int64_t h = 0; h < n_heads; ++h) {
      const int64_t off = pos * d + h * dh;
      for (int64_t t = 0; t < dh / 2; ++t) {
        const double theta =
            static_cast<double>(pos) * std::pow(base, -2.0 * static_cast<double>(t) / static_cast<double>(dh));
        const double c = std::cos(theta), s = std::sin(theta);
        const double a = in[off + 2 * t], b = in[off + 2 * t + 1];
        out[static_cast<size_t>(off + 2 * t)] = a * c - b * s;
        out[static_cast<size_t>(off + 2 * t + 1)] = a * s + b * c;
      }
    }
  }
  return make_result({L, d}, std::move(out), {x}, [L, d, dh, n_heads, base](TensorNode& self) {
    TensorNode& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    // backward is the inverse rotation
    for (int64_t pos = 0; pos < L; ++pos) {
      for (int64_t h = 0; h < n_heads; ++h) {
        const int64_t off = pos * d + h * dh;
        for (int64_t t = 0; t < dh / 2; ++t) {
          const double theta =
              static_cast<double>(pos) * std::pow(base, -2.0 * static_cast<double>(t) / static_cast<double>(dh));
          const double c = std::cos(theta), s = std::sin(theta);
          const double g0 = self.grad[static_cast<size_t>(off + 2 * t)];
          const double g1 = self.grad[static_cast<size_t>(off + 2 * t + 1)];
          p.grad[static_cast<size_t>(off + 2 * t)] += g0 * c + g1 * s;
          p.grad[static_cast<size_t>(off + 2 * t + 1)] += -g0 * s + g1 * c;
        }
      }
    }
  });
}

Tensor mha_causal(const Tensor& q, const Tensor& k, const Tensor& v, int n_heads) {
  if (q.shape() != k.shape() || q.shape() != v.shape()) fail_shape("mha_causal", q.shape(), v.shape());
  if (q.rank() != 2 || q.dim(1) % n_heads != 0)
    throw std::invalid_argument("mha_causal: bad shape " + shape_str(q.shape()) + " for " +
                                std::to_string(n_heads) + " heads");
  const int64_t L = q.dim(0), d = q.dim(1), dh = d / n_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  // Attention probabilities are kept for the backward pass: one L*L block
  // per head, rows past the diagonal unused.
  auto probs = std::make_shared<std::vector<double>>(static_cast<size_t>(n_heads) * L * L, 0.0);
  std::vector<double> out(static_cast<size_t>(L * d), 0.0);
  std::vector<double> scores(static_cast<size_t>(L));
  for (int h = 0; h < n_heads; ++h) {
    const int64_t hoff = h * dh;
    double* P = probs->data() + static_cast<int64_t>(h) * L * L;
    for (int64_t i = 0; i < L; ++i) {
      const double* qi = q.data().data() + i * d + hoff;
      double mx = -1e300;
      for (int64_t j = 0; j <= i; ++j) {
        const double* kj = k.data().data() + j * d + hoff;
        double s = 0.0;
        for (int64_t t = 0; t < dh; ++t) s += qi[t] * kj[t];
        scores[static_cast<size_t>(j)] = s * scale;
        mx = std::max(mx, scores[static_cast<size_t>(j)]);
      }
      double sum = 0.0;
      for (int64_t j = 0; j <= i; ++j) {
        const double e = std::exp(scores[static_cast<size_t>(j)] - mx);
        P[i * L + j] = e;
        sum += e;
      }
      double* oi = out.data() + i * d + hoff;
      for (int64_t j = 0; j <= i; ++j) {
        const double a = P[i * L + j] / sum;
        P[i * L + j] = a;
        const double* vj = v.data().data() + j * d + hoff;
        for (int64_t t = 0; t < dh; ++t) oi[t] += a * vj[t];
      }
    }
  }
  return make_result(
      {L, d}, std::move(out), {q, k, v}, [L, d, dh, n_heads, scale, probs](TensorNode& self) {
        TensorNode& pq = *self.parents[0];
        TensorNode& pk = *self.parents[1];
        TensorNode& pv = *self.parents[2];
        const bool wq = pq.requires_grad, wk = pk.requires_grad, wv = pv.requires_grad;
        if (wq) pq.ensure_grad();
        if (wk) pk.ensure_grad();
        if (wv) pv.ensure_grad();
        std::vector<double> da(static_cast<size_t>(L));
        for (int h = 0; h < n_heads; ++h) {
          const int64_t hoff = h * dh;
          const double* P = probs->data() + static_cast<int64_t>(h) * L * L;
          for (int64_t i = 0; i < L; ++i) {
            const double* go = self.grad.data() + i * d + hoff;
            // da_ij = dO_i . v_j ; ds_ij = a_ij (da_ij - sum_l a_il da_il)
            double dot = 0.0;
            for (int64_t j = 0; j <= i; ++j) {
              const double* vj = pv.data.data() + j * d + hoff;
              double s = 0.0;
              for (int64_t t = 0; t < dh; ++t) s += go[t] * vj[t];
              da[static_cast<size_t>(j)] = s;
              dot += P[i * L + j] * s;
            }
            for (int64_t j = 0; j <= i; ++j) {
              const double a = P[i * L + j];
              const double ds = a * (da[static_cast<size_t>(j)] - dot) * scale;
              if (wq) {
                double* dq = pq.grad.data() + i * d + hoff;
                const double* kj = pk.data.data() + j * d + hoff;
                for (int64_t t = 0; t < dh; ++t) dq[t] += ds * kj[t];
              }
              if (wk) {
                double* dk = pk.grad.data() + j * d + hoff;
                const double* qi = pq.data.data() + i * d + hoff;
                for (int64_t t = 0; t < dh; ++t) dk[t] += ds * qi[t];
              }
              if (wv) {
                double* dv = pv.grad.data() + j * d + hoff;
                for (int64_t t = 0; t < dh; ++t) dv[t] += a * go[t];
              }
            }
          }
        }
      });
}

Tensor causal_attention(const Tensor& x, const AttentionWeights& w, const Tensor* concepts) {
  if (concepts && !w.has_concept_proj)
    throw std::runtime_error("causal_attention: concepts given but layer has no concept projectors");
  Tensor q = matmul(x, w.wq);
  Tensor k = matmul(x, w.wk);
  Tensor v = matmul(x, w.wv);
  if (concepts) {
    q = add(q, matmul(*concepts, w.wq_c));
    k = add(k, matmul(*concepts, w.wk_c));
    v = add(v, matmul(*concepts, w.wv_c));
  }
  q = rope(q, w.n_heads);
  k = rope(k, w.n_heads);
  return matmul(mha_causal(q, k, v, w.n_heads), w.wo);
}

MoEOut moe_forward(const Tensor& x, const MoEBlock& block, const MoERouting* frozen,
                   MoERouting* routing_out) {
  const int64_t L = x.dim(0);
  const int E = block.n_experts;
  const int K = block.k_active;
  if (K < 1 || K > E)
    throw std::invalid_argument("moe_forward: k_active " + std::to_string(K) + " out of [1," +
                                std::to_string(E) + "]");

  Tensor probs = softmax(matmul(x, block.router));  // [L,E]

  MoERouting routing;
  if (frozen) {
    routing = *frozen;
  } else {
    routing.topk.resize(static_cast<size_t>(L) * K);
    std::vector<int> order(static_cast<size_t>(E));
    for (int64_t n = 0; n < L; ++n) {
      std::iota(order.begin(), order.end(), 0);
      const double* row = probs.data().data() + n * E;
      std::sort(order.begin(), order.end(), [row](int a, int b) {
        if (row[a] != row[b]) return row[a] > row[b];
        return a < b;  // deterministic tie-break
      });
      for (int s = 0; s < K; ++s) routing.topk[static_cast<size_t>(n * K + s)] = order[static_cast<size_t>(s)];
    }
  }
  if (routing_out) *routing_out = routing;

  // Selected gates, renormalised per token over the K slots.
  std::vector<int64_t> flat_idx(static_cast<size_t>(L) * K);
  for (int64_t n = 0; n < L; ++n)
    for (int s = 0; s < K; ++s)
      flat_idx[static_cast<size_t>(n * K + s)] = n * E + routing.topk[static_cast<size_t>(n * K + s)];
  Tensor gsel = gather_rows(reshape(probs, {L * static_cast<int64_t>(E)}), flat_idx);  // [L*K]
  Tensor gmat = reshape(gsel, {L, K});
  Tensor gnorm = scale_rows(gmat, pow_scalar(sum(gmat, -1), -1.0));  // [L,K]
  Tensor gflat = reshape(gnorm, {L * static_cast<int64_t>(K)});

  Tensor y = Tensor::zeros({L, x.dim(1)});
  for (int e = 0; e < E; ++e) {
    std::vector<int64_t> tokens, slots;
    for (int64_t n = 0; n < L; ++n)
      for (int s = 0; s < K; ++s)
        if (routing.topk[static_cast<size_t>(n * K + s)] == e) {
          tokens.push_back(n);
          slots.push_back(n * K + s);
        }
    if (tokens.empty()) continue;
    const ExpertWeights& ex = block.experts[static_cast<size_t>(e)];
    Tensor xs = gather_rows(x, tokens);
    Tensor hidden = mul(silu(matmul(xs, ex.w_gate)), matmul(xs, ex.w_up));
    Tensor yo = matmul(hidden, ex.w_down);
    Tensor gated = scale_rows(yo, gather_rows(gflat, slots));
    y = add(y, scatter_add_rows(gated, tokens, L));
  }

  // f_e: fraction of assignments to expert e (constants, detached).
  std::vector<double> f(static_cast<size_t>(E), 0.0);
  for (int v : routing.topk) f[static_cast<size_t>(v)] += 1.0 / static_cast<double>(L * K);
  Tensor f_const = Tensor::from({static_cast<int64_t>(E)}, f);
  Tensor balance = mul_scalar(sum_all(mul(mean(probs, 0), f_const)), static_cast<double>(E));
  return {y, balance};
}

Tensor embed(const Tensor& table, const std::vector<int>& ids) {
  std::vector<int64_t> idx(ids.begin(), ids.end());
  return gather_rows(table, idx);
}

Tensor lm_head(const Tensor& x, const Tensor& head) { return matmul(x, head); }

Tensor cross_entropy_sum(const Tensor& logits, const std::vector<int>& targets,
                         const std::vector<uint8_t>& valid) {
  if (logits.rank() != 2)
    throw std::invalid_argument("cross_entropy: logits must be [T,V], got " + shape_str(logits.shape()));
  const int64_t T = logits.dim(0), V = logits.dim(1);
  if (static_cast<int64_t>(targets.size()) != T || static_cast<int64_t>(valid.size()) != T)
    throw std::invalid_argument("cross_entropy: targets/valid length mismatch with logits rows");
  double loss = 0.0;
  for (int64_t t = 0; t < T; ++t) {
    if (!valid[static_cast<size_t>(t)]) continue;
    const double* row = logits.data().data() + t * V;
    double mx = row[0];
    for (int64_t c = 1; c < V; ++c) mx = std::max(mx, row[c]);
    double sum = 0.0;
    for (int64_t c = 0; c < V; ++c) sum += std::exp(row[c] - mx);
    loss += mx + std::log(sum) - row[targets[static_cast<size_t>(t)]];
  }
  return make_result({1}, {loss}, {logits}, [T, V, targets, valid](TensorNode& self) {
    TensorNode& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    const double g = self.grad[0];
    for (int64_t t = 0; t < T; ++t) {
      if (!valid[static_cast<size_t>(t)]) continue;
      const double* row = p.data.data() + t * V;
      double mx = row[0];
      for (int64_t c = 1; c < V; ++c) mx = std::max(mx, row[c]);
      double sum = 0.0;
      for (int64_t c = 0; c < V; ++c) sum += std::exp(row[c] - mx);
      double* d = p.grad.data() + t * V;
      for (int64_t c = 0; c < V; ++c) d[c] += g * std::exp(row[c] - mx) / sum;
      d[targets[static_cast<size_t>(t)]] -= g;
    }
  });
}

LayerOut transformer_layer(const Tensor& x, const LayerWeights& lw, const Tensor* concepts) {
  Tensor h = add(x, causal_attention(rmsnorm(x, lw.attn_norm_gain), lw.attn, concepts));
  MoEOut mo = moe_forward(rmsnorm(h, lw.moe_norm_gain), lw.moe);
  return {add(h, mo.y), mo.balance_loss};
}

}  // namespace cmoe
