// SPDX-License-Identifier: Apache-2.0
#include "smd/model/transformer.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "smd/common/errors.hpp"
#include "smd/numcore/ops.hpp"

namespace smd::model {

using num::Tensor;

namespace {

void check_tokens(const Parameters& params, std::span<const int> tokens) {
  const auto& cfg = params.config;
  if (tokens.empty()) throw InputError("forward: empty token sequence");
  if (tokens.size() > cfg.max_seq_len) {
    throw InputError("forward: sequence of " + std::to_string(tokens.size()) +
                     " exceeds max_seq_len " + std::to_string(cfg.max_seq_len));
  }
  for (int t : tokens) {
    if (t < 0 || static_cast<std::size_t>(t) >= cfg.vocab_size) {
      throw InputError("forward: token id " + std::to_string(t) + " outside vocabulary");
    }
  }
}

// biases[layer * n_heads + head]; a single entry means "shared by all".
Tensor run(const Parameters& params, std::span<const int> tokens, const std::vector<Tensor>& biases,
           ForwardTrace* trace) {
  check_tokens(params, tokens);
  const auto& cfg = params.config;
  const std::size_t T = tokens.size();
  const std::size_t dh = cfg.d_head();

  std::vector<int> positions(T);
  for (std::size_t i = 0; i < T; ++i) positions[i] = static_cast<int>(i);
  Tensor x = num::add(num::embedding(params.tok_emb, tokens), num::embedding(params.pos_emb, positions));
  if (trace) trace->attention.clear();

  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const auto& lp = params.layers[l];
    Tensor h = num::rms_norm(x, lp.norm_attn);
    Tensor q = num::matmul(h, lp.wq);
    Tensor k = num::matmul(h, lp.wk);
    Tensor v = num::matmul(h, lp.wv);
    std::vector<Tensor> heads;
    heads.reserve(cfg.n_heads);
    for (std::size_t hd = 0; hd < cfg.n_heads; ++hd) {
      const auto& bias = biases.size() == 1 ? biases[0] : biases[l * cfg.n_heads + hd];
      Tensor weights;
      heads.push_back(masked_attention_head(num::slice_cols(q, hd * dh, dh), num::slice_cols(k, hd * dh, dh),
                                            num::slice_cols(v, hd * dh, dh), bias,
                                            trace ? &weights : nullptr));
      if (trace) trace->attention.push_back(weights);
    }
    x = num::add(x, num::matmul(num::concat_cols(heads), lp.wo));
    Tensor h2 = num::rms_norm(x, lp.norm_mlp);
    x = num::add(x, num::matmul(num::gelu(num::matmul(h2, lp.w_in)), lp.w_out));
  }
  return num::matmul(num::rms_norm(x, params.norm_final), params.w_head);
}

}  // namespace

Tensor causal_bias(std::size_t length) {
  std::vector<double> b(length * length, 0.0);
  for (std::size_t i = 0; i < length; ++i)
    for (std::size_t j = i + 1; j < length; ++j) b[i * length + j] = num::kMaskSentinel;
  return Tensor::from({length, length}, std::move(b));
}

Tensor shadow_bias(const kv::ShadowMask& mask, std::size_t layer, std::size_t head, std::size_t length) {
  std::vector<double> b(length * length, num::kMaskSentinel);
  for (std::size_t i = 0; i < length; ++i) {
    bool any = false;
    for (std::size_t j = 0; j <= i; ++j) {
      if (mask.visible(layer, head, i, j)) {
        b[i * length + j] = 0.0;
        any = true;
      }
    }
    if (!any) {
      throw DegenerateVisibilityError("shadow mask leaves query " + std::to_string(i) + " of layer " +
                                      std::to_string(layer) + " head " + std::to_string(head) +
                                      " with no visible key");
    }
  }
  return Tensor::from({length, length}, std::move(b));
}

Tensor masked_attention_head(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor& bias,
                             Tensor* weights) {
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(q.cols()));
  Tensor scores = num::add(num::scale(num::matmul(q, num::transpose(k)), inv_sqrt), bias);
  Tensor p = num::softmax_last(scores);
  if (weights) *weights = p;
  return num::matmul(p, v);
}

Tensor forward_dense(const Parameters& params, std::span<const int> tokens, ForwardTrace* trace) {
  return run(params, tokens, {causal_bias(tokens.size())}, trace);
}

Tensor forward_shadow(const Parameters& params, std::span<const int> tokens, const kv::ShadowMask& mask,
                      ForwardTrace* trace) {
  const auto& cfg = params.config;
  if (mask.n_layers() != cfg.n_layers || mask.n_heads() != cfg.n_heads) {
    throw ContractError("forward_shadow: mask layer/head count does not match the model");
  }
  if (mask.length() < tokens.size()) {
    throw ContractError("forward_shadow: mask covers " + std::to_string(mask.length()) +
                        " keys but the sequence has " + std::to_string(tokens.size()));
  }
  std::vector<Tensor> biases;
  biases.reserve(cfg.n_layers * cfg.n_heads);
  for (std::size_t l = 0; l < cfg.n_layers; ++l)
    for (std::size_t h = 0; h < cfg.n_heads; ++h) biases.push_back(shadow_bias(mask, l, h, tokens.size()));
  return run(params, tokens, biases, trace);
}

namespace {

// out[j] = sum_p x[p] * W[p, j], accumulated over p in order (matches matmul).
void vecmat(std::span<const double> x, const Tensor& w, std::vector<double>& out) {
  const std::size_t k = w.rows(), n = w.cols();
  out.assign(n, 0.0);
  const double* W = w.data().data();
  for (std::size_t p = 0; p < k; ++p) {
    const double xv = x[p];
    const double* row = W + p * n;
    for (std::size_t j = 0; j < n; ++j) out[j] += xv * row[j];
  }
}

void rms_norm_vec(std::span<const double> x, const Tensor& gain, std::vector<double>& out) {
  const std::size_t n = x.size();
  double ss = 0.0;
  for (std::size_t j = 0; j < n; ++j) ss += x[j] * x[j];
  const double inv = 1.0 / std::sqrt(ss / static_cast<double>(n) + 1e-6);
  out.resize(n);
  for (std::size_t j = 0; j < n; ++j) out[j] = x[j] * inv * gain.data()[j];
}

double gelu_scalar(double x) {
  return 0.5 * x * (1.0 + std::tanh(0.7978845608028654 * (x + 0.044715 * x * x * x)));
}

}  // namespace

StepResult incremental_step(const Parameters& params, int token, kv::KVCache& cache) {
  const auto& cfg = params.config;
  if (cache.n_layers() != cfg.n_layers || cache.n_heads() != cfg.n_heads || cache.d_head() != cfg.d_head()) {
    throw ContractError("incremental_step: cache layout does not match the model");
  }
  if (token < 0 || static_cast<std::size_t>(token) >= cfg.vocab_size) {
    throw InputError("incremental_step: token id " + std::to_string(token) + " outside vocabulary");
  }
  const std::size_t pos = cache.next_position();
  if (pos >= cfg.max_seq_len) throw InputError("incremental_step: position exceeds max_seq_len");

  const std::size_t d = cfg.d_model, dh = cfg.d_head();
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<double> x(d);
  for (std::size_t j = 0; j < d; ++j) {
    x[j] = params.tok_emb.data()[static_cast<std::size_t>(token) * d + j] + params.pos_emb.data()[pos * d + j];
  }

  StepResult result;
  result.attention.resize(cfg.n_layers * cfg.n_heads);
  std::vector<double> h, q, k, v, att(d), proj, ff, ff_out, scores, weights;
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const auto& lp = params.layers[l];
    rms_norm_vec(x, lp.norm_attn, h);
    vecmat(h, lp.wq, q);
    vecmat(h, lp.wk, k);
    vecmat(h, lp.wv, v);
    cache.append(l, k, v);
    for (std::size_t hd = 0; hd < cfg.n_heads; ++hd) {
      const auto& hc = cache.head(l, hd);
      const std::size_t n = hc.size();
      scores.assign(n, num::kMaskSentinel);
      double mx = num::kMaskSentinel;
      for (std::size_t e = 0; e < n; ++e) {
        if (!hc.retained[e]) continue;
        auto key = hc.key(e);
        double s = 0.0;
        for (std::size_t c = 0; c < dh; ++c) s += q[hd * dh + c] * key[c];
        scores[e] = s * inv_sqrt;
        mx = std::max(mx, scores[e]);
      }
      weights.assign(n, 0.0);
      double total = 0.0;
      for (std::size_t e = 0; e < n; ++e) {
        if (scores[e] == num::kMaskSentinel) continue;
        weights[e] = std::exp(scores[e] - mx);
        total += weights[e];
      }
      auto& row = result.attention[l * cfg.n_heads + hd];
      row.assign(pos + 1, 0.0);
      for (std::size_t e = 0; e < n; ++e) {
        weights[e] /= total;
        row[hc.positions[e]] = weights[e];
      }
      for (std::size_t c = 0; c < dh; ++c) att[hd * dh + c] = 0.0;
      for (std::size_t e = 0; e < n; ++e) {
        if (!hc.retained[e]) continue;
        auto val = hc.value(e);
        for (std::size_t c = 0; c < dh; ++c) att[hd * dh + c] += weights[e] * val[c];
      }
    }
    vecmat(att, lp.wo, proj);
    for (std::size_t j = 0; j < d; ++j) x[j] += proj[j];
    rms_norm_vec(x, lp.norm_mlp, h);
    vecmat(h, lp.w_in, ff);
    for (auto& f : ff) f = gelu_scalar(f);
    vecmat(ff, lp.w_out, ff_out);
    for (std::size_t j = 0; j < d; ++j) x[j] += ff_out[j];
  }
  cache.commit_position();
  rms_norm_vec(x, params.norm_final, h);
  vecmat(h, params.w_head, result.logits);
  return result;
}

Tensor token_logprobs(const Tensor& logits, std::span<const int> chosen) {
  return num::gather_last(num::log_softmax_last(logits), chosen);
}

}  // namespace smd::model
