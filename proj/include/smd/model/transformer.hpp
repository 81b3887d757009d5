// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <span>
#include <vector>

#include "smd/kvcache/kv_cache.hpp"
#include "smd/kvcache/shadow_mask.hpp"
#include "smd/model/parameters.hpp"
#include "smd/numcore/tensor.hpp"

namespace smd::model {

/// Optional capture of post-softmax attention weights, [T, T] per head,
/// laid out [layer * n_heads + head].
struct ForwardTrace {
  std::vector<num::Tensor> attention;
};

/// Additive [T, T] bias: 0 where key j is causally visible to query i,
/// kMaskSentinel elsewhere.
num::Tensor causal_bias(std::size_t length);

/// Additive [T, T] bias for one head under a shadow mask. Prompt queries keep
/// full causal visibility. Throws DegenerateVisibilityError if a generation
/// query sees nothing.
num::Tensor shadow_bias(const kv::ShadowMask& mask, std::size_t layer, std::size_t head,
                        std::size_t length);

/// softmax(q k^T / sqrt(d_head) + bias) v for a single head.
num::Tensor masked_attention_head(const num::Tensor& q, const num::Tensor& k, const num::Tensor& v,
                                  const num::Tensor& bias, num::Tensor* weights = nullptr);

/// Next-token logits [T, vocab] under standard causal attention.
num::Tensor forward_dense(const Parameters& params, std::span<const int> tokens,
                          ForwardTrace* trace = nullptr);

/// Next-token logits [T, vocab] with the recorded shadow mask injected into
/// every layer/head. Generation queries attend only to keys visible under
/// the mask; prompt queries use full causal attention.
num::Tensor forward_shadow(const Parameters& params, std::span<const int> tokens,
                           const kv::ShadowMask& mask, ForwardTrace* trace = nullptr);

struct StepResult {
  std::vector<double> logits;
  /// Attention weights of the new query per layer/head, indexed by key
  /// position (0 for keys not in the retained set).
  std::vector<std::vector<double>> attention;
};

/// Processes one token at cache.next_position(): appends its K/V to every
/// layer and attends over the retained entries. Does not evict.
StepResult incremental_step(const Parameters& params, int token, kv::KVCache& cache);

/// Log-softmax of each logits row gathered at the chosen id, shape [rows].
num::Tensor token_logprobs(const num::Tensor& logits, std::span<const int> chosen);

}  // namespace smd::model
