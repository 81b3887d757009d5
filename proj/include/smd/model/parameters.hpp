// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "smd/model/config.hpp"
#include "smd/numcore/tensor.hpp"

namespace smd::model {

struct LayerParams {
  num::Tensor norm_attn;  // [d_model]
  num::Tensor wq, wk, wv, wo;  // [d_model, d_model]
  num::Tensor norm_mlp;  // [d_model]
  num::Tensor w_in;   // [d_model, d_ff]
  num::Tensor w_out;  // [d_ff, d_model]
};

struct NamedTensor {
  std::string name;
  num::Tensor tensor;
};

/// The single home of the model weights. Dense and shadow passes both read
/// the same instance; copying a Parameters copies handles, not storage.
struct Parameters {
  ModelConfig config;
  num::Tensor tok_emb;  // [vocab, d_model]
  num::Tensor pos_emb;  // [max_seq_len, d_model]
  std::vector<LayerParams> layers;
  num::Tensor norm_final;  // [d_model]
  num::Tensor w_head;      // [d_model, vocab]

  /// Random init from `seed`. All tensors require grad.
  static Parameters init(const ModelConfig& config, std::uint64_t seed);

  /// Stable ordering used by the optimizer and checkpoints.
  std::vector<NamedTensor> named() const;
  std::vector<num::Tensor> tensors() const;

  /// Independent storage with the given requires_grad flag.
  Parameters clone(bool requires_grad) const;
  void zero_grad();
  std::size_t count() const;
};

}  // namespace smd::model
