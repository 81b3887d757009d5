// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>

namespace smd::model {

struct ModelConfig {
  std::size_t vocab_size = 64;
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t n_layers = 2;
  std::size_t d_ff = 256;
  std::size_t max_seq_len = 256;

  std::size_t d_head() const { return d_model / n_heads; }
  /// Throws ConfigError on inconsistent sizes.
  void validate() const;
};

}  // namespace smd::model
