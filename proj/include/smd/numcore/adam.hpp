// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "smd/numcore/tensor.hpp"

namespace smd::num {

struct AdamConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// First/second moment buffers, one per parameter tensor.
struct AdamState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::int64_t step = 0;

  static AdamState for_params(std::span<const Tensor> params);
};

/// One bias-corrected Adam update applied in place to each param from its
/// accumulated grad. Params without a grad buffer are treated as zero-grad.
void adam_step(std::span<Tensor> params, AdamState& state, const AdamConfig& config);

}  // namespace smd::num
