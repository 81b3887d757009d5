// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "smd/common/rng.hpp"
#include "smd/kvcache/eviction.hpp"
#include "smd/kvcache/kv_cache.hpp"
#include "smd/kvcache/shadow_mask.hpp"
#include "smd/model/parameters.hpp"

namespace smd::rollout {

struct RolloutConfig {
  std::size_t group_size = 4;  // K responses per prompt
  double temperature = 1.0;
  std::size_t max_new_tokens = 2;
  kv::EvictionPolicy policy{kv::EvictionKind::HeavyHitter, 8, 0};
  /// Fraction of keys dropped at each enforcement (0.5 keeps half).
  double compression_ratio = 0.5;
  /// Generation stops after emitting this id; negative disables it.
  int stop_token = 2;
  /// Argmax decoding instead of sampling (evaluation only).
  bool greedy = false;

  void validate() const;
};

struct Trajectory {
  std::vector<int> prompt;
  std::vector<int> generated;
  /// Tempered log-probability of each generated token at sampling time.
  std::vector<double> behavior_logprobs;
  kv::ShadowMask mask;
  double reward = 0.0;
  std::uint64_t seed = 0;
  /// Final cache occupancy, kept for memory accounting.
  std::uint64_t cache_stored_entries = 0;
  std::uint64_t cache_retained_entries = 0;

  /// prompt + generated[0 .. n-2]: the tokens whose logits score `generated`.
  std::vector<int> model_input() const;
  /// Row of model_input()'s logits that predicts generated[0].
  std::size_t first_logit_row() const { return prompt.size() - 1; }
};

/// Samples from softmax(logits / temperature); the returned log-probability
/// is under that same tempered distribution.
std::pair<int, double> sample_token(std::span<const double> logits, double temperature, Rng& rng);
/// Argmax with its tempered log-probability; ties go to the lower id.
std::pair<int, double> greedy_token(std::span<const double> logits, double temperature);

/// Keys kept at an enforcement over `total_keys` keys: ceil((1 - ratio) * n),
/// at least 1.
std::size_t budget_for(double compression_ratio, std::size_t total_keys);

/// Autoregressive generation with KV compression. The prompt is prefilled
/// without eviction, then the budget is enforced once, and again after every
/// decoded token whenever the retained count exceeds it. Each eviction is
/// stamped into the trajectory's shadow mask.
Trajectory generate_sparse(const model::Parameters& params, std::span<const int> prompt,
                           const RolloutConfig& config, std::uint64_t seed);

/// Same as generate_sparse with eviction disabled.
Trajectory generate_dense(const model::Parameters& params, std::span<const int> prompt,
                          const RolloutConfig& config, std::uint64_t seed);

/// Worker count for rollout parallelism: SMD_THREADS if set, else hardware
/// concurrency.
std::size_t rollout_threads();

}  // namespace smd::rollout
