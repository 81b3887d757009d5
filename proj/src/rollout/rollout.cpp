// SPDX-License-Identifier: Apache-2.0
#include "smd/rollout/rollout.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <string>
#include <thread>

#include "smd/common/errors.hpp"
#include "smd/model/transformer.hpp"

namespace smd::rollout {

void RolloutConfig::validate() const {
  if (group_size < 2) throw ConfigError("rollout.k must be >= 2");
  if (!(temperature > 0.0)) throw ConfigError("rollout.temperature must be > 0");
  if (max_new_tokens == 0) throw ConfigError("rollout.max_new_tokens must be >= 1");
  if (!(compression_ratio >= 0.0 && compression_ratio < 1.0)) {
    throw ConfigError("rollout.compression_ratio must lie in [0, 1)");
  }
}

std::vector<int> Trajectory::model_input() const {
  std::vector<int> in(prompt);
  if (generated.size() > 1) in.insert(in.end(), generated.begin(), generated.end() - 1);
  return in;
}

namespace {

// log-softmax(logits / temperature) into `out`.
void tempered_logprobs(std::span<const double> logits, double temperature, std::vector<double>& out) {
  out.resize(logits.size());
  double mx = -INFINITY;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = logits[i] / temperature;
    mx = std::max(mx, out[i]);
  }
  double s = 0.0;
  for (double v : out) s += std::exp(v - mx);
  const double lse = mx + std::log(s);
  for (auto& v : out) v -= lse;
}

}  // namespace

std::pair<int, double> sample_token(std::span<const double> logits, double temperature, Rng& rng) {
  if (!(temperature > 0.0)) throw ConfigError("sample_token: temperature must be > 0");
  std::vector<double> lp;
  tempered_logprobs(logits, temperature, lp);
  const double u = uniform01(rng);
  double acc = 0.0;
  for (std::size_t i = 0; i < lp.size(); ++i) {
    acc += std::exp(lp[i]);
    if (u < acc) return {static_cast<int>(i), lp[i]};
  }
  // Rounding left u above the final cumulative sum: take the last token with
  // nonzero mass.
  for (std::size_t i = lp.size(); i-- > 0;) {
    if (std::exp(lp[i]) > 0.0) return {static_cast<int>(i), lp[i]};
  }
  return {static_cast<int>(lp.size() - 1), lp.back()};
}

std::pair<int, double> greedy_token(std::span<const double> logits, double temperature) {
  std::vector<double> lp;
  tempered_logprobs(logits, temperature, lp);
  const auto it = std::max_element(lp.begin(), lp.end());
  return {static_cast<int>(it - lp.begin()), *it};
}

std::size_t budget_for(double compression_ratio, std::size_t total_keys) {
  const double keep = (1.0 - compression_ratio) * static_cast<double>(total_keys);
  // Guard against 0.5 * 10 landing a hair above 5 in binary.
  const auto b = static_cast<std::size_t>(std::ceil(keep - 1e-9));
  return std::max<std::size_t>(b, 1);
}

namespace {

Trajectory generate(const model::Parameters& params, std::span<const int> prompt, const RolloutConfig& config,
                    std::uint64_t seed, bool allow_eviction) {
  config.validate();
  const auto& mc = params.config;
  if (prompt.empty()) throw InputError("generate: empty prompt");
  if (prompt.size() + config.max_new_tokens > mc.max_seq_len) {
    throw InputError("generate: prompt + max_new_tokens exceeds max_seq_len");
  }
  const bool evicting = allow_eviction && config.policy.kind != kv::EvictionKind::None && config.compression_ratio > 0.0;

  Trajectory traj;
  traj.prompt.assign(prompt.begin(), prompt.end());
  traj.seed = seed;
  traj.mask = kv::ShadowMask(mc.n_layers, mc.n_heads, prompt.size(), prompt.size());

  Rng sample_rng(derive_seed(seed, {1}));
  Rng evict_rng(derive_seed(seed, {2, config.policy.seed}));
  kv::KVCache cache(mc.n_layers, mc.n_heads, mc.d_head());
  cache.set_prompt_length(prompt.size());
  kv::AttentionWindow window(mc.n_layers, mc.n_heads, std::max<std::size_t>(config.policy.window, 1));

  model::StepResult step;
  for (int t : prompt) {
    step = model::incremental_step(params, t, cache);
    for (std::size_t i = 0; i < step.attention.size(); ++i) {
      window.push(i / mc.n_heads, i % mc.n_heads, step.attention[i]);
    }
  }

  auto enforce = [&]() {
    if (!evicting) return;
    const std::size_t total = cache.next_position();
    cache.set_budget(budget_for(config.compression_ratio, total));
    auto evicted = kv::enforce_budget(cache, config.policy, window.all_scores(total), &evict_rng);
    // Evicted after the query at position total-1 ran: invisible from `total` on.
    for (std::size_t i = 0; i < evicted.positions.size(); ++i) {
      if (!evicted.positions[i].empty()) {
        kv::record_eviction(traj.mask, i / mc.n_heads, i % mc.n_heads, evicted.positions[i],
                            static_cast<std::int64_t>(total));
      }
    }
  };
  enforce();

  for (std::size_t t = 0; t < config.max_new_tokens; ++t) {
    auto [token, logprob] = config.greedy ? greedy_token(step.logits, config.temperature)
                                          : sample_token(step.logits, config.temperature, sample_rng);
    traj.generated.push_back(token);
    traj.behavior_logprobs.push_back(logprob);
    traj.mask.extend(prompt.size() + traj.generated.size());
    if (token == config.stop_token || t + 1 == config.max_new_tokens) break;
    step = model::incremental_step(params, token, cache);
    for (std::size_t i = 0; i < step.attention.size(); ++i) {
      window.push(i / mc.n_heads, i % mc.n_heads, step.attention[i]);
    }
    enforce();
  }
  traj.cache_stored_entries = cache.stored_entries();
  traj.cache_retained_entries = cache.retained_entries();
  return traj;
}

}  // namespace

Trajectory generate_sparse(const model::Parameters& params, std::span<const int> prompt, const RolloutConfig& config,
                           std::uint64_t seed) {
  return generate(params, prompt, config, seed, true);
}

Trajectory generate_dense(const model::Parameters& params, std::span<const int> prompt, const RolloutConfig& config,
                          std::uint64_t seed) {
  return generate(params, prompt, config, seed, false);
}

std::size_t rollout_threads() {
  if (const char* env = std::getenv("SMD_THREADS")) {
    const long n = std::strtol(env, nullptr, 10);
    if (n >= 1) return static_cast<std::size_t>(n);
  }
  return std::max<unsigned>(1, std::thread::hardware_concurrency());
}

}  // namespace smd::rollout
