// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "smd/harness/config.hpp"
#include "smd/harness/metrics.hpp"
#include "smd/model/parameters.hpp"
#include "smd/rollout/rollout.hpp"
#include "smd/variance_lab/variance_lab.hpp"

namespace smd::harness {

/// Mean teacher-forced cross-entropy of the answer tokens under the dense
/// model.
num::Tensor supervised_loss(const model::Parameters& params, const std::vector<tasks::TaskInstance>& batch);

/// Seeded init followed by the supervised warm start. Results are memoized
/// per (model, task, pretrain, seed) within the process, so runs that differ
/// only in RL settings share the same starting point.
model::Parameters initial_policy(const ExperimentConfig& config);

/// The prompts of training step `step`; a pure function of (seed, step).
std::vector<tasks::TaskInstance> step_prompts(const ExperimentConfig& config, std::uint64_t step);

/// Phase 1 for one step: K rollouts for each of the prompts, in (prompt, k)
/// order. Rollouts run in parallel; each has its own seed.
std::vector<rollout::Trajectory> collect_rollouts(const model::Parameters& params, const ExperimentConfig& config,
                                                  const std::vector<tasks::TaskInstance>& prompts,
                                                  std::uint64_t step);

/// Mask-simulation peak ratio for a cache of `stored_entries` entries: the
/// visibility bitmap is the only extra allocation.
double mask_peak_ratio(std::uint64_t stored_entries, std::size_t d_head);

struct TrainResult {
  std::vector<MetricRecord> metrics;
  double final_reward = 0.0;
  model::Parameters initial;
  model::Parameters final_params;
  /// Steps skipped because a trajectory had a query with no visible key.
  std::size_t aborted_steps = 0;
};

using StepCallback = std::function<void(const MetricRecord&)>;

/// Full run. With a non-empty out_dir writes config.ini, metrics.tsv,
/// init.ckpt and final.ckpt there.
TrainResult run_train(const ExperimentConfig& config, const StepCallback& on_step = {});

/// Mean reward_mean over the last `window` fraction of steps (at least one).
double final_reward(const std::vector<MetricRecord>& metrics, double window);

enum class SweepAxis { CompressionRatio, Lambda, Strategy };
SweepAxis parse_sweep_axis(const std::string& name);
std::string to_string(SweepAxis axis);

struct SweepRow {
  std::string value;
  double final_reward = 0.0;
};

/// One run_train per value with the base seed; outputs go to
/// out_dir/<axis>=<value> when out_dir is set.
std::vector<SweepRow> run_sweep(const ExperimentConfig& base, SweepAxis axis, const std::vector<std::string>& values);

struct MembenchConfig {
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t d_head = 16;
  std::size_t tokens = 320;
  std::vector<double> retentions{0.5, 0.8, 1.0};
};

struct MembenchRow {
  double retention = 0.0;
  std::uint64_t footprint_bytes = 0;
  double slice_peak_ratio = 0.0;
  double mask_peak_ratio = 0.0;
};

/// Builds a cache, keeps the newest `retention` fraction and measures the
/// peak of physical slicing versus mask simulation on a fresh ledger each.
std::vector<MembenchRow> run_membench(const MembenchConfig& config);

struct VarianceLabConfig {
  vlab::WeightModel weights;
  std::vector<std::size_t> horizons{10, 20, 30, 40, 50, 60, 70, 80, 90, 100};
  std::vector<std::size_t> policy_lengths{16, 32, 64};
  std::size_t policy_rollouts = 64;
};

struct VarianceReport {
  std::vector<vlab::HorizonRow> simulated;
  vlab::LinearFit fit;
  std::vector<vlab::RatioRow> ir;
  std::vector<vlab::RatioRow> smd;
};

/// Simulator rows plus IR and SMD ratio variance on the experiment's initial
/// policy.
VarianceReport run_variance_lab(const ExperimentConfig& config, const VarianceLabConfig& lab);

/// Greedy decoding on held-out instances under the configured cache policy
/// (no eviction in dense mode); returns mean reward.
double run_eval(const ExperimentConfig& config, const model::Parameters& params);

}  // namespace smd::harness
