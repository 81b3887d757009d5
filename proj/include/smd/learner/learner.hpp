// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <span>
#include <string>
#include <vector>

#include "smd/model/parameters.hpp"
#include "smd/numcore/adam.hpp"
#include "smd/numcore/tensor.hpp"
#include "smd/rollout/rollout.hpp"

namespace smd::learner {

/// Update rule. Smd recomputes under the recorded shadow mask; Naive and
/// Dense recompute densely; Ir reweights dense recomputation by clipped
/// per-token importance weights; IrReject additionally drops the most
/// deviated trajectories first.
enum class Mode { Smd, Naive, Ir, IrReject, Dense };

std::string to_string(Mode mode);
Mode parse_mode(const std::string& name);

struct LearnerConfig {
  double clip_eps = 0.2;
  double ref_kl_beta = 0.01;
  double distill_lambda = 0.1;
  double lr = 3e-4;
  std::size_t epochs = 1;
  Mode mode = Mode::Smd;
  double ir_clip_low = 0.8;
  double ir_clip_high = 1.2;
  double reject_fraction = 0.2;
  /// Must match the rollout temperature so recomputed log-probs compare
  /// like with like.
  double temperature = 1.0;

  void validate() const;
};

struct GroupBatch {
  std::vector<int> prompt;
  std::vector<rollout::Trajectory> trajectories;
  std::vector<double> advantages;
};

/// (r - mean) / (population std + 1e-8).
std::vector<double> compute_advantages(std::span<const double> rewards);

/// Groups trajectories for one prompt and fills in their advantages.
GroupBatch make_group(std::vector<int> prompt, std::vector<rollout::Trajectory> trajectories);

struct LossBreakdown {
  double pg = 0.0;      // clipped surrogate with the reference-KL penalty
  double ref_kl = 0.0;  // mean per-token KL(policy || reference)
  double distill = 0.0;
  double total = 0.0;
  /// Per consumed trajectory: exp(sum_t recomputed - behavior log-prob), with
  /// the recomputation in the mode's own context (shadow for Smd).
  std::vector<double> cumulative_ratio;
  double ratio_mean = 0.0;
  double ratio_variance = 0.0;
  /// Ir modes: every clipped per-token weight that entered the gradient.
  std::vector<double> applied_weights;
  std::size_t consumed = 0;
  std::size_t generated = 0;
};

enum class Context { Shadow, Dense };

/// Tempered log-softmax rows [n_generated, vocab] scoring the trajectory's
/// generated tokens, recomputed in the given context.
num::Tensor generation_log_softmax(const model::Parameters& params, const rollout::Trajectory& traj,
                                   Context context, double temperature);

/// Per-token tempered log-probs of the generated tokens, shape [n].
num::Tensor recompute_logprobs(const model::Parameters& params, const rollout::Trajectory& traj,
                               Context context, double temperature);

/// sum over rows of KL(teacher || student), teacher detached. Both inputs are
/// log-probability rows of the same shape.
num::Tensor distill_kl(const num::Tensor& teacher_log_probs, const num::Tensor& student_log_probs);

/// Mean over trajectories of the summed token-wise KL from the (detached)
/// dense distribution to the shadow distribution.
num::Tensor distill_loss(const model::Parameters& params, std::span<const GroupBatch> batches,
                         double temperature);

/// Behaviour-time log-probs of the policy at the start of the update, one
/// vector per trajectory, in batch order.
using OldLogprobs = std::vector<std::vector<double>>;
OldLogprobs snapshot_logprobs(const model::Parameters& params, std::span<const GroupBatch> batches,
                              Context context, double temperature);

struct PolicyLoss {
  num::Tensor pg;      // -mean_traj[mean_t surrogate - beta * mean_t KL]
  num::Tensor ref_kl;  // mean_traj mean_t KL(policy || reference)
};

/// Clipped surrogate on per-token ratios p = pi / pi_old with the reference
/// KL penalty, both computed in `context` (the reference policy sees the same
/// mask). `token_weights`, when given, multiplies each token's surrogate.
PolicyLoss policy_loss(const model::Parameters& params, const model::Parameters& ref,
                       const OldLogprobs& old_logprobs, std::span<const GroupBatch> batches,
                       const LearnerConfig& config, Context context,
                       const std::vector<std::vector<double>>* token_weights = nullptr);

/// policy_loss in the shadow context.
PolicyLoss shadow_policy_loss(const model::Parameters& params, const model::Parameters& ref,
                              const OldLogprobs& old_logprobs, std::span<const GroupBatch> batches,
                              const LearnerConfig& config);

/// Builds the full objective for config.mode and backpropagates it into the
/// params' grads (grads are zeroed first). Returns loss values; under a
/// NoGradGuard it only evaluates.
LossBreakdown accumulate_gradients(const model::Parameters& params, const model::Parameters& ref,
                                   std::span<const GroupBatch> batches, const LearnerConfig& config,
                                   const OldLogprobs& old_logprobs);

/// Cumulative log importance ratio per trajectory, log rho = sum_t
/// (dense - behavior), laid out [group][trajectory].
std::vector<std::vector<double>> dense_log_ratios(const model::Parameters& params,
                                                  std::span<const GroupBatch> batches, double temperature);

/// Drops ceil(fraction * n) trajectories with the largest |log rho| across
/// all groups, never leaving a group with fewer than 2, then re-normalizes
/// advantages within each group. Ties drop the earlier trajectory first.
std::vector<GroupBatch> rejection_filter(std::vector<GroupBatch> batches,
                                         const std::vector<std::vector<double>>& log_ratios, double fraction);

LossBreakdown smd_update(model::Parameters& params, const model::Parameters& ref,
                         std::span<const GroupBatch> batches, const LearnerConfig& config,
                         num::AdamState& adam);
/// Dense recomputation of everything over sparse-generated trajectories, no
/// distillation.
LossBreakdown naive_update(model::Parameters& params, const model::Parameters& ref,
                           std::span<const GroupBatch> batches, const LearnerConfig& config,
                           num::AdamState& adam);
/// Dense recomputation with per-token weights clip(pi_dense / pi_behavior).
LossBreakdown ir_update(model::Parameters& params, const model::Parameters& ref,
                        std::span<const GroupBatch> batches, const LearnerConfig& config,
                        num::AdamState& adam);

/// Owns the policy, frozen reference and optimizer state.
class Learner {
 public:
  Learner(model::Parameters policy, LearnerConfig config);

  /// One Phase-2 update in the configured mode.
  LossBreakdown update(std::vector<GroupBatch> batches);

  const model::Parameters& policy() const { return policy_; }
  const model::Parameters& reference() const { return reference_; }
  const LearnerConfig& config() const { return config_; }

 private:
  model::Parameters policy_;
  model::Parameters reference_;
  LearnerConfig config_;
  num::AdamState adam_;
};

}  // namespace smd::learner
