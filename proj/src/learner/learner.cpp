// SPDX-License-Identifier: Apache-2.0
#include "smd/learner/learner.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <numeric>

#include "smd/common/errors.hpp"
#include "smd/model/transformer.hpp"
#include "smd/numcore/ops.hpp"

namespace smd::learner {

using model::Parameters;
using num::Tensor;
using rollout::Trajectory;

std::string to_string(Mode mode) {
  switch (mode) {
    case Mode::Smd: return "smd";
    case Mode::Naive: return "naive";
    case Mode::Ir: return "ir";
    case Mode::IrReject: return "ir-reject";
    case Mode::Dense: return "dense";
  }
  return "?";
}

Mode parse_mode(const std::string& name) {
  if (name == "smd") return Mode::Smd;
  if (name == "naive") return Mode::Naive;
  if (name == "ir") return Mode::Ir;
  if (name == "ir-reject") return Mode::IrReject;
  if (name == "dense") return Mode::Dense;
  throw ConfigError("unknown learner mode '" + name + "' (expected smd, naive, ir, ir-reject or dense)");
}

void LearnerConfig::validate() const {
  if (!(clip_eps > 0.0 && clip_eps < 1.0)) throw ConfigError("learner.clip_eps must lie in (0, 1)");
  if (!(ref_kl_beta >= 0.0)) throw ConfigError("learner.beta must be >= 0");
  if (!(distill_lambda >= 0.0)) throw ConfigError("learner.lambda must be >= 0");
  if (!(lr > 0.0)) throw ConfigError("learner.lr must be > 0");
  if (epochs == 0) throw ConfigError("learner.epochs must be >= 1");
  if (!(ir_clip_low > 0.0 && ir_clip_low <= 1.0 && ir_clip_high >= 1.0)) {
    throw ConfigError("learner IR clip bounds must satisfy 0 < low <= 1 <= high");
  }
  if (!(reject_fraction >= 0.0 && reject_fraction < 1.0)) {
    throw ConfigError("learner.reject_fraction must lie in [0, 1)");
  }
  if (!(temperature > 0.0)) throw ConfigError("learner.temperature must be > 0");
}

std::vector<double> compute_advantages(std::span<const double> rewards) {
  if (rewards.size() < 2) throw ContractError("compute_advantages: a group needs at least 2 rewards");
  const double n = static_cast<double>(rewards.size());
  double mean = 0.0;
  for (double r : rewards) mean += r;
  mean /= n;
  double var = 0.0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  const double denom = std::sqrt(var / n) + 1e-8;
  std::vector<double> adv;
  adv.reserve(rewards.size());
  for (double r : rewards) adv.push_back((r - mean) / denom);
  return adv;
}

GroupBatch make_group(std::vector<int> prompt, std::vector<Trajectory> trajectories) {
  GroupBatch g;
  g.prompt = std::move(prompt);
  g.trajectories = std::move(trajectories);
  std::vector<double> rewards;
  for (const auto& t : g.trajectories) rewards.push_back(t.reward);
  g.advantages = compute_advantages(rewards);
  return g;
}

Tensor generation_log_softmax(const Parameters& params, const Trajectory& traj, Context context,
                              double temperature) {
  if (traj.generated.empty()) throw ContractError("trajectory has no generated tokens");
  const auto input = traj.model_input();
  Tensor logits = context == Context::Shadow ? model::forward_shadow(params, input, traj.mask)
                                             : model::forward_dense(params, input);
  Tensor rows = num::slice_rows(logits, traj.first_logit_row(), traj.generated.size());
  if (temperature != 1.0) rows = num::scale(rows, 1.0 / temperature);
  return num::log_softmax_last(rows);
}

Tensor recompute_logprobs(const Parameters& params, const Trajectory& traj, Context context,
                          double temperature) {
  return num::gather_last(generation_log_softmax(params, traj, context, temperature), traj.generated);
}

Tensor distill_kl(const Tensor& teacher_log_probs, const Tensor& student_log_probs) {
  // The teacher is a constant, so it can be rebuilt directly. Zero-mass
  // entries (log p = -inf) contribute 0 * (...) = 0 by convention.
  std::vector<double> p(teacher_log_probs.numel()), log_p(teacher_log_probs.numel());
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double lp = teacher_log_probs.at(i);
    p[i] = std::exp(lp);
    log_p[i] = p[i] > 0.0 ? lp : 0.0;
  }
  Tensor teacher_p = Tensor::from(teacher_log_probs.shape(), std::move(p));
  Tensor teacher_lp = Tensor::from(teacher_log_probs.shape(), std::move(log_p));
  return num::sum(num::mul(teacher_p, num::sub(teacher_lp, student_log_probs)));
}

namespace {

std::size_t trajectory_count(std::span<const GroupBatch> batches) {
  std::size_t n = 0;
  for (const auto& g : batches) n += g.trajectories.size();
  return n;
}

Tensor constant_like(const std::vector<double>& values) {
  return Tensor::from({values.size()}, values);
}

double mean_of(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

// Unbiased sample variance; 0 for fewer than two values.
double variance_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return s / static_cast<double>(v.size() - 1);
}

Context context_for(Mode mode) { return mode == Mode::Smd ? Context::Shadow : Context::Dense; }

// Everything that enters one trajectory's share of the objective.
struct TrajectoryTerms {
  Tensor surrogate;  // mean_t of the (weighted) clipped surrogate
  Tensor ref_kl;     // mean_t KL(policy || ref)
  Tensor distill;    // sum_t KL(dense || shadow); undefined unless requested
};

TrajectoryTerms trajectory_terms(const Parameters& params, const Parameters& ref, const Trajectory& traj,
                                 double advantage, const std::vector<double>& old_logprobs,
                                 const LearnerConfig& config, Context context,
                                 const std::vector<double>* weights, bool with_distill) {
  const std::size_t n = traj.generated.size();
  if (old_logprobs.size() != n) throw ContractError("old log-probs do not match the trajectory length");
  if (context == Context::Shadow && traj.mask.length() < traj.prompt.size() + n - 1) {
    throw ContractError("trajectory mask does not cover its tokens");
  }

  Tensor lsm = generation_log_softmax(params, traj, context, config.temperature);
  Tensor logp = num::gather_last(lsm, traj.generated);
  Tensor ratio = num::exp(num::sub(logp, constant_like(old_logprobs)));
  Tensor adv = Tensor::full({n}, advantage);
  Tensor surrogate = num::minimum(num::mul(ratio, adv),
                                  num::mul(num::clamp(ratio, 1.0 - config.clip_eps, 1.0 + config.clip_eps), adv));
  if (weights != nullptr) surrogate = num::mul(surrogate, constant_like(*weights));

  Tensor ref_lsm;
  {
    num::NoGradGuard guard;
    ref_lsm = generation_log_softmax(ref, traj, context, config.temperature);
  }
  Tensor kl_rows = num::sum_last(num::mul(num::exp(lsm), num::sub(lsm, ref_lsm)));

  TrajectoryTerms terms{num::mean(surrogate), num::mean(kl_rows), Tensor()};
  if (with_distill) {
    Tensor dense_lsm;
    {
      // The teacher is a constant; no tape is recorded for it at all.
      num::NoGradGuard guard;
      dense_lsm = generation_log_softmax(params, traj, Context::Dense, config.temperature);
    }
    terms.distill = distill_kl(dense_lsm, lsm);
  }
  return terms;
}

struct Objective {
  Tensor total, pg, ref_kl, distill;
};

Objective build_objective(const Parameters& params, const Parameters& ref, std::span<const GroupBatch> batches,
                          const OldLogprobs& old, const LearnerConfig& config, Context context,
                          const std::vector<std::vector<double>>* weights, double lambda) {
  const std::size_t n_traj = trajectory_count(batches);
  if (n_traj == 0) throw ContractError("learner update with no trajectories");
  if (old.size() != n_traj) throw ContractError("old log-probs do not match the batch");
  const bool with_distill = lambda > 0.0;

  Tensor pg_sum, kl_sum, distill_sum;
  auto accumulate = [](Tensor& acc, const Tensor& t) { acc = acc.defined() ? num::add(acc, t) : t; };
  std::size_t idx = 0;
  for (const auto& g : batches) {
    if (g.advantages.size() != g.trajectories.size()) throw ContractError("group advantages missing");
    for (std::size_t k = 0; k < g.trajectories.size(); ++k, ++idx) {
      auto terms = trajectory_terms(params, ref, g.trajectories[k], g.advantages[k], old[idx], config, context,
                                    weights ? &(*weights)[idx] : nullptr, with_distill);
      // Per trajectory: -(surrogate - beta * KL).
      accumulate(pg_sum, num::scale(num::sub(terms.surrogate, num::scale(terms.ref_kl, config.ref_kl_beta)), -1.0));
      accumulate(kl_sum, terms.ref_kl);
      if (with_distill) accumulate(distill_sum, terms.distill);
    }
  }
  const double inv = 1.0 / static_cast<double>(n_traj);
  Objective obj;
  obj.pg = num::scale(pg_sum, inv);
  obj.ref_kl = num::scale(kl_sum, inv);
  if (with_distill) {
    obj.distill = num::scale(distill_sum, inv);
    obj.total = num::add(obj.pg, num::scale(obj.distill, lambda));
  } else {
    obj.distill = Tensor::scalar(0.0);
    obj.total = obj.pg;
  }
  return obj;
}

std::vector<std::vector<double>> ir_weights(std::span<const GroupBatch> batches, const OldLogprobs& dense_old,
                                            const LearnerConfig& config) {
  std::vector<std::vector<double>> w;
  std::size_t idx = 0;
  for (const auto& g : batches) {
    for (const auto& t : g.trajectories) {
      std::vector<double> row(t.generated.size());
      for (std::size_t i = 0; i < row.size(); ++i) {
        row[i] = std::clamp(std::exp(dense_old[idx][i] - t.behavior_logprobs[i]), config.ir_clip_low,
                            config.ir_clip_high);
      }
      w.push_back(std::move(row));
      ++idx;
    }
  }
  return w;
}

void fill_ratio_diagnostics(std::span<const GroupBatch> batches, const OldLogprobs& recomputed, LossBreakdown& out) {
  out.cumulative_ratio.clear();
  std::size_t idx = 0;
  for (const auto& g : batches) {
    for (const auto& t : g.trajectories) {
      double log_rho = 0.0;
      for (std::size_t i = 0; i < t.generated.size(); ++i) log_rho += recomputed[idx][i] - t.behavior_logprobs[i];
      out.cumulative_ratio.push_back(std::exp(log_rho));
      ++idx;
    }
  }
  out.ratio_mean = mean_of(out.cumulative_ratio);
  out.ratio_variance = variance_of(out.cumulative_ratio);
}

LossBreakdown run_update(Parameters& params, const Parameters& ref, std::span<const GroupBatch> batches,
                         const LearnerConfig& config, num::AdamState& adam, Mode mode) {
  config.validate();
  LearnerConfig cfg = config;
  cfg.mode = mode;
  const Context context = context_for(mode);
  const OldLogprobs old = snapshot_logprobs(params, batches, context, cfg.temperature);

  LossBreakdown first;
  auto tensors = params.tensors();
  if (adam.m.size() != tensors.size()) adam = num::AdamState::for_params(tensors);
  const num::AdamConfig adam_cfg{cfg.lr, 0.9, 0.999, 1e-8};
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    LossBreakdown b = accumulate_gradients(params, ref, batches, cfg, old);
    num::adam_step(tensors, adam, adam_cfg);
    if (epoch == 0) first = std::move(b);
  }
  first.consumed = trajectory_count(batches);
  first.generated = first.consumed;
  return first;
}

}  // namespace

Tensor distill_loss(const Parameters& params, std::span<const GroupBatch> batches, double temperature) {
  const std::size_t n = trajectory_count(batches);
  if (n == 0) throw ContractError("distill_loss with no trajectories");
  Tensor total;
  for (const auto& g : batches) {
    for (const auto& t : g.trajectories) {
      Tensor dense;
      {
        num::NoGradGuard guard;
        dense = generation_log_softmax(params, t, Context::Dense, temperature);
      }
      Tensor kl = distill_kl(dense, generation_log_softmax(params, t, Context::Shadow, temperature));
      total = total.defined() ? num::add(total, kl) : kl;
    }
  }
  return num::scale(total, 1.0 / static_cast<double>(n));
}

OldLogprobs snapshot_logprobs(const Parameters& params, std::span<const GroupBatch> batches, Context context,
                              double temperature) {
  num::NoGradGuard guard;
  OldLogprobs out;
  for (const auto& g : batches) {
    for (const auto& t : g.trajectories) {
      Tensor lp = recompute_logprobs(params, t, context, temperature);
      out.emplace_back(lp.data().begin(), lp.data().end());
    }
  }
  return out;
}

PolicyLoss policy_loss(const Parameters& params, const Parameters& ref, const OldLogprobs& old_logprobs,
                       std::span<const GroupBatch> batches, const LearnerConfig& config, Context context,
                       const std::vector<std::vector<double>>* token_weights) {
  auto obj = build_objective(params, ref, batches, old_logprobs, config, context, token_weights, 0.0);
  return {obj.pg, obj.ref_kl};
}

PolicyLoss shadow_policy_loss(const Parameters& params, const Parameters& ref, const OldLogprobs& old_logprobs,
                              std::span<const GroupBatch> batches, const LearnerConfig& config) {
  return policy_loss(params, ref, old_logprobs, batches, config, Context::Shadow);
}

LossBreakdown accumulate_gradients(const Parameters& params, const Parameters& ref,
                                   std::span<const GroupBatch> batches, const LearnerConfig& config,
                                   const OldLogprobs& old_logprobs) {
  const Context context = context_for(config.mode);
  const bool is_ir = config.mode == Mode::Ir || config.mode == Mode::IrReject;
  const double lambda = config.mode == Mode::Smd ? config.distill_lambda : 0.0;

  LossBreakdown out;
  std::vector<std::vector<double>> weights;
  if (is_ir) {
    weights = ir_weights(batches, old_logprobs, config);
    for (const auto& row : weights) out.applied_weights.insert(out.applied_weights.end(), row.begin(), row.end());
  }
  Objective obj = build_objective(params, ref, batches, old_logprobs, config, context,
                                  is_ir ? &weights : nullptr, lambda);
  out.pg = obj.pg.item();
  out.ref_kl = obj.ref_kl.item();
  out.distill = obj.distill.item();
  out.total = obj.total.item();
  fill_ratio_diagnostics(batches, old_logprobs, out);
  out.consumed = trajectory_count(batches);
  out.generated = out.consumed;

  if (num::grad_enabled()) {
    for (auto t : params.tensors()) t.zero_grad();
    num::backward(obj.total);
  }
  return out;
}

std::vector<std::vector<double>> dense_log_ratios(const Parameters& params, std::span<const GroupBatch> batches,
                                                  double temperature) {
  const auto dense = snapshot_logprobs(params, batches, Context::Dense, temperature);
  std::vector<std::vector<double>> out;
  std::size_t idx = 0;
  for (const auto& g : batches) {
    std::vector<double> row;
    for (const auto& t : g.trajectories) {
      double s = 0.0;
      for (std::size_t i = 0; i < t.generated.size(); ++i) s += dense[idx][i] - t.behavior_logprobs[i];
      row.push_back(s);
      ++idx;
    }
    out.push_back(std::move(row));
  }
  return out;
}

std::vector<GroupBatch> rejection_filter(std::vector<GroupBatch> batches,
                                         const std::vector<std::vector<double>>& log_ratios, double fraction) {
  if (!(fraction >= 0.0 && fraction < 1.0)) throw ContractError("rejection_filter: fraction must lie in [0, 1)");
  if (log_ratios.size() != batches.size()) throw ContractError("rejection_filter: one ratio row per group");

  struct Candidate {
    std::size_t group, index;
    double deviation;
  };
  std::vector<Candidate> all;
  for (std::size_t g = 0; g < batches.size(); ++g) {
    if (log_ratios[g].size() != batches[g].trajectories.size()) {
      throw ContractError("rejection_filter: one ratio per trajectory");
    }
    for (std::size_t k = 0; k < log_ratios[g].size(); ++k) all.push_back({g, k, std::fabs(log_ratios[g][k])});
  }
  const std::size_t target =
      static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(all.size()) - 1e-9));
  if (target == 0) return batches;

  std::stable_sort(all.begin(), all.end(),
                   [](const Candidate& a, const Candidate& b) { return a.deviation > b.deviation; });
  std::vector<std::vector<bool>> dropped(batches.size());
  std::vector<std::size_t> alive(batches.size());
  for (std::size_t g = 0; g < batches.size(); ++g) {
    dropped[g].assign(batches[g].trajectories.size(), false);
    alive[g] = batches[g].trajectories.size();
  }
  std::size_t removed = 0;
  for (const auto& c : all) {
    if (removed == target) break;
    if (alive[c.group] <= 2) continue;
    dropped[c.group][c.index] = true;
    --alive[c.group];
    ++removed;
  }
  if (removed < target) {
    std::cerr << "warning: rejection_filter dropped " << removed << " of " << target
              << " requested trajectories to keep at least 2 per group\n";
  }

  std::vector<GroupBatch> out;
  for (std::size_t g = 0; g < batches.size(); ++g) {
    std::vector<Trajectory> keep;
    for (std::size_t k = 0; k < batches[g].trajectories.size(); ++k) {
      if (!dropped[g][k]) keep.push_back(std::move(batches[g].trajectories[k]));
    }
    out.push_back(make_group(std::move(batches[g].prompt), std::move(keep)));
  }
  return out;
}

LossBreakdown smd_update(Parameters& params, const Parameters& ref, std::span<const GroupBatch> batches,
                         const LearnerConfig& config, num::AdamState& adam) {
  return run_update(params, ref, batches, config, adam, Mode::Smd);
}

LossBreakdown naive_update(Parameters& params, const Parameters& ref, std::span<const GroupBatch> batches,
                           const LearnerConfig& config, num::AdamState& adam) {
  return run_update(params, ref, batches, config, adam, Mode::Naive);
}

LossBreakdown ir_update(Parameters& params, const Parameters& ref, std::span<const GroupBatch> batches,
                        const LearnerConfig& config, num::AdamState& adam) {
  return run_update(params, ref, batches, config, adam, Mode::Ir);
}

Learner::Learner(Parameters policy, LearnerConfig config)
    : policy_(std::move(policy)), reference_(policy_.clone(false)), config_(config) {
  config_.validate();
  adam_ = num::AdamState::for_params(policy_.tensors());
}

LossBreakdown Learner::update(std::vector<GroupBatch> batches) {
  const std::size_t generated = trajectory_count(batches);
  LossBreakdown out;
  switch (config_.mode) {
    case Mode::Smd:
      out = smd_update(policy_, reference_, batches, config_, adam_);
      break;
    case Mode::Naive:
    case Mode::Dense:
      out = run_update(policy_, reference_, batches, config_, adam_, config_.mode);
      break;
    case Mode::Ir:
      out = ir_update(policy_, reference_, batches, config_, adam_);
      break;
    case Mode::IrReject: {
      const auto log_ratios = dense_log_ratios(policy_, batches, config_.temperature);
      auto kept = rejection_filter(std::move(batches), log_ratios, config_.reject_fraction);
      out = run_update(policy_, reference_, kept, config_, adam_, Mode::IrReject);
      break;
    }
  }
  out.generated = generated;
  return out;
}

}  // namespace smd::learner
