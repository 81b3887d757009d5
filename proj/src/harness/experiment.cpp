// SPDX-License-Identifier: Apache-2.0
#include "smd/harness/experiment.hpp"

#include <cmath>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>

#include "smd/common/errors.hpp"
#include "smd/common/parallel.hpp"
#include "smd/kvcache/eviction.hpp"
#include "smd/kvcache/memory_ledger.hpp"
#include "smd/model/checkpoint.hpp"
#include "smd/model/transformer.hpp"
#include "smd/numcore/adam.hpp"
#include "smd/numcore/ops.hpp"

namespace smd::harness {

using model::Parameters;
using num::Tensor;

// Stream ids under the run seed.
namespace stream {
constexpr std::uint64_t kInit = 10;
constexpr std::uint64_t kPretrain = 11;
constexpr std::uint64_t kPrompts = 20;
constexpr std::uint64_t kRollout = 30;
constexpr std::uint64_t kEval = 99;
}  // namespace stream

Tensor supervised_loss(const Parameters& params, const std::vector<tasks::TaskInstance>& batch) {
  if (batch.empty()) throw ContractError("supervised_loss: empty batch");
  Tensor total;
  std::size_t tokens = 0;
  for (const auto& inst : batch) {
    std::vector<int> seq(inst.prompt);
    seq.insert(seq.end(), inst.answer.begin(), inst.answer.end() - 1);
    Tensor logits = model::forward_dense(params, seq);
    Tensor rows = num::slice_rows(logits, inst.prompt.size() - 1, inst.answer.size());
    Tensor lp = num::sum(model::token_logprobs(rows, inst.answer));
    total = total.defined() ? num::add(total, lp) : lp;
    tokens += inst.answer.size();
  }
  return num::scale(total, -1.0 / static_cast<double>(tokens));
}

namespace {

std::string pretrain_key(const ExperimentConfig& c) {
  ExperimentConfig k;
  k.model = c.model;
  k.task = c.task;
  k.pretrain = c.pretrain;
  k.seed = c.seed;
  return to_text(k);
}

Parameters pretrain(const ExperimentConfig& c) {
  Parameters params = Parameters::init(c.model, derive_seed(c.seed, {stream::kInit}));
  if (c.pretrain.steps == 0) return params;
  Rng rng(derive_seed(c.seed, {stream::kPretrain}));
  auto tensors = params.tensors();
  auto adam = num::AdamState::for_params(tensors);
  const num::AdamConfig adam_cfg{c.pretrain.lr, 0.9, 0.999, 1e-8};
  for (std::size_t s = 0; s < c.pretrain.steps; ++s) {
    std::vector<tasks::TaskInstance> batch;
    for (std::size_t i = 0; i < c.pretrain.batch; ++i) batch.push_back(tasks::make_instance(c.task, rng));
    params.zero_grad();
    num::backward(supervised_loss(params, batch));
    num::adam_step(tensors, adam, adam_cfg);
  }
  return params;
}

double population_std(const std::vector<double>& v) {
  double m = 0.0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size()));
}

// Index of the first trajectory with a generation query that sees no key,
// or trajs.size().
std::size_t first_degenerate(const std::vector<rollout::Trajectory>& trajs) {
  for (std::size_t i = 0; i < trajs.size(); ++i) {
    const auto& m = trajs[i].mask;
    const std::size_t len = trajs[i].model_input().size();
    for (std::size_t l = 0; l < m.n_layers(); ++l)
      for (std::size_t h = 0; h < m.n_heads(); ++h)
        for (std::size_t q = m.prompt_length(); q < len; ++q) {
          bool any = false;
          for (std::size_t j = 0; j <= q && !any; ++j) any = m.visible(l, h, q, j);
          if (!any) return i;
        }
  }
  return trajs.size();
}

}  // namespace

std::vector<tasks::TaskInstance> step_prompts(const ExperimentConfig& c, std::uint64_t step) {
  Rng rng(derive_seed(c.seed, {stream::kPrompts, step}));
  std::vector<tasks::TaskInstance> out;
  for (std::size_t p = 0; p < c.prompts_per_step; ++p) out.push_back(tasks::make_instance(c.task, rng));
  return out;
}

Parameters initial_policy(const ExperimentConfig& config) {
  static std::mutex mu;
  static std::map<std::string, Parameters> cache;
  const std::string key = pretrain_key(config);
  {
    std::lock_guard<std::mutex> lock(mu);
    auto it = cache.find(key);
    if (it != cache.end()) return it->second.clone(true);
  }
  Parameters params = pretrain(config);
  std::lock_guard<std::mutex> lock(mu);
  cache.emplace(key, params.clone(false));
  return params;
}

std::vector<rollout::Trajectory> collect_rollouts(const Parameters& params, const ExperimentConfig& config,
                                                  const std::vector<tasks::TaskInstance>& prompts,
                                                  std::uint64_t step) {
  const std::size_t K = config.rollout.group_size;
  const bool dense = config.learner.mode == learner::Mode::Dense;
  std::vector<rollout::Trajectory> out(prompts.size() * K);
  parallel_for(out.size(), rollout::rollout_threads(), [&](std::size_t i) {
    const std::size_t p = i / K, k = i % K;
    const std::uint64_t seed = derive_seed(config.seed, {stream::kRollout, step, p, k});
    out[i] = dense ? rollout::generate_dense(params, prompts[p].prompt, config.rollout, seed)
                   : rollout::generate_sparse(params, prompts[p].prompt, config.rollout, seed);
    out[i].reward = tasks::reward(prompts[p], out[i].generated);
  });
  return out;
}

double mask_peak_ratio(std::uint64_t stored_entries, std::size_t d_head) {
  const std::uint64_t footprint = stored_entries * kv::entry_bytes(d_head);
  if (footprint == 0) return 1.0;
  kv::MemoryLedger ledger;
  ledger.alloc(footprint, "kv_cache");
  ledger.alloc((stored_entries + 7) / 8, "shadow_mask_bitmap");
  return kv::ledger_peak_ratio(ledger, footprint);
}

double final_reward(const std::vector<MetricRecord>& metrics, double window) {
  if (metrics.empty()) return 0.0;
  const auto n = static_cast<std::size_t>(
      std::max(1.0, std::ceil(window * static_cast<double>(metrics.size()) - 1e-9)));
  double s = 0.0;
  for (std::size_t i = metrics.size() - n; i < metrics.size(); ++i) s += metrics[i].reward_mean;
  return s / static_cast<double>(n);
}

TrainResult run_train(const ExperimentConfig& input, const StepCallback& on_step) {
  ExperimentConfig config = input;
  config.normalize();
  config.validate();

  TrainResult result;
  result.initial = initial_policy(config);
  learner::Learner learner(result.initial.clone(true), config.learner);

  std::unique_ptr<MetricsWriter> writer;
  if (!config.out_dir.empty()) {
    const std::filesystem::path dir(config.out_dir);
    std::filesystem::create_directories(dir);
    std::ofstream(dir / "config.ini") << to_text(config);
    model::save_checkpoint(result.initial, dir / "init.ckpt");
    writer = std::make_unique<MetricsWriter>(dir / "metrics.tsv");
  }

  const bool sparse = config.learner.mode != learner::Mode::Dense;
  for (std::size_t step = 0; step < config.steps; ++step) {
    const auto prompts = step_prompts(config, step);
    auto trajs = collect_rollouts(learner.policy(), config, prompts, step);

    MetricRecord rec;
    rec.step = step;
    std::vector<double> rewards;
    std::uint64_t max_stored = 0;
    for (const auto& t : trajs) {
      rewards.push_back(t.reward);
      max_stored = std::max(max_stored, t.cache_stored_entries);
    }
    for (double r : rewards) rec.reward_mean += r;
    rec.reward_mean /= static_cast<double>(rewards.size());
    rec.reward_std = population_std(rewards);
    rec.peak_mem_ratio = sparse ? mask_peak_ratio(max_stored, config.model.d_head()) : 1.0;

    const std::size_t K = config.rollout.group_size;
    if (const std::size_t bad = first_degenerate(trajs); bad < trajs.size()) {
      std::cerr << "step " << step << " aborted: trajectory " << bad << " (seed " << trajs[bad].seed
                << ") has a generation query with no visible key\n";
      rec.generated = trajs.size();
      ++result.aborted_steps;
      if (writer) writer->write(rec);
      if (on_step) on_step(rec);
      result.metrics.push_back(rec);
      continue;
    }
    std::vector<learner::GroupBatch> groups;
    for (std::size_t p = 0; p < prompts.size(); ++p) {
      std::vector<rollout::Trajectory> g(std::make_move_iterator(trajs.begin() + p * K),
                                         std::make_move_iterator(trajs.begin() + (p + 1) * K));
      groups.push_back(learner::make_group(prompts[p].prompt, std::move(g)));
    }
    try {
      const auto b = learner.update(std::move(groups));
      rec.ratio_mean = b.ratio_mean;
      rec.ratio_var = b.ratio_variance;
      rec.loss_pg = b.pg;
      rec.loss_ref_kl = b.ref_kl;
      rec.loss_distill = b.distill;
      rec.loss_total = b.total;
      rec.consumed = b.consumed;
      rec.generated = b.generated;
    } catch (const DegenerateVisibilityError& e) {
      std::cerr << "step " << step << " aborted: " << e.what() << "\n";
      rec.generated = trajs.size();
      ++result.aborted_steps;
    }
    if (writer) writer->write(rec);
    if (on_step) on_step(rec);
    result.metrics.push_back(rec);
  }

  result.final_params = learner.policy().clone(false);
  result.final_reward = final_reward(result.metrics, config.final_window);
  if (!config.out_dir.empty()) model::save_checkpoint(result.final_params, std::filesystem::path(config.out_dir) / "final.ckpt");
  return result;
}

SweepAxis parse_sweep_axis(const std::string& name) {
  if (name == "compression_ratio") return SweepAxis::CompressionRatio;
  if (name == "lambda") return SweepAxis::Lambda;
  if (name == "strategy") return SweepAxis::Strategy;
  throw ConfigError("unknown sweep axis '" + name + "' (expected compression_ratio, lambda or strategy)");
}

std::string to_string(SweepAxis axis) {
  switch (axis) {
    case SweepAxis::CompressionRatio: return "compression_ratio";
    case SweepAxis::Lambda: return "lambda";
    case SweepAxis::Strategy: return "strategy";
  }
  return "?";
}

std::vector<SweepRow> run_sweep(const ExperimentConfig& base, SweepAxis axis, const std::vector<std::string>& values) {
  if (values.empty()) throw ConfigError("sweep needs at least one value");
  std::vector<SweepRow> rows;
  for (const auto& v : values) {
    ExperimentConfig c = base;
    switch (axis) {
      case SweepAxis::CompressionRatio: apply_setting(c, "rollout", "compression_ratio", v); break;
      case SweepAxis::Lambda: apply_setting(c, "learner", "lambda", v); break;
      case SweepAxis::Strategy: apply_setting(c, "rollout", "policy", v); break;
    }
    if (!base.out_dir.empty()) c.out_dir = (std::filesystem::path(base.out_dir) / (to_string(axis) + "=" + v)).string();
    rows.push_back({v, run_train(c).final_reward});
  }
  if (!base.out_dir.empty()) {
    std::ofstream out(std::filesystem::path(base.out_dir) / "sweep.tsv");
    out << to_string(axis) << "\tfinal_reward\n";
    char buf[40];
    for (const auto& r : rows) {
      std::snprintf(buf, sizeof buf, "%.17g", r.final_reward);
      out << r.value << '\t' << buf << '\n';
    }
  }
  return rows;
}

std::vector<MembenchRow> run_membench(const MembenchConfig& config) {
  std::vector<MembenchRow> rows;
  for (double retention : config.retentions) {
    if (!(retention > 0.0 && retention <= 1.0)) throw ConfigError("membench: retention must lie in (0, 1]");
    kv::KVCache cache(config.n_layers, config.n_heads, config.d_head);
    Rng rng(derive_seed(0, {config.tokens}));
    std::vector<double> k(config.n_heads * config.d_head), v(k.size());
    for (std::size_t t = 0; t < config.tokens; ++t) {
      for (std::size_t l = 0; l < config.n_layers; ++l) {
        for (auto& x : k) x = standard_normal(rng);
        for (auto& x : v) x = standard_normal(rng);
        cache.append(l, k, v);
      }
      cache.commit_position();
    }
    cache.set_budget(static_cast<std::size_t>(
        std::max(1.0, std::ceil(retention * static_cast<double>(config.tokens) - 1e-9))));
    kv::enforce_budget(cache, {kv::EvictionKind::Recent, 1, 0}, {}, nullptr);

    MembenchRow row;
    row.retention = retention;
    row.footprint_bytes = cache.footprint_bytes();
    {
      kv::MemoryLedger ledger;
      ledger.alloc(cache.footprint_bytes(), "kv_cache");
      kv::physical_slice(cache, ledger);
      row.slice_peak_ratio = kv::ledger_peak_ratio(ledger, cache.footprint_bytes());
    }
    {
      kv::MemoryLedger ledger;
      ledger.alloc(cache.footprint_bytes(), "kv_cache");
      kv::mask_simulate(cache, ledger);
      row.mask_peak_ratio = kv::ledger_peak_ratio(ledger, cache.footprint_bytes());
    }
    rows.push_back(row);
  }
  return rows;
}

VarianceReport run_variance_lab(const ExperimentConfig& config, const VarianceLabConfig& lab) {
  VarianceReport report;
  report.simulated = vlab::simulate_horizons(lab.weights, lab.horizons, config.seed);
  report.fit = vlab::log_variance_fit(report.simulated);
  if (!lab.policy_lengths.empty()) {
    const Parameters params = initial_policy(config);
    report.ir = vlab::measure_policy_ratio_variance(params, config.task, config.rollout, lab.policy_lengths,
                                                    vlab::RatioMode::Ir, lab.policy_rollouts, config.seed);
    report.smd = vlab::measure_policy_ratio_variance(params, config.task, config.rollout, lab.policy_lengths,
                                                     vlab::RatioMode::Smd, lab.policy_rollouts, config.seed);
  }
  return report;
}

double run_eval(const ExperimentConfig& config, const Parameters& params) {
  rollout::RolloutConfig rc = config.rollout;
  rc.greedy = true;
  const bool dense = config.learner.mode == learner::Mode::Dense;
  Rng rng(derive_seed(config.seed, {stream::kEval}));
  std::vector<tasks::TaskInstance> insts;
  for (std::size_t i = 0; i < config.eval_instances; ++i) insts.push_back(tasks::make_instance(config.task, rng));
  std::vector<double> rewards(insts.size());
  parallel_for(insts.size(), rollout::rollout_threads(), [&](std::size_t i) {
    auto t = dense ? rollout::generate_dense(params, insts[i].prompt, rc, i)
                   : rollout::generate_sparse(params, insts[i].prompt, rc, i);
    rewards[i] = tasks::reward(insts[i], t.generated);
  });
  double s = 0.0;
  for (double r : rewards) s += r;
  return insts.empty() ? 0.0 : s / static_cast<double>(insts.size());
}

}  // namespace smd::harness
