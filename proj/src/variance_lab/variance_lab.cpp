// SPDX-License-Identifier: Apache-2.0
#include "smd/variance_lab/variance_lab.hpp"

#include <bit>
#include <cmath>

#include "smd/common/errors.hpp"
#include "smd/common/parallel.hpp"
#include "smd/learner/learner.hpp"

namespace smd::vlab {

std::string to_string(WeightDistribution dist) {
  return dist == WeightDistribution::TwoPoint ? "two-point" : "lognormal";
}

WeightDistribution parse_weight_distribution(const std::string& name) {
  if (name == "two-point") return WeightDistribution::TwoPoint;
  if (name == "lognormal") return WeightDistribution::LogNormal;
  throw ConfigError("unknown weight distribution '" + name + "'");
}

void WeightModel::validate() const {
  if (!(sigma2 >= 0.0)) throw ConfigError("weight model: sigma2 must be >= 0");
  if (distribution == WeightDistribution::TwoPoint && sigma2 >= 1.0) {
    throw ConfigError("weight model: two-point weights need sigma2 < 1 to stay positive");
  }
  if (horizon < 1) throw ConfigError("weight model: horizon must be >= 1");
  if (n_samples < 10'000) throw ConfigError("weight model: n_samples must be >= 10000");
}

double closed_form_variance(double sigma2, std::size_t horizon) {
  return std::pow(1.0 + sigma2, static_cast<double>(horizon)) - 1.0;
}

namespace {

constexpr std::size_t kChunk = 1 << 16;

// Welford accumulator, merged across chunks in index order.
struct Moments {
  double n = 0.0, mean = 0.0, m2 = 0.0;

  void push(double x) {
    n += 1.0;
    const double d = x - mean;
    mean += d / n;
    m2 += d * (x - mean);
  }
  void merge(const Moments& o) {
    if (o.n == 0.0) return;
    const double total = n + o.n;
    const double d = o.mean - mean;
    mean += d * o.n / total;
    m2 += o.m2 + d * d * n * o.n / total;
    n = total;
  }
};

Moments simulate_chunk(const WeightModel& model, std::size_t count, Rng& rng) {
  Moments m;
  const std::size_t L = model.horizon;
  if (model.distribution == WeightDistribution::TwoPoint) {
    // A product of L two-point weights depends only on how many factors took
    // the upper value, so each coin flip is one random bit.
    const double s = std::sqrt(model.sigma2);
    std::vector<double> table(L + 1);
    for (std::size_t k = 0; k <= L; ++k) {
      table[k] = std::pow(1.0 + s, static_cast<double>(k)) * std::pow(1.0 - s, static_cast<double>(L - k));
    }
    for (std::size_t i = 0; i < count; ++i) {
      std::size_t ups = 0, left = L;
      while (left >= 64) {
        ups += static_cast<std::size_t>(std::popcount(rng()));
        left -= 64;
      }
      if (left > 0) ups += static_cast<std::size_t>(std::popcount(rng() >> (64 - left)));
      m.push(table[ups]);
    }
  } else {
    const double s2 = std::log1p(model.sigma2);
    const double mu = -0.5 * s2, s = std::sqrt(s2);
    for (std::size_t i = 0; i < count; ++i) {
      double log_rho = 0.0;
      for (std::size_t t = 0; t < L; ++t) log_rho += mu + s * standard_normal(rng);
      m.push(std::exp(log_rho));
    }
  }
  return m;
}

}  // namespace

ProductStats simulate_product(const WeightModel& model, std::uint64_t seed) {
  model.validate();
  const std::size_t chunks = (model.n_samples + kChunk - 1) / kChunk;
  std::vector<Moments> parts(chunks);
  parallel_for(chunks, rollout::rollout_threads(), [&](std::size_t c) {
    Rng rng(derive_seed(seed, {c}));
    const std::size_t count = std::min(kChunk, model.n_samples - c * kChunk);
    parts[c] = simulate_chunk(model, count, rng);
  });
  Moments total;
  for (const auto& p : parts) total.merge(p);
  return {total.mean, total.m2 / (total.n - 1.0), static_cast<std::size_t>(total.n)};
}

double simulate_product_variance(const WeightModel& model, std::uint64_t seed) {
  return simulate_product(model, seed).variance;
}

LinearFit fit_line(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size() || xs.size() < 2) throw ContractError("fit_line: need >= 2 paired points");
  const double n = static_cast<double>(xs.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    mx += xs[i];
    my += ys[i];
  }
  mx /= n;
  my /= n;
  double sxx = 0.0, sxy = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    sxx += (xs[i] - mx) * (xs[i] - mx);
    sxy += (xs[i] - mx) * (ys[i] - my);
    syy += (ys[i] - my) * (ys[i] - my);
  }
  if (sxx == 0.0) throw ContractError("fit_line: x values are all equal");
  LinearFit fit;
  fit.slope = sxy / sxx;
  fit.intercept = my - fit.slope * mx;
  fit.r_squared = syy == 0.0 ? 1.0 : (sxy * sxy) / (sxx * syy);
  return fit;
}

std::vector<HorizonRow> simulate_horizons(WeightModel model, std::span<const std::size_t> horizons,
                                          std::uint64_t seed) {
  std::vector<HorizonRow> rows;
  for (std::size_t L : horizons) {
    model.horizon = L;
    rows.push_back({L, model.sigma2, simulate_product_variance(model, derive_seed(seed, {L})),
                    closed_form_variance(model.sigma2, L)});
  }
  return rows;
}

LinearFit log_variance_fit(std::span<const HorizonRow> rows) {
  std::vector<double> xs, ys;
  for (const auto& r : rows) {
    xs.push_back(static_cast<double>(r.horizon));
    ys.push_back(std::log1p(r.empirical));
  }
  return fit_line(xs, ys);
}

std::vector<RatioRow> measure_policy_ratio_variance(const model::Parameters& params, const tasks::TaskSpec& task,
                                                    const rollout::RolloutConfig& rollout_config,
                                                    std::span<const std::size_t> lengths, RatioMode mode,
                                                    std::size_t n_rollouts, std::uint64_t seed) {
  if (n_rollouts < 2) throw ContractError("measure_policy_ratio_variance: need >= 2 rollouts");
  const auto context = mode == RatioMode::Smd ? learner::Context::Shadow : learner::Context::Dense;
  std::vector<RatioRow> rows;
  for (std::size_t L : lengths) {
    if (task.max_prompt_len + L > params.config.max_seq_len) {
      throw ConfigError("measure_policy_ratio_variance: prompt plus length " + std::to_string(L) +
                        " exceeds max_seq_len");
    }
    rollout::RolloutConfig cfg = rollout_config;
    cfg.max_new_tokens = L;
    cfg.stop_token = -1;
    std::vector<double> ratios(n_rollouts);
    std::vector<std::size_t> evicted(n_rollouts);
    parallel_for(n_rollouts, rollout::rollout_threads(), [&](std::size_t i) {
      Rng task_rng(derive_seed(seed, {L, 1, i}));
      const auto inst = tasks::make_instance(task, task_rng);
      auto traj = rollout::generate_sparse(params, inst.prompt, cfg, derive_seed(seed, {L, 2, i}));
      num::NoGradGuard guard;
      auto lp = learner::recompute_logprobs(params, traj, context, cfg.temperature);
      double log_rho = 0.0;
      for (std::size_t t = 0; t < traj.generated.size(); ++t) log_rho += lp.at(t) - traj.behavior_logprobs[t];
      ratios[i] = std::exp(log_rho);
      std::size_t count = 0;
      for (std::size_t l = 0; l < traj.mask.n_layers(); ++l)
        for (std::size_t h = 0; h < traj.mask.n_heads(); ++h) count += traj.mask.evictions(l, h).size();
      evicted[i] = count;
    });
    RatioRow row;
    row.length = L;
    row.n = n_rollouts;
    for (double r : ratios) row.mean += r;
    row.mean /= static_cast<double>(n_rollouts);
    for (double r : ratios) row.variance += (r - row.mean) * (r - row.mean);
    row.variance /= static_cast<double>(n_rollouts - 1);
    for (auto e : evicted) row.evictions += e;
    rows.push_back(row);
  }
  return rows;
}

}  // namespace smd::vlab
