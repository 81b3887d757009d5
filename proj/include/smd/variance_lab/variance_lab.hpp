// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "smd/model/parameters.hpp"
#include "smd/rollout/rollout.hpp"
#include "smd/tasks/tasks.hpp"

namespace smd::vlab {

enum class WeightDistribution {
  TwoPoint,   // 1 - sigma or 1 + sigma with probability 1/2 each
  LogNormal,  // exp(N(mu, s^2)) with mu = -s^2 / 2, s^2 = ln(1 + sigma^2)
};

std::string to_string(WeightDistribution dist);
WeightDistribution parse_weight_distribution(const std::string& name);

/// i.i.d. per-step weights with mean 1 and variance sigma2, multiplied over a
/// horizon of L steps.
struct WeightModel {
  WeightDistribution distribution = WeightDistribution::TwoPoint;
  double sigma2 = 0.04;
  std::size_t horizon = 10;
  std::size_t n_samples = 1'000'000;

  void validate() const;
};

/// (1 + sigma2)^L - 1: the variance of a product of L independent mean-one
/// weights of variance sigma2.
double closed_form_variance(double sigma2, std::size_t horizon);

struct ProductStats {
  double mean = 0.0;
  double variance = 0.0;  // unbiased sample variance
  std::size_t n = 0;
};

/// Monte-Carlo moments of the product. Samples are drawn in fixed-size chunks
/// with one RNG stream per chunk, so the result depends only on (model, seed)
/// and not on the thread count.
ProductStats simulate_product(const WeightModel& model, std::uint64_t seed);
double simulate_product_variance(const WeightModel& model, std::uint64_t seed);

struct LinearFit {
  double slope = 0.0;
  double intercept = 0.0;
  double r_squared = 0.0;
};

/// Ordinary least squares y = slope * x + intercept.
LinearFit fit_line(std::span<const double> xs, std::span<const double> ys);

struct HorizonRow {
  std::size_t horizon = 0;
  double sigma2 = 0.0;
  double empirical = 0.0;
  double closed_form = 0.0;
};

/// Simulates each horizon (stream derived from seed and L) and returns one
/// row per horizon.
std::vector<HorizonRow> simulate_horizons(WeightModel model, std::span<const std::size_t> horizons,
                                          std::uint64_t seed);

/// Least-squares slope of ln(var + 1) against L over the rows.
LinearFit log_variance_fit(std::span<const HorizonRow> rows);

enum class RatioMode { Ir, Smd };

struct RatioRow {
  std::size_t length = 0;
  double mean = 0.0;
  double variance = 0.0;
  std::size_t n = 0;
  /// Evicted (layer, head, key) entries summed over the trajectories.
  std::size_t evictions = 0;
};

/// Generates `n_rollouts` sparse trajectories per length with the stop token
/// disabled, so each one has exactly L tokens, and reports the sample
/// variance of the cumulative ratio. Ir: dense over behavior. Smd: shadow
/// recomputation over behavior. The rollouts depend only on (seed, L), so
/// both modes see the same trajectories.
std::vector<RatioRow> measure_policy_ratio_variance(const model::Parameters& params, const tasks::TaskSpec& task,
                                                    const rollout::RolloutConfig& rollout_config,
                                                    std::span<const std::size_t> lengths, RatioMode mode,
                                                    std::size_t n_rollouts, std::uint64_t seed);

}  // namespace smd::vlab
