// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "smd/common/errors.hpp"
#include "smd/learner/learner.hpp"
#include "smd/numcore/ops.hpp"

using namespace smd;
using namespace smd::learner;
using num::Tensor;

namespace {

model::Parameters toy_model(std::uint64_t seed) {
  model::ModelConfig c;
  c.vocab_size = 64;
  c.d_model = 16;
  c.n_heads = 2;
  c.n_layers = 2;
  c.d_ff = 32;
  c.max_seq_len = 32;
  return model::Parameters::init(c, seed);
}

rollout::RolloutConfig evicting_rollout() {
  rollout::RolloutConfig c;
  c.max_new_tokens = 6;
  c.stop_token = -1;
  c.compression_ratio = 0.5;
  c.policy = {kv::EvictionKind::Recent, 1, 0};
  return c;
}

// `groups` prompts with 4 trajectories each and fixed, distinct rewards.
std::vector<GroupBatch> make_batches(const model::Parameters& params, std::size_t groups, bool dense,
                                     std::uint64_t seed = 0) {
  const double rewards[] = {0.0, 0.5, 1.0, 0.25};
  std::vector<GroupBatch> out;
  for (std::size_t g = 0; g < groups; ++g) {
    Rng rng(derive_seed(seed, {g}));
    std::vector<int> prompt(10 + g);
    for (auto& t : prompt) t = 8 + static_cast<int>(uniform_index(rng, 56));
    std::vector<rollout::Trajectory> trajs;
    for (std::size_t k = 0; k < 4; ++k) {
      const auto s = derive_seed(seed, {g, k, 7});
      auto t = dense ? rollout::generate_dense(params, prompt, evicting_rollout(), s)
                     : rollout::generate_sparse(params, prompt, evicting_rollout(), s);
      t.reward = rewards[(k + g) % 4];
      trajs.push_back(std::move(t));
    }
    out.push_back(make_group(prompt, std::move(trajs)));
  }
  return out;
}

double max_param_diff(const model::Parameters& a, const model::Parameters& b) {
  double m = 0.0;
  auto ta = a.tensors(), tb = b.tensors();
  for (std::size_t i = 0; i < ta.size(); ++i)
    for (std::size_t j = 0; j < ta[i].numel(); ++j) m = std::max(m, std::fabs(ta[i].at(j) - tb[i].at(j)));
  return m;
}

std::vector<std::vector<double>> grads_of(const model::Parameters& p) {
  std::vector<std::vector<double>> out;
  for (const auto& t : p.tensors()) {
    if (t.has_grad()) {
      out.emplace_back(t.grad().begin(), t.grad().end());
    } else {
      out.emplace_back(t.numel(), 0.0);
    }
  }
  return out;
}

double max_abs(const std::vector<std::vector<double>>& g) {
  double m = 0.0;
  for (const auto& row : g)
    for (double v : row) m = std::max(m, std::fabs(v));
  return m;
}

rollout::Trajectory stub(double reward) {
  rollout::Trajectory t;
  t.reward = reward;
  return t;
}

}  // namespace

TEST_CASE("advantage examples") {
  auto zero = compute_advantages(std::vector<double>{1, 1, 1, 1});
  for (double a : zero) CHECK(a == 0.0);
  auto pair = compute_advantages(std::vector<double>{0, 2});
  CHECK(pair[0] == doctest::Approx(-1.0).epsilon(1e-7));
  CHECK(pair[1] == doctest::Approx(1.0).epsilon(1e-7));
  CHECK_THROWS_AS(compute_advantages(std::vector<double>{1}), ContractError);
}

TEST_CASE("property: advantages are centred, scaled and shift invariant") {
  Rng rng(1);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t k = 2 + uniform_index(rng, 8);
    std::vector<double> r(k), shifted(k);
    const double c = 10.0 * (uniform01(rng) - 0.5);
    for (std::size_t i = 0; i < k; ++i) {
      r[i] = uniform01(rng);
      shifted[i] = r[i] + c;
    }
    auto a = compute_advantages(r);
    auto b = compute_advantages(shifted);
    double sum = 0.0, sq = 0.0, mean = 0.0, var = 0.0;
    for (double x : r) mean += x / k;
    for (double x : r) var += (x - mean) * (x - mean) / k;
    for (std::size_t i = 0; i < k; ++i) {
      sum += a[i];
      sq += a[i] * a[i];
      CHECK(std::fabs(a[i] - b[i]) <= 1e-9);
    }
    CHECK(std::fabs(sum) <= 1e-9);
    // The 1e-8 stabilizer makes std(A) = s / (s + 1e-8) rather than 1.
    const double s = std::sqrt(var);
    CHECK(std::fabs(std::sqrt(sq / k) - s / (s + 1e-8)) <= 1e-9);
  }
}

TEST_CASE("distillation KL closed forms") {
  Tensor one_hot = Tensor::from({1, 2}, {0.0, num::kMaskSentinel});
  Tensor uniform = Tensor::from({1, 2}, {std::log(0.5), std::log(0.5)}, true);
  CHECK(distill_kl(one_hot, uniform).item() == doctest::Approx(std::log(2.0)).epsilon(1e-15));

  Tensor same = Tensor::from({2, 3}, {std::log(0.2), std::log(0.3), std::log(0.5), std::log(0.6), std::log(0.3),
                                      std::log(0.1)});
  CHECK(std::fabs(distill_kl(same, same).item()) <= 1e-15);

  // Two steps sum: KL([.75,.25] || uniform) twice.
  Tensor teacher = Tensor::from({2, 2}, {std::log(0.75), std::log(0.25), std::log(0.75), std::log(0.25)});
  Tensor student = Tensor::from({2, 2}, std::vector<double>(4, std::log(0.5)));
  const double per_step = 0.75 * std::log(1.5) + 0.25 * std::log(0.5);
  CHECK(distill_kl(teacher, student).item() == doctest::Approx(2.0 * per_step).epsilon(1e-14));
}

TEST_CASE("distillation vanishes without eviction and is positive with it") {
  auto params = toy_model(1);
  auto dense = make_batches(params, 2, true);
  CHECK(std::fabs(distill_loss(params, dense, 1.0).item()) <= 1e-12);
  auto sparse = make_batches(params, 2, false);
  CHECK(distill_loss(params, sparse, 1.0).item() > 1e-6);
}

TEST_CASE("stop-gradient: the dense tape receives nothing") {
  auto params = toy_model(2);
  auto batches = make_batches(params, 2, false);
  const auto& traj = batches[0].trajectories[0];

  // Reference: the library path, teacher computed without a tape.
  params.zero_grad();
  num::backward(distill_loss(params, std::span<const GroupBatch>(batches.data(), 1), 1.0));
  auto expected = grads_of(params);
  REQUIRE(max_abs(expected) > 0.0);

  // Ablation: keep the dense pass's tape alive and feed it straight in.
  params.zero_grad();
  Tensor teacher = generation_log_softmax(params, traj, Context::Dense, 1.0);
  REQUIRE(teacher.requires_grad());
  Tensor total;
  for (const auto& t : batches[0].trajectories) {
    Tensor dense_lsm = &t == &traj ? teacher : generation_log_softmax(params, t, Context::Dense, 1.0);
    Tensor kl = distill_kl(dense_lsm, generation_log_softmax(params, t, Context::Shadow, 1.0));
    total = total.defined() ? num::add(total, kl) : kl;
  }
  num::backward(num::scale(total, 0.25));
  auto ablated = grads_of(params);
  for (std::size_t i = 0; i < expected.size(); ++i) CHECK(expected[i] == ablated[i]);
  CHECK_FALSE(teacher.has_grad());
}

TEST_CASE("smd ratios are exactly one on compressed rollouts") {
  auto params = toy_model(3);
  auto ref = params.clone(false);
  auto batches = make_batches(params, 3, false);
  LearnerConfig cfg;
  auto old = snapshot_logprobs(params, batches, Context::Shadow, 1.0);
  num::NoGradGuard guard;
  auto smd = accumulate_gradients(params, ref, batches, cfg, old);
  for (double r : smd.cumulative_ratio) {
    CHECK(r >= std::exp(-1e-6));
    CHECK(r <= std::exp(1e-6));
  }
  CHECK(smd.ratio_variance <= 1e-10);

  cfg.mode = Mode::Naive;
  auto dense_old = snapshot_logprobs(params, batches, Context::Dense, 1.0);
  auto naive = accumulate_gradients(params, ref, batches, cfg, dense_old);
  double worst = 0.0;
  for (double r : naive.cumulative_ratio) worst = std::max(worst, std::fabs(std::log(r)));
  CHECK(worst > 1e-6);
  CHECK(naive.ratio_variance > smd.ratio_variance);
}

TEST_CASE("loss decomposition and reference KL") {
  auto params = toy_model(4);
  auto ref = params.clone(false);
  auto batches = make_batches(params, 2, false);
  LearnerConfig cfg;
  auto old = snapshot_logprobs(params, batches, Context::Shadow, 1.0);
  auto b = accumulate_gradients(params, ref, batches, cfg, old);
  CHECK(std::fabs(b.total - (b.pg + cfg.distill_lambda * b.distill)) <= 1e-12);
  CHECK(b.ref_kl == 0.0);
  CHECK(b.distill > 0.0);
  // Ratio one on the first epoch: the surrogate is -mean_k(A_k), which is 0
  // for centred advantages.
  CHECK(std::fabs(b.pg) <= 1e-12);
  CHECK(b.consumed == 8);

  auto moved = params.clone(true);
  moved.w_head.mutable_data()[0] += 0.5;
  num::NoGradGuard guard;
  auto c = accumulate_gradients(moved, ref, batches, cfg, old);
  CHECK(c.ref_kl > 0.0);
}

TEST_CASE("clipped branch passes no gradient") {
  auto params = toy_model(5);
  auto ref = params.clone(false);
  auto batches = make_batches(params, 1, false);
  batches[0].trajectories.resize(1);
  LearnerConfig cfg;
  cfg.mode = Mode::Naive;
  cfg.ref_kl_beta = 0.0;
  auto old = snapshot_logprobs(params, batches, Context::Dense, 1.0);
  // p = 1 + 2 eps on every token.
  for (auto& lp : old[0]) lp -= std::log(1.0 + 2.0 * cfg.clip_eps);

  batches[0].advantages = {1.0};
  accumulate_gradients(params, ref, batches, cfg, old);
  CHECK(max_abs(grads_of(params)) == 0.0);

  batches[0].advantages = {-1.0};
  accumulate_gradients(params, ref, batches, cfg, old);
  CHECK(max_abs(grads_of(params)) > 0.0);
}

TEST_CASE("naive equals smd with lambda 0 when nothing was evicted") {
  auto params = toy_model(6);
  auto batches = make_batches(params, 2, true);
  LearnerConfig cfg;
  cfg.distill_lambda = 0.0;
  auto a = params.clone(true), b = params.clone(true);
  auto ref = params.clone(false);
  auto adam_a = num::AdamState::for_params(a.tensors());
  auto adam_b = num::AdamState::for_params(b.tensors());
  auto la = smd_update(a, ref, batches, cfg, adam_a);
  auto lb = naive_update(b, ref, batches, cfg, adam_b);
  CHECK(std::fabs(la.total - lb.total) <= 1e-12);
  CHECK(max_param_diff(a, b) <= 1e-12);
  CHECK(max_param_diff(a, params) > 0.0);
}

TEST_CASE("importance weights") {
  auto params = toy_model(7);
  auto ref = params.clone(false);
  LearnerConfig cfg;
  cfg.mode = Mode::Ir;

  SUBCASE("no eviction gives unit weights and the dense update") {
    auto batches = make_batches(params, 2, true);
    auto a = params.clone(true), b = params.clone(true);
    auto adam_a = num::AdamState::for_params(a.tensors());
    auto adam_b = num::AdamState::for_params(b.tensors());
    auto ir = ir_update(a, ref, batches, cfg, adam_a);
    for (double w : ir.applied_weights) CHECK(std::fabs(w - 1.0) <= 1e-9);
    // Dense recomputation without weights or distillation is plain GRPO.
    auto plain = naive_update(b, ref, batches, cfg, adam_b);
    CHECK(std::fabs(ir.total - plain.total) <= 1e-12);
    CHECK(max_param_diff(a, b) <= 1e-12);
  }
  SUBCASE("weights are clipped to the configured band") {
    auto batches = make_batches(params, 2, false);
    auto old = snapshot_logprobs(params, batches, Context::Dense, 1.0);
    // Behaviour 1.5x less likely than dense on the first group's tokens, 1/1.5
    // on the second's.
    for (std::size_t k = 0; k < 4; ++k) {
      auto& t0 = batches[0].trajectories[k];
      for (std::size_t i = 0; i < t0.generated.size(); ++i) t0.behavior_logprobs[i] = old[k][i] - std::log(1.5);
      auto& t1 = batches[1].trajectories[k];
      for (std::size_t i = 0; i < t1.generated.size(); ++i) t1.behavior_logprobs[i] = old[4 + k][i] + std::log(1.5);
    }
    num::NoGradGuard guard;
    auto b = accumulate_gradients(params, ref, batches, cfg, old);
    REQUIRE(b.applied_weights.size() == 8 * 6);
    for (std::size_t i = 0; i < 24; ++i) CHECK(b.applied_weights[i] == 1.2);
    for (std::size_t i = 24; i < 48; ++i) CHECK(b.applied_weights[i] == 0.8);
  }
  SUBCASE("real compressed rollouts stay inside the band") {
    auto batches = make_batches(params, 3, false);
    auto old = snapshot_logprobs(params, batches, Context::Dense, 1.0);
    num::NoGradGuard guard;
    auto b = accumulate_gradients(params, ref, batches, cfg, old);
    for (double w : b.applied_weights) {
      CHECK(w >= 0.8);
      CHECK(w <= 1.2);
    }
  }
}

TEST_CASE("rejection filter") {
  auto group = [](std::size_t n) {
    std::vector<rollout::Trajectory> t;
    for (std::size_t i = 0; i < n; ++i) t.push_back(stub(static_cast<double>(i % 3)));
    return make_group({1}, std::move(t));
  };

  SUBCASE("fraction 0 is the identity") {
    std::vector<GroupBatch> b{group(4)};
    auto out = rejection_filter(b, {{0.1, -2.0, 0.3, 0.0}}, 0.0);
    CHECK(out[0].trajectories.size() == 4);
    CHECK(out[0].advantages == b[0].advantages);
  }
  SUBCASE("ten trajectories at 20% keep the eight least deviated") {
    std::vector<GroupBatch> b{group(10)};
    std::vector<double> lr{0.1, -3.0, 0.2, 0.05, 2.5, -0.4, 0.3, 0.0, -0.2, 0.6};
    for (std::size_t i = 0; i < 10; ++i) b[0].trajectories[i].seed = i;
    auto out = rejection_filter(b, {lr}, 0.2);
    REQUIRE(out[0].trajectories.size() == 8);
    std::vector<double> kept;
    for (const auto& t : out[0].trajectories) kept.push_back(std::fabs(lr[t.seed]));
    std::vector<double> sorted;
    for (double x : lr) sorted.push_back(std::fabs(x));
    std::sort(sorted.begin(), sorted.end());
    std::sort(kept.begin(), kept.end());
    CHECK(kept == std::vector<double>(sorted.begin(), sorted.begin() + 8));
    double sum = 0.0;
    for (double a : out[0].advantages) sum += a;
    CHECK(std::fabs(sum) <= 1e-9);
  }
  SUBCASE("ties drop the earlier trajectory") {
    std::vector<GroupBatch> b{group(5)};
    for (std::size_t i = 0; i < 5; ++i) b[0].trajectories[i].seed = i;
    auto out = rejection_filter(b, {{1.0, 0.0, -1.0, 0.0, 1.0}}, 0.2);
    REQUIRE(out[0].trajectories.size() == 4);
    CHECK(out[0].trajectories[0].seed == 1);
  }
  SUBCASE("groups never drop below two") {
    std::vector<GroupBatch> b{group(2), group(2)};
    auto out = rejection_filter(b, {{5.0, 4.0}, {3.0, 2.0}}, 0.5);
    CHECK(out[0].trajectories.size() == 2);
    CHECK(out[1].trajectories.size() == 2);
  }
  SUBCASE("bad arguments") {
    std::vector<GroupBatch> b{group(4)};
    CHECK_THROWS_AS(rejection_filter(b, {{0, 0, 0, 0}}, 1.0), ContractError);
    CHECK_THROWS_AS(rejection_filter(b, {{0, 0, 0}}, 0.2), ContractError);
  }
}

TEST_CASE("learner consumption per mode") {
  auto params = toy_model(8);
  auto batches = make_batches(params, 5, false);
  for (auto mode : {Mode::Smd, Mode::Naive, Mode::Ir, Mode::IrReject}) {
    LearnerConfig cfg;
    cfg.mode = mode;
    Learner learner(params.clone(true), cfg);
    auto b = learner.update(batches);
    CHECK(b.generated == 20);
    CHECK(b.consumed == (mode == Mode::IrReject ? 16u : 20u));
    CHECK(max_param_diff(learner.policy(), learner.reference()) > 0.0);
  }
}

TEST_CASE("mode names and config validation") {
  for (auto mode : {Mode::Smd, Mode::Naive, Mode::Ir, Mode::IrReject, Mode::Dense}) {
    CHECK(parse_mode(to_string(mode)) == mode);
  }
  CHECK_THROWS_AS(parse_mode("ppo"), ConfigError);
  LearnerConfig cfg;
  cfg.clip_eps = 1.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = {};
  cfg.distill_lambda = -0.1;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = {};
  cfg.reject_fraction = 1.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("updates are deterministic") {
  auto params = toy_model(9);
  auto batches = make_batches(params, 2, false);
  auto run = [&] {
    Learner l(params.clone(true), LearnerConfig{});
    l.update(batches);
    l.update(batches);
    return l.policy().clone(false);
  };
  CHECK(max_param_diff(run(), run()) == 0.0);
}
