// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <sstream>

#include "doctest.h"
#include "smd/common/errors.hpp"
#include "smd/kvcache/eviction.hpp"
#include "smd/model/checkpoint.hpp"
#include "smd/model/transformer.hpp"
#include "test_util.hpp"

using namespace smd;
using num::Tensor;

namespace {

model::ModelConfig small_config() {
  model::ModelConfig c;
  c.vocab_size = 64;
  c.d_model = 16;
  c.n_heads = 2;
  c.n_layers = 2;
  c.d_ff = 32;
  c.max_seq_len = 32;
  return c;
}

std::vector<int> random_tokens(std::size_t n, std::size_t vocab, Rng& rng) {
  std::vector<int> t(n);
  for (auto& x : t) x = static_cast<int>(uniform_index(rng, vocab));
  return t;
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  REQUIRE(a.size() == b.size());
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
  return m;
}

std::span<const double> row(const Tensor& t, std::size_t r) { return t.data().subspan(r * t.cols(), t.cols()); }

// Decodes `tokens` one at a time, compressing after the prompt and after
// every generated token, and records evictions the way a rollout does.
struct Replay {
  std::vector<std::vector<double>> logits;
  kv::ShadowMask mask;
};

Replay replay_with_eviction(const model::Parameters& params, const std::vector<int>& tokens, std::size_t prompt,
                            kv::EvictionKind kind, std::size_t budget) {
  const auto& cfg = params.config;
  kv::KVCache cache(cfg.n_layers, cfg.n_heads, cfg.d_head());
  cache.set_prompt_length(prompt);
  cache.set_budget(budget);
  Replay out{{}, kv::ShadowMask(cfg.n_layers, cfg.n_heads, prompt, tokens.size())};
  kv::AttentionWindow window(cfg.n_layers, cfg.n_heads, 4);
  Rng rng(9);
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    auto step = model::incremental_step(params, tokens[t], cache);
    out.logits.push_back(step.logits);
    for (std::size_t l = 0; l < cfg.n_layers; ++l)
      for (std::size_t h = 0; h < cfg.n_heads; ++h) window.push(l, h, step.attention[l * cfg.n_heads + h]);
    if (t + 1 < prompt) continue;
    auto ev = kv::enforce_budget(cache, {kind, 2, 0}, window.all_scores(cache.next_position()), &rng);
    for (std::size_t l = 0; l < cfg.n_layers; ++l)
      for (std::size_t h = 0; h < cfg.n_heads; ++h)
        kv::record_eviction(out.mask, l, h, ev.positions[l * cfg.n_heads + h],
                            static_cast<std::int64_t>(cache.next_position()));
  }
  return out;
}

}  // namespace

TEST_CASE("token log-probs of uniform logits") {
  Tensor logits = Tensor::zeros({3, 4});
  const int chosen[] = {0, 3, 1};
  Tensor lp = model::token_logprobs(logits, chosen);
  for (std::size_t i = 0; i < 3; ++i) CHECK(lp.at(i) == doctest::Approx(-std::log(4.0)).epsilon(1e-15));
}

TEST_CASE("shadow pass with an all-visible mask equals the dense pass") {
  auto params = model::Parameters::init(small_config(), 1);
  Rng rng(2);
  for (int trial = 0; trial < 5; ++trial) {
    auto tokens = random_tokens(5 + uniform_index(rng, 20), 64, rng);
    kv::ShadowMask mask(2, 2, 1 + uniform_index(rng, tokens.size()), tokens.size());
    Tensor dense = model::forward_dense(params, tokens);
    Tensor shadow = model::forward_shadow(params, tokens, mask);
    CHECK(max_abs_diff(dense.data(), shadow.data()) <= 1e-12);
  }
}

TEST_CASE("incremental decoding matches the batch pass") {
  auto params = model::Parameters::init(small_config(), 3);
  Rng rng(4);
  auto tokens = random_tokens(24, 64, rng);
  Tensor dense = model::forward_dense(params, tokens);
  kv::KVCache cache(2, 2, 8);
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    auto step = model::incremental_step(params, tokens[t], cache);
    CHECK(max_abs_diff(step.logits, row(dense, t)) <= 1e-9);
  }
}

TEST_CASE("shadow pass reconstructs compressed decoding") {
  auto params = model::Parameters::init(small_config(), 5);
  Rng rng(6);
  for (auto kind : {kv::EvictionKind::HeavyHitter, kv::EvictionKind::Recent, kv::EvictionKind::Random}) {
    auto tokens = random_tokens(20, 64, rng);
    auto rep = replay_with_eviction(params, tokens, 8, kind, 5);
    REQUIRE_FALSE(rep.mask.all_visible());
    Tensor shadow = model::forward_shadow(params, tokens, rep.mask);
    Tensor dense = model::forward_dense(params, tokens);
    double worst = 0.0, gap = 0.0;
    for (std::size_t t = 0; t < tokens.size(); ++t) {
      worst = std::max(worst, max_abs_diff(rep.logits[t], row(shadow, t)));
      gap = std::max(gap, max_abs_diff(rep.logits[t], row(dense, t)));
    }
    CHECK(worst <= 1e-9);
    // The dense pass sees different context, so it must disagree somewhere.
    CHECK(gap > 1e-6);
  }
}

TEST_CASE("property: logits depend only on earlier tokens") {
  auto params = model::Parameters::init(small_config(), 7);
  Rng rng(8);
  for (int trial = 0; trial < 10; ++trial) {
    auto tokens = random_tokens(12, 64, rng);
    auto rep = replay_with_eviction(params, tokens, 6, kv::EvictionKind::Recent, 4);
    const std::size_t t = uniform_index(rng, tokens.size());
    auto changed = tokens;
    changed[t] = (changed[t] + 1) % 64;
    Tensor a = model::forward_dense(params, tokens), b = model::forward_dense(params, changed);
    Tensor sa = model::forward_shadow(params, tokens, rep.mask);
    Tensor sb = model::forward_shadow(params, changed, rep.mask);
    for (std::size_t r = 0; r < t; ++r) {
      CHECK(max_abs_diff(row(a, r), row(b, r)) == 0.0);
      CHECK(max_abs_diff(row(sa, r), row(sb, r)) == 0.0);
    }
  }
}

TEST_CASE("property: evicted keys get exactly zero weight from their step on") {
  auto params = model::Parameters::init(small_config(), 9);
  Rng rng(10);
  for (int trial = 0; trial < 5; ++trial) {
    auto tokens = random_tokens(16, 64, rng);
    auto rep = replay_with_eviction(params, tokens, 6, kv::EvictionKind::HeavyHitter, 4);
    model::ForwardTrace trace;
    model::forward_shadow(params, tokens, rep.mask, &trace);
    for (std::size_t l = 0; l < 2; ++l)
      for (std::size_t h = 0; h < 2; ++h) {
        const Tensor& w = trace.attention[l * 2 + h];
        for (std::size_t q = 0; q < tokens.size(); ++q)
          for (std::size_t k = 0; k < tokens.size(); ++k) {
            if (rep.mask.visible(l, h, q, k)) {
              CHECK(w.at(q, k) > 0.0);
            } else {
              CHECK(w.at(q, k) == 0.0);
            }
          }
      }
  }
}

TEST_CASE("a generation query with no visible key is an error") {
  auto params = model::Parameters::init(small_config(), 11);
  const std::vector<int> tokens{1, 2, 3, 4};
  // Query 2 has lost keys 0, 1 and itself.
  auto mask = kv::ShadowMask::deserialize("2;2;2;4|1,0:0@1,1@2,2@2");
  CHECK_THROWS_AS(model::forward_shadow(params, tokens, mask), DegenerateVisibilityError);
  CHECK_THROWS_AS(model::shadow_bias(mask, 1, 0, 4), DegenerateVisibilityError);
}

TEST_CASE("forward rejects bad inputs") {
  auto params = model::Parameters::init(small_config(), 12);
  CHECK_THROWS_AS(model::forward_dense(params, std::vector<int>{}), InputError);
  CHECK_THROWS_AS(model::forward_dense(params, std::vector<int>{1, 64}), InputError);
  CHECK_THROWS_AS(model::forward_dense(params, std::vector<int>(33, 1)), InputError);
  kv::ShadowMask wrong(1, 2, 1, 4);
  CHECK_THROWS_AS(model::forward_shadow(params, std::vector<int>{1, 2}, wrong), ContractError);
}

TEST_CASE("checkpoints round-trip exactly") {
  auto params = model::Parameters::init(small_config(), 13);
  std::stringstream buf;
  model::save_checkpoint(params, buf);
  auto loaded = model::load_checkpoint(params.config, buf);
  auto a = params.named(), b = loaded.named();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].name == b[i].name);
    CHECK(max_abs_diff(a[i].tensor.data(), b[i].tensor.data()) == 0.0);
  }

  auto other = small_config();
  other.d_ff = 16;
  std::stringstream again;
  model::save_checkpoint(params, again);
  CHECK_THROWS(model::load_checkpoint(other, again));
  std::stringstream junk("not a checkpoint");
  CHECK_THROWS_AS(model::load_checkpoint(params.config, junk), InputError);
}

TEST_CASE("clone owns its storage") {
  auto params = model::Parameters::init(small_config(), 14);
  auto copy = params.clone(false);
  CHECK_FALSE(copy.tok_emb.requires_grad());
  copy.tok_emb.mutable_data()[0] += 1.0;
  CHECK(copy.tok_emb.at(0) != params.tok_emb.at(0));
}

TEST_CASE("full-model gradients match finite differences") {
  model::ModelConfig c;
  c.vocab_size = 8;
  c.d_model = 4;
  c.n_heads = 2;
  c.n_layers = 1;
  c.d_ff = 8;
  c.max_seq_len = 6;
  auto params = model::Parameters::init(c, 15);
  const std::vector<int> tokens{1, 5, 2, 7, 3, 0};
  const std::vector<int> targets{5, 2, 7, 3, 0, 4};
  auto mask = kv::ShadowMask::deserialize("3;1;2;6|0,0:0@4,1@3|0,1:2@5");
  auto loss = [&] { return num::sum(model::token_logprobs(model::forward_shadow(params, tokens, mask), targets)); };
  // The loss sums to ~10, so a 1e-6 step leaves ~1e-9 of roundoff on
  // gradients that are themselves ~1e-5; a 1e-5 step keeps truncation and
  // roundoff both below the tolerance.
  CHECK(testing::gradcheck(loss, params.tensors(), 1e-5) < 1e-5);
}
