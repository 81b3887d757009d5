// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "smd/common/errors.hpp"
#include "smd/harness/config.hpp"
#include "smd/harness/experiment.hpp"
#include "smd/harness/metrics.hpp"
#include "smd/harness/traj_io.hpp"

using namespace smd;
using namespace smd::harness;
namespace fs = std::filesystem;

namespace {

// A few-second configuration: one layer, two prompts, short warm start.
ExperimentConfig tiny_config() {
  ExperimentConfig c = default_config();
  c.model.d_model = 16;
  c.model.n_heads = 2;
  c.model.n_layers = 1;
  c.model.d_ff = 32;
  c.model.max_seq_len = 32;
  c.pretrain.steps = 5;
  c.pretrain.batch = 4;
  c.steps = 3;
  c.prompts_per_step = 5;
  c.eval_instances = 10;
  return c;
}

fs::path scratch_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("smd_harness_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string error_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const std::exception& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST_CASE("config grammar") {
  const std::string text =
      "# leading comment\n"
      "[learner]\n"
      "mode = naive   # trailing comment\n"
      "\n"
      "  lambda=0.5\n"
      "[run]\n"
      "steps = 7\n";
  auto entries = parse_config_text(text, "t.ini");
  REQUIRE(entries.size() == 3);
  CHECK(entries[0].section == "learner");
  CHECK(entries[0].key == "mode");
  CHECK(entries[0].value == "naive");
  CHECK(entries[0].line == 3);
  CHECK(entries[1].value == "0.5");
  CHECK(entries[2].line == 7);

  ExperimentConfig c = default_config();
  apply_entries(c, entries, "t.ini");
  CHECK(c.learner.mode == learner::Mode::Naive);
  CHECK(c.learner.distill_lambda == 0.5);
  CHECK(c.steps == 7);
}

TEST_CASE("config errors name the line") {
  CHECK(error_of([] { parse_config_text("[run]\nsteps 5\n", "a.ini"); }).find("a.ini:2:") == 0);
  CHECK(error_of([] { parse_config_text("steps = 5\n", "b.ini"); }).find("b.ini:1:") == 0);
  CHECK(error_of([] { parse_config_text("[run\n", "c.ini"); }).find("c.ini:1:") == 0);
  ExperimentConfig c = default_config();
  auto bad_key = parse_config_text("[run]\n\nwarp = 9\n", "d.ini");
  CHECK(error_of([&] { apply_entries(c, bad_key, "d.ini"); }).find("d.ini:3:") == 0);
  auto bad_value = parse_config_text("[learner]\nlambda = lots\n", "e.ini");
  CHECK(error_of([&] { apply_entries(c, bad_value, "e.ini"); }).find("e.ini:2:") == 0);
  CHECK_THROWS_AS(apply_entries(c, parse_config_text("[physics]\ng = 9.8\n")), ConfigError);
}

TEST_CASE("overrides") {
  ExperimentConfig c = default_config();
  apply_override(c, "rollout.compression_ratio=0.2");
  apply_override(c, "rollout.policy=random");
  apply_override(c, "learner.mode=ir-reject");
  CHECK(c.rollout.compression_ratio == 0.2);
  CHECK(c.rollout.policy.kind == kv::EvictionKind::Random);
  CHECK(c.learner.mode == learner::Mode::IrReject);
  CHECK_THROWS_AS(apply_override(c, "steps=4"), ConfigError);
  CHECK_THROWS_AS(apply_override(c, "run.steps"), ConfigError);
  CHECK_THROWS_AS(apply_override(c, "run.steps=-3"), ConfigError);
}

TEST_CASE("canonical text round-trips") {
  ExperimentConfig c = default_config();
  apply_override(c, "learner.lambda=0.8");
  apply_override(c, "rollout.temperature=0.7");
  apply_override(c, "run.seed=12345678901");
  apply_override(c, "task.kind=copy");
  c.normalize();
  auto dir = scratch_dir("roundtrip");
  std::ofstream(dir / "c.ini") << to_text(c);
  ExperimentConfig back = load_config(dir / "c.ini");
  CHECK(to_text(back) == to_text(c));
  CHECK(back.seed == 12345678901ULL);
  CHECK(back.learner.temperature == 0.7);
  CHECK_THROWS_AS(load_config(dir / "missing.ini"), ConfigError);
}

TEST_CASE("config validation") {
  CHECK_NOTHROW(default_config().validate());
  auto c = default_config();
  c.model.vocab_size = 32;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = default_config();
  c.model.max_seq_len = 12;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = default_config();
  c.rollout.group_size = 1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = default_config();
  c.final_window = 0.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("metric records round-trip bit for bit") {
  Rng rng(1);
  for (int trial = 0; trial < 100; ++trial) {
    MetricRecord r;
    r.step = rng() % 100000;
    r.reward_mean = uniform01(rng);
    r.reward_std = uniform01(rng) * 1e-7;
    r.ratio_mean = std::exp(standard_normal(rng));
    r.ratio_var = uniform01(rng) * 1e300;
    r.loss_pg = -standard_normal(rng);
    r.loss_ref_kl = 5e-324;
    r.loss_distill = standard_normal(rng);
    r.loss_total = r.loss_pg + 0.1 * r.loss_distill;
    r.peak_mem_ratio = 1.0 + uniform01(rng);
    r.consumed = rng() % 64;
    r.generated = rng() % 64;
    const std::string line = format_record(r);
    CHECK(line.find('\n') == std::string::npos);
    CHECK(parse_record(line) == r);
  }
  CHECK(format_header().find("step\treward_mean") == 0);
  CHECK_THROWS_AS(parse_record("1\t2\t3"), InputError);
  CHECK_THROWS_AS(parse_record(format_record({}) + "x"), InputError);
}

TEST_CASE("metrics files") {
  auto dir = scratch_dir("metrics");
  {
    MetricsWriter w(dir / "m.tsv");
    w.write({1, 0.5});
    w.write({2, 0.75});
  }
  auto rows = read_metrics(dir / "m.tsv");
  REQUIRE(rows.size() == 2);
  CHECK(rows[1].reward_mean == 0.75);
  std::ofstream(dir / "bad.tsv") << "step\treward\n";
  CHECK_THROWS_AS(read_metrics(dir / "bad.tsv"), InputError);
}

TEST_CASE("trajectory dumps round-trip") {
  auto c = tiny_config();
  auto params = initial_policy(c);
  auto prompts = step_prompts(c, 0);
  auto trajs = collect_rollouts(params, c, prompts, 0);
  REQUIRE(trajs.size() == c.prompts_per_step * c.rollout.group_size);
  bool any_eviction = false;
  for (const auto& t : trajs) any_eviction = any_eviction || !t.mask.all_visible();
  CHECK(any_eviction);

  auto dir = scratch_dir("traj");
  write_trajectories(dir / "t.jsonl", trajs);
  auto back = read_trajectories(dir / "t.jsonl");
  REQUIRE(back.size() == trajs.size());
  for (std::size_t i = 0; i < trajs.size(); ++i) {
    CHECK(back[i].prompt == trajs[i].prompt);
    CHECK(back[i].generated == trajs[i].generated);
    CHECK(back[i].behavior_logprobs == trajs[i].behavior_logprobs);
    CHECK(back[i].mask == trajs[i].mask);
    CHECK(back[i].reward == trajs[i].reward);
    CHECK(back[i].seed == trajs[i].seed);
    CHECK(back[i].cache_retained_entries == trajs[i].cache_retained_entries);
  }
  CHECK_THROWS_AS(trajectory_from_json("{\"prompt\": [1, 2]"), InputError);
  CHECK_THROWS_AS(trajectory_from_json("{}"), InputError);
}

TEST_CASE("rollout collection is seeded per step") {
  auto c = tiny_config();
  auto params = initial_policy(c);
  auto p0 = step_prompts(c, 0), p0b = step_prompts(c, 0), p1 = step_prompts(c, 1);
  CHECK(p0.size() == c.prompts_per_step);
  CHECK(p0[0].prompt == p0b[0].prompt);
  CHECK(p0[0].prompt != p1[0].prompt);
  auto a = collect_rollouts(params, c, p0, 0), b = collect_rollouts(params, c, p0, 0);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].generated == b[i].generated);
}

TEST_CASE("zero steps leave the checkpoint at init") {
  auto c = tiny_config();
  c.steps = 0;
  auto dir = scratch_dir("zero");
  c.out_dir = dir.string();
  auto result = run_train(c);
  CHECK(result.metrics.empty());
  CHECK(slurp(dir / "final.ckpt") == slurp(dir / "init.ckpt"));
  CHECK(fs::exists(dir / "metrics.tsv"));
  CHECK(read_metrics(dir / "metrics.tsv").empty());
}

TEST_CASE("same seed gives byte-identical outputs") {
  auto c = tiny_config();
  auto d1 = scratch_dir("det1"), d2 = scratch_dir("det2");
  c.out_dir = d1.string();
  run_train(c);
  c.out_dir = d2.string();
  run_train(c);
  CHECK(slurp(d1 / "metrics.tsv") == slurp(d2 / "metrics.tsv"));
  CHECK(slurp(d1 / "final.ckpt") == slurp(d2 / "final.ckpt"));
  CHECK(read_metrics(d1 / "metrics.tsv").size() == c.steps);
  CHECK(load_config(d1 / "config.ini").steps == c.steps);
}

TEST_CASE("trajectory consumption and memory per mode") {
  for (auto mode : {learner::Mode::Smd, learner::Mode::IrReject, learner::Mode::Dense}) {
    auto c = tiny_config();
    c.steps = 2;
    c.learner.mode = mode;
    std::size_t seen = 0;
    auto result = run_train(c, [&](const MetricRecord&) { ++seen; });
    CHECK(seen == 2);
    for (const auto& m : result.metrics) {
      CHECK(m.generated == 20);
      CHECK(m.consumed == (mode == learner::Mode::IrReject ? 16u : 20u));
      if (mode == learner::Mode::Dense) {
        CHECK(m.peak_mem_ratio == 1.0);
      } else {
        CHECK(m.peak_mem_ratio > 1.0);
        CHECK(m.peak_mem_ratio <= 1.01);
      }
      if (mode == learner::Mode::Smd) CHECK(m.ratio_var <= 1e-10);
    }
  }
}

TEST_CASE("final reward window") {
  std::vector<MetricRecord> m;
  for (std::uint64_t i = 0; i < 20; ++i) m.push_back({i, static_cast<double>(i)});
  CHECK(final_reward(m, 0.1) == doctest::Approx(18.5));
  CHECK(final_reward(m, 0.01) == 19.0);
  CHECK(final_reward(m, 1.0) == doctest::Approx(9.5));
}

TEST_CASE("memory bench ratios") {
  auto rows = run_membench({});
  REQUIRE(rows.size() == 3);
  CHECK(rows[0].slice_peak_ratio == 1.5);
  CHECK(rows[1].slice_peak_ratio == 1.8);
  CHECK(rows[2].slice_peak_ratio == 2.0);
  for (const auto& r : rows) CHECK(r.mask_peak_ratio <= 1.01);
  // One bit per stored entry on top of 2 * 16 * 8 bytes per entry.
  CHECK(mask_peak_ratio(320, 16) == doctest::Approx(1.0 + 40.0 / (320.0 * 256.0)).epsilon(1e-15));
}

TEST_CASE("sweep axis names and evaluation") {
  for (auto a : {SweepAxis::CompressionRatio, SweepAxis::Lambda, SweepAxis::Strategy}) {
    CHECK(parse_sweep_axis(to_string(a)) == a);
  }
  CHECK_THROWS_AS(parse_sweep_axis("depth"), ConfigError);
  auto c = tiny_config();
  auto params = initial_policy(c);
  const double r = run_eval(c, params);
  CHECK(r >= 0.0);
  CHECK(r <= 1.0);
  CHECK(run_eval(c, params) == r);
}
