// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "smd/learner/learner.hpp"
#include "smd/model/config.hpp"
#include "smd/rollout/rollout.hpp"
#include "smd/tasks/tasks.hpp"

namespace smd::harness {

/// Supervised warm start on dense teacher-forced answers before RL.
struct PretrainConfig {
  std::size_t steps = 0;
  std::size_t batch = 16;
  double lr = 3e-3;
};

struct ExperimentConfig {
  model::ModelConfig model;
  tasks::TaskSpec task;
  rollout::RolloutConfig rollout;
  learner::LearnerConfig learner;
  PretrainConfig pretrain;
  std::size_t steps = 300;
  std::size_t prompts_per_step = 5;
  std::uint64_t seed = 0;
  std::string out_dir;
  /// Held-out instances scored by `eval`.
  std::size_t eval_instances = 200;
  /// Fraction of the final steps whose mean rollout reward is the run's
  /// final reward.
  double final_window = 0.1;

  /// Cross-checks every section. The learner temperature is taken from the
  /// rollout section by normalize().
  void validate() const;
  /// Propagates shared values between sections (temperature).
  void normalize();
};

/// Built-in defaults: the toy needle-retrieval experiment.
ExperimentConfig default_config();

/// One `key = value` line of a config file.
struct ConfigEntry {
  std::string section;
  std::string key;
  std::string value;
  std::size_t line = 0;
};

/// Parses the sectioned key=value grammar (see configs/README.md). Throws
/// ConfigError naming the offending line.
std::vector<ConfigEntry> parse_config_text(const std::string& text, const std::string& source = "<config>");

/// Sets one `section.key` field. Throws ConfigError for unknown keys or bad
/// values.
void apply_setting(ExperimentConfig& config, const std::string& section, const std::string& key,
                   const std::string& value);

/// Applies parsed entries on top of `config`, reporting the source line of
/// any rejected entry.
void apply_entries(ExperimentConfig& config, const std::vector<ConfigEntry>& entries,
                   const std::string& source = "<config>");

/// Parses a `section.key=value` override.
void apply_override(ExperimentConfig& config, const std::string& assignment);

ExperimentConfig load_config(const std::filesystem::path& path);

/// Canonical text form; load_config(to_text(c)) reproduces c.
std::string to_text(const ExperimentConfig& config);

}  // namespace smd::harness
