// SPDX-License-Identifier: Apache-2.0
#include "smd/harness/config.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "smd/common/errors.hpp"

namespace smd::harness {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::uint64_t parse_uint(const std::string& name, const std::string& v) {
  std::uint64_t out = 0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    throw ConfigError(name + ": expected a non-negative integer, got '" + v + "'");
  }
  return out;
}

std::int64_t parse_int(const std::string& name, const std::string& v) {
  std::int64_t out = 0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    throw ConfigError(name + ": expected an integer, got '" + v + "'");
  }
  return out;
}

double parse_double(const std::string& name, const std::string& v) {
  double out = 0.0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    throw ConfigError(name + ": expected a number, got '" + v + "'");
  }
  return out;
}

}  // namespace

void ExperimentConfig::validate() const {
  model.validate();
  task.validate(model.max_seq_len);
  rollout.validate();
  learner.validate();
  if (model.vocab_size < tasks::tok::kMinVocab) {
    throw ConfigError("model.vocab_size must be >= " + std::to_string(tasks::tok::kMinVocab));
  }
  if (task.max_prompt_len + rollout.max_new_tokens > model.max_seq_len) {
    throw ConfigError("task.max_prompt_len + rollout.max_new_tokens exceeds model.max_seq_len");
  }
  if (rollout.policy.kind == kv::EvictionKind::HeavyHitter && rollout.policy.window < 1) {
    throw ConfigError("rollout.window must be >= 1 for the heavy-hitter policy");
  }
  if (learner.temperature != rollout.temperature) {
    throw ConfigError("learner temperature differs from rollout.temperature");
  }
  if (prompts_per_step == 0) throw ConfigError("run.prompts_per_step must be >= 1");
  if (pretrain.steps > 0 && (pretrain.batch == 0 || !(pretrain.lr > 0.0))) {
    throw ConfigError("pretrain.batch must be >= 1 and pretrain.lr > 0");
  }
  if (!(final_window > 0.0 && final_window <= 1.0)) throw ConfigError("run.final_window must lie in (0, 1]");
}

void ExperimentConfig::normalize() { learner.temperature = rollout.temperature; }

ExperimentConfig default_config() {
  ExperimentConfig c;
  c.rollout.policy = {kv::EvictionKind::HeavyHitter, 8, 0};
  c.rollout.compression_ratio = 0.5;
  c.rollout.group_size = 4;
  c.rollout.max_new_tokens = c.task.answer_length;
  c.learner.mode = learner::Mode::Smd;
  c.task.min_prompt_len = 10;
  c.task.max_prompt_len = 13;
  c.pretrain.steps = 1000;
  c.pretrain.batch = 16;
  c.pretrain.lr = 3e-3;
  c.normalize();
  return c;
}

std::vector<ConfigEntry> parse_config_text(const std::string& text, const std::string& source) {
  std::vector<ConfigEntry> out;
  std::istringstream in(text);
  std::string raw, section;
  std::size_t line = 0;
  while (std::getline(in, raw)) {
    ++line;
    const auto hash = raw.find('#');
    std::string s = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    if (s.empty()) continue;
    if (s.front() == '[') {
      if (s.back() != ']' || s.size() < 3) {
        throw ConfigError(source + ":" + std::to_string(line) + ": malformed section header '" + s + "'");
      }
      section = trim(s.substr(1, s.size() - 2));
      continue;
    }
    const auto eq = s.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(source + ":" + std::to_string(line) + ": expected 'key = value', got '" + s + "'");
    }
    if (section.empty()) {
      throw ConfigError(source + ":" + std::to_string(line) + ": key outside of any [section]");
    }
    ConfigEntry e{section, trim(s.substr(0, eq)), trim(s.substr(eq + 1)), line};
    if (e.key.empty()) throw ConfigError(source + ":" + std::to_string(line) + ": empty key");
    out.push_back(std::move(e));
  }
  return out;
}

void apply_setting(ExperimentConfig& c, const std::string& section, const std::string& key,
                   const std::string& v) {
  const std::string name = section + "." + key;
  auto u = [&] { return static_cast<std::size_t>(parse_uint(name, v)); };
  auto d = [&] { return parse_double(name, v); };

  if (section == "model") {
    if (key == "vocab_size") c.model.vocab_size = u();
    else if (key == "d_model") c.model.d_model = u();
    else if (key == "n_heads") c.model.n_heads = u();
    else if (key == "n_layers") c.model.n_layers = u();
    else if (key == "d_ff") c.model.d_ff = u();
    else if (key == "max_seq_len") c.model.max_seq_len = u();
    else throw ConfigError("unknown key '" + name + "'");
  } else if (section == "task") {
    if (key == "kind") c.task.kind = tasks::parse_task_kind(v);
    else if (key == "min_prompt_len") c.task.min_prompt_len = u();
    else if (key == "max_prompt_len") c.task.max_prompt_len = u();
    else if (key == "answer_length") c.task.answer_length = u();
    else throw ConfigError("unknown key '" + name + "'");
  } else if (section == "rollout") {
    if (key == "k") c.rollout.group_size = u();
    else if (key == "temperature") c.rollout.temperature = d();
    else if (key == "max_new_tokens") c.rollout.max_new_tokens = u();
    else if (key == "policy") c.rollout.policy.kind = kv::parse_eviction_kind(v);
    else if (key == "window") c.rollout.policy.window = u();
    else if (key == "policy_seed") c.rollout.policy.seed = parse_uint(name, v);
    else if (key == "compression_ratio") c.rollout.compression_ratio = d();
    else if (key == "stop_token") c.rollout.stop_token = static_cast<int>(parse_int(name, v));
    else throw ConfigError("unknown key '" + name + "'");
  } else if (section == "learner") {
    if (key == "mode") c.learner.mode = learner::parse_mode(v);
    else if (key == "clip_eps") c.learner.clip_eps = d();
    else if (key == "beta") c.learner.ref_kl_beta = d();
    else if (key == "lambda") c.learner.distill_lambda = d();
    else if (key == "lr") c.learner.lr = d();
    else if (key == "epochs") c.learner.epochs = u();
    else if (key == "ir_clip_low") c.learner.ir_clip_low = d();
    else if (key == "ir_clip_high") c.learner.ir_clip_high = d();
    else if (key == "reject_fraction") c.learner.reject_fraction = d();
    else throw ConfigError("unknown key '" + name + "'");
  } else if (section == "pretrain") {
    if (key == "steps") c.pretrain.steps = u();
    else if (key == "batch") c.pretrain.batch = u();
    else if (key == "lr") c.pretrain.lr = d();
    else throw ConfigError("unknown key '" + name + "'");
  } else if (section == "run") {
    if (key == "steps") c.steps = u();
    else if (key == "prompts_per_step") c.prompts_per_step = u();
    else if (key == "seed") c.seed = parse_uint(name, v);
    else if (key == "out") c.out_dir = v;
    else if (key == "eval_instances") c.eval_instances = u();
    else if (key == "final_window") c.final_window = d();
    else throw ConfigError("unknown key '" + name + "'");
  } else {
    throw ConfigError("unknown section '" + section + "'");
  }
}

void apply_entries(ExperimentConfig& config, const std::vector<ConfigEntry>& entries, const std::string& source) {
  for (const auto& e : entries) {
    try {
      apply_setting(config, e.section, e.key, e.value);
    } catch (const ConfigError& err) {
      throw ConfigError(source + ":" + std::to_string(e.line) + ": " + err.what());
    }
  }
  config.normalize();
}

void apply_override(ExperimentConfig& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  const auto dot = assignment.find('.');
  if (eq == std::string::npos || dot == std::string::npos || dot > eq) {
    throw ConfigError("override '" + assignment + "' is not of the form section.key=value");
  }
  apply_setting(config, trim(assignment.substr(0, dot)), trim(assignment.substr(dot + 1, eq - dot - 1)),
                trim(assignment.substr(eq + 1)));
  config.normalize();
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  ExperimentConfig c = default_config();
  apply_entries(c, parse_config_text(buf.str(), path.string()), path.string());
  return c;
}

std::string to_text(const ExperimentConfig& c) {
  std::ostringstream o;
  o << "[model]\n"
    << "vocab_size = " << c.model.vocab_size << "\n"
    << "d_model = " << c.model.d_model << "\n"
    << "n_heads = " << c.model.n_heads << "\n"
    << "n_layers = " << c.model.n_layers << "\n"
    << "d_ff = " << c.model.d_ff << "\n"
    << "max_seq_len = " << c.model.max_seq_len << "\n\n"
    << "[task]\n"
    << "kind = " << tasks::to_string(c.task.kind) << "\n"
    << "min_prompt_len = " << c.task.min_prompt_len << "\n"
    << "max_prompt_len = " << c.task.max_prompt_len << "\n"
    << "answer_length = " << c.task.answer_length << "\n\n"
    << "[rollout]\n"
    << "k = " << c.rollout.group_size << "\n"
    << "temperature = " << fmt(c.rollout.temperature) << "\n"
    << "max_new_tokens = " << c.rollout.max_new_tokens << "\n"
    << "policy = " << kv::to_string(c.rollout.policy.kind) << "\n"
    << "window = " << c.rollout.policy.window << "\n"
    << "policy_seed = " << c.rollout.policy.seed << "\n"
    << "compression_ratio = " << fmt(c.rollout.compression_ratio) << "\n"
    << "stop_token = " << c.rollout.stop_token << "\n\n"
    << "[learner]\n"
    << "mode = " << learner::to_string(c.learner.mode) << "\n"
    << "clip_eps = " << fmt(c.learner.clip_eps) << "\n"
    << "beta = " << fmt(c.learner.ref_kl_beta) << "\n"
    << "lambda = " << fmt(c.learner.distill_lambda) << "\n"
    << "lr = " << fmt(c.learner.lr) << "\n"
    << "epochs = " << c.learner.epochs << "\n"
    << "ir_clip_low = " << fmt(c.learner.ir_clip_low) << "\n"
    << "ir_clip_high = " << fmt(c.learner.ir_clip_high) << "\n"
    << "reject_fraction = " << fmt(c.learner.reject_fraction) << "\n\n"
    << "[pretrain]\n"
    << "steps = " << c.pretrain.steps << "\n"
    << "batch = " << c.pretrain.batch << "\n"
    << "lr = " << fmt(c.pretrain.lr) << "\n\n"
    << "[run]\n"
    << "steps = " << c.steps << "\n"
    << "prompts_per_step = " << c.prompts_per_step << "\n"
    << "seed = " << c.seed << "\n";
  if (!c.out_dir.empty()) o << "out = " << c.out_dir << "\n";
  o << "eval_instances = " << c.eval_instances << "\n"
    << "final_window = " << fmt(c.final_window) << "\n";
  return o.str();
}

}  // namespace smd::harness
