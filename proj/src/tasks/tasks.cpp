// SPDX-License-Identifier: Apache-2.0
#include "smd/tasks/tasks.hpp"

#include <algorithm>
#include <numeric>

#include "smd/common/errors.hpp"

namespace smd::tasks {

std::string to_string(TaskKind kind) {
  switch (kind) {
    case TaskKind::NeedleRetrieval: return "needle";
    case TaskKind::Copy: return "copy";
    case TaskKind::ParityCount: return "parity";
  }
  return "?";
}

TaskKind parse_task_kind(const std::string& name) {
  if (name == "needle" || name == "needle-retrieval") return TaskKind::NeedleRetrieval;
  if (name == "copy") return TaskKind::Copy;
  if (name == "parity" || name == "parity-count") return TaskKind::ParityCount;
  throw ConfigError("unknown task '" + name + "'");
}

namespace {

constexpr std::size_t kNeedleOverhead = 4;  // BOS qkey SEP ... ANSWER
constexpr std::size_t kCopyOverhead = 4;    // BOS COPY ... SEP ... ANSWER
constexpr std::size_t kParityOverhead = 3;  // BOS COUNT ... ANSWER
constexpr std::size_t kNumKeys = tok::kKeyEnd - tok::kKeyBegin;
constexpr std::size_t kNumPayload = tok::kPayloadEnd - tok::kPayloadBegin;

std::size_t needle_pairs(const TaskSpec& s, std::size_t len) {
  return (len - kNeedleOverhead) / (1 + s.answer_length);
}

// Draws `n` distinct values from [begin, begin + range) in random order.
std::vector<int> distinct(Rng& rng, int begin, std::size_t range, std::size_t n) {
  std::vector<int> pool(range);
  std::iota(pool.begin(), pool.end(), begin);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(uniform_index(rng, range - i));
    std::swap(pool[i], pool[j]);
  }
  pool.resize(n);
  return pool;
}

}  // namespace

void TaskSpec::validate(std::size_t max_seq_len) const {
  if (answer_length == 0) throw ConfigError("task.answer_length must be >= 1");
  if (min_prompt_len > max_prompt_len) throw ConfigError("task.min_prompt_len exceeds task.max_prompt_len");
  if (max_prompt_len + answer_length + 1 > max_seq_len) {
    throw ConfigError("task prompt + answer does not fit max_seq_len");
  }
  switch (kind) {
    case TaskKind::NeedleRetrieval: {
      if (min_prompt_len < kNeedleOverhead + 1 + answer_length) {
        throw ConfigError("task.min_prompt_len too short for one needle pair");
      }
      const std::size_t pairs = needle_pairs(*this, max_prompt_len);
      if (pairs > kNumKeys || pairs * answer_length > kNumPayload) {
        throw ConfigError("task.max_prompt_len needs more distinct keys/values than the vocabulary has");
      }
      break;
    }
    case TaskKind::Copy:
      if (min_prompt_len < kCopyOverhead + answer_length) throw ConfigError("task.min_prompt_len too short for copy span");
      break;
    case TaskKind::ParityCount:
      if (answer_length != 1) throw ConfigError("parity task has answer_length 1");
      if (min_prompt_len < kParityOverhead + 1) throw ConfigError("task.min_prompt_len too short for parity");
      break;
  }
}

TaskInstance make_instance(const TaskSpec& spec, Rng& rng) {
  const std::size_t len =
      spec.min_prompt_len + static_cast<std::size_t>(uniform_index(rng, spec.max_prompt_len - spec.min_prompt_len + 1));
  TaskInstance inst;
  auto& p = inst.prompt;
  p.push_back(tok::kBos);
  switch (spec.kind) {
    case TaskKind::NeedleRetrieval: {
      const std::size_t pairs = needle_pairs(spec, len);
      const auto keys = distinct(rng, tok::kKeyBegin, kNumKeys, pairs);
      const auto values = distinct(rng, tok::kPayloadBegin, kNumPayload, pairs * spec.answer_length);
      const std::size_t target = static_cast<std::size_t>(uniform_index(rng, pairs));
      p.push_back(keys[target]);
      p.push_back(tok::kSep);
      for (std::size_t i = 0; i < pairs; ++i) {
        p.push_back(keys[i]);
        for (std::size_t a = 0; a < spec.answer_length; ++a) p.push_back(values[i * spec.answer_length + a]);
      }
      p.push_back(tok::kAnswer);
      inst.answer.assign(values.begin() + static_cast<std::ptrdiff_t>(target * spec.answer_length),
                         values.begin() + static_cast<std::ptrdiff_t>((target + 1) * spec.answer_length));
      break;
    }
    case TaskKind::Copy: {
      p.push_back(tok::kCopy);
      inst.answer = distinct(rng, tok::kPayloadBegin, kNumPayload, spec.answer_length);
      p.insert(p.end(), inst.answer.begin(), inst.answer.end());
      p.push_back(tok::kSep);
      while (p.size() + 1 < len) {
        p.push_back(tok::kPayloadBegin + static_cast<int>(uniform_index(rng, kNumPayload)));
      }
      p.push_back(tok::kAnswer);
      break;
    }
    case TaskKind::ParityCount: {
      p.push_back(tok::kCount);
      int ones = 0;
      while (p.size() + 1 < len) {
        const int bit = static_cast<int>(uniform_index(rng, 2));
        ones += bit;
        p.push_back(tok::kPayloadBegin + bit);
      }
      p.push_back(tok::kAnswer);
      inst.answer = {tok::kPayloadBegin + (ones % 2)};
      break;
    }
  }
  return inst;
}

double reward(const TaskInstance& instance, std::span<const int> generated) {
  if (!generated.empty() && generated.back() == tok::kStop) generated = generated.first(generated.size() - 1);
  const auto& ans = instance.answer;
  if (generated.size() == ans.size() && std::equal(ans.begin(), ans.end(), generated.begin())) return 1.0;
  std::size_t lcp = 0;
  while (lcp < ans.size() && lcp < generated.size() && ans[lcp] == generated[lcp]) ++lcp;
  const std::size_t denom = std::max(ans.size(), generated.size());
  return denom == 0 ? 0.0 : static_cast<double>(lcp) / static_cast<double>(denom);
}

}  // namespace smd::tasks
