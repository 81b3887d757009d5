// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "smd/common/rng.hpp"

namespace smd::tasks {

/// Fixed token layout shared by every task (vocab >= 64).
namespace tok {
inline constexpr int kBos = 1;
inline constexpr int kStop = 2;
inline constexpr int kQuery = 3;
inline constexpr int kAnswer = 4;
inline constexpr int kSep = 5;
inline constexpr int kCopy = 6;
inline constexpr int kCount = 7;
inline constexpr int kKeyBegin = 8;       // keys: [8, 24)
inline constexpr int kKeyEnd = 24;
inline constexpr int kPayloadBegin = 24;  // values / payload: [24, 64)
inline constexpr int kPayloadEnd = 64;
inline constexpr int kMinVocab = 64;
}  // namespace tok

enum class TaskKind { NeedleRetrieval, Copy, ParityCount };

std::string to_string(TaskKind kind);
TaskKind parse_task_kind(const std::string& name);

struct TaskSpec {
  TaskKind kind = TaskKind::NeedleRetrieval;
  /// Prompt length range in tokens; the item count is derived from it.
  std::size_t min_prompt_len = 16;
  std::size_t max_prompt_len = 22;
  std::size_t answer_length = 2;

  /// Throws ConfigError if the spec cannot produce an instance that fits.
  void validate(std::size_t max_seq_len) const;
};

struct TaskInstance {
  std::vector<int> prompt;
  std::vector<int> answer;
};

/// Draws one instance. Layouts:
///   NeedleRetrieval: BOS qkey SEP (key v_1..v_A)* ANSWER  -> values of qkey
///   Copy:            BOS COPY s_1..s_A SEP filler* ANSWER -> s_1..s_A
///   ParityCount:     BOS COUNT bits* ANSWER               -> parity token
/// The queried key / copied span sits at the start of the prompt, so a policy
/// that loses early context cannot recover the answer.
TaskInstance make_instance(const TaskSpec& spec, Rng& rng);

/// 1.0 on exact match; otherwise longest common prefix divided by
/// max(|answer|, |generated|). A trailing stop token is not part of the
/// emitted answer.
double reward(const TaskInstance& instance, std::span<const int> generated);

}  // namespace smd::tasks
