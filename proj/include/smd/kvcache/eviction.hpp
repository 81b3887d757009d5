// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <deque>
#include <span>
#include <string>
#include <vector>

#include "smd/common/rng.hpp"
#include "smd/kvcache/kv_cache.hpp"

namespace smd::kv {

enum class EvictionKind { None, HeavyHitter, Recent, Random };

std::string to_string(EvictionKind kind);
/// Accepts none, heavy-hitter (alias snapkv), recent, random.
EvictionKind parse_eviction_kind(const std::string& name);

struct EvictionPolicy {
  EvictionKind kind = EvictionKind::None;
  /// HeavyHitter: number of recent queries whose attention is scored, and
  /// number of most recent generation keys that are never evicted.
  std::size_t window = 8;
  /// Random: stream seed.
  std::uint64_t seed = 0;
};

/// score[j] = sum of the given attention rows at key position j. Rows may be
/// shorter than n_keys (queries that predate later keys).
std::vector<double> score_heavy_hitters(std::span<const std::vector<double>> recent_rows,
                                        std::size_t n_keys);

/// Sliding window of the last `window` attention rows per layer/head. Rows
/// are indexed by absolute key position, hidden keys carrying weight 0.
class AttentionWindow {
 public:
  AttentionWindow(std::size_t n_layers, std::size_t n_heads, std::size_t window);

  void push(std::size_t layer, std::size_t head, std::vector<double> row);
  /// Heavy-hitter scores for (layer, head) over positions [0, n_keys).
  std::vector<double> scores(std::size_t layer, std::size_t head, std::size_t n_keys) const;
  /// Scores for every layer/head, laid out [layer * n_heads + head].
  std::vector<std::vector<double>> all_scores(std::size_t n_keys) const;

 private:
  std::size_t n_heads_;
  std::size_t window_;
  std::vector<std::deque<std::vector<double>>> rows_;
};

/// Evicted key positions per layer/head, laid out [layer * n_heads + head].
struct EvictionSet {
  std::vector<std::vector<std::size_t>> positions;
  std::size_t total() const;
  bool empty() const { return total() == 0; }
};

/// Flags entries as evicted until every head retains at most cache.budget()
/// entries. Entries are never removed here.
///
/// HeavyHitter keeps the newest generation key, the `window` most recent
/// generation keys, then the highest-scoring remaining keys. Recent keeps the
/// newest entries. Random keeps the newest entry plus a uniform subset drawn
/// from `rng`. Score ties go to the lower position.
///
/// `scores` is only read for HeavyHitter and is indexed by key position.
EvictionSet enforce_budget(KVCache& cache, const EvictionPolicy& policy,
                           const std::vector<std::vector<double>>& scores, Rng* rng = nullptr);

/// Keys kept for one head, as entry indices in ascending order. Exposed for
/// testing the selection rule directly.
std::vector<std::size_t> select_retained(const HeadCache& head, const EvictionPolicy& policy,
                                         std::span<const double> scores, std::size_t budget,
                                         std::size_t prompt_length, Rng* rng);

}  // namespace smd::kv
