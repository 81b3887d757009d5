// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace smd::kv {

/// Keys/values of one attention head, in insertion (= position) order.
/// Evicted entries stay in place with retained = 0 (mask-simulation mode)
/// until a physical_slice compacts them away.
struct HeadCache {
  std::size_t d_head = 0;
  std::vector<double> keys;    // [n, d_head]
  std::vector<double> values;  // [n, d_head]
  std::vector<std::size_t> positions;
  std::vector<std::uint8_t> retained;

  std::size_t size() const { return positions.size(); }
  std::size_t retained_count() const;
  std::span<const double> key(std::size_t i) const { return {keys.data() + i * d_head, d_head}; }
  std::span<const double> value(std::size_t i) const { return {values.data() + i * d_head, d_head}; }
  /// Entry index holding `position`, or size() if absent.
  std::size_t find(std::size_t position) const;
};

class KVCache {
 public:
  KVCache(std::size_t n_layers, std::size_t n_heads, std::size_t d_head);

  std::size_t n_layers() const { return n_layers_; }
  std::size_t n_heads() const { return n_heads_; }
  std::size_t d_head() const { return d_head_; }

  HeadCache& head(std::size_t layer, std::size_t h);
  const HeadCache& head(std::size_t layer, std::size_t h) const;

  /// Position the next appended token will occupy.
  std::size_t next_position() const { return next_position_; }
  /// Appends one K/V row to every head of `layer` at next_position().
  void append(std::size_t layer, std::span<const double> k_row, std::span<const double> v_row);
  /// Advances next_position() once every layer has been appended.
  void commit_position();

  static constexpr std::size_t kUnbounded = static_cast<std::size_t>(-1);
  /// Max retained entries per head enforced by enforce_budget.
  std::size_t budget() const { return budget_; }
  /// Throws ConfigError for budget < 1.
  void set_budget(std::size_t budget);

  std::size_t prompt_length() const { return prompt_length_; }
  void set_prompt_length(std::size_t n) { prompt_length_ = n; }

  /// Bytes physically held: 2 * d_head * 8 per stored entry per head per layer.
  std::uint64_t footprint_bytes() const;
  /// Bytes a compacted copy of the retained entries would need.
  std::uint64_t retained_bytes() const;
  std::uint64_t stored_entries() const;
  std::uint64_t retained_entries() const;

 private:
  std::size_t n_layers_;
  std::size_t n_heads_;
  std::size_t d_head_;
  std::size_t next_position_ = 0;
  std::size_t budget_ = kUnbounded;
  std::size_t prompt_length_ = 0;
  std::vector<HeadCache> heads_;  // [layer * n_heads + head]
};

/// Bytes per cached entry (one key + one value of d_head float64s).
inline std::uint64_t entry_bytes(std::size_t d_head) { return 2ULL * d_head * 8ULL; }

}  // namespace smd::kv
