// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

namespace smd::kv {

/// Per-layer, per-head record of when each key left the cache.
///
/// eviction_step(l, h, j) is the first query position that can no longer
/// see key j, or kNever. Visibility for a generation query q (q >=
/// prompt_length) is `j <= q && q < eviction_step`. Prompt queries always get
/// full causal visibility, since prefill runs uncompressed.
class ShadowMask {
 public:
  static constexpr std::int64_t kNever = std::numeric_limits<std::int64_t>::max();

  ShadowMask() = default;
  ShadowMask(std::size_t n_layers, std::size_t n_heads, std::size_t prompt_length,
             std::size_t length = 0);

  std::size_t n_layers() const { return n_layers_; }
  std::size_t n_heads() const { return n_heads_; }
  std::size_t prompt_length() const { return prompt_length_; }
  /// Number of key positions covered.
  std::size_t length() const { return length_; }
  /// Extends coverage to `length` keys; new keys are never evicted.
  void extend(std::size_t length);

  std::int64_t eviction_step(std::size_t layer, std::size_t head, std::size_t key) const;
  bool visible(std::size_t layer, std::size_t head, std::size_t query, std::size_t key) const;

  /// Keys that were evicted at some point (the finitely-timestamped ones).
  struct Eviction {
    std::size_t key;
    std::int64_t step;
    bool operator==(const Eviction&) const = default;
  };
  std::vector<Eviction> evictions(std::size_t layer, std::size_t head) const;

  bool all_visible() const;

  /// Compact text form: "P;L;H;N|l,h:key@step,key@step|..." listing only
  /// finitely-evicted keys.
  std::string serialize() const;
  static ShadowMask deserialize(const std::string& text);

  bool operator==(const ShadowMask&) const = default;

 private:
  friend void record_eviction(ShadowMask&, std::size_t, std::size_t,
                              std::span<const std::size_t>, std::int64_t);
  std::size_t index(std::size_t layer, std::size_t head) const;

  std::size_t n_layers_ = 0;
  std::size_t n_heads_ = 0;
  std::size_t prompt_length_ = 0;
  std::size_t length_ = 0;
  // [layer * n_heads + head][key]
  std::vector<std::vector<std::int64_t>> steps_;
};

/// Marks `evicted` keys of (layer, head) invisible from query position `step`
/// onward. Throws ContractError on double eviction or a step not after the key.
void record_eviction(ShadowMask& mask, std::size_t layer, std::size_t head,
                     std::span<const std::size_t> evicted, std::int64_t step);

}  // namespace smd::kv
