// SPDX-License-Identifier: Apache-2.0
#include "smd/kvcache/kv_cache.hpp"

#include <algorithm>

#include "smd/common/errors.hpp"

namespace smd::kv {

std::size_t HeadCache::retained_count() const {
  return static_cast<std::size_t>(std::count(retained.begin(), retained.end(), std::uint8_t{1}));
}

std::size_t HeadCache::find(std::size_t position) const {
  auto it = std::lower_bound(positions.begin(), positions.end(), position);
  if (it == positions.end() || *it != position) return size();
  return static_cast<std::size_t>(it - positions.begin());
}

KVCache::KVCache(std::size_t n_layers, std::size_t n_heads, std::size_t d_head)
    : n_layers_(n_layers), n_heads_(n_heads), d_head_(d_head), heads_(n_layers * n_heads) {
  for (auto& h : heads_) h.d_head = d_head;
}

HeadCache& KVCache::head(std::size_t layer, std::size_t h) {
  if (layer >= n_layers_ || h >= n_heads_) throw ContractError("kv cache: layer/head out of range");
  return heads_[layer * n_heads_ + h];
}

const HeadCache& KVCache::head(std::size_t layer, std::size_t h) const {
  if (layer >= n_layers_ || h >= n_heads_) throw ContractError("kv cache: layer/head out of range");
  return heads_[layer * n_heads_ + h];
}

void KVCache::append(std::size_t layer, std::span<const double> k_row, std::span<const double> v_row) {
  if (k_row.size() != n_heads_ * d_head_ || v_row.size() != n_heads_ * d_head_) {
    throw ContractError("kv cache: K/V row width does not match heads * d_head");
  }
  for (std::size_t h = 0; h < n_heads_; ++h) {
    auto& hc = head(layer, h);
    if (!hc.positions.empty() && hc.positions.back() >= next_position_) {
      throw ContractError("kv cache: positions must be strictly increasing");
    }
    hc.keys.insert(hc.keys.end(), k_row.begin() + h * d_head_, k_row.begin() + (h + 1) * d_head_);
    hc.values.insert(hc.values.end(), v_row.begin() + h * d_head_, v_row.begin() + (h + 1) * d_head_);
    hc.positions.push_back(next_position_);
    hc.retained.push_back(1);
  }
}

void KVCache::set_budget(std::size_t budget) {
  if (budget < 1) throw ConfigError("kv cache: budget must be at least 1");
  budget_ = budget;
}

void KVCache::commit_position() { ++next_position_; }

std::uint64_t KVCache::stored_entries() const {
  std::uint64_t n = 0;
  for (const auto& h : heads_) n += h.size();
  return n;
}

std::uint64_t KVCache::retained_entries() const {
  std::uint64_t n = 0;
  for (const auto& h : heads_) n += h.retained_count();
  return n;
}

std::uint64_t KVCache::footprint_bytes() const { return stored_entries() * entry_bytes(d_head_); }

std::uint64_t KVCache::retained_bytes() const { return retained_entries() * entry_bytes(d_head_); }

}  // namespace smd::kv
