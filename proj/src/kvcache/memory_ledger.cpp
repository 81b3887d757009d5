// SPDX-License-Identifier: Apache-2.0
#include "smd/kvcache/memory_ledger.hpp"

#include <algorithm>

#include "smd/common/errors.hpp"

namespace smd::kv {

void MemoryLedger::alloc(std::uint64_t bytes, std::string label) {
  live_ += bytes;
  peak_ = std::max(peak_, live_);
  events_.push_back({Kind::Alloc, bytes, std::move(label), live_});
}

void MemoryLedger::free(std::uint64_t bytes, std::string label) {
  if (bytes > live_) {
    throw ContractError("memory ledger: freeing " + std::to_string(bytes) + " bytes with only " +
                        std::to_string(live_) + " live");
  }
  live_ -= bytes;
  events_.push_back({Kind::Free, bytes, std::move(label), live_});
}

double ledger_peak_ratio(const MemoryLedger& ledger, std::uint64_t baseline_bytes) {
  if (baseline_bytes == 0) throw ContractError("ledger_peak_ratio: baseline must be positive");
  // Before any event the baseline itself is the peak.
  const std::uint64_t peak = std::max(ledger.peak_bytes(), ledger.events().empty() ? baseline_bytes : 0);
  return static_cast<double>(peak) / static_cast<double>(baseline_bytes);
}

KVCache physical_slice(const KVCache& cache, MemoryLedger& ledger) {
  KVCache out(cache.n_layers(), cache.n_heads(), cache.d_head());
  out.set_prompt_length(cache.prompt_length());
  if (cache.budget() != KVCache::kUnbounded) out.set_budget(cache.budget());
  ledger.alloc(cache.retained_bytes(), "kv_slice_new");
  for (std::size_t l = 0; l < cache.n_layers(); ++l) {
    for (std::size_t h = 0; h < cache.n_heads(); ++h) {
      const auto& src = cache.head(l, h);
      auto& dst = out.head(l, h);
      for (std::size_t i = 0; i < src.size(); ++i) {
        if (!src.retained[i]) continue;
        auto k = src.key(i);
        auto v = src.value(i);
        dst.keys.insert(dst.keys.end(), k.begin(), k.end());
        dst.values.insert(dst.values.end(), v.begin(), v.end());
        dst.positions.push_back(src.positions[i]);
        dst.retained.push_back(1);
      }
    }
  }
  for (std::size_t p = 0; p < cache.next_position(); ++p) out.commit_position();
  ledger.free(cache.footprint_bytes(), "kv_slice_old");
  return out;
}

std::uint64_t mask_bitmap_bytes(const KVCache& cache) {
  std::uint64_t bits = cache.stored_entries();
  return (bits + 7) / 8;
}

const KVCache& mask_simulate(const KVCache& cache, MemoryLedger& ledger) {
  ledger.alloc(mask_bitmap_bytes(cache), "shadow_mask_bitmap");
  return cache;
}

}  // namespace smd::kv
