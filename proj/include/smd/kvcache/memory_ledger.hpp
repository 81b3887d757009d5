// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "smd/kvcache/kv_cache.hpp"

namespace smd::kv {

/// Append-only allocation log with live/peak tracking. This is an accounting
/// model of an allocator, not an allocator.
class MemoryLedger {
 public:
  enum class Kind { Alloc, Free };
  struct Event {
    Kind kind;
    std::uint64_t bytes;
    std::string label;
    std::uint64_t live_after;
  };

  void alloc(std::uint64_t bytes, std::string label);
  /// Throws ContractError if more than live_bytes would be freed.
  void free(std::uint64_t bytes, std::string label);

  std::uint64_t live_bytes() const { return live_; }
  std::uint64_t peak_bytes() const { return peak_; }
  const std::vector<Event>& events() const { return events_; }

 private:
  std::uint64_t live_ = 0;
  std::uint64_t peak_ = 0;
  std::vector<Event> events_;
};

/// peak_bytes / baseline_bytes. Throws ContractError when baseline is 0.
double ledger_peak_ratio(const MemoryLedger& ledger, std::uint64_t baseline_bytes);

/// Compacts the cache to its retained entries the way a framework slice
/// does: the new buffer is allocated before the old one is released. The
/// caller is expected to have the original cache's footprint live in the
/// ledger already.
KVCache physical_slice(const KVCache& cache, MemoryLedger& ledger);

/// Mask-simulation path: the cache stays as is and only a visibility bitmap
/// (one bit per stored key per head per layer) is allocated.
const KVCache& mask_simulate(const KVCache& cache, MemoryLedger& ledger);

std::uint64_t mask_bitmap_bytes(const KVCache& cache);

}  // namespace smd::kv
