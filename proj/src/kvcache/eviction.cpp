// SPDX-License-Identifier: Apache-2.0
#include "smd/kvcache/eviction.hpp"

#include <algorithm>
#include <numeric>

#include "smd/common/errors.hpp"

namespace smd::kv {

std::string to_string(EvictionKind kind) {
  switch (kind) {
    case EvictionKind::None: return "none";
    case EvictionKind::HeavyHitter: return "heavy-hitter";
    case EvictionKind::Recent: return "recent";
    case EvictionKind::Random: return "random";
  }
  return "?";
}

EvictionKind parse_eviction_kind(const std::string& name) {
  if (name == "none") return EvictionKind::None;
  if (name == "heavy-hitter" || name == "heavyhitter" || name == "snapkv") return EvictionKind::HeavyHitter;
  if (name == "recent") return EvictionKind::Recent;
  if (name == "random") return EvictionKind::Random;
  throw ConfigError("unknown eviction policy '" + name + "'");
}

std::vector<double> score_heavy_hitters(std::span<const std::vector<double>> recent_rows,
                                        std::size_t n_keys) {
  std::vector<double> score(n_keys, 0.0);
  for (const auto& row : recent_rows) {
    const std::size_t n = std::min(n_keys, row.size());
    for (std::size_t j = 0; j < n; ++j) score[j] += row[j];
  }
  return score;
}

AttentionWindow::AttentionWindow(std::size_t n_layers, std::size_t n_heads, std::size_t window)
    : n_heads_(n_heads), window_(window), rows_(n_layers * n_heads) {}

void AttentionWindow::push(std::size_t layer, std::size_t head, std::vector<double> row) {
  if (window_ == 0) return;
  auto& q = rows_.at(layer * n_heads_ + head);
  q.push_back(std::move(row));
  while (q.size() > window_) q.pop_front();
}

std::vector<double> AttentionWindow::scores(std::size_t layer, std::size_t head,
                                            std::size_t n_keys) const {
  const auto& q = rows_.at(layer * n_heads_ + head);
  std::vector<std::vector<double>> rows(q.begin(), q.end());
  return score_heavy_hitters(rows, n_keys);
}

std::vector<std::vector<double>> AttentionWindow::all_scores(std::size_t n_keys) const {
  std::vector<std::vector<double>> out;
  out.reserve(rows_.size());
  for (std::size_t i = 0; i < rows_.size(); ++i) out.push_back(scores(i / n_heads_, i % n_heads_, n_keys));
  return out;
}

std::size_t EvictionSet::total() const {
  std::size_t n = 0;
  for (const auto& p : positions) n += p.size();
  return n;
}

std::vector<std::size_t> select_retained(const HeadCache& head, const EvictionPolicy& policy,
                                         std::span<const double> scores, std::size_t budget,
                                         std::size_t prompt_length, Rng* rng) {
  if (budget < 1) throw ConfigError("eviction budget must be at least 1");
  std::vector<std::size_t> live;
  for (std::size_t i = 0; i < head.size(); ++i) {
    if (head.retained[i]) live.push_back(i);
  }
  if (policy.kind == EvictionKind::None || live.size() <= budget) return live;

  std::vector<std::size_t> keep;
  switch (policy.kind) {
    case EvictionKind::None:
      break;
    case EvictionKind::Recent:
      keep.assign(live.end() - static_cast<std::ptrdiff_t>(budget), live.end());
      break;
    case EvictionKind::Random: {
      if (rng == nullptr) throw ContractError("random eviction requires an rng");
      std::vector<std::size_t> pool(live.begin(), live.end() - 1);
      // Partial Fisher-Yates: the first budget-1 slots become the sample.
      const std::size_t take = budget - 1;
      for (std::size_t i = 0; i < take; ++i) {
        const std::size_t j = i + static_cast<std::size_t>(uniform_index(*rng, pool.size() - i));
        std::swap(pool[i], pool[j]);
      }
      keep.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(take));
      keep.push_back(live.back());
      break;
    }
    case EvictionKind::HeavyHitter: {
      // Protected: newest generation key and the `window` most recent ones,
      // walked newest-first.
      std::vector<std::size_t> prot;
      std::size_t gen_seen = 0;
      for (auto it = live.rbegin(); it != live.rend(); ++it) {
        if (head.positions[*it] < prompt_length) break;
        if (gen_seen < std::max<std::size_t>(policy.window, 1)) prot.push_back(*it);
        ++gen_seen;
      }
      if (prot.size() >= budget) {
        keep.assign(prot.begin(), prot.begin() + static_cast<std::ptrdiff_t>(budget));
        break;
      }
      keep = prot;
      std::vector<std::size_t> rest;
      for (auto i : live) {
        if (std::find(prot.begin(), prot.end(), i) == prot.end()) rest.push_back(i);
      }
      auto score_of = [&](std::size_t i) {
        const std::size_t pos = head.positions[i];
        return pos < scores.size() ? scores[pos] : 0.0;
      };
      std::stable_sort(rest.begin(), rest.end(), [&](std::size_t a, std::size_t b) {
        const double sa = score_of(a), sb = score_of(b);
        if (sa != sb) return sa > sb;
        return a < b;
      });
      const std::size_t need = budget - keep.size();
      keep.insert(keep.end(), rest.begin(), rest.begin() + static_cast<std::ptrdiff_t>(need));
      break;
    }
  }
  std::sort(keep.begin(), keep.end());
  return keep;
}

EvictionSet enforce_budget(KVCache& cache, const EvictionPolicy& policy,
                           const std::vector<std::vector<double>>& scores, Rng* rng) {
  EvictionSet out;
  out.positions.resize(cache.n_layers() * cache.n_heads());
  if (policy.kind == EvictionKind::None || cache.budget() == KVCache::kUnbounded) return out;
  for (std::size_t l = 0; l < cache.n_layers(); ++l) {
    for (std::size_t h = 0; h < cache.n_heads(); ++h) {
      auto& hc = cache.head(l, h);
      const std::size_t idx = l * cache.n_heads() + h;
      std::span<const double> sc;
      if (idx < scores.size()) sc = scores[idx];
      auto keep = select_retained(hc, policy, sc, cache.budget(), cache.prompt_length(), rng);
      std::size_t k = 0;
      for (std::size_t i = 0; i < hc.size(); ++i) {
        if (!hc.retained[i]) continue;
        if (k < keep.size() && keep[k] == i) {
          ++k;
          continue;
        }
        hc.retained[i] = 0;
        out.positions[idx].push_back(hc.positions[i]);
      }
    }
  }
  return out;
}

}  // namespace smd::kv
