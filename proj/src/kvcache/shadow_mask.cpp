// SPDX-License-Identifier: Apache-2.0
#include "smd/kvcache/shadow_mask.hpp"

#include <sstream>

#include "smd/common/errors.hpp"

namespace smd::kv {

ShadowMask::ShadowMask(std::size_t n_layers, std::size_t n_heads, std::size_t prompt_length,
                       std::size_t length)
    : n_layers_(n_layers),
      n_heads_(n_heads),
      prompt_length_(prompt_length),
      steps_(n_layers * n_heads) {
  extend(length);
}

void ShadowMask::extend(std::size_t length) {
  if (length <= length_) return;
  for (auto& s : steps_) s.resize(length, kNever);
  length_ = length;
}

std::size_t ShadowMask::index(std::size_t layer, std::size_t head) const {
  if (layer >= n_layers_ || head >= n_heads_) {
    throw ContractError("shadow mask: layer/head out of range");
  }
  return layer * n_heads_ + head;
}

std::int64_t ShadowMask::eviction_step(std::size_t layer, std::size_t head, std::size_t key) const {
  const auto& s = steps_[index(layer, head)];
  return key < s.size() ? s[key] : kNever;
}

bool ShadowMask::visible(std::size_t layer, std::size_t head, std::size_t query,
                         std::size_t key) const {
  if (key > query) return false;
  if (query < prompt_length_) return true;
  return static_cast<std::int64_t>(query) < eviction_step(layer, head, key);
}

std::vector<ShadowMask::Eviction> ShadowMask::evictions(std::size_t layer, std::size_t head) const {
  std::vector<Eviction> out;
  const auto& s = steps_[index(layer, head)];
  for (std::size_t j = 0; j < s.size(); ++j) {
    if (s[j] != kNever) out.push_back({j, s[j]});
  }
  return out;
}

bool ShadowMask::all_visible() const {
  for (const auto& s : steps_)
    for (auto v : s)
      if (v != kNever) return false;
  return true;
}

std::string ShadowMask::serialize() const {
  std::ostringstream os;
  os << prompt_length_ << ';' << n_layers_ << ';' << n_heads_ << ';' << length_;
  for (std::size_t l = 0; l < n_layers_; ++l) {
    for (std::size_t h = 0; h < n_heads_; ++h) {
      auto ev = evictions(l, h);
      if (ev.empty()) continue;
      os << '|' << l << ',' << h << ':';
      for (std::size_t i = 0; i < ev.size(); ++i) {
        if (i) os << ',';
        os << ev[i].key << '@' << ev[i].step;
      }
    }
  }
  return os.str();
}

ShadowMask ShadowMask::deserialize(const std::string& text) {
  std::istringstream is(text);
  std::size_t p = 0, nl = 0, nh = 0, len = 0;
  char c1 = 0, c2 = 0, c3 = 0;
  if (!(is >> p >> c1 >> nl >> c2 >> nh >> c3 >> len) || c1 != ';' || c2 != ';' || c3 != ';') {
    throw InputError("shadow mask: malformed header in '" + text + "'");
  }
  ShadowMask mask(nl, nh, p, len);
  char bar = 0;
  while (is >> bar) {
    if (bar != '|') throw InputError("shadow mask: expected '|'");
    std::size_t l = 0, h = 0;
    char comma = 0, colon = 0;
    if (!(is >> l >> comma >> h >> colon) || comma != ',' || colon != ':') {
      throw InputError("shadow mask: malformed head record");
    }
    auto& s = mask.steps_.at(mask.index(l, h));
    while (true) {
      std::size_t key = 0;
      std::int64_t step = 0;
      char at = 0;
      if (!(is >> key >> at >> step) || at != '@' || key >= s.size()) {
        throw InputError("shadow mask: malformed eviction entry");
      }
      s[key] = step;
      if (is.peek() != ',') break;
      is.get();
    }
  }
  return mask;
}

void record_eviction(ShadowMask& mask, std::size_t layer, std::size_t head,
                     std::span<const std::size_t> evicted, std::int64_t step) {
  auto& s = mask.steps_[mask.index(layer, head)];
  for (auto key : evicted) {
    if (key >= s.size()) mask.extend(key + 1);
    auto& slot = mask.steps_[mask.index(layer, head)][key];
    if (slot != ShadowMask::kNever) {
      throw ContractError("record_eviction: key " + std::to_string(key) + " already evicted");
    }
    if (step <= static_cast<std::int64_t>(key)) {
      throw ContractError("record_eviction: eviction step must follow the key's position");
    }
    slot = step;
  }
}

}  // namespace smd::kv
