#include "kfstream/kvcache.hpp"

#include <algorithm>
#include <sstream>

namespace kfs {

const char* lineage_name(Lineage l) {
  switch (l) {
    case Lineage::conditioning: return "conditioning";
    case Lineage::generated: return "generated";
    case Lineage::keyframe: return "keyframe";
    case Lineage::ground_truth: return "ground_truth";
  }
  return "unknown";
}

DualRegionKVCache::DualRegionKVCache(std::size_t capacity_past, std::size_t capacity_future)
    : cap_past_(capacity_past), cap_future_(capacity_future) {
  if (capacity_past == 0 || capacity_future == 0) throw CacheError("cache capacities must be at least 1");
}

std::vector<std::size_t> DualRegionKVCache::past_positions() const {
  std::vector<std::size_t> out;
  for (const auto& e : past_) out.push_back(e.position);
  return out;
}

std::vector<std::size_t> DualRegionKVCache::future_positions() const {
  std::vector<std::size_t> out;
  for (const auto& e : future_) out.push_back(e.position);
  return out;
}

std::optional<std::size_t> DualRegionKVCache::append_past(CacheEntry entry) {
  if (!past_.empty() && entry.position <= past_.back().position) {
    throw CacheError("append_past: position " + std::to_string(entry.position) + " not after past tail " +
                     std::to_string(past_.back().position));
  }
  if (!future_.empty() && entry.position >= future_.front().position) {
    throw CacheError("append_past: position " + std::to_string(entry.position) + " collides with future entry " +
                     std::to_string(future_.front().position));
  }
  past_.push_back(std::move(entry));
  if (past_.size() > cap_past_) {
    auto evicted = past_.front().position;
    past_.pop_front();
    return evicted;
  }
  return std::nullopt;
}

std::optional<std::size_t> DualRegionKVCache::set_future(CacheEntry entry) {
  if (!past_.empty() && entry.position <= past_.back().position) {
    throw CacheError("set_future: position " + std::to_string(entry.position) + " not after past tail " +
                     std::to_string(past_.back().position));
  }
  if (!future_.empty() && entry.position <= future_.back().position) {
    throw CacheError("set_future: position " + std::to_string(entry.position) + " not after future tail " +
                     std::to_string(future_.back().position));
  }
  future_.push_back(std::move(entry));
  if (future_.size() > cap_future_) {
    auto evicted = future_.front().position;
    future_.pop_front();
    return evicted;
  }
  return std::nullopt;
}

std::optional<std::size_t> DualRegionKVCache::consume_future(std::size_t position) {
  if (future_.empty() || future_.front().position != position) {
    throw CacheError("consume_future: no future entry at the head with position " + std::to_string(position));
  }
  auto entry = std::move(future_.front());
  future_.pop_front();
  past_.push_back(std::move(entry));
  if (past_.size() > cap_past_) {
    auto evicted = past_.front().position;
    past_.pop_front();
    return evicted;
  }
  return std::nullopt;
}

void DualRegionKVCache::discard_future_from(std::size_t position) {
  while (!future_.empty() && future_.back().position >= position) future_.pop_back();
}

Gathered DualRegionKVCache::gather(std::size_t layer, std::size_t head, std::size_t heads) const {
  Gathered g;
  if (empty()) {
    g.keys = Tensor::zeros({0, 0});
    g.values = Tensor::zeros({0, 0});
    return g;
  }
  const auto& first = past_.empty() ? future_.front() : past_.front();
  const auto P = first.keys.at(layer).rows();
  const auto W = first.keys.at(layer).cols();
  if (heads == 0 || W % heads != 0 || head >= heads) throw CacheError("gather: invalid head selection");
  const auto dh = W / heads;
  const auto n = size();
  g.keys = Tensor::zeros({n * P, dh});
  g.values = Tensor::zeros({n * P, dh});
  std::size_t row = 0;
  auto take = [&](const CacheEntry& e) {
    g.positions.push_back(e.position);
    for (std::size_t p = 0; p < P; ++p, ++row) {
      for (std::size_t j = 0; j < dh; ++j) {
        g.keys.at(row, j) = e.keys[layer].at(p, head * dh + j);
        g.values.at(row, j) = e.values[layer].at(p, head * dh + j);
      }
    }
  };
  for (const auto& e : past_) take(e);
  for (const auto& e : future_) take(e);
  return g;
}

KVContext DualRegionKVCache::context(bool include_future) const {
  KVContext ctx;
  std::vector<const CacheEntry*> entries;
  for (const auto& e : past_) entries.push_back(&e);
  if (include_future)
    for (const auto& e : future_) entries.push_back(&e);
  if (entries.empty()) return ctx;
  const auto layers = entries.front()->keys.size();
  const auto P = entries.front()->keys.front().rows();
  const auto W = entries.front()->keys.front().cols();
  for (std::size_t l = 0; l < layers; ++l) {
    std::vector<double> k, v;
    k.reserve(entries.size() * P * W);
    v.reserve(entries.size() * P * W);
    for (const auto* e : entries) {
      k.insert(k.end(), e->keys[l].values().begin(), e->keys[l].values().end());
      v.insert(v.end(), e->values[l].values().begin(), e->values[l].values().end());
    }
    ctx.keys.emplace_back(Shape{entries.size() * P, W}, std::move(k));
    ctx.values.emplace_back(Shape{entries.size() * P, W}, std::move(v));
  }
  for (const auto* e : entries) ctx.positions.push_back(e->position);
  return ctx;
}

void DualRegionKVCache::check_invariants() const {
  if (past_.size() > cap_past_) throw CacheError("past region over capacity");
  if (future_.size() > cap_future_) throw CacheError("future region over capacity");
  for (std::size_t i = 1; i < past_.size(); ++i)
    if (past_[i].position <= past_[i - 1].position) throw CacheError("past positions not strictly increasing");
  for (std::size_t i = 1; i < future_.size(); ++i)
    if (future_[i].position <= future_[i - 1].position) throw CacheError("future positions not strictly increasing");
  if (!past_.empty() && !future_.empty() && future_.front().position <= past_.back().position) {
    throw CacheError("a future position is not after every past position");
  }
}

std::string DualRegionKVCache::dump() const {
  std::ostringstream out;
  for (const auto& e : past_) out << "past " << e.position << '\n';
  for (const auto& e : future_) out << "future " << e.position << '\n';
  return out.str();
}

}  // namespace kfs
